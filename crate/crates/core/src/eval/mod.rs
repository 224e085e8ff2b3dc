//! Test-set metrics, error ranking, attention exports, forecast plots,
//! parameter audits and cost-scaling sweeps.

mod audit;
mod bench;
mod export;
mod report;
mod svg;

pub use audit::{audit_params, ParamAudit, TensorCount};
pub use bench::{loglog_slope, scaling_benchmark, BenchShape, ScalingComponent, ScalingTable};
pub use export::{export_interpretability, forecast_dump, InterpretabilityExport};
pub use report::{evaluate, evaluate_windows, per_channel_errors, ChannelError, ErrorAccumulator, ForecastReport, Space};
pub use svg::{heatmap, line_chart, ColorScale};
