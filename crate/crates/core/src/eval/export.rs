use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use factr_autodiff::{Real, Tensor};
use serde::Serialize;

use super::svg::{heatmap, line_chart, ColorScale};
use crate::data::{PreparedData, Windows};
use crate::error::{Error, Result};
use crate::model::{Batch, Factr};
use crate::train::{batch_covariates, check_data, window_batch};

/// Attention maps of one test window, with the files written for it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterpretabilityExport {
    /// Index into the test windows.
    pub window: usize,
    /// Dataset row of the first input step.
    pub start: usize,
    pub channel_names: Vec<String>,
    pub patches: usize,
    /// `[C, N, N]`
    #[serde(skip)]
    pub temporal: Tensor<f64>,
    /// `[C, C, N]` as (target, source, patch); `None` without channel mixing.
    #[serde(skip)]
    pub spatial: Option<Tensor<f64>>,
    pub files: Vec<PathBuf>,
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn write(path: PathBuf, contents: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    files.push(path);
    Ok(())
}

fn matrix_csv(header: &[String], rows: &[(String, &[f64])]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", header.join(","));
    for (label, values) in rows {
        let cells: Vec<String> = values.iter().map(|v| format!("{v:.9}")).collect();
        let _ = writeln!(out, "{label},{}", cells.join(","));
    }
    out
}

fn checked_start(windows: &Windows, id: usize) -> Result<usize> {
    if id >= windows.len() {
        return Err(Error::Config(format!(
            "window id {id} out of range; valid ids are 0..={}",
            windows.len() - 1
        )));
    }
    Ok(windows.start(id))
}

/// Runs one test window and writes, per channel, the temporal attention
/// matrix and the channel influence scores as CSV plus SVG heatmaps.
pub fn export_interpretability<F: Real>(
    model: &Factr<F>,
    data: &PreparedData,
    window: usize,
    out_dir: &Path,
) -> Result<InterpretabilityExport> {
    check_data(model, data)?;
    let cfg = model.config();
    let windows = data.test_windows(cfg.lookback, cfg.horizon)?;
    let start = checked_start(&windows, window)?;
    let batch = window_batch::<F>(data, &[start], cfg.lookback, cfg.horizon)?;
    let (_, dump) = model.predict(Batch {
        inputs: &batch.inputs,
        covariates: batch_covariates(model, &batch),
    })?;
    let (c, n) = (cfg.channels, cfg.patches());
    let names = data.channel_names().to_vec();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    let temporal = dump.temporal.reshape(&[c, n, n])?;
    let spatial = dump.spatial.map(|s| s.reshape(&[c, c, n])).transpose()?;
    let patch_header: Vec<String> = (0..n).map(|p| format!("p{p}")).collect();
    for (ci, name) in names.iter().enumerate() {
        let stem = format!("w{window}_{}", file_stem(name));
        let t = &temporal.data()[ci * n * n..(ci + 1) * n * n];
        let rows: Vec<(String, &[f64])> = (0..n).map(|q| (format!("p{q}"), &t[q * n..(q + 1) * n])).collect();
        let header: Vec<String> = std::iter::once("query".to_string()).chain(patch_header.iter().cloned()).collect();
        write(out_dir.join(format!("temporal_{stem}.csv")), &matrix_csv(&header, &rows), &mut files)?;
        let title = format!("temporal attention, {name}, window {window}");
        let svg = heatmap(&title, t, n, n, "key patch", "query patch", ColorScale::Global);
        write(out_dir.join(format!("temporal_{stem}.svg")), &svg, &mut files)?;

        if let Some(s) = &spatial {
            let block = &s.data()[ci * c * n..(ci + 1) * c * n];
            let rows: Vec<(String, &[f64])> = names
                .iter()
                .enumerate()
                .map(|(src, sname)| (sname.clone(), &block[src * n..(src + 1) * n]))
                .collect();
            let header: Vec<String> = std::iter::once("source".to_string()).chain(patch_header.iter().cloned()).collect();
            write(out_dir.join(format!("fm_{stem}.csv")), &matrix_csv(&header, &rows), &mut files)?;
            let title = format!("channel influence on {name}, window {window}");
            let svg = heatmap(&title, block, c, n, "patch", "source channel", ColorScale::PerColumn);
            write(out_dir.join(format!("fm_{stem}.svg")), &svg, &mut files)?;
        }
    }
    Ok(InterpretabilityExport {
        window,
        start,
        channel_names: names,
        patches: n,
        temporal,
        spatial,
        files,
    })
}

/// Writes `t, actual, forecast` CSVs and line charts for every channel of
/// each requested test window. Files are named `{dataset}_w{id}_{channel}`.
pub fn forecast_dump<F: Real>(
    model: &Factr<F>,
    data: &PreparedData,
    dataset: &str,
    window_ids: &[usize],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    check_data(model, data)?;
    let cfg = model.config();
    let windows = data.test_windows(cfg.lookback, cfg.horizon)?;
    let starts = window_ids
        .iter()
        .map(|&id| checked_start(&windows, id))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    let t = cfg.horizon;
    for (&id, &start) in window_ids.iter().zip(&starts) {
        let batch = window_batch::<F>(data, &[start], cfg.lookback, t)?;
        let (pred, _) = model.predict(Batch {
            inputs: &batch.inputs,
            covariates: batch_covariates(model, &batch),
        })?;
        let (pred, actual) = (pred.to_f64_vec(), batch.targets.to_f64_vec());
        for (ci, name) in data.channel_names().iter().enumerate() {
            let a = &actual[ci * t..(ci + 1) * t];
            let f = &pred[ci * t..(ci + 1) * t];
            let stem = format!("{}_w{id}_{}", file_stem(dataset), file_stem(name));
            let mut csv = String::from("t,actual,forecast\n");
            for k in 0..t {
                let _ = writeln!(csv, "{k},{:.9},{:.9}", a[k], f[k]);
            }
            write(out_dir.join(format!("{stem}.csv")), &csv, &mut files)?;
            let title = format!("{dataset} window {id} {name}");
            let svg = line_chart(&title, &[("actual", "black", a), ("forecast", "#d62728", f)]);
            write(out_dir.join(format!("{stem}.svg")), &svg, &mut files)?;
        }
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems_are_filesystem_safe() {
        assert_eq!(file_stem("OT"), "OT");
        assert_eq!(file_stem("a/b c"), "a_b_c");
    }

    #[test]
    fn csv_layout() {
        let v = [0.5, 0.25];
        let s = matrix_csv(&["q".into(), "p0".into(), "p1".into()], &[("p0".into(), &v)]);
        assert_eq!(s, "q,p0,p1\np0,0.500000000,0.250000000\n");
    }
}
