mod common;

use std::path::Path;

use common::rng;
use factr_core::data::{synth_retail_generate, PreparedData, SplitSpec, WindowIter, CALENDAR_CARDINALITIES};
use factr_core::eval::{
    audit_params, evaluate, evaluate_windows, export_interpretability, forecast_dump, per_channel_errors, Space,
};
use factr_core::model::{Batch, Checkpoint, Factr, ModelConfig, Variant};
use factr_core::Error;

fn prepared(days: usize, seed: u64) -> PreparedData {
    PreparedData::new(&synth_retail_generate(days, seed).unwrap(), &SplitSpec::standard_ratio()).unwrap()
}

fn model(channels: usize, variant: Variant, seed: u64) -> Factr<f64> {
    let cfg = ModelConfig {
        lookback: 28,
        patch_len: 7,
        stride: 7,
        d_model: 8,
        fm_rank: 4,
        spatial_rank: 4,
        channels,
        horizon: 7,
        dyn_cardinalities: CALENDAR_CARDINALITIES.to_vec(),
        variant,
        ..ModelConfig::default()
    };
    Factr::new(cfg, &mut rng(seed)).unwrap()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<(String, Vec<f64>)>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines
        .map(|l| {
            let mut cells = l.split(',');
            let label = cells.next().unwrap().to_string();
            (label, cells.map(|c| c.parse().unwrap()).collect())
        })
        .collect();
    (header, rows)
}

#[test]
fn report_matches_a_window_by_window_oracle() {
    let data = prepared(730, 1);
    let m = model(8, Variant::Full, 2);
    let report = evaluate(&m, &data, 32, Space::Standardized).unwrap();
    let windows = data.test_windows(28, 7).unwrap();
    assert_eq!(report.windows, windows.len());

    let (c, t) = (8, 7);
    let mut sq = vec![0.0; c];
    let mut abs = vec![0.0; c];
    for batch in WindowIter::<f64>::new(&data.dataset, &data.covariates, &windows, 1, None).unwrap() {
        let b = batch.unwrap();
        let (pred, _) = m.predict(Batch { inputs: &b.inputs, covariates: &b.dyn_covariates }).unwrap();
        for (i, (p, y)) in pred.data().iter().zip(b.targets.data()).enumerate() {
            sq[i / t] += (p - y) * (p - y);
            abs[i / t] += (p - y).abs();
        }
    }
    let per = (windows.len() * t) as f64;
    let mse = sq.iter().sum::<f64>() / (per * c as f64);
    assert!((report.mse - mse).abs() < 1e-9 * mse);
    for ch in 0..c {
        assert!((report.channel_mse[ch] - sq[ch] / per).abs() < 1e-9 * report.channel_mse[ch].max(1.0));
        assert!((report.channel_mae[ch] - abs[ch] / per).abs() < 1e-9 * report.channel_mae[ch].max(1.0));
    }
    // Every channel covers the same windows, so the plain mean is the
    // window-weighted mean.
    let avg = report.channel_mse.iter().sum::<f64>() / c as f64;
    assert!((avg - report.mse).abs() < 1e-9);
    let avg_h = report.horizon_mae.iter().sum::<f64>() / t as f64;
    assert!((avg_h - report.mae).abs() < 1e-9);

    let ranked = per_channel_errors(&report);
    assert!(ranked.windows(2).all(|w| w[0].mse >= w[1].mse));
    assert_eq!(ranked[0].name, data.channel_names()[ranked[0].channel]);
}

#[test]
fn evaluation_ignores_batching() {
    let data = prepared(730, 3);
    let m = model(8, Variant::PlusFm, 4);
    let windows = data.test_windows(28, 7).unwrap();
    let a = evaluate_windows(&m, &data, &windows, 1, Space::Standardized).unwrap();
    let b = evaluate_windows(&m, &data, &windows, 100, Space::Standardized).unwrap();
    assert!((a.mse - b.mse).abs() < 1e-12 * a.mse);
    let again = evaluate_windows(&m, &data, &windows, 100, Space::Standardized).unwrap();
    assert_eq!(b, again);
}

#[test]
fn raw_space_rescales_by_channel_spread() {
    let data = prepared(730, 5);
    let m = model(8, Variant::Full, 6);
    let z = evaluate(&m, &data, 64, Space::Standardized).unwrap();
    let raw = evaluate(&m, &data, 64, Space::Raw).unwrap();
    for ch in 0..8 {
        let s = data.norm.std[ch];
        assert!((raw.channel_mse[ch] - z.channel_mse[ch] * s * s).abs() < 1e-9 * raw.channel_mse[ch].max(1.0));
        assert!((raw.channel_mae[ch] - z.channel_mae[ch] * s).abs() < 1e-9 * raw.channel_mae[ch].max(1.0));
    }
}

#[test]
fn exported_attention_rows_are_distributions() {
    let data = prepared(730, 7);
    let m = model(8, Variant::Full, 8);
    let dir = tempfile::tempdir().unwrap();
    let export = export_interpretability(&m, &data, 3, dir.path()).unwrap();
    assert_eq!(export.files.len(), 8 * 4);
    assert_eq!(export.start, data.test_windows(28, 7).unwrap().start(3));
    for name in data.channel_names() {
        let (header, rows) = read_csv(&dir.path().join(format!("temporal_w3_{name}.csv")));
        assert_eq!(header.len(), 5);
        for (_, r) in &rows {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let (header, rows) = read_csv(&dir.path().join(format!("fm_w3_{name}.csv")));
        assert_eq!(header[0], "source");
        assert_eq!(rows.len(), 8);
        for p in 0..4 {
            let col: f64 = rows.iter().map(|(_, r)| r[p]).sum();
            assert!((col - 1.0).abs() < 1e-6, "patch {p} sums to {col}");
        }
        let svg = std::fs::read_to_string(dir.path().join(format!("fm_w3_{name}.svg"))).unwrap();
        assert_eq!(svg.matches("<rect x=").count(), 8 * 4);
    }
}

#[test]
fn single_channel_mixing_weights_are_one() {
    let raw = synth_retail_generate(730, 9).unwrap();
    let one = factr_core::data::SeriesDataset::new(
        factr_autodiff::Tensor::new(&[raw.rows(), 1], raw.columns()[0].clone()).unwrap(),
        raw.timestamps.clone(),
        vec!["only".into()],
        raw.frequency,
    )
    .unwrap();
    let data = PreparedData::new(&one, &SplitSpec::standard_ratio()).unwrap();
    let m = model(1, Variant::Full, 10);
    let dir = tempfile::tempdir().unwrap();
    let export = export_interpretability(&m, &data, 0, dir.path()).unwrap();
    assert!(export.spatial.unwrap().data().iter().all(|&v| v == 1.0));

    let temporal_only = model(1, Variant::TemporalOnly, 10);
    let export = export_interpretability(&temporal_only, &data, 0, dir.path()).unwrap();
    assert!(export.spatial.is_none());
    assert_eq!(export.files.len(), 2);
}

#[test]
fn forecast_dumps_are_byte_stable() {
    let data = prepared(730, 11);
    let m = model(8, Variant::Full, 12);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let fa = forecast_dump(&m, &data, "retail", &[0, 5], a.path()).unwrap();
    let fb = forecast_dump(&m, &data, "retail", &[0, 5], b.path()).unwrap();
    assert_eq!(fa.len(), 2 * 8 * 2);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    let (header, rows) = read_csv(&a.path().join("retail_w5_promotion.csv"));
    assert_eq!(header, ["t", "actual", "forecast"]);
    assert_eq!(rows.len(), 7);
    let start = data.test_windows(28, 7).unwrap().start(5);
    assert!((rows[0].1[0] - data.dataset.value(start + 28, 5)).abs() < 1e-8);

    let last = data.test_windows(28, 7).unwrap().len() - 1;
    let err = forecast_dump(&m, &data, "retail", &[last + 1], a.path()).unwrap_err();
    assert!(err.to_string().contains(&format!("valid ids are 0..={last}")), "{err}");
}

#[test]
fn audit_counts_every_tensor() {
    let m = model(8, Variant::Full, 13);
    let ckpt = Checkpoint::from_model(&m);
    let audit = audit_params(&ckpt).unwrap();
    assert_eq!(audit.enumerated, m.params().enumerated_count());
    assert_eq!(audit.tensors.len(), m.params().len());
    assert!(audit.to_text().contains(&format!("total {}", audit.enumerated)));

    let mut broken = ckpt.clone();
    broken.tensors.pop();
    assert!(audit_params(&broken).is_err());
    let mut wrong = ckpt;
    wrong.config.channels = 3;
    assert!(matches!(audit_params(&wrong), Err(Error::Checkpoint(_) | Error::Integrity { .. } | Error::Config(_))));
}
