mod common;

use common::{random_tensor, rng};
use factr_autodiff::Tensor;
use factr_core::data::{
    chronological_split, gather_batch, load_csv_dataset, mask_patches, pulse_onsets, synth_retail_generate,
    Frequency, NormStats, PreparedData, RetailParams, SeriesDataset, SplitSpec, Windows, RETAIL_CHANNELS,
};
use proptest::prelude::*;

fn series(rows: usize, channels: usize, seed: u64) -> SeriesDataset {
    let values = random_tensor::<f64>(&[rows, channels], &mut rng(seed)).map(|v| 10.0 * v + 3.0);
    SeriesDataset::new(
        values,
        None,
        (0..channels).map(|c| format!("c{c}")).collect(),
        Frequency::HOURLY,
    )
    .unwrap()
}

fn lag1_autocorrelation(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var: f64 = v.iter().map(|x| (x - m) * (x - m)).sum();
    let cov: f64 = v.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
    cov / var
}

#[test]
fn ett_month_borders() {
    let s = chronological_split(17_420, Frequency::HOURLY, &SplitSpec::ett()).unwrap();
    assert_eq!((s.train.end, s.val.end, s.test.end), (8640, 11_520, 14_400));
}

#[test]
fn synthetic_channels_follow_their_recipes() {
    let days = 1095;
    let ds = synth_retail_generate(days, 42).unwrap();
    assert_eq!(ds.channel_names, RETAIL_CHANNELS);
    let cols = ds.columns();
    assert_eq!(cols[0], cols[1]);
    assert!(lag1_autocorrelation(&cols[4]).abs() < 0.1);
    let amp = RetailParams::default().pulse_amplitude;
    assert!(cols[5].iter().all(|&v| v == 0.0 || v == amp));

    // Promotion days are exactly the pulses starting at each onset.
    let params = RetailParams::default();
    let onsets = pulse_onsets(days, &params, 42);
    for (t, &v) in cols[5].iter().enumerate() {
        let inside = onsets.iter().any(|&o| (o..o + params.pulse_width).contains(&t));
        assert_eq!(v > 0.0, inside, "day {t}");
    }
    // Cannibalized demand is suppressed exactly on promotion days.
    for t in 0..days {
        let base = 2.0 + cols[0][t];
        let expect = if cols[5][t] > 0.0 { base * params.suppression } else { base };
        assert!((cols[7][t] - expect).abs() < 1e-12);
    }
    // The response rises only after the lag.
    let first = onsets[0];
    assert!(cols[6][..first + params.response_lag].iter().all(|&v| v == params.response_base));
    assert!(cols[6][first + params.response_lag] > params.response_base);
}

#[test]
fn synthetic_csv_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    synth_retail_generate(730, 7).unwrap().write_csv(&a).unwrap();
    synth_retail_generate(730, 7).unwrap().write_csv(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let back = load_csv_dataset(&a, None).unwrap();
    assert_eq!(back.frequency, Frequency::DAILY);
    assert_eq!(back.rows(), 730);
    let other = synth_retail_generate(730, 8).unwrap();
    assert_ne!(other.columns()[4], back.columns()[4]);
}

#[test]
fn prepared_data_is_standardized_on_train_rows() {
    let raw = synth_retail_generate(800, 3).unwrap();
    let data = PreparedData::new(&raw, &SplitSpec::standard_ratio()).unwrap();
    let train = data.split.train.clone();
    for (c, col) in data.dataset.columns().iter().enumerate() {
        let rows = &col[train.clone()];
        let n = rows.len() as f64;
        let m = rows.iter().sum::<f64>() / n;
        let sd = (rows.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
        assert!(m.abs() < 1e-9, "channel {c} mean {m}");
        assert!((sd - 1.0).abs() < 1e-9, "channel {c} std {sd}");
    }
    assert_eq!(data.covariates.features(), 4);
}

#[test]
fn val_and_test_targets_stay_in_their_segment() {
    let raw = series(1000, 2, 1);
    let data = PreparedData::new(&raw, &SplitSpec::standard_ratio()).unwrap();
    let (l, t) = (48, 12);
    let val = data.val_windows(l, t).unwrap();
    let test = data.test_windows(l, t).unwrap();
    assert_eq!(val.start(0) + l, data.split.val.start);
    assert_eq!(test.start(0) + l, data.split.test.start);
    assert_eq!(val.start(val.len() - 1) + l + t, data.split.val.end);
    assert_eq!(test.len(), data.split.test.len() - t + 1);
    let train = data.train_windows(l, t).unwrap();
    assert_eq!(train.start(train.len() - 1) + l + t, data.split.train.end);
}

#[test]
fn batch_covariates_follow_window_rows() {
    let raw = synth_retail_generate(730, 1).unwrap();
    let data = PreparedData::new(&raw, &SplitSpec::standard_ratio()).unwrap();
    let b = gather_batch::<f32>(&data.dataset, &data.covariates, &[5, 40], 14, 7).unwrap();
    assert_eq!(b.covariate_shape(), [2, 1, 14, 4]);
    assert_eq!(&b.dyn_covariates[..4], data.covariates.row(5));
    assert_eq!(&b.dyn_covariates[14 * 4..15 * 4], data.covariates.row(40));
    assert_eq!(b.targets.at(&[1, 3, 0]), data.dataset.value(54, 3) as f32);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ratio_split_partitions_rows(
        rows in 30usize..5000,
        train in 1.0f64..10.0,
        val in 1.0f64..5.0,
        test in 1.0f64..5.0,
    ) {
        let spec = SplitSpec::Ratio { train, val, test };
        if let Ok(s) = chronological_split(rows, Frequency::HOURLY, &spec) {
            prop_assert_eq!(s.train.start, 0);
            prop_assert_eq!(s.train.end, s.val.start);
            prop_assert_eq!(s.val.end, s.test.start);
            prop_assert_eq!(s.test.end, rows);
            prop_assert!(!s.train.is_empty() && !s.val.is_empty() && !s.test.is_empty());
        }
    }

    #[test]
    fn window_count_is_rows_minus_lookback_minus_horizon_plus_one(
        start in 0usize..50,
        len in 1usize..400,
        lookback in 1usize..64,
        horizon in 1usize..32,
    ) {
        let w = Windows::new(start..start + len, lookback, horizon, 1);
        if len >= lookback + horizon {
            let w = w.unwrap();
            prop_assert_eq!(w.len(), len - lookback - horizon + 1);
            prop_assert_eq!(w.start(0), start);
            prop_assert_eq!(w.start(w.len() - 1) + lookback + horizon, start + len);
        } else {
            prop_assert!(w.is_err() || w.unwrap().is_empty());
        }
    }

    #[test]
    fn normalization_round_trips(rows in 2usize..200, channels in 1usize..6, seed in any::<u64>()) {
        let ds = series(rows, channels, seed);
        let stats = NormStats::fit(&ds, 0..rows / 2 + 1).unwrap();
        prop_assert!(stats.std.iter().all(|&s| s > 0.0));
        let back = stats.invert(&stats.apply(&ds));
        prop_assert!(back.values.max_abs_diff(&ds.values) < 1e-6);
    }

    #[test]
    fn masking_hits_every_row_equally(
        b in 1usize..4,
        c in 1usize..5,
        n in 1usize..20,
        ratio in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        let p = 4;
        let x = random_tensor::<f64>(&[b, c, n * p], &mut rng(seed)).map(|v| v + 5.0);
        let m = mask_patches(&x, p, ratio, &mut rng(seed ^ 1)).unwrap();
        let expect = (ratio * n as f64).round() as usize;
        for (row, flags) in m.mask.chunks(n).enumerate() {
            prop_assert_eq!(flags.iter().filter(|&&f| f).count(), expect);
            for (patch, &f) in flags.iter().enumerate() {
                let lo = row * n * p + patch * p;
                let got = &m.inputs.data()[lo..lo + p];
                if f {
                    prop_assert!(got.iter().all(|&v| v == 0.0));
                } else {
                    prop_assert_eq!(got, &x.data()[lo..lo + p]);
                }
            }
        }
        let w: Tensor<f64> = m.step_weights(p);
        prop_assert_eq!(w.data().iter().filter(|&&v| v == 1.0).count(), expect * p * b * c);
    }
}
