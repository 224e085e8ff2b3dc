use std::f64::consts::PI;

use chrono::{Duration, NaiveDate};
use factr_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::{Frequency, SeriesDataset};
use crate::error::{Error, Result};

/// Shape of the synthetic retail series. Defaults are what the tests pin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetailParams {
    pub weekly_period: f64,
    pub fast_period: f64,
    pub trend_per_day: f64,
    pub noise_std: f64,
    pub pulse_amplitude: f64,
    pub pulse_width: usize,
    pub min_gap: usize,
    pub max_gap: usize,
    pub response_lag: usize,
    pub response_base: f64,
    /// Peak of the triangular response, relative to the pulse amplitude.
    pub response_gain: f64,
    /// Half-width of the triangular response, in days.
    pub response_half_width: usize,
    pub suppression: f64,
}

impl Default for RetailParams {
    fn default() -> Self {
        Self {
            weekly_period: 7.0,
            fast_period: 2.0,
            trend_per_day: 0.01,
            noise_std: 1.0,
            pulse_amplitude: 2.0,
            pulse_width: 3,
            min_gap: 30,
            max_gap: 45,
            response_lag: 7,
            response_base: 1.0,
            response_gain: 0.5,
            response_half_width: 2,
            suppression: 0.3,
        }
    }
}

pub const MIN_SYNTH_DAYS: usize = 730;

pub const RETAIL_CHANNELS: [&str; 8] = [
    "seasonal",
    "seasonal_copy",
    "fast_seasonal",
    "trend",
    "noise",
    "promotion",
    "response",
    "cannibalized",
];

/// Triangular kernel `[1, 2, .., h+1, .., 2, 1] / (h+1)`.
fn triangle(half_width: usize) -> Vec<f64> {
    let peak = (half_width + 1) as f64;
    (0..=2 * half_width)
        .map(|j| (half_width + 1 - j.abs_diff(half_width)) as f64 / peak)
        .collect()
}

/// Onset days of promotion pulses.
pub fn pulse_onsets(days: usize, params: &RetailParams, seed: u64) -> Vec<usize> {
    // The onset sequence uses its own stream so it stays fixed when the
    // noise channel changes.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut onsets = Vec::new();
    let mut t = rng.random_range(params.min_gap / 2..=params.max_gap);
    while t < days {
        onsets.push(t);
        t += rng.random_range(params.min_gap..=params.max_gap);
    }
    onsets
}

/// Daily eight-channel retail demand series starting 2020-01-01.
pub fn synth_retail_generate(days: usize, seed: u64) -> Result<SeriesDataset> {
    synth_retail_with(days, seed, &RetailParams::default())
}

pub fn synth_retail_with(days: usize, seed: u64, params: &RetailParams) -> Result<SeriesDataset> {
    if days < MIN_SYNTH_DAYS {
        return Err(Error::Config(format!(
            "synthetic series needs at least {MIN_SYNTH_DAYS} days, got {days}"
        )));
    }
    if params.min_gap <= params.pulse_width || params.max_gap < params.min_gap {
        return Err(Error::Config("pulse gaps must exceed the pulse width".into()));
    }
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    let onsets = pulse_onsets(days, params, seed);

    let mut promo = vec![0.0; days];
    for &o in &onsets {
        for v in promo.iter_mut().skip(o).take(params.pulse_width) {
            *v = params.pulse_amplitude;
        }
    }
    let kernel = triangle(params.response_half_width);

    let c = RETAIL_CHANNELS.len();
    let mut values = Vec::with_capacity(days * c);
    for t in 0..days {
        let tf = t as f64;
        let weekly = (2.0 * PI * tf / params.weekly_period).sin();
        // Cosine phase: a 2-day sine sampled daily is identically zero.
        let fast = (2.0 * PI * tf / params.fast_period).cos();
        let trend = weekly + params.trend_per_day * tf;
        let noise: f64 = noise_rng.sample::<f64, _>(StandardNormal) * params.noise_std;
        let response = params.response_base
            + params.response_gain
                * kernel
                    .iter()
                    .enumerate()
                    .filter_map(|(j, k)| {
                        t.checked_sub(params.response_lag + j).map(|s| k * promo[s])
                    })
                    .sum::<f64>();
        let suppressed = if promo[t] > 0.0 { params.suppression } else { 1.0 };
        let cannibalized = (2.0 + weekly) * suppressed;
        values.extend_from_slice(&[weekly, weekly, fast, trend, noise, promo[t], response, cannibalized]);
    }

    let start = NaiveDate::from_ymd_opt(2020, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date");
    let timestamps = (0..days).map(|d| start + Duration::days(d as i64)).collect();
    SeriesDataset::new(
        Tensor::new(&[days, c], values)?,
        Some(timestamps),
        RETAIL_CHANNELS.iter().map(|s| s.to_string()).collect(),
        Frequency::DAILY,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_kernel() {
        assert_eq!(triangle(0), vec![1.0]);
        let k = triangle(2);
        assert_eq!(k.len(), 5);
        assert!((k[2] - 1.0).abs() < 1e-15);
        assert!((k[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn onset_gaps_in_range() {
        let p = RetailParams::default();
        let on = pulse_onsets(1095, &p, 7);
        assert!(on.len() > 20);
        for w in on.windows(2) {
            let gap = w[1] - w[0];
            assert!((30..=45).contains(&gap), "gap {gap}");
        }
    }

    #[test]
    fn rejects_short_series() {
        assert!(synth_retail_generate(729, 0).is_err());
    }
}
