use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use factr_autodiff::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};

/// Block whose cost is swept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingComponent {
    /// Channel mixing, swept over the channel count.
    Fm,
    /// Temporal attention, swept over the patch count.
    Temporal,
}

impl FromStr for ScalingComponent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fm" => Ok(Self::Fm),
            "temporal" => Ok(Self::Temporal),
            other => Err(Error::Config(format!("unknown component '{other}' (expected fm or temporal)"))),
        }
    }
}

/// Fixed dimensions of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchShape {
    pub d_model: usize,
    pub fm_rank: usize,
    /// Patch count held fixed in the channel sweep.
    pub patches: usize,
    /// Channel count held fixed in the patch sweep.
    pub channels: usize,
    pub repetitions: usize,
    /// Each timed repetition loops until at least this long.
    pub min_sample: Duration,
}

impl Default for BenchShape {
    fn default() -> Self {
        Self {
            d_model: 32,
            fm_rank: 8,
            patches: 16,
            channels: 64,
            repetitions: 5,
            min_sample: Duration::from_millis(20),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingTable {
    pub component: ScalingComponent,
    /// `(size, median seconds per call)`
    pub rows: Vec<(usize, f64)>,
    /// Least-squares slope of log(seconds) against log(size).
    pub slope: f64,
}

impl ScalingTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("size\tseconds\n");
        for (n, s) in &self.rows {
            let _ = writeln!(out, "{n}\t{s:.6e}");
        }
        let _ = writeln!(out, "# slope\t{:.4}", self.slope);
        out
    }
}

/// Ordinary least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::Config("log-log fit needs at least two positive points".into()));
    }
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("log-log fit needs at least two distinct sizes".into()));
    }
    Ok(sxy / sxx)
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Pairwise score, softmax and weighted-sum core of one block on inputs
/// already on the tape: `keys` is `[..., M, R]`, `values` `[..., M, D]`;
/// cost is quadratic in `M`.
fn attention_core(tape: &mut Tape<f32>, keys: Var, values: Var) -> Result<()> {
    let rank = *tape.shape(keys).last().expect("rank >= 1");
    let kt = tape.transpose(keys)?;
    let s = tape.matmul(keys, kt)?;
    let s = tape.scale(s, 1.0 / (rank as f32).sqrt())?;
    let axis = tape.shape(s).len() - 1;
    let a = tape.softmax(s, axis)?;
    tape.matmul(a, values)?;
    Ok(())
}

/// Mean time of `run` over `count` calls, excluding `setup`.
fn timed<S>(count: usize, setup: &mut impl FnMut() -> S, run: &mut impl FnMut(S) -> Result<()>) -> Result<f64> {
    let mut total = Duration::ZERO;
    for _ in 0..count {
        let state = setup();
        let t = Instant::now();
        run(state)?;
        total += t.elapsed();
    }
    Ok(total.as_secs_f64() / count as f64)
}

/// Times the quadratic core of a component at each size and fits the
/// log-log slope. The channel-mixing core is factor similarities (rank r),
/// softmax over sources and the weighted sum of values per patch; the
/// temporal core is the same pattern over patches per channel.
pub fn scaling_benchmark(component: ScalingComponent, sizes: &[usize], shape: &BenchShape) -> Result<ScalingTable> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::Config("a sweep needs at least two positive sizes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (lead, rank) = match component {
        ScalingComponent::Fm => (shape.patches, shape.fm_rank),
        ScalingComponent::Temporal => (shape.channels, shape.d_model),
    };
    let inputs: Vec<(Tensor<f32>, Tensor<f32>)> = sizes
        .iter()
        .map(|&m| (normal(&[lead, m, rank], &mut rng), normal(&[lead, m, shape.d_model], &mut rng)))
        .collect();
    let setup_for = |i: usize| {
        let (k, v) = &inputs[i];
        move || {
            let mut tape = Tape::new();
            let k = tape.constant(k.clone());
            let v = tape.constant(v.clone());
            (tape, k, v)
        }
    };
    let mut run = |(mut tape, k, v): (Tape<f32>, Var, Var)| attention_core(&mut tape, k, v);
    // Warm up and size the inner loops so each sample lasts `min_sample`.
    let mut inner = Vec::with_capacity(sizes.len());
    for i in 0..sizes.len() {
        timed(1, &mut setup_for(i), &mut run)?;
        let one = timed(1, &mut setup_for(i), &mut run)?.max(1e-9);
        inner.push((shape.min_sample.as_secs_f64() / one).ceil().max(1.0) as usize);
    }
    // Sizes are interleaved within each repetition so that slow phases of
    // the machine hit every size alike.
    let mut samples = vec![Vec::with_capacity(shape.repetitions); sizes.len()];
    for _ in 0..shape.repetitions.max(1) {
        for (i, s) in samples.iter_mut().enumerate() {
            s.push(timed(inner[i], &mut setup_for(i), &mut run)?);
        }
    }
    let rows: Vec<(usize, f64)> = sizes
        .iter()
        .zip(samples)
        .map(|(&m, mut s)| {
            s.sort_by(f64::total_cmp);
            (m, s[s.len() / 2])
        })
        .collect();
    let points: Vec<(f64, f64)> = rows.iter().map(|&(m, s)| (m as f64, s)).collect();
    Ok(ScalingTable {
        component,
        slope: loglog_slope(&points)?,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<(f64, f64)> = [64.0, 128.0, 256.0, 512.0].iter().map(|&c: &f64| (c, 3e-9 * c * c)).collect();
        assert!((loglog_slope(&pts).unwrap() - 2.0).abs() < 1e-12);
        assert!(loglog_slope(&pts[..1]).is_err());
    }

    #[test]
    fn parses_components() {
        assert_eq!("fm".parse::<ScalingComponent>().unwrap(), ScalingComponent::Fm);
        assert!("spatial".parse::<ScalingComponent>().is_err());
    }
}
