use factr_autodiff::{Real, Tape, Tensor, Var};
use rand::Rng;

use super::config::ModelConfig;
use super::params::{analytic_param_count, initialize, ParamBreakdown, Params};
use crate::error::{Error, Result};

pub const REVIN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-5;

/// Per-window, per-channel statistics used by the reversible normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RevinState<F> {
    /// `[B, C, 1]`
    pub mean: Tensor<F>,
    /// `[B, C, 1]`, standard deviation plus eps.
    pub scale: Tensor<F>,
}

impl<F: Real> RevinState<F> {
    /// Mean and biased standard deviation of each `[.., L]` row.
    pub fn fit(x: &Tensor<F>) -> Result<Self> {
        if x.rank() != 3 {
            return Err(Error::Contract(format!("expected [B, C, L] input, got {:?}", x.shape())));
        }
        let (b, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let eps = F::from_f64_lossy(REVIN_EPS);
        let lf = F::from_usize(l).expect("length fits");
        let mut mean = Vec::with_capacity(b * c);
        let mut scale = Vec::with_capacity(b * c);
        for row in x.data().chunks(l) {
            let m = row.iter().copied().sum::<F>() / lf;
            let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<F>() / lf;
            mean.push(m);
            scale.push(var.sqrt() + eps);
        }
        Ok(Self {
            mean: Tensor::new(&[b, c, 1], mean)?,
            scale: Tensor::new(&[b, c, 1], scale)?,
        })
    }

    /// `(x - mean) / scale`, before the learnable affine.
    pub fn standardize(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let l = x.shape()[2];
        if x.numel() != self.mean.numel() * l {
            return Err(Error::Contract("normalization state does not match input".into()));
        }
        let data = x
            .data()
            .chunks(l)
            .zip(self.mean.data().iter().zip(self.scale.data()))
            .flat_map(|(row, (&m, &s))| row.iter().map(move |&v| (v - m) / s))
            .collect();
        Ok(Tensor::new(x.shape(), data)?)
    }

    fn per_row(&self, x: &Tensor<F>, gamma: &[F], beta: &[F], f: impl Fn(F, F, F, F, F) -> F) -> Result<Tensor<F>> {
        let s = x.shape();
        if s.len() != 3 || s[0] * s[1] != self.mean.numel() || gamma.len() != s[1] || beta.len() != s[1] {
            return Err(Error::Contract(format!(
                "normalization state for {:?} does not match {s:?}",
                self.mean.shape()
            )));
        }
        let (c, l) = (s[1], s[2]);
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let row = i / l;
                f(v, self.mean.data()[row], self.scale.data()[row], gamma[row % c], beta[row % c])
            })
            .collect();
        Ok(Tensor::new(s, data)?)
    }

    /// `gamma * (x - mean) / scale + beta` per channel.
    pub fn normalize(&self, x: &Tensor<F>, gamma: &[F], beta: &[F]) -> Result<Tensor<F>> {
        self.per_row(x, gamma, beta, |v, m, s, g, b| g * (v - m) / s + b)
    }

    /// Inverse of [`RevinState::normalize`] for any trailing length.
    pub fn denormalize(&self, y: &Tensor<F>, gamma: &[F], beta: &[F]) -> Result<Tensor<F>> {
        let eps2 = F::from_f64_lossy(REVIN_EPS * REVIN_EPS);
        self.per_row(y, gamma, beta, |v, m, s, g, b| (v - b) / (g + eps2) * s + m)
    }
}

/// Attention maps recorded during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpretabilityDump {
    /// Temporal attention `[B, C, N, N]`; rows (last axis) sum to one.
    pub temporal: Tensor<f64>,
    /// Channel influence `[B, C, C, N]` indexed (target, source, patch);
    /// sums to one over the source axis. Absent for the temporal-only variant.
    pub spatial: Option<Tensor<f64>>,
    /// Raw factor similarities `[B, C, C, N]`, before scaling and softmax.
    pub fm_scores: Option<Tensor<f64>>,
}

/// Handles of the intermediate values of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// Final forecast `[B, C, T]` in input units.
    pub forecast: Var,
    /// Head output before the inverse normalization.
    pub normalized_forecast: Var,
    pub patch_embedding: Var,
    pub context: Option<Var>,
    pub temporal_out: Var,
    /// `[B, C, N, N]`
    pub temporal_attention: Var,
    /// `[B, N, C, C]`
    pub fm_scores: Option<Var>,
    /// `[B, N, C, C]`
    pub spatial_attention: Option<Var>,
    pub spatial_values: Option<Var>,
    pub spatial_mix: Option<Var>,
    pub gate: Option<Var>,
    pub fused: Var,
    pub mixed: Var,
}

impl ForwardVars {
    pub fn dump<F: Real>(&self, tape: &Tape<F>) -> InterpretabilityDump {
        // [B, N, C, C] -> [B, C, C, N]
        let to_channel_major = |v: Var| {
            let t = tape.value(v);
            let (b, n, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let src = t.data();
            let mut out = vec![0.0; src.len()];
            for bi in 0..b {
                for ni in 0..n {
                    for i in 0..c {
                        for j in 0..c {
                            out[((bi * c + i) * c + j) * n + ni] = src[((bi * n + ni) * c + i) * c + j].as_f64();
                        }
                    }
                }
            }
            Tensor::new(&[b, c, c, n], out).expect("same size")
        };
        InterpretabilityDump {
            temporal: tape.value(self.temporal_attention).cast(),
            spatial: self.spatial_attention.map(to_channel_major),
            fm_scores: self.fm_scores.map(to_channel_major),
        }
    }
}

/// Inputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a, F> {
    /// `[B, C, L]`
    pub inputs: &'a Tensor<F>,
    /// Calendar codes `[B, 1, L, K]` flattened; empty when the model has no
    /// dynamic features.
    pub covariates: &'a [usize],
}

/// A FaCTR network: configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Factr<F> {
    config: ModelConfig,
    params: Params<F>,
}

impl<F: Real> Factr<F> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = initialize(&config, rng);
        Ok(Self { config, params })
    }

    /// Wraps existing parameters; the name set and shapes must match the
    /// configuration exactly.
    pub fn from_params(config: ModelConfig, params: Params<F>) -> Result<Self> {
        config.validate()?;
        let expected = super::params::inventory(&config);
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this configuration, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (slot, (name, t)) in expected.iter().zip(params.iter()) {
            if slot.name != name || slot.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' {:?} does not match expected '{}' {:?}",
                    t.shape(),
                    slot.name,
                    slot.shape
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<F> {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, Params<F>) {
        (self.config, self.params)
    }

    pub fn param_breakdown(&self) -> ParamBreakdown {
        analytic_param_count(&self.config)
    }

    /// Registers every parameter on `tape`, in parameter order.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: impl Fn(&str) -> bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(name, t)| tape.leaf(t.clone(), trainable(name)))
            .collect()
    }

    /// Runs the network on `tape`. `vars` must come from [`Factr::bind`].
    /// Dropout is active only when `rng` is given.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        batch: Batch<'_, F>,
        rng: Option<&mut R>,
    ) -> Result<ForwardVars> {
        Pass {
            model: self,
            vars,
            tape,
            rng,
        }
        .run(batch)
    }

    /// Inference without gradients. Returns the forecast and attention maps.
    pub fn predict(&self, batch: Batch<'_, F>) -> Result<(Tensor<F>, InterpretabilityDump)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, |_| false);
        let out = self.forward::<rand_chacha::ChaCha8Rng>(&mut tape, &vars, batch, None)?;
        let dump = out.dump(&tape);
        Ok((tape.value(out.forecast).clone(), dump))
    }
}

struct Pass<'a, 'r, F: Real, R: ?Sized> {
    model: &'a Factr<F>,
    vars: &'a [Var],
    tape: &'a mut Tape<F>,
    rng: Option<&'r mut R>,
}

impl<F: Real, R: Rng + ?Sized> Pass<'_, '_, F, R> {
    fn param(&self, name: &str) -> Result<Var> {
        self.model
            .params
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Contract(format!("missing parameter '{name}'")))
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add(y, b)?)
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gamma"))?;
        let b = self.param(&format!("{prefix}.beta"))?;
        Ok(self.tape.layer_norm(x, g, b, F::from_f64_lossy(NORM_EPS))?)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.model.config.dropout;
        match self.rng.as_deref_mut() {
            Some(rng) if p > 0.0 => Ok(self.tape.dropout(x, p, rng)?),
            _ => Ok(x),
        }
    }

    fn check_batch(&self, batch: &Batch<'_, F>) -> Result<(usize, usize)> {
        let cfg = &self.model.config;
        let s = batch.inputs.shape();
        if s.len() != 3 || s[1] != cfg.channels || s[2] != cfg.lookback {
            return Err(Error::Contract(format!(
                "input shape {s:?} does not match [B, {}, {}]",
                cfg.channels, cfg.lookback
            )));
        }
        if self.vars.len() != self.model.params.len() {
            return Err(Error::Contract("parameter bindings do not match the model".into()));
        }
        let k = cfg.dyn_features();
        let b = s[0];
        if cfg.variant.uses_channel_mixing() && k > 0 {
            if batch.covariates.len() != b * cfg.lookback * k {
                return Err(Error::Contract(format!(
                    "expected {} covariate codes ([{b}, 1, {}, {k}]), got {}",
                    b * cfg.lookback * k,
                    cfg.lookback,
                    batch.covariates.len()
                )));
            }
            for (i, &code) in batch.covariates.iter().enumerate() {
                let f = i % k;
                if code >= cfg.dyn_cardinalities[f] {
                    return Err(Error::Contract(format!(
                        "dynamic feature {f} code {code} outside 0..{}",
                        cfg.dyn_cardinalities[f]
                    )));
                }
            }
        }
        Ok((b, s[1]))
    }

    fn run(mut self, batch: Batch<'_, F>) -> Result<ForwardVars> {
        let (b, c) = self.check_batch(&batch)?;
        let cfg = self.model.config.clone();
        let (d, p, n, stride) = (cfg.d_model, cfg.patch_len, cfg.patches(), cfg.stride);

        // Reversible instance normalization with detached statistics.
        let state = RevinState::fit(batch.inputs)?;
        let z = self.tape.constant(state.standardize(batch.inputs)?);
        let gamma = self.param("revin.gamma")?;
        let beta = self.param("revin.beta")?;
        let gamma_col = self.tape.reshape(gamma, &[c, 1])?;
        let beta_col = self.tape.reshape(beta, &[c, 1])?;
        let scaled = self.tape.mul(z, gamma_col)?;
        let mut x = self.tape.add(scaled, beta_col)?;

        let skip = cfg.dropped_steps();
        let l = cfg.lookback - skip;
        if skip > 0 {
            x = self.tape.narrow(x, 2, skip, l)?;
        }

        // Patches [B, C, N, P].
        let patches = if stride == p {
            self.tape.reshape(x, &[b, c, n, p])?
        } else {
            let parts = (0..n)
                .map(|i| {
                    let s = self.tape.narrow(x, 2, i * stride, p)?;
                    Ok(self.tape.reshape(s, &[b, c, 1, p])?)
                })
                .collect::<Result<Vec<_>>>()?;
            self.tape.concat(&parts, 2)?
        };
        let projected = self.linear(patches, "patch")?;
        let pos = self.param("patch.pos")?;
        let patch_embedding = self.tape.add(projected, pos)?;

        // Temporal attention over patches, per channel, pre-norm + residual.
        let h = self.layer_norm(patch_embedding, "temporal.norm")?;
        let q = self.linear(h, "temporal.q")?;
        let k = self.linear(h, "temporal.k")?;
        let v = self.linear(h, "temporal.v")?;
        let kt = self.tape.transpose(k)?;
        let logits = self.tape.matmul(q, kt)?;
        let logits = self.tape.scale(logits, F::from_f64_lossy(1.0 / (d as f64).sqrt()))?;
        let temporal_attention = self.tape.softmax(logits, 3)?;
        let weights = self.dropout(temporal_attention)?;
        let attended = self.tape.matmul(weights, v)?;
        let attended = self.linear(attended, "temporal.o")?;
        let temporal_out = self.tape.add(patch_embedding, attended)?;

        let mut out = ForwardVars {
            forecast: temporal_out,
            normalized_forecast: temporal_out,
            patch_embedding,
            context: None,
            temporal_out,
            temporal_attention,
            fm_scores: None,
            spatial_attention: None,
            spatial_values: None,
            spatial_mix: None,
            gate: None,
            fused: temporal_out,
            mixed: temporal_out,
        };

        if cfg.variant.uses_channel_mixing() {
            let context = self.context(&cfg, b, batch.covariates, patch_embedding)?;
            out.context = Some(context);

            // Factor vectors per (channel, patch), then channel similarities per patch.
            let factors = self.linear(context, "fm")?;
            let factors = self.tape.permute(factors, &[0, 2, 1, 3])?;
            let factors_t = self.tape.transpose(factors)?;
            let scores = self.tape.matmul(factors, factors_t)?;
            let scaled = self.tape.scale(scores, F::from_f64_lossy(1.0 / (cfg.fm_rank as f64).sqrt()))?;
            let spatial_attention = self.tape.softmax(scaled, 3)?;

            let low = self.linear(temporal_out, "spatial.low")?;
            let values = self.linear(low, "spatial.high")?;
            let values_p = self.tape.permute(values, &[0, 2, 1, 3])?;
            let mixed = self.tape.matmul(spatial_attention, values_p)?;
            let spatial_mix = self.tape.permute(mixed, &[0, 2, 1, 3])?;

            let gate_logits = self.linear(temporal_out, "gate")?;
            let gate = self.tape.sigmoid(gate_logits)?;
            let diff = self.tape.sub(temporal_out, spatial_mix)?;
            let gated = self.tape.mul(gate, diff)?;
            let fused = self.tape.add(spatial_mix, gated)?;

            out.fm_scores = Some(scores);
            out.spatial_attention = Some(spatial_attention);
            out.spatial_values = Some(values);
            out.spatial_mix = Some(spatial_mix);
            out.gate = Some(gate);
            out.fused = fused;
            out.mixed = fused;
        }

        if cfg.variant.uses_mlp() {
            let h = self.layer_norm(out.fused, "mlp.norm")?;
            let h = self.linear(h, "mlp.fc1")?;
            let h = self.tape.gelu(h)?;
            let h = self.dropout(h)?;
            let h = self.linear(h, "mlp.fc2")?;
            out.mixed = self.tape.add(out.fused, h)?;
        }

        let flat = self.tape.reshape(out.mixed, &[b, c, n * d])?;
        let y = self.linear(flat, "head")?;
        out.normalized_forecast = y;

        // Inverse normalization.
        let shifted = self.tape.sub(y, beta_col)?;
        let denom = self.tape.add_scalar(gamma_col, F::from_f64_lossy(REVIN_EPS * REVIN_EPS))?;
        let unscaled = self.tape.div(shifted, denom)?;
        let scale = self.tape.constant(state.scale);
        let mean = self.tape.constant(state.mean);
        let restored = self.tape.mul(unscaled, scale)?;
        out.forecast = self.tape.add(restored, mean)?;
        Ok(out)
    }

    /// Patch embedding plus static and dynamic covariate embeddings.
    fn context(&mut self, cfg: &ModelConfig, b: usize, covariates: &[usize], patch_embedding: Var) -> Result<Var> {
        let (c, d) = (cfg.channels, cfg.d_model);
        let mut stat = self.param("static.channel")?;
        for (m, _) in cfg.static_cat_cardinalities.iter().enumerate() {
            let table = self.param(&format!("static.cat.{m}"))?;
            let codes: Vec<usize> = cfg.static_categorical.iter().map(|row| row[m]).collect();
            let e = self.tape.embedding(table, &codes, &[c])?;
            stat = self.tape.add(stat, e)?;
        }
        let q = cfg.static_cont_features();
        if q > 0 {
            let flat: Vec<f64> = cfg.static_continuous.iter().flatten().copied().collect();
            let feats = self.tape.constant(Tensor::from_f64(&[c, q], &flat)?);
            let w = self.param("static.cont.weight")?;
            let e = self.tape.matmul(feats, w)?;
            stat = self.tape.add(stat, e)?;
        }
        let stat = self.tape.reshape(stat, &[c, 1, d])?;
        let mut context = self.tape.add(patch_embedding, stat)?;

        let k = cfg.dyn_features();
        if k > 0 {
            let skip = cfg.dropped_steps();
            let l = cfg.lookback - skip;
            let merge = self.param("dyn.merge.weight")?;
            let mut steps: Option<Var> = None;
            for (f, _) in cfg.dyn_cardinalities.iter().enumerate() {
                // Projecting the table first equals concatenating lookups
                // and applying the merge map.
                let table = self.param(&format!("dyn.table.{f}"))?;
                let rows = self.tape.narrow(merge, 0, f * d, d)?;
                let projected = self.tape.matmul(table, rows)?;
                let codes: Vec<usize> = (0..b)
                    .flat_map(|bi| (skip..cfg.lookback).map(move |t| covariates[(bi * cfg.lookback + t) * k + f]))
                    .collect();
                let e = self.tape.embedding(projected, &codes, &[b, 1, l])?;
                steps = Some(match steps {
                    Some(acc) => self.tape.add(acc, e)?,
                    None => e,
                });
            }
            let bias = self.param("dyn.merge.bias")?;
            let steps = self.tape.add(steps.expect("k > 0"), bias)?;
            let w = self.param("dyn.conv.weight")?;
            let cb = self.param("dyn.conv.bias")?;
            let dynamic = self.tape.depthwise_conv1d(steps, w, cb, cfg.stride)?;
            context = self.tape.add(context, dynamic)?;
        }
        Ok(context)
    }
}
