use factr_autodiff::{Real, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::config::ModelConfig;
use crate::error::{Error, Result};

/// Named learnable tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    entries: Vec<(String, Tensor<F>)>,
}

impl<F: Real> Default for Params<F> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<F: Real> Params<F> {
    pub fn from_entries(entries: Vec<(String, Tensor<F>)>) -> Result<Self> {
        for (i, (name, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::Contract(format!("duplicate parameter '{name}'")));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.position(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.position(name).map(move |i| &mut self.entries[i].1)
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tensor(&self, i: usize) -> &Tensor<F> {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<F> {
        &mut self.entries[i].1
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn into_entries(self) -> Vec<(String, Tensor<F>)> {
        self.entries
    }

    /// Sum of element counts over every tensor.
    pub fn enumerated_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<G: Real>(&self) -> Params<G> {
        Params {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// Uniform Glorot for a `[fan_in, fan_out]` map.
    Glorot,
    Embedding,
    /// Averaging kernel: every tap is `1 / rows`.
    Average,
}

pub(crate) struct Slot {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn slot(name: impl Into<String>, shape: &[usize], init: Init) -> Slot {
    Slot {
        name: name.into(),
        shape: shape.to_vec(),
        init,
    }
}

fn linear(out: &mut Vec<Slot>, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push(slot(format!("{prefix}.weight"), &[fan_in, fan_out], Init::Glorot));
    out.push(slot(format!("{prefix}.bias"), &[fan_out], Init::Zeros));
}

fn norm(out: &mut Vec<Slot>, prefix: &str, width: usize) {
    out.push(slot(format!("{prefix}.gamma"), &[width], Init::Ones));
    out.push(slot(format!("{prefix}.beta"), &[width], Init::Zeros));
}

/// Names, shapes and initializers of every tensor a configuration
/// instantiates, in checkpoint order.
pub(crate) fn inventory(cfg: &ModelConfig) -> Vec<Slot> {
    let (c, d, p, n) = (cfg.channels, cfg.d_model, cfg.patch_len, cfg.patches());
    let mut s = Vec::new();
    s.push(slot("revin.gamma", &[c], Init::Ones));
    s.push(slot("revin.beta", &[c], Init::Zeros));
    linear(&mut s, "patch", p, d);
    s.push(slot("patch.pos", &[n, d], Init::Embedding));

    if cfg.variant.uses_channel_mixing() {
        s.push(slot("static.channel", &[c, d], Init::Embedding));
        for (m, &card) in cfg.static_cat_cardinalities.iter().enumerate() {
            s.push(slot(format!("static.cat.{m}"), &[card, d], Init::Embedding));
        }
        let q = cfg.static_cont_features();
        if q > 0 {
            s.push(slot("static.cont.weight", &[q, d], Init::Glorot));
        }
        let k = cfg.dyn_features();
        if k > 0 {
            for (i, &card) in cfg.dyn_cardinalities.iter().enumerate() {
                s.push(slot(format!("dyn.table.{i}"), &[card, d], Init::Embedding));
            }
            linear(&mut s, "dyn.merge", k * d, d);
            s.push(slot("dyn.conv.weight", &[p, d], Init::Average));
            s.push(slot("dyn.conv.bias", &[d], Init::Zeros));
        }
    }

    norm(&mut s, "temporal.norm", d);
    for proj in ["q", "k", "v", "o"] {
        linear(&mut s, &format!("temporal.{proj}"), d, d);
    }

    if cfg.variant.uses_channel_mixing() {
        linear(&mut s, "fm", d, cfg.fm_rank);
        linear(&mut s, "spatial.low", d, cfg.spatial_rank);
        linear(&mut s, "spatial.high", cfg.spatial_rank, d);
        linear(&mut s, "gate", d, d);
    }
    if cfg.variant.uses_mlp() {
        norm(&mut s, "mlp.norm", d);
        linear(&mut s, "mlp.fc1", d, 4 * d);
        linear(&mut s, "mlp.fc2", 4 * d, d);
    }
    linear(&mut s, "head", n * d, cfg.horizon);
    s
}

/// Tensors belonging to the forecast head.
pub fn is_head(name: &str) -> bool {
    name.starts_with("head.")
}

pub(crate) fn initialize<F: Real, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Params<F> {
    let embed = Normal::new(0.0, 0.02).expect("valid std");
    let entries = inventory(cfg)
        .into_iter()
        .map(|s| {
            let numel: usize = s.shape.iter().product();
            let data: Vec<f64> = match s.init {
                Init::Zeros => vec![0.0; numel],
                Init::Ones => vec![1.0; numel],
                Init::Average => vec![1.0 / s.shape[0] as f64; numel],
                Init::Embedding => (0..numel).map(|_| embed.sample(rng)).collect(),
                Init::Glorot => {
                    let limit = (6.0 / (s.shape[0] + s.shape[1]) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                    (0..numel).map(|_| dist.sample(rng)).collect()
                }
            };
            let t = Tensor::from_f64(&s.shape, &data).expect("inventory shape");
            (s.name, t)
        })
        .collect();
    Params { entries }
}

/// Per-block parameter counts from closed-form expressions.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct ParamBreakdown {
    pub blocks: Vec<(String, usize)>,
    pub total: usize,
}

/// Closed-form parameter count of a configuration.
pub fn analytic_param_count(cfg: &ModelConfig) -> ParamBreakdown {
    let (c, d, p, n, t) = (cfg.channels, cfg.d_model, cfg.patch_len, cfg.patches(), cfg.horizon);
    let (r, rs) = (cfg.fm_rank, cfg.spatial_rank);
    let k = cfg.dyn_features();
    let mut blocks = vec![
        ("revin".to_string(), 2 * c),
        ("patch".to_string(), p * d + d + n * d),
    ];
    if cfg.variant.uses_channel_mixing() {
        let cats: usize = cfg.static_cat_cardinalities.iter().sum();
        blocks.push(("static".into(), (c + cats + cfg.static_cont_features()) * d));
        if k > 0 {
            let tables: usize = cfg.dyn_cardinalities.iter().sum();
            blocks.push(("dynamic".into(), tables * d + k * d * d + d + p * d + d));
        }
    }
    blocks.push(("temporal".into(), 2 * d + 4 * (d * d + d)));
    if cfg.variant.uses_channel_mixing() {
        blocks.push(("fm".into(), d * r + r));
        blocks.push(("spatial".into(), 2 * d * rs + rs + d));
        blocks.push(("gate".into(), d * d + d));
    }
    if cfg.variant.uses_mlp() {
        blocks.push(("mlp".into(), 2 * d + 8 * d * d + 5 * d));
    }
    blocks.push(("head".into(), n * d * t + t));
    let total = blocks.iter().map(|(_, v)| v).sum();
    ParamBreakdown { blocks, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn head_count_for_defaults() {
        let cfg = ModelConfig::default();
        let b = analytic_param_count(&cfg);
        let head = b.blocks.iter().find(|(n, _)| n == "head").unwrap().1;
        assert_eq!(head, 49_248);
    }

    #[test]
    fn init_follows_inventory() {
        let cfg = ModelConfig {
            channels: 3,
            ..ModelConfig::default()
        };
        let p: Params<f64> = initialize(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(p.get("revin.gamma").unwrap().data(), &[1.0; 3]);
        assert!(p.get("head.bias").unwrap().data().iter().all(|&v| v == 0.0));
        let conv = p.get("dyn.conv.weight").unwrap();
        assert!(conv.data().iter().all(|&v| v == 1.0 / 32.0));
        let limit = (6.0f64 / 64.0).sqrt();
        assert!(p.get("temporal.q.weight").unwrap().data().iter().all(|v| v.abs() <= limit));
        assert_eq!(p.enumerated_count(), analytic_param_count(&cfg).total);
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::<f32>::zeros(&[1]);
        assert!(Params::from_entries(vec![("a".into(), t.clone()), ("a".into(), t)]).is_err());
    }
}
