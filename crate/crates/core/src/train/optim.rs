use factr_autodiff::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Factr, Params};

/// Per-tensor gradients aligned with parameter order; `None` for frozen
/// tensors.
pub type Grads<F> = Vec<Option<Tensor<F>>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<F> {
    pub first: Vec<Tensor<F>>,
    pub second: Vec<Tensor<F>>,
    pub step: u64,
    pub lr: f64,
    pub config: AdamConfig,
}

impl<F: Real> OptState<F> {
    pub fn new(params: &Params<F>, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            first: zeros(),
            second: zeros(),
            step: 0,
            lr: 0.0,
            config,
        }
    }
}

/// Anything that owns a parameter set.
pub trait HasParams<F> {
    fn params(&self) -> &Params<F>;
    fn params_mut(&mut self) -> &mut Params<F>;
}

impl<F: Real> HasParams<F> for Params<F> {
    fn params(&self) -> &Params<F> {
        self
    }
    fn params_mut(&mut self) -> &mut Params<F> {
        self
    }
}

impl<F: Real> HasParams<F> for Factr<F> {
    fn params(&self) -> &Params<F> {
        Factr::params(self)
    }
    fn params_mut(&mut self) -> &mut Params<F> {
        Factr::params_mut(self)
    }
}

/// One bias-corrected Adam update of every trainable tensor.
pub fn adam_step<F: Real>(
    params: &mut Params<F>,
    grads: &Grads<F>,
    trainable: &[bool],
    state: &mut OptState<F>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || trainable.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::Contract("gradient, mask and state sizes must match the parameters".into()));
    }
    for (i, g) in grads.iter().enumerate() {
        if trainable[i] && g.is_none() {
            return Err(Error::Contract(format!("missing gradient for '{}'", params.name(i))));
        }
    }
    state.step += 1;
    state.lr = lr;
    let cfg = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (F::from_f64_lossy(cfg.beta1), F::from_f64_lossy(cfg.beta2));
    let (ob1, ob2) = (F::one() - b1, F::one() - b2);
    let step_size = F::from_f64_lossy(lr / c1);
    let inv_c2 = F::from_f64_lossy(1.0 / c2);
    let eps = F::from_f64_lossy(cfg.eps);
    for (i, g) in grads.iter().enumerate() {
        if !trainable[i] {
            continue;
        }
        let g = g.as_ref().expect("checked above");
        if g.shape() != params.tensor(i).shape() {
            return Err(Error::Contract(format!("gradient shape mismatch for '{}'", params.name(i))));
        }
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        let theta = params.tensor_mut(i).data_mut();
        for (((th, m), v), &gk) in theta.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *m = b1 * *m + ob1 * gk;
            *v = b2 * *v + ob2 * gk * gk;
            *th -= step_size * *m / ((*v * inv_c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// What one SAM step observed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamOutcome {
    /// Loss at the unperturbed parameters.
    pub loss: f64,
    /// Global L2 norm of the first gradient.
    pub grad_norm: f64,
    /// L2 norm of the applied perturbation; zero when skipped.
    pub perturbation_norm: f64,
}

/// Global L2 norm over all present gradients.
pub fn global_norm<F: Real>(grads: &Grads<F>) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Sharpness-aware step: gradient at `theta`, ascent to
/// `theta + rho * g / ||g||`, gradient there, restore `theta`, then Adam
/// with the second gradient. `rho == 0` or a zero gradient is a plain Adam
/// step.
pub fn sam_step<F, M, G>(
    model: &mut M,
    trainable: &[bool],
    mut loss_and_grads: G,
    rho: f64,
    state: &mut OptState<F>,
    lr: f64,
) -> Result<SamOutcome>
where
    F: Real,
    M: HasParams<F>,
    G: FnMut(&M) -> Result<(f64, Grads<F>)>,
{
    if rho < 0.0 || !rho.is_finite() {
        return Err(Error::Config(format!("rho must be finite and non-negative, got {rho}")));
    }
    let (loss, grads) = loss_and_grads(model)?;
    let grad_norm = global_norm(&grads);
    if rho == 0.0 || grad_norm == 0.0 {
        adam_step(model.params_mut(), &grads, trainable, state, lr)?;
        return Ok(SamOutcome {
            loss,
            grad_norm,
            perturbation_norm: 0.0,
        });
    }

    let scale = rho / grad_norm;
    let mut saved = Vec::new();
    let mut applied_sq = 0.0;
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        if !trainable[i] {
            continue;
        }
        let t = model.params_mut().tensor_mut(i);
        saved.push((i, t.clone()));
        for (th, &gk) in t.data_mut().iter_mut().zip(g.data()) {
            let e = F::from_f64_lossy(scale * gk.as_f64());
            applied_sq += e.as_f64() * e.as_f64();
            *th += e;
        }
    }
    let perturbed = loss_and_grads(model);
    for (i, t) in saved {
        *model.params_mut().tensor_mut(i) = t;
    }
    let (_, sharp_grads) = perturbed?;
    adam_step(model.params_mut(), &sharp_grads, trainable, state, lr)?;
    Ok(SamOutcome {
        loss,
        grad_norm,
        perturbation_norm: applied_sq.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> Params<f64> {
        Params::from_entries(vec![("w".into(), Tensor::from_f64(&[1], &[v]).unwrap())]).unwrap()
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = single(0.0);
        let mut st = OptState::new(&p, AdamConfig::default());
        let g = vec![Some(Tensor::from_f64(&[1], &[1.0]).unwrap())];
        adam_step(&mut p, &g, &[true], &mut st, 0.1).unwrap();
        // m_hat = v_hat = 1 -> update = lr * 1 / (1 + eps)
        let expect = -0.1 / (1.0 + 1e-8);
        assert!((p.tensor(0).data()[0] - expect).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(0.7);
        let mut st = OptState::new(&p, AdamConfig::default());
        let g = vec![Some(Tensor::zeros(&[1]))];
        for _ in 0..3 {
            adam_step(&mut p, &g, &[true], &mut st, 0.1).unwrap();
        }
        assert_eq!(p.tensor(0).data()[0], 0.7);
    }

    #[test]
    fn missing_gradient_names_tensor() {
        let mut p = single(0.0);
        let mut st = OptState::new(&p, AdamConfig::default());
        let err = adam_step(&mut p, &vec![None], &[true], &mut st, 0.1).unwrap_err();
        assert!(err.to_string().contains("'w'"));
        adam_step(&mut p, &vec![None], &[false], &mut st, 0.1).unwrap();
    }

    #[test]
    fn perturbation_has_radius_rho() {
        // f(w) = (w0^2 + w1^2) / 2 at (1.2, 1.6): gradient norm 2.
        let mut p = Params::from_entries(vec![("w".into(), Tensor::from_f64(&[2], &[1.2, 1.6]).unwrap())]).unwrap();
        let mut st = OptState::new(&p, AdamConfig::default());
        let out = sam_step(
            &mut p,
            &[true],
            |p: &Params<f64>| {
                let w = p.tensor(0);
                Ok((0.5 * w.sq_norm(), vec![Some(w.clone())]))
            },
            0.5,
            &mut st,
            0.0,
        )
        .unwrap();
        assert!((out.grad_norm - 2.0).abs() < 1e-12);
        assert!((out.perturbation_norm - 0.5).abs() < 1e-12);
        // lr 0: parameters restored exactly.
        assert_eq!(p.tensor(0).data(), &[1.2, 1.6]);
    }
}
