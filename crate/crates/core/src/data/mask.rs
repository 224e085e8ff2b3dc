use factr_autodiff::{Real, Tensor};
use rand::Rng;

use crate::error::{Error, Result};

/// Result of [`mask_patches`].
#[derive(Debug, Clone)]
pub struct MaskedInputs<F> {
    /// Inputs with masked patches set to zero, `[B, C, L]`.
    pub inputs: Tensor<F>,
    /// `true` where a patch was masked, `[B, C, N]` flattened.
    pub mask: Vec<bool>,
    pub patches: usize,
}

impl<F: Real> MaskedInputs<F> {
    /// Per-step weights `[B, C, L]`: one inside masked patches, zero elsewhere.
    pub fn step_weights(&self, patch_len: usize) -> Tensor<F> {
        let data = self
            .mask
            .iter()
            .flat_map(|&m| std::iter::repeat_n(if m { F::one() } else { F::zero() }, patch_len))
            .collect();
        Tensor::new(self.inputs.shape(), data).expect("mask covers inputs")
    }
}

/// Zeroes exactly `round(ratio * N)` randomly chosen non-overlapping patches
/// in every (batch, channel) row.
pub fn mask_patches<F: Real, R: Rng + ?Sized>(
    inputs: &Tensor<F>,
    patch_len: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskedInputs<F>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio must lie in (0, 1), got {ratio}")));
    }
    let shape = inputs.shape();
    if shape.len() != 3 || patch_len == 0 || !shape[2].is_multiple_of(patch_len) {
        return Err(Error::Config(format!(
            "inputs {shape:?} cannot be cut into patches of length {patch_len}"
        )));
    }
    let (rows, l) = (shape[0] * shape[1], shape[2]);
    let n = l / patch_len;
    let count = (ratio * n as f64).round() as usize;
    let mut data = inputs.data().to_vec();
    let mut mask = vec![false; rows * n];
    for row in 0..rows {
        for p in rand::seq::index::sample(rng, n, count) {
            mask[row * n + p] = true;
            let start = row * l + p * patch_len;
            data[start..start + patch_len].fill(F::zero());
        }
    }
    Ok(MaskedInputs {
        inputs: Tensor::new(shape, data)?,
        mask,
        patches: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ones(b: usize, c: usize, l: usize) -> Tensor<f64> {
        Tensor::full(&[b, c, l], 1.0)
    }

    #[test]
    fn masks_exact_count_per_row() {
        let x = ones(2, 3, 512);
        let m = mask_patches(&x, 32, 0.45, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.patches, 16);
        for row in m.mask.chunks(16) {
            assert_eq!(row.iter().filter(|&&f| f).count(), 7);
        }
        let zeros = m.inputs.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 6 * 7 * 32);
        let w = m.step_weights(32);
        assert_eq!(w.sum(), (6 * 7 * 32) as f64);
    }

    #[test]
    fn tiny_ratio_masks_nothing() {
        let x = ones(1, 1, 512);
        let m = mask_patches(&x, 32, 0.01, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.inputs, x);
    }

    #[test]
    fn ratio_bounds() {
        let x = ones(1, 1, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(mask_patches(&x, 8, 0.0, &mut rng).is_err());
        assert!(mask_patches(&x, 8, 1.0, &mut rng).is_err());
        assert!(mask_patches(&x, 7, 0.5, &mut rng).is_err());
    }
}
