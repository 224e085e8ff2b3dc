use factr_autodiff::{Real, Tensor};

use crate::error::{Error, Result};

fn check<F: Real>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Contract(format!(
            "prediction shape {:?} differs from target shape {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn mse<F: Real>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<f64> {
    check(pred, target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p.as_f64() - t.as_f64()).powi(2))
        .sum();
    Ok(sum / pred.numel() as f64)
}

/// Mean absolute error over all elements.
pub fn mae<F: Real>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<f64> {
    check(pred, target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p.as_f64() - t.as_f64()).abs())
        .sum();
    Ok(sum / pred.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[v.len()], v).unwrap()
    }

    #[test]
    fn hand_examples() {
        assert_eq!(mse(&t(&[0.3, 1.0]), &t(&[0.3, 1.0])).unwrap(), 0.0);
        assert_eq!(mse(&t(&[0.0, 0.0]), &t(&[1.0, 1.0])).unwrap(), 1.0);
        assert_eq!(mae(&t(&[0.0, 0.0]), &t(&[1.0, 1.0])).unwrap(), 1.0);
        assert_eq!(mse(&t(&[0.0, 2.0]), &t(&[1.0, 1.0])).unwrap(), 1.0);
        assert_eq!(mae(&t(&[0.0, 2.0]), &t(&[1.0, 1.0])).unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch() {
        assert!(mse(&t(&[0.0]), &t(&[0.0, 1.0])).is_err());
    }
}
