//! Loss functions and their gradients.

use crate::error::{Error, Result};
use crate::layers::softmax;
use crate::tensor::Tensor;

/// Probabilities are clipped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-12;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn rows(t: &Tensor) -> usize {
    if t.rank() >= 2 {
        t.shape()[0]
    } else {
        1
    }
}

/// `-Σ target·ln(probs)` for one sample (`[n]`), or the mean over the rows
/// of a batch (`[N, n]`).
pub fn categorical_crossentropy(probs: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape(probs, target, "cross-entropy")?;
    let total: f64 = probs
        .data()
        .iter()
        .zip(target.data())
        .filter(|(_, &t)| t != 0.0)
        .map(|(&p, &t)| -t * p.clamp(EPS, 1.0 - EPS).ln())
        .sum();
    Ok(total / rows(probs) as f64)
}

/// Gradient of cross-entropy with respect to the softmax input, per sample:
/// `softmax(logits) - target`.
pub fn softmax_ce_grad(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(logits, target, "softmax cross-entropy")?;
    softmax(logits)?.sub(target)
}

/// Mean squared error over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b, "mse")?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

/// Gradient of [`mse`] with respect to `a`.
pub fn mse_grad(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mse")?;
    let scale = 2.0 / a.len() as f64;
    Ok(a.sub(b)?.scale(scale))
}

/// Binary cross-entropy summed over the elements of each sample and
/// averaged over the rows of a batch.
pub fn binary_crossentropy(recon: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape(recon, target, "binary cross-entropy")?;
    let total: f64 = recon
        .data()
        .iter()
        .zip(target.data())
        .map(|(&r, &t)| {
            let r = r.clamp(EPS, 1.0 - EPS);
            -(t * r.ln() + (1.0 - t) * (1.0 - r).ln())
        })
        .sum();
    Ok(total / rows(recon) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn one_hot(n: usize, k: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n]);
        t.data_mut()[k] = 1.0;
        t
    }

    #[test]
    fn crossentropy_cases() {
        assert_eq!(
            categorical_crossentropy(&one_hot(10, 3), &one_hot(10, 3)).unwrap(),
            -(1.0 - EPS).ln()
        );
        assert!(categorical_crossentropy(&one_hot(10, 3), &one_hot(10, 3)).unwrap() < 1e-11);
        let uniform = Tensor::full(&[10], 0.1);
        let l = categorical_crossentropy(&uniform, &one_hot(10, 7)).unwrap();
        assert!((l - std::f64::consts::LN_10).abs() < 1e-12);
        let half = Tensor::vector(&[0.5, 0.25, 0.25]);
        let l = categorical_crossentropy(&half, &one_hot(3, 0)).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(categorical_crossentropy(&half, &one_hot(4, 0)).is_err());
    }

    #[test]
    fn crossentropy_clips_zero_probability() {
        let l = categorical_crossentropy(&Tensor::vector(&[0.0, 1.0]), &one_hot(2, 0)).unwrap();
        assert!((l - (-(EPS.ln()))).abs() < 1e-9);
    }

    #[test]
    fn crossentropy_batch_is_mean() {
        let probs = Tensor::matrix(&[[0.5, 0.5], [1.0, 0.0]]);
        let target = Tensor::matrix(&[[1.0, 0.0], [1.0, 0.0]]);
        let l = categorical_crossentropy(&probs, &target).unwrap();
        assert!((l - std::f64::consts::LN_2 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_grad_cases() {
        let g = softmax_ce_grad(&Tensor::vector(&[0.3, 0.3]), &one_hot(2, 0)).unwrap();
        assert_eq!(g.data(), &[-0.5, 0.5]);

        let mut rng = SeededRng::new(1);
        for _ in 0..50 {
            let logits =
                Tensor::new(vec![7], (0..7).map(|_| rng.uniform(-3.0, 3.0)).collect()).unwrap();
            let g = softmax_ce_grad(&logits, &one_hot(7, rng.below(7) as usize)).unwrap();
            assert!(g.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn mse_cases() {
        let a = Tensor::vector(&[0.0, 0.0]);
        let b = Tensor::vector(&[1.0, 1.0]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
        assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        assert!(mse(&a, &Tensor::vector(&[1.0])).is_err());
        assert_eq!(mse_grad(&b, &a).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn bce_half_everywhere() {
        let r = Tensor::full(&[784], 0.5);
        let l = binary_crossentropy(&r, &r).unwrap();
        assert!((l - 784.0 * std::f64::consts::LN_2).abs() < 1e-9);
        assert!((l - 543.43).abs() < 0.01);
    }
}
