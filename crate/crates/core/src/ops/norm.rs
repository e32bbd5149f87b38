//! Batch normalization over `[N, C, H, W]`, statistics per channel across N·H·W.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;

/// Values saved by the training-mode forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<F: Scalar> {
    pub normalized: Tensor<F>,
    pub inv_std: Vec<F>,
    pub mean: Vec<F>,
    /// Biased (population) variance.
    pub var: Vec<F>,
}

fn check<F: Scalar>(input: &Tensor<F>, gamma: &Tensor<F>, beta: &Tensor<F>) -> Result<usize> {
    if input.ndim() != 4 {
        return Err(Error::shape("batch_norm", format!("input must be [N,C,H,W], got {:?}", input.shape())));
    }
    let c = input.dim(1);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batch_norm",
            format!("gamma {:?} / beta {:?} do not match channels {c}", gamma.shape(), beta.shape()),
        ));
    }
    Ok(c)
}

/// Training-mode normalization using batch statistics.
pub fn batch_norm_train<F: Scalar>(
    input: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
) -> Result<(Tensor<F>, BatchNormCache<F>)> {
    let c = check(input, gamma, beta)?;
    let (n, hw) = (input.dim(0), input.dim(2) * input.dim(3));
    let m = n * hw;
    if m < 2 {
        return Err(Error::shape("batch_norm", format!("need at least 2 values per channel, got {m}")));
    }
    let x = input.data();
    let eps = F::of(BN_EPS);
    let mut mean = vec![F::zero(); c];
    let mut var = vec![F::zero(); c];
    for ch in 0..c {
        let mut s = F::zero();
        for b in 0..n {
            s = s + x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<F>();
        }
        let mu = s / F::of(m as f64);
        let mut v = F::zero();
        for b in 0..n {
            for &xv in &x[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                v = v + (xv - mu) * (xv - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = v / F::of(m as f64);
    }
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![F::zero(); x.len()];
    let mut y = vec![F::zero(); x.len()];
    let (gm, bt) = (gamma.data(), beta.data());
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for i in range {
                let h = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = gm[ch] * h + bt[ch];
            }
        }
    }
    let cache = BatchNormCache {
        normalized: Tensor::from_vec(input.shape(), xhat)?,
        inv_std,
        mean,
        var,
    };
    Ok((Tensor::from_vec(input.shape(), y)?, cache))
}

/// Inference-mode normalization using running statistics.
pub fn batch_norm_eval<F: Scalar>(
    input: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    running_mean: &Tensor<F>,
    running_var: &Tensor<F>,
) -> Result<Tensor<F>> {
    let c = check(input, gamma, beta)?;
    let (n, hw) = (input.dim(0), input.dim(2) * input.dim(3));
    let eps = F::of(BN_EPS);
    let scale: Vec<F> = (0..c)
        .map(|ch| gamma.data()[ch] / (running_var.data()[ch] + eps).sqrt())
        .collect();
    let shift: Vec<F> = (0..c)
        .map(|ch| beta.data()[ch] - running_mean.data()[ch] * scale[ch])
        .collect();
    let mut y = input.data().to_vec();
    for b in 0..n {
        for ch in 0..c {
            for v in &mut y[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                *v = *v * scale[ch] + shift[ch];
            }
        }
    }
    Tensor::from_vec(input.shape(), y)
}

pub struct BatchNormGrads<F: Scalar> {
    pub input: Tensor<F>,
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
}

/// Full batch-norm gradient, including the paths through the batch mean and variance.
pub fn batch_norm_backward<F: Scalar>(
    grad_out: &Tensor<F>,
    cache: &BatchNormCache<F>,
    gamma: &Tensor<F>,
) -> Result<BatchNormGrads<F>> {
    grad_out.check_same_shape("batch_norm_backward", &cache.normalized)?;
    let shape = grad_out.shape();
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = F::of((n * hw) as f64);
    let (gy, xhat) = (grad_out.data(), cache.normalized.data());
    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                dbeta[ch] = dbeta[ch] + gy[i];
                dgamma[ch] = dgamma[ch] + gy[i] * xhat[i];
            }
        }
    }
    let mut dx = vec![F::zero(); gy.len()];
    for b in 0..n {
        for ch in 0..c {
            let k = gamma.data()[ch] * cache.inv_std[ch] / m;
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                dx[i] = k * (m * gy[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::from_vec(shape, dx)?,
        gamma: Tensor::from_vec(&[c], dgamma)?,
        beta: Tensor::from_vec(&[c], dbeta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn channel_stats(t: &Tensor<f64>, ch: usize) -> (f64, f64) {
        let s = t.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| t.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        (mean, var)
    }

    #[test]
    fn train_mode_standardizes() {
        let mut rng = RngStream::new(3, 0);
        let x = Tensor::<f64>::randn(&[4, 3, 5, 5], &mut rng).map(|v| 7.0 * v - 2.0);
        let (y, _) = batch_norm_train(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3])).unwrap();
        for ch in 0..3 {
            let (m, v) = channel_stats(&y, ch);
            assert!(m.abs() < 1e-5, "mean {m}");
            assert!((v - 1.0).abs() < 1e-4, "var {v}");
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::<f64>::full(&[2, 1, 3, 3], 4.2);
        let (y, _) = batch_norm_train(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_on_standardized() {
        let mut rng = RngStream::new(4, 0);
        let x = Tensor::<f64>::randn(&[8, 2, 4, 4], &mut rng);
        let (y, _) = batch_norm_train(&x, &Tensor::full(&[2], 2.0), &Tensor::full(&[2], 3.0)).unwrap();
        for ch in 0..2 {
            let (m, v) = channel_stats(&y, ch);
            assert!((m - 3.0).abs() < 1e-5);
            assert!((v.sqrt() - 2.0).abs() < 1e-4);
        }
    }

    #[test]
    fn rejects_single_value_batches() {
        let x = Tensor::<f32>::zeros(&[1, 2, 1, 1]);
        assert!(batch_norm_train(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2])).is_err());
    }
}
