//! Shape-moving kernels: nearest upsampling, channel concatenation, and the
//! time/batch fusion used to run spiking steps through 2D layers.
//!
//! Fused tensors put time outermost: fused row `n·B + b` is time step `n` of sample `b`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn nchw<F: Scalar>(op: &'static str, t: &Tensor<F>) -> Result<[usize; 4]> {
    match t.shape() {
        &[n, c, h, w] => Ok([n, c, h, w]),
        s => Err(Error::shape(op, format!("expected [N,C,H,W], got {s:?}"))),
    }
}

pub fn upsample_nearest2x<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let [n, c, h, w] = nchw("upsample_nearest2x", x)?;
    let (oh, ow) = (2 * h, 2 * w);
    let src = x.data();
    let mut out = vec![F::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                d[y * ow + xx] = s[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

pub fn upsample_nearest2x_backward<F: Scalar>(grad_out: &Tensor<F>) -> Result<Tensor<F>> {
    let [n, c, oh, ow] = nchw("upsample_nearest2x_backward", grad_out)?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::shape("upsample_nearest2x_backward", format!("odd spatial size {oh}x{ow}")));
    }
    let (h, w) = (oh / 2, ow / 2);
    let g = grad_out.data();
    let mut out = vec![F::zero(); n * c * h * w];
    for plane in 0..n * c {
        let s = &g[plane * oh * ow..(plane + 1) * oh * ow];
        let d = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let v = &mut d[(y / 2) * w + xx / 2];
                *v = *v + s[y * ow + xx];
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], out)
}

/// Concatenates `a[N,Ca,H,W]` and `b[N,Cb,H,W]` along channels.
pub fn concat_channels<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let [n, ca, h, w] = nchw("concat_channels", a)?;
    let [nb, cb, hb, wb] = nchw("concat_channels", b)?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!("batch/spatial dims differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (la, lb) = (ca * h * w, cb * h * w);
    let mut out = Vec::with_capacity(n * (la + lb));
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * la..(i + 1) * la]);
        out.extend_from_slice(&b.data()[i * lb..(i + 1) * lb]);
    }
    Tensor::from_vec(&[n, ca + cb, h, w], out)
}

/// Inverse of [`concat_channels`]: splits off the first `ca` channels.
pub fn split_channels<F: Scalar>(x: &Tensor<F>, ca: usize) -> Result<(Tensor<F>, Tensor<F>)> {
    let [n, c, h, w] = nchw("split_channels", x)?;
    if ca > c {
        return Err(Error::shape("split_channels", format!("cannot split {ca} of {c} channels")));
    }
    let cb = c - ca;
    let (la, lb) = (ca * h * w, cb * h * w);
    let mut a = Vec::with_capacity(n * la);
    let mut b = Vec::with_capacity(n * lb);
    for row in x.data().chunks(la + lb) {
        a.extend_from_slice(&row[..la]);
        b.extend_from_slice(&row[la..]);
    }
    Ok((Tensor::from_vec(&[n, ca, h, w], a)?, Tensor::from_vec(&[n, cb, h, w], b)?))
}

/// Repeats `x[B,...]` over `steps` time steps into `[steps·B, ...]`.
pub fn replicate_time<F: Scalar>(x: &Tensor<F>, steps: usize) -> Result<Tensor<F>> {
    if steps == 0 || x.ndim() == 0 {
        return Err(Error::InvalidArgument("replicate_time needs steps >= 1".into()));
    }
    let mut shape = x.shape().to_vec();
    shape[0] *= steps;
    Tensor::from_vec(&shape, x.data().repeat(steps))
}

/// Adjoint of [`replicate_time`]: sums the fused rows of each sample.
pub fn sum_time<F: Scalar>(x: &Tensor<F>, steps: usize) -> Result<Tensor<F>> {
    let fused = x.dim(0);
    if steps == 0 || fused % steps != 0 {
        return Err(Error::shape("sum_time", format!("leading dim {fused} not divisible by {steps}")));
    }
    let per_step = x.len() / steps;
    let mut out = vec![F::zero(); per_step];
    for chunk in x.data().chunks(per_step) {
        out.iter_mut().zip(chunk).for_each(|(o, &v)| *o = *o + v);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = fused / steps;
    Tensor::from_vec(&shape, out)
}

/// Mean over the time axis of a fused tensor: `[steps·B, ...] → [B, ...]`.
pub fn mean_time<F: Scalar>(x: &Tensor<F>, steps: usize) -> Result<Tensor<F>> {
    Ok(sum_time(x, steps)?.scale(F::one() / F::of(steps as f64)))
}

pub fn mean_time_backward<F: Scalar>(grad_out: &Tensor<F>, steps: usize) -> Result<Tensor<F>> {
    replicate_time(&grad_out.scale(F::one() / F::of(steps as f64)), steps)
}

/// Adds a per-sample, per-channel bias `bias[B,C]` to fused `x[steps·B,C,H,W]`.
pub fn add_channel_bias_fused<F: Scalar>(x: &Tensor<F>, bias: &Tensor<F>, steps: usize) -> Result<Tensor<F>> {
    let [fused, c, h, w] = nchw("add_channel_bias_fused", x)?;
    if bias.ndim() != 2 || bias.dim(1) != c || bias.dim(0) * steps != fused {
        return Err(Error::shape(
            "add_channel_bias_fused",
            format!("bias {:?} incompatible with {:?} at {steps} steps", bias.shape(), x.shape()),
        ));
    }
    let batch = bias.dim(0);
    let hw = h * w;
    let mut out = x.data().to_vec();
    for row in 0..fused {
        let b = row % batch;
        for ch in 0..c {
            let v = bias.data()[b * c + ch];
            for o in &mut out[(row * c + ch) * hw..(row * c + ch + 1) * hw] {
                *o = *o + v;
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Gradient of [`add_channel_bias_fused`] with respect to the bias.
pub fn channel_bias_fused_backward<F: Scalar>(grad_out: &Tensor<F>, batch: usize) -> Result<Tensor<F>> {
    let [fused, c, h, w] = nchw("channel_bias_fused_backward", grad_out)?;
    if batch == 0 || fused % batch != 0 {
        return Err(Error::shape("channel_bias_fused_backward", format!("{fused} rows not divisible by batch {batch}")));
    }
    let hw = h * w;
    let mut out = vec![F::zero(); batch * c];
    for row in 0..fused {
        let b = row % batch;
        for ch in 0..c {
            let s: F = grad_out.data()[(row * c + ch) * hw..(row * c + ch + 1) * hw].iter().copied().sum();
            out[b * c + ch] = out[b * c + ch] + s;
        }
    }
    Tensor::from_vec(&[batch, c], out)
}
