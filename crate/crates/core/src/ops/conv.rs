//! 2D cross-correlation via im2col.

use crate::error::{Error, Result};
use crate::ops::gemm::{gemm_nn, gemm_tn, transpose};
use crate::parallel::map_indices;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::shape("conv2d", format!("input must be [N,C,H,W], got {input:?}")));
        }
        if weight.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("weight must be [Cout,Cin,kH,kW], got {weight:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let [batch, in_channels, in_h, in_w] = [input[0], input[1], input[2], input[3]];
        let [out_channels, w_cin, kernel_h, kernel_w] = [weight[0], weight[1], weight[2], weight[3]];
        if w_cin != in_channels {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {in_channels} != weight input channels {w_cin}"),
            ));
        }
        if in_h + 2 * pad < kernel_h {
            return Err(Error::shape(
                "conv2d",
                format!("padded height {} smaller than kernel height {kernel_h}", in_h + 2 * pad),
            ));
        }
        if in_w + 2 * pad < kernel_w {
            return Err(Error::shape(
                "conv2d",
                format!("padded width {} smaller than kernel width {kernel_w}", in_w + 2 * pad),
            ));
        }
        Ok(Self {
            batch,
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kernel_h) / stride + 1,
            out_w: (in_w + 2 * pad - kernel_w) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }

    /// Multiply-accumulates per image.
    pub fn macs_per_image(&self) -> u64 {
        (self.out_channels * self.patch_len() * self.out_pixels()) as u64
    }
}

fn im2col<F: Scalar>(x: &[F], g: &ConvGeometry) -> Vec<F> {
    let p = g.out_pixels();
    let mut cols = vec![F::zero(); g.patch_len() * p];
    for c in 0..g.in_channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[oy * g.out_w + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Scalar>(cols: &[F], g: &ConvGeometry, dx: &mut [F]) {
    let p = g.out_pixels();
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            let d = &mut plane[iy as usize * g.in_w + ix as usize];
                            *d = *d + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `input[N,Cin,H,W]` with `weight[Cout,Cin,kH,kW]`, plus optional per-channel bias.
pub fn conv2d<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.out_channels] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} != [{}]", b.shape(), g.out_channels),
            ));
        }
    }
    let (x, w) = (input.data(), weight.data());
    let (k, p) = (g.patch_len(), g.out_pixels());
    let per_image = map_indices(g.batch, |n| {
        let xn = &x[n * g.in_len()..(n + 1) * g.in_len()];
        let mut out = vec![F::zero(); g.out_channels * p];
        if let Some(b) = bias {
            for (o, chunk) in out.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[o]);
            }
        }
        if g.is_pointwise() {
            gemm_nn(w, xn, &mut out, g.out_channels, k, p);
        } else {
            let cols = im2col(xn, &g);
            gemm_nn(w, &cols, &mut out, g.out_channels, k, p);
        }
        out
    });
    Tensor::from_vec(&[g.batch, g.out_channels, g.out_h, g.out_w], per_image.concat())
}

pub struct Conv2dGrads<F: Scalar> {
    pub input: Tensor<F>,
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> Result<Conv2dGrads<F>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, pad)?;
    let expect = [g.batch, g.out_channels, g.out_h, g.out_w];
    if grad_out.shape() != expect {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad_out shape {:?} != {expect:?}", grad_out.shape()),
        ));
    }
    let (x, w, gy) = (input.data(), weight.data(), grad_out.data());
    let (k, p) = (g.patch_len(), g.out_pixels());
    let out_len = g.out_channels * p;
    let per_image = map_indices(g.batch, |n| {
        let xn = &x[n * g.in_len()..(n + 1) * g.in_len()];
        let gyn = &gy[n * out_len..(n + 1) * out_len];
        let mut gw = vec![F::zero(); g.out_channels * k];
        let mut dx = vec![F::zero(); g.in_len()];
        let gb: Vec<F> = gyn.chunks(p).map(|c| c.iter().copied().sum()).collect();
        if g.is_pointwise() {
            let xt = transpose(xn, k, p);
            gemm_nn(gyn, &xt, &mut gw, g.out_channels, p, k);
            gemm_tn(w, gyn, &mut dx, g.out_channels, k, p);
        } else {
            let cols = im2col(xn, &g);
            let cols_t = transpose(&cols, k, p);
            gemm_nn(gyn, &cols_t, &mut gw, g.out_channels, p, k);
            let mut dcols = vec![F::zero(); k * p];
            gemm_tn(w, gyn, &mut dcols, g.out_channels, k, p);
            col2im(&dcols, &g, &mut dx);
        }
        (dx, gw, gb)
    });
    let mut gw_total = vec![F::zero(); g.out_channels * k];
    let mut gb_total = vec![F::zero(); g.out_channels];
    let mut dx_total = Vec::with_capacity(g.batch * g.in_len());
    for (dx, gw, gb) in per_image {
        dx_total.extend(dx);
        gw_total.iter_mut().zip(&gw).for_each(|(a, &b)| *a = *a + b);
        gb_total.iter_mut().zip(&gb).for_each(|(a, &b)| *a = *a + b);
    }
    Ok(Conv2dGrads {
        input: Tensor::from_vec(input.shape(), dx_total)?,
        weight: Tensor::from_vec(weight.shape(), gw_total)?,
        bias: Tensor::from_vec(&[g.out_channels], gb_total)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn diagonal_kernel_hand_value() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 2, 2], vec![1., 0., 0., 1.]).unwrap();
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn zero_kernel_gives_zero() {
        let x = Tensor::<f32>::from_vec(&[2, 2, 3, 3], (0..36).map(|v| v as f32).collect()).unwrap();
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), &[2, 3, 3, 3]);
    }

    #[test]
    fn stride_two_output_size() {
        let x = Tensor::<f32>::zeros(&[1, 1, 8, 8]);
        let w = Tensor::zeros(&[4, 1, 3, 3]);
        let y = conv2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 4]);
    }

    #[test]
    fn errors_name_the_dimension() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("channels"), "{err}");
        let w = Tensor::zeros(&[1, 2, 5, 3]);
        let err = conv2d(&x, &w, None, 1, 0).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
        let w = Tensor::zeros(&[1, 2, 3, 3]);
        let b = Tensor::zeros(&[2]);
        assert!(conv2d(&x, &w, Some(&b), 1, 1).is_err());
    }
}
