use crate::error::{Error, Result};
use crate::ops::gemm::{gemm_nn, gemm_tn, transpose};
use crate::tensor::{Scalar, Tensor};

fn check<F: Scalar>(input: &Tensor<F>, weight: &Tensor<F>) -> Result<(usize, usize, usize)> {
    if input.ndim() != 2 || weight.ndim() != 2 {
        return Err(Error::shape(
            "linear",
            format!("expected input [N,in] and weight [out,in], got {:?} and {:?}", input.shape(), weight.shape()),
        ));
    }
    let (n, fan_in, fan_out) = (input.dim(0), input.dim(1), weight.dim(0));
    if weight.dim(1) != fan_in {
        return Err(Error::shape(
            "linear",
            format!("input features {fan_in} != weight input features {}", weight.dim(1)),
        ));
    }
    Ok((n, fan_in, fan_out))
}

/// `y = x·Wᵀ + b` for `x[N,in]`, `W[out,in]`, `b[out]`.
pub fn linear<F: Scalar>(input: &Tensor<F>, weight: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, fan_in, fan_out) = check(input, weight)?;
    if bias.shape() != [fan_out] {
        return Err(Error::shape("linear", format!("bias {:?} != [{fan_out}]", bias.shape())));
    }
    let wt = transpose(weight.data(), fan_out, fan_in);
    let mut y: Vec<F> = (0..n).flat_map(|_| bias.data().iter().copied()).collect();
    gemm_nn(input.data(), &wt, &mut y, n, fan_in, fan_out);
    Tensor::from_vec(&[n, fan_out], y)
}

pub struct LinearGrads<F: Scalar> {
    pub input: Tensor<F>,
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

pub fn linear_backward<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> Result<LinearGrads<F>> {
    let (n, fan_in, fan_out) = check(input, weight)?;
    if grad_out.shape() != [n, fan_out] {
        return Err(Error::shape("linear_backward", format!("grad_out {:?} != [{n},{fan_out}]", grad_out.shape())));
    }
    let gy = grad_out.data();
    let mut gw = vec![F::zero(); fan_out * fan_in];
    gemm_tn(gy, input.data(), &mut gw, n, fan_out, fan_in);
    let mut gx = vec![F::zero(); n * fan_in];
    gemm_nn(gy, weight.data(), &mut gx, n, fan_out, fan_in);
    let mut gb = vec![F::zero(); fan_out];
    for row in gy.chunks(fan_out) {
        gb.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
    }
    Ok(LinearGrads {
        input: Tensor::from_vec(&[n, fan_in], gx)?,
        weight: Tensor::from_vec(&[fan_out, fan_in], gw)?,
        bias: Tensor::from_vec(&[fan_out], gb)?,
    })
}
