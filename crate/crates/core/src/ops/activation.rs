use crate::tensor::{Scalar, Tensor};

/// `x·sigmoid(x)`
pub fn silu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| v / (F::one() + (-v).exp()))
}

pub fn silu_backward<F: Scalar>(x: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
    let d = x.map(|v| {
        let s = F::one() / (F::one() + (-v).exp());
        s * (F::one() + v * (F::one() - s))
    });
    d.mul(grad_out).expect("silu_backward shape")
}
