use half::f16;

use crate::bfp::{half_from_f64, ExtAccum};
use crate::tensor::Tensor;

use super::{relu_half, DatapathError};

/// `1 / (1 + e^-x)` in FP32, rounded to binary16.
pub fn sigmoid_scalar(x: f16) -> f16 {
    let v = 1.0f32 / (1.0 + libm::expf(-x.to_f32()));
    half_from_f64(v as f64).0
}

pub fn sigmoid(input: &Tensor<f16>) -> Tensor<f16> {
    input.map(sigmoid_scalar)
}

pub fn relu(input: &Tensor<f16>) -> Tensor<f16> {
    input.map(|v| relu_half(v, true))
}

/// Elementwise add through the extended accumulator, then truncation.
pub fn residual_add(a: &Tensor<f16>, b: &Tensor<f16>, relu_on: bool) -> Result<Tensor<f16>, DatapathError> {
    if a.shape() != b.shape() {
        return Err(DatapathError::Shape(format!("residual add of {:?} and {:?}", a.shape(), b.shape())));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| relu_half(ExtAccum::widen(x).add(ExtAccum::widen(y)).truncate_to_half(), relu_on))
        .collect();
    let (c, h, w) = a.shape();
    Ok(Tensor::from_vec(c, h, w, data).expect("shape"))
}
