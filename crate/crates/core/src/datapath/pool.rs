use half::f16;

use crate::tensor::Tensor;

use super::DatapathError;

/// Stride-2 max pooling with windows clipped at the border. Output is
/// `ceil(H/2) x ceil(W/2)`; window `i` starts at `2i - (k-1)/2`.
pub fn max_pool(input: &Tensor<f16>, kernel: usize) -> Result<Tensor<f16>, DatapathError> {
    if !matches!(kernel, 2 | 3) {
        return Err(DatapathError::Shape(format!("max pool supports 2x2 and 3x3 windows, got {kernel}")));
    }
    let (c, h, w) = input.shape();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let off = (kernel as isize - 1) / 2;
    let window = |i: usize, n: usize| {
        let start = 2 * i as isize - off;
        (start.max(0) as usize)..((start + kernel as isize).min(n as isize) as usize)
    };
    Ok(Tensor::from_fn(c, oh, ow, |ch, oy, ox| {
        let mut best: Option<f16> = None;
        for y in window(oy, h) {
            for x in window(ox, w) {
                let v = input.at(ch, y, x);
                best = Some(match best {
                    None => v,
                    // +0 wins over -0 so the result does not depend on scan order
                    Some(b) if v > b || (v == b && b.is_sign_negative() && !v.is_sign_negative()) => v,
                    Some(b) => b,
                });
            }
        }
        best.expect("windows are never empty")
    }))
}
