//! Float-mode kernels: the same Winograd and direct datapath structure with
//! no quantization, instantiated at `f32` or `f64`.

use crate::ir::ConvParams;
use crate::scalar::Real;
use crate::tensor::Tensor;

use super::winograd::{filter_transform, input_transform, output_transform, TILE_MULTS};
use super::{DatapathError, OpCounters};

/// Convolution parameters converted to the working scalar.
#[derive(Clone, Debug)]
pub struct FloatConv<T> {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kernel: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> FloatConv<T> {
    pub fn from_params(p: &ConvParams) -> Self {
        Self {
            out_ch: p.out_ch,
            in_ch: p.in_ch,
            kernel: p.kernel,
            weight: p.weight.iter().map(|&w| T::lit(w as f64)).collect(),
            bias: p.bias.iter().map(|&b| T::lit(b as f64)).collect(),
        }
    }

    fn taps(&self, o: usize, c: usize) -> &[T] {
        let k2 = self.kernel * self.kernel;
        &self.weight[(o * self.in_ch + c) * k2..(o * self.in_ch + c + 1) * k2]
    }
}

fn relu<T: Real>(v: T, on: bool) -> T {
    if on && !(v > T::zero()) {
        T::zero()
    } else {
        v
    }
}

/// Stride-1 3x3 convolution (zero padding 1) through 4x4 Winograd tiles.
pub fn conv_winograd_float<T: Real>(
    input: &Tensor<T>,
    w: &FloatConv<T>,
    relu_on: bool,
    counters: &mut OpCounters,
) -> Result<Tensor<T>, DatapathError> {
    if w.kernel != 3 || w.in_ch != input.channels() {
        return Err(DatapathError::Shape(format!(
            "winograd needs a 3x3 kernel over {} channels, got {}x{} over {}",
            input.channels(),
            w.kernel,
            w.kernel,
            w.in_ch
        )));
    }
    let (c_in, h, wd) = input.shape();
    let (tiles_y, tiles_x) = (h.div_ceil(4), wd.div_ceil(4));
    let u: Vec<[T; 36]> = (0..w.out_ch * c_in)
        .map(|i| filter_transform(w.taps(i / c_in, i % c_in)))
        .collect();
    let mut out = Tensor::zeros(w.out_ch, h, wd);
    let mut v = vec![[T::zero(); 36]; c_in];
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            for (c, vc) in v.iter_mut().enumerate() {
                let x: [T; 36] = std::array::from_fn(|i| {
                    let y = (ty * 4 + i / 6) as isize - 1;
                    let xx = (tx * 4 + i % 6) as isize - 1;
                    if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                        T::zero()
                    } else {
                        input.at(c, y as usize, xx as usize)
                    }
                });
                *vc = input_transform(&x, false, counters);
            }
            for o in 0..w.out_ch {
                let mut m = [T::zero(); 36];
                for (c, vc) in v.iter().enumerate() {
                    let uc = &u[o * c_in + c];
                    for p in 0..36 {
                        m[p] += uc[p] * vc[p];
                    }
                    counters.mac_ops += TILE_MULTS;
                    counters.transform_mults += TILE_MULTS;
                }
                let y = output_transform(&m);
                for i in 0..4 {
                    for j in 0..4 {
                        let (oy, ox) = (ty * 4 + i, tx * 4 + j);
                        if oy < h && ox < wd {
                            out.set(o, oy, ox, relu(y[i * 4 + j] + w.bias[o], relu_on));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Point-wise MAC convolution, zero padding `k / 2`, output `ceil(H / s)`.
pub fn conv_direct_float<T: Real>(
    input: &Tensor<T>,
    w: &FloatConv<T>,
    stride: usize,
    relu_on: bool,
    counters: &mut OpCounters,
) -> Result<Tensor<T>, DatapathError> {
    if w.in_ch != input.channels() || !matches!(stride, 1 | 2) {
        return Err(DatapathError::Shape(format!(
            "direct conv over {} channels with stride {stride}, input has {}",
            w.in_ch,
            input.channels()
        )));
    }
    let (c_in, h, wd) = input.shape();
    let (k, pad) = (w.kernel, w.kernel / 2);
    let (oh, ow) = (h.div_ceil(stride), wd.div_ceil(stride));
    let mut out = Tensor::zeros(w.out_ch, oh, ow);
    for o in 0..w.out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for c in 0..c_in {
                    let taps = w.taps(o, c);
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += taps[ky * k + kx] * input.at(c, iy as usize, ix as usize);
                        }
                    }
                }
                counters.mac_ops += (k * k * c_in) as u64;
                out.set(o, oy, ox, relu(acc + w.bias[o], relu_on));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn winograd_and_direct_agree_in_f64() {
        let input = Tensor::from_fn(3, 9, 7, |c, y, x| ((c * 31 + y * 7 + x * 3) % 13) as f64 * 0.25 - 1.5);
        let p = ConvParams::new(
            2,
            3,
            3,
            (0..54).map(|i| ((i * 17) % 11) as f32 * 0.125 - 0.6).collect(),
            vec![0.5, -0.25],
        )
        .unwrap();
        let w = FloatConv::<f64>::from_params(&p);
        let mut cw = OpCounters::default();
        let mut cd = OpCounters::default();
        let a = conv_winograd_float(&input, &w, false, &mut cw).unwrap();
        let b = conv_direct_float(&input, &w, 1, false, &mut cd).unwrap();
        let scale = b.data().iter().fold(0f64, |m, v| m.max(v.abs()));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-12 * scale);
        }
        // 3x2 tiles of 4x4 outputs, 3 inputs, 2 outputs
        assert_eq!(cw.transform_mults, 36 * 6 * 6);
        assert_eq!(cd.mac_ops, 9 * 9 * 7 * 6);
    }

    #[test]
    fn stride_two_shape() {
        let input = Tensor::<f32>::zeros(3, 9, 8);
        let p = ConvParams::new(4, 3, 7, vec![0.0; 4 * 3 * 49], vec![0.0; 4]).unwrap();
        let out = conv_direct_float(&input, &FloatConv::from_params(&p), 2, true, &mut OpCounters::default()).unwrap();
        assert_eq!(out.shape(), (4, 5, 4));
    }
}
