//! 2x upsampling as zero insertion followed by a fixed kernel.
//!
//! Bilinear uses `(1,2,1; 2,4,2; 1,2,1) / 4`, nearest a 2x2 box of ones.
//! The zero-skip path visits only the taps that land on inserted samples of
//! the output's phase, a quarter of the naive tap count.

use half::f16;

use crate::bfp::half_from_f64;
use crate::tensor::Tensor;

use super::OpCounters;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    #[default]
    Bilinear,
}

const BILINEAR: [[f64; 3]; 3] = [[0.25, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 0.25]];

pub fn upsample2x(input: &Tensor<f16>, mode: UpsampleMode, zero_skip: bool, counters: &mut OpCounters) -> Tensor<f16> {
    let (c, h, w) = input.shape();
    // zero-inserted map: z[2i][2j] = x[i][j]
    let z = |ch: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y % 2 != 0 || x % 2 != 0 {
            return 0.0;
        }
        let (i, j) = ((y / 2) as usize, (x / 2) as usize);
        if i >= h || j >= w {
            0.0
        } else {
            input.at(ch, i, j).to_f64()
        }
    };
    let mut taps = 0u64;
    let out = Tensor::from_fn(c, 2 * h, 2 * w, |ch, y, x| {
        let (y, x) = (y as isize, x as isize);
        let mut s = 0.0;
        match (mode, zero_skip) {
            (UpsampleMode::Bilinear, false) => {
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        s += BILINEAR[(dy + 1) as usize][(dx + 1) as usize] * z(ch, y + dy, x + dx);
                        taps += 1;
                    }
                }
            }
            (UpsampleMode::Bilinear, true) => {
                let dys: &[isize] = if y % 2 == 0 { &[0] } else { &[-1, 1] };
                let dxs: &[isize] = if x % 2 == 0 { &[0] } else { &[-1, 1] };
                for &dy in dys {
                    for &dx in dxs {
                        s += BILINEAR[(dy + 1) as usize][(dx + 1) as usize] * z(ch, y + dy, x + dx);
                        taps += 1;
                    }
                }
            }
            (UpsampleMode::Nearest, false) => {
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += z(ch, y - dy, x - dx);
                        taps += 1;
                    }
                }
            }
            (UpsampleMode::Nearest, true) => {
                s += z(ch, y - y % 2, x - x % 2);
                taps += 1;
            }
        }
        // every product is exact and the sum of at most nine of them is
        // exact in f64, so both paths round the same value once
        half_from_f64(s).0
    });
    counters.mac_ops += taps;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor<f16> {
        Tensor::from_fn(c, h, w, |c, y, x| f16::from_f32(((c * 5 + y * 3 + x * 7) % 13) as f32 * 0.37 - 2.0))
    }

    #[test]
    fn nearest_replicates() {
        let input = Tensor::from_vec(1, 2, 2, [1.0f32, 2.0, 3.0, 4.0].map(f16::from_f32).to_vec()).unwrap();
        let out = upsample2x(&input, UpsampleMode::Nearest, false, &mut OpCounters::default());
        let expect = [1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0];
        assert_eq!(out.to_f32().data(), &expect);
    }

    #[test]
    fn bilinear_counts_on_8x8() {
        let input = ramp(1, 8, 8);
        let (mut naive, mut skip) = (OpCounters::default(), OpCounters::default());
        let a = upsample2x(&input, UpsampleMode::Bilinear, false, &mut naive);
        let b = upsample2x(&input, UpsampleMode::Bilinear, true, &mut skip);
        assert_eq!(naive.mac_ops, 2304);
        assert_eq!(skip.mac_ops, 576);
        assert_eq!(a, b);
    }

    #[test]
    fn phase_zero_is_the_input() {
        let input = ramp(2, 3, 5);
        let out = upsample2x(&input, UpsampleMode::Bilinear, true, &mut OpCounters::default());
        for c in 0..2 {
            for y in 0..3 {
                for x in 0..5 {
                    assert_eq!(out.at(c, 2 * y, 2 * x), input.at(c, y, x));
                }
            }
        }
    }

    #[test]
    fn commutes_with_transpose() {
        let input = ramp(1, 4, 7);
        let mut c = OpCounters::default();
        let a = upsample2x(&input, UpsampleMode::Bilinear, true, &mut c).transpose_hw();
        let b = upsample2x(&input.transpose_hw(), UpsampleMode::Bilinear, true, &mut c);
        assert_eq!(a, b);
    }
}
