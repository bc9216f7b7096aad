//! F(4x4, 3x3) minimal filtering: `Y = A^T [(G W G^T) . (B^T X B)] A`,
//! built from interpolation points 0, +-1, +-2 and infinity.

use crate::scalar::Real;

use super::OpCounters;

pub const TILE_OUT: usize = 4;
pub const TILE_IN: usize = 6;
/// Elementwise products per tile in the transform domain.
pub const TILE_MULTS: u64 = 36;
/// Products a direct 3x3 convolution spends on the same 4x4 outputs.
pub const DIRECT_TILE_MULTS: u64 = 144;

pub const AT: [[f64; 6]; 4] = [
    [1.0, 1.0, 1.0, 1.0, 1.0, 0.0],
    [0.0, 1.0, -1.0, 2.0, -2.0, 0.0],
    [0.0, 1.0, 1.0, 4.0, 4.0, 0.0],
    [0.0, 1.0, -1.0, 8.0, -8.0, 1.0],
];

pub const G: [[f64; 3]; 6] = [
    [1.0 / 4.0, 0.0, 0.0],
    [-1.0 / 6.0, -1.0 / 6.0, -1.0 / 6.0],
    [-1.0 / 6.0, 1.0 / 6.0, -1.0 / 6.0],
    [1.0 / 24.0, 1.0 / 12.0, 1.0 / 6.0],
    [1.0 / 24.0, -1.0 / 12.0, 1.0 / 6.0],
    [0.0, 0.0, 1.0],
];

pub const BT: [[f64; 6]; 6] = [
    [4.0, 0.0, -5.0, 0.0, 1.0, 0.0],
    [0.0, -4.0, -4.0, 1.0, 1.0, 0.0],
    [0.0, 4.0, -4.0, -1.0, 1.0, 0.0],
    [0.0, -2.0, -1.0, 2.0, 1.0, 0.0],
    [0.0, 2.0, -1.0, -2.0, 1.0, 0.0],
    [0.0, 4.0, 0.0, -5.0, 0.0, 1.0],
];

/// Multiplications and add/subs of one 6-point `B^T x` pass.
pub const ROW_PASS_MULTS: u64 = 6;
pub const ROW_PASS_ADDSUB: u64 = 18;
/// The same pass evaluated straight from the matrix rows.
pub const ROW_PASS_MULTS_DIRECT: u64 = 12;
pub const ROW_PASS_ADDSUB_DIRECT: u64 = 16;

/// `B^T x` with the rearranged flow (6 multiplications, 18 add/sub).
#[inline]
pub fn input_row_pass<T: Real>(x: [T; 6]) -> [T; 6] {
    let two = T::lit(2.0);
    let four = T::lit(4.0);
    [
        four * (x[0] - x[2]) + (x[4] - x[2]),
        (x[3] + x[4]) - four * (x[1] + x[2]),
        (x[4] - x[3]) + four * (x[1] - x[2]),
        (x[4] - x[2]) + two * (x[3] - x[1]),
        (x[4] - x[2]) - two * (x[3] - x[1]),
        four * (x[1] - x[3]) + (x[5] - x[3]),
    ]
}

/// `B^T x` evaluated term by term from the matrix; reference for the
/// rearranged pass.
pub fn input_row_pass_direct<T: Real>(x: [T; 6]) -> ([T; 6], u64, u64) {
    let mut out = [T::zero(); 6];
    let (mut mults, mut addsub) = (0, 0);
    for (r, row) in BT.iter().enumerate() {
        let mut acc: Option<T> = None;
        for (k, &b) in row.iter().enumerate() {
            if b == 0.0 {
                continue;
            }
            let term = if b.abs() == 1.0 {
                if b < 0.0 { -x[k] } else { x[k] }
            } else {
                mults += 1;
                T::lit(b) * x[k]
            };
            acc = Some(match acc {
                None => term,
                Some(a) => {
                    addsub += 1;
                    a + term
                }
            });
        }
        out[r] = acc.unwrap_or_else(T::zero);
    }
    (out, mults, addsub)
}

/// `B^T X B` of a row-major 6x6 tile.
///
/// The column pass runs first; with `transposed` set the passes swap order so
/// that transforming `X^T` reproduces `(B^T X B)^T` bit for bit.
pub fn input_transform<T: Real>(x: &[T; 36], transposed: bool, counters: &mut OpCounters) -> [T; 36] {
    let mut tmp = [T::zero(); 36];
    let mut out = [T::zero(); 36];
    // first pass along axis `a`, second along axis `b`
    let (first_rows, second_rows) = (!transposed, transposed);
    pass(x, &mut tmp, first_rows);
    pass(&tmp, &mut out, second_rows);
    counters.input_transform_mults += 12 * ROW_PASS_MULTS;
    counters.input_transform_addsub += 12 * ROW_PASS_ADDSUB;
    out
}

// along_rows: transform each column vector (index varies along rows)
fn pass<T: Real>(src: &[T; 36], dst: &mut [T; 36], along_rows: bool) {
    for j in 0..6 {
        let v: [T; 6] = std::array::from_fn(|i| if along_rows { src[i * 6 + j] } else { src[j * 6 + i] });
        let r = input_row_pass(v);
        for i in 0..6 {
            if along_rows {
                dst[i * 6 + j] = r[i];
            } else {
                dst[j * 6 + i] = r[i];
            }
        }
    }
}

/// `G W G^T` of a row-major 3x3 kernel.
pub fn filter_transform<T: Real>(w: &[T]) -> [T; 36] {
    debug_assert_eq!(w.len(), 9);
    let g: [[T; 3]; 6] = G.map(|r| r.map(T::lit));
    let mut gw = [[T::zero(); 3]; 6];
    for i in 0..6 {
        for j in 0..3 {
            let mut s = T::zero();
            for k in 0..3 {
                s += g[i][k] * w[k * 3 + j];
            }
            gw[i][j] = s;
        }
    }
    let mut u = [T::zero(); 36];
    for i in 0..6 {
        for j in 0..6 {
            let mut s = T::zero();
            for k in 0..3 {
                s += gw[i][k] * g[j][k];
            }
            u[i * 6 + j] = s;
        }
    }
    u
}

/// `A^T M A` of a row-major 6x6 transform-domain tile.
pub fn output_transform<T: Real>(m: &[T; 36]) -> [T; 16] {
    let at: [[T; 6]; 4] = AT.map(|r| r.map(T::lit));
    let mut t = [[T::zero(); 6]; 4];
    for i in 0..4 {
        for j in 0..6 {
            let mut s = T::zero();
            for k in 0..6 {
                s += at[i][k] * m[k * 6 + j];
            }
            t[i][j] = s;
        }
    }
    let mut y = [T::zero(); 16];
    for i in 0..4 {
        for j in 0..4 {
            let mut s = T::zero();
            for k in 0..6 {
                s += t[i][k] * at[j][k];
            }
            y[i * 4 + j] = s;
        }
    }
    y
}
