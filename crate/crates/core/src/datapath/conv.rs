//! Convolution on block floating-point operands.
//!
//! Operands are normalized in blocks of `block_size` input channels: weights
//! per (output channel, kernel position or transform-domain position), inputs
//! per pixel (direct) or per transform-domain position of a tile (Winograd).
//! Each block product-sum is exact in integers; partial sums accumulate in
//! [`ExtAccum`] with input-channel blocks outermost and kernel positions in
//! row-major order of the original (untransposed) kernel.

use std::ops::Range;

use half::f16;

use crate::bfp::{exp2i, normalize_into, BfpConfig, ExtAccum, ScaledInt};
use crate::ir::ConvParams;
use crate::tensor::Tensor;

use super::winograd::{filter_transform, input_transform, AT, TILE_MULTS};
use super::{relu_half, DatapathError, OpCounters};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightLayout {
    /// `kernel x kernel` spatial taps, consumed by the point-wise MAC path.
    Direct { kernel: usize },
    /// Precomputed `G W G^T`, 36 transform-domain positions.
    Winograd,
}

impl WeightLayout {
    pub fn positions(self) -> usize {
        match self {
            WeightLayout::Direct { kernel } => kernel * kernel,
            WeightLayout::Winograd => 36,
        }
    }

    pub fn side(self) -> usize {
        match self {
            WeightLayout::Direct { kernel } => kernel,
            WeightLayout::Winograd => 6,
        }
    }
}

/// BFP-normalized convolution weights with binary16 bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights {
    layout: WeightLayout,
    out_ch: usize,
    in_ch: usize,
    cfg: BfpConfig,
    /// shared exponent per block, indexed `(o * positions + p) * blocks + b`
    exps: Vec<i32>,
    /// mantissas indexed `(o * positions + p) * in_ch + c`
    mants: Vec<i32>,
    bias: Vec<f16>,
}

impl ConvWeights {
    pub fn direct(p: &ConvParams, cfg: BfpConfig) -> Result<Self, DatapathError> {
        let k = p.kernel;
        Self::build(p, WeightLayout::Direct { kernel: k }, cfg, |o, c| p.taps(o, c).to_vec())
    }

    /// Transforms each 3x3 kernel to the Winograd domain in FP32, then
    /// normalizes.
    pub fn winograd(p: &ConvParams, cfg: BfpConfig) -> Result<Self, DatapathError> {
        if p.kernel != 3 {
            return Err(DatapathError::Shape(format!("winograd weights need 3x3 kernels, got {}", p.kernel)));
        }
        Self::build(p, WeightLayout::Winograd, cfg, |o, c| filter_transform::<f32>(p.taps(o, c)).to_vec())
    }

    fn build(
        p: &ConvParams,
        layout: WeightLayout,
        cfg: BfpConfig,
        taps: impl Fn(usize, usize) -> Vec<f32>,
    ) -> Result<Self, DatapathError> {
        cfg.validate()?;
        let positions = layout.positions();
        let nb = cfg.blocks(p.in_ch);
        let per_pair: Vec<Vec<f32>> = (0..p.out_ch * p.in_ch).map(|i| taps(i / p.in_ch, i % p.in_ch)).collect();
        let mut exps = Vec::with_capacity(p.out_ch * positions * nb);
        let mut mants = vec![0i32; p.out_ch * positions * p.in_ch];
        let mut column = Vec::with_capacity(p.in_ch);
        for o in 0..p.out_ch {
            for pos in 0..positions {
                column.clear();
                column.extend((0..p.in_ch).map(|c| per_pair[o * p.in_ch + c][pos]));
                let base = (o * positions + pos) * p.in_ch;
                for b in 0..nb {
                    let r = block_range(b, cfg.block_size, p.in_ch);
                    let e = normalize_into(&column[r.clone()], cfg.mantissa_bits, &mut mants[base + r.start..base + r.end])?;
                    exps.push(e);
                }
            }
        }
        let bias = p.bias.iter().map(|&b| crate::bfp::half_from_f64(b as f64).0).collect();
        Ok(Self {
            layout,
            out_ch: p.out_ch,
            in_ch: p.in_ch,
            cfg,
            exps,
            mants,
            bias,
        })
    }

    pub fn from_raw(
        layout: WeightLayout,
        out_ch: usize,
        in_ch: usize,
        cfg: BfpConfig,
        exps: Vec<i32>,
        mants: Vec<i32>,
        bias: Vec<f16>,
    ) -> Result<Self, DatapathError> {
        cfg.validate()?;
        let positions = layout.positions();
        let limit = 1i64 << (cfg.mantissa_bits - 1);
        if exps.len() != out_ch * positions * cfg.blocks(in_ch)
            || mants.len() != out_ch * positions * in_ch
            || bias.len() != out_ch
        {
            return Err(DatapathError::Shape("weight record sizes do not match its dimensions".into()));
        }
        if mants.iter().any(|&m| (m as i64).abs() >= limit) {
            return Err(DatapathError::Shape("mantissa exceeds the declared width".into()));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(DatapathError::Shape("non-finite bias".into()));
        }
        Ok(Self {
            layout,
            out_ch,
            in_ch,
            cfg,
            exps,
            mants,
            bias,
        })
    }

    pub fn layout(&self) -> WeightLayout {
        self.layout
    }

    pub fn out_ch(&self) -> usize {
        self.out_ch
    }

    pub fn in_ch(&self) -> usize {
        self.in_ch
    }

    pub fn config(&self) -> BfpConfig {
        self.cfg
    }

    pub fn exponents(&self) -> &[i32] {
        &self.exps
    }

    pub fn mantissas(&self) -> &[i32] {
        &self.mants
    }

    pub fn bias(&self) -> &[f16] {
        &self.bias
    }

    pub fn blocks(&self) -> usize {
        self.cfg.blocks(self.in_ch)
    }

    #[inline]
    fn block(&self, o: usize, pos: usize, b: usize) -> (&[i32], i32) {
        let positions = self.layout.positions();
        let r = block_range(b, self.cfg.block_size, self.in_ch);
        let base = (o * positions + pos) * self.in_ch;
        let e = self.exps[(o * positions + pos) * self.blocks() + b];
        (&self.mants[base + r.start..base + r.end], e)
    }

    /// Dequantized weight, for inspection.
    pub fn value(&self, o: usize, pos: usize, c: usize) -> f64 {
        let b = c / self.cfg.block_size;
        let (m, e) = self.block(o, pos, b);
        m[c - b * self.cfg.block_size] as f64 * exp2i(e - (self.cfg.mantissa_bits as i32 - 2))
    }

    /// Weights of the spatially transposed kernel: a pure permutation of
    /// positions, so values are unchanged.
    pub fn transposed(&self) -> Self {
        let side = self.layout.side();
        let positions = self.layout.positions();
        let nb = self.blocks();
        let mut exps = vec![0; self.exps.len()];
        let mut mants = vec![0; self.mants.len()];
        for o in 0..self.out_ch {
            for pos in 0..positions {
                let src = (pos % side) * side + pos / side;
                let (d, s) = ((o * positions + pos), (o * positions + src));
                exps[d * nb..(d + 1) * nb].copy_from_slice(&self.exps[s * nb..(s + 1) * nb]);
                mants[d * self.in_ch..(d + 1) * self.in_ch]
                    .copy_from_slice(&self.mants[s * self.in_ch..(s + 1) * self.in_ch]);
            }
        }
        Self {
            exps,
            mants,
            ..self.clone()
        }
    }
}

pub(crate) fn block_range(b: usize, size: usize, len: usize) -> Range<usize> {
    b * size..((b + 1) * size).min(len)
}

/// Rows `rows` of channels `channels` of a `height x width` feature map: what
/// one round loads into the on-chip buffer.
#[derive(Clone, Debug)]
pub struct RowBand {
    pub channels: Range<usize>,
    pub rows: Range<usize>,
    pub height: usize,
    pub width: usize,
    data: Vec<f16>,
}

impl RowBand {
    pub fn new(channels: Range<usize>, rows: Range<usize>, height: usize, width: usize, data: Vec<f16>) -> Self {
        assert_eq!(data.len(), channels.len() * rows.len() * width, "band payload size");
        assert!(rows.end <= height);
        Self {
            channels,
            rows,
            height,
            width,
            data,
        }
    }

    pub fn from_tensor(t: &Tensor<f16>, channels: Range<usize>, rows: Range<usize>) -> Self {
        let mut data = Vec::with_capacity(channels.len() * rows.len() * t.width());
        for c in channels.clone() {
            for y in rows.clone() {
                let start = t.index(c, y, 0);
                data.extend_from_slice(&t.data()[start..start + t.width()]);
            }
        }
        Self::new(channels, rows, t.height(), t.width(), data)
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * 2
    }

    /// Zero outside the feature map.
    #[inline]
    fn get(&self, c: usize, y: isize, x: isize) -> f16 {
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            return f16::ZERO;
        }
        let (y, x) = (y as usize, x as usize);
        debug_assert!(self.rows.contains(&y), "row {y} not loaded in band {:?}", self.rows);
        self.data[((c * self.rows.len()) + y - self.rows.start) * self.width + x]
    }

    fn require_rows(&self, needed: Range<isize>) -> Result<(), DatapathError> {
        let lo = needed.start.max(0) as usize;
        let hi = needed.end.min(self.height as isize).max(0) as usize;
        if lo < hi && (lo < self.rows.start || hi > self.rows.end) {
            return Err(DatapathError::Band(format!(
                "rows {lo}..{hi} needed but band holds {:?}",
                self.rows
            )));
        }
        Ok(())
    }
}

/// Extended-precision partial sums for rows `rows` of every output channel.
#[derive(Clone, Debug)]
pub struct PartialSums {
    pub out_ch: usize,
    pub rows: Range<usize>,
    pub width: usize,
    acc: Vec<ExtAccum>,
}

impl PartialSums {
    pub fn new(out_ch: usize, rows: Range<usize>, width: usize) -> Self {
        Self {
            out_ch,
            acc: vec![ExtAccum::ZERO; out_ch * rows.len() * width],
            rows,
            width,
        }
    }

    #[inline]
    fn slot(&mut self, o: usize, y: usize, x: usize) -> &mut ExtAccum {
        let i = (o * self.rows.len() + y - self.rows.start) * self.width + x;
        &mut self.acc[i]
    }

    /// Adds the bias, rounds to binary16 and applies the optional relu.
    /// Returns `[o][y][x]` for the covered rows.
    pub fn finish(&self, bias: &[f16], relu: bool) -> Vec<f16> {
        let per_ch = self.rows.len() * self.width;
        self.acc
            .iter()
            .enumerate()
            .map(|(i, a)| relu_half(a.add(ExtAccum::widen(bias[i / per_ch])).truncate_to_half(), relu))
            .collect()
    }
}

fn check_band(w: &ConvWeights, band: &RowBand) -> Result<usize, DatapathError> {
    let n = w.cfg.block_size;
    if band.channels.start % n != 0 || band.channels != block_range(band.channels.start / n, n, w.in_ch) {
        return Err(DatapathError::Band(format!(
            "channel range {:?} is not a block of {n} over {} inputs",
            band.channels, w.in_ch
        )));
    }
    Ok(band.channels.start / n)
}

/// Adds one channel block's direct-convolution contribution to `sums`.
pub fn accumulate_direct(
    w: &ConvWeights,
    band: &RowBand,
    stride: usize,
    transposed: bool,
    sums: &mut PartialSums,
    counters: &mut OpCounters,
) -> Result<(), DatapathError> {
    let WeightLayout::Direct { kernel: k } = w.layout else {
        return Err(DatapathError::Shape("direct convolution given Winograd weights".into()));
    };
    let b = check_band(w, band)?;
    let pad = (k / 2) as isize;
    let s = stride as isize;
    if sums.width != band.width.div_ceil(stride) || sums.out_ch != w.out_ch {
        return Err(DatapathError::Shape("partial sums do not match the layer output".into()));
    }
    band.require_rows(
        sums.rows.start as isize * s - pad..(sums.rows.end as isize - 1) * s - pad + k as isize,
    )?;
    let cb = band.channels.len();
    let bits = w.cfg.mantissa_bits;
    let lsb = bits as i32 - 2;

    // BFP blocks of every loaded pixel: [row][x] exponents, [row][x][c] mantissas
    let npix = band.rows.len() * band.width;
    let mut in_exps = vec![0i32; npix];
    let mut in_mants = vec![0i32; npix * cb];
    let mut column = vec![f16::ZERO; cb];
    for (r, y) in band.rows.clone().enumerate() {
        for x in 0..band.width {
            for (c, v) in column.iter_mut().enumerate() {
                *v = band.get(c, y as isize, x as isize);
            }
            let i = r * band.width + x;
            in_exps[i] = normalize_into(&column, bits, &mut in_mants[i * cb..(i + 1) * cb])?;
        }
    }

    for o in 0..w.out_ch {
        for oy in sums.rows.clone() {
            for ox in 0..sums.width {
                let mut acc = *sums.slot(o, oy, ox);
                for p in 0..k * k {
                    let (ky, kx) = if transposed { (p % k, p / k) } else { (p / k, p % k) };
                    let iy = oy as isize * s + ky as isize - pad;
                    let ix = ox as isize * s + kx as isize - pad;
                    if iy < 0 || ix < 0 || iy >= band.height as isize || ix >= band.width as isize {
                        continue;
                    }
                    let i = (iy as usize - band.rows.start) * band.width + ix as usize;
                    let (wm, we) = w.block(o, ky * k + kx, b);
                    let dot = ScaledInt {
                        value: crate::bfp::dot_mantissas(wm, &in_mants[i * cb..(i + 1) * cb]),
                        exponent: we + in_exps[i] - 2 * lsb,
                    };
                    acc = acc.add(dot.to_ext());
                }
                *sums.slot(o, oy, ox) = acc;
                counters.mac_ops += (k * k * cb) as u64;
            }
        }
    }
    Ok(())
}

/// Adds one channel block's Winograd contribution to `sums`. `sums.rows`
/// must start on a multiple of 4 and end on one or at the map height.
pub fn accumulate_winograd(
    w: &ConvWeights,
    band: &RowBand,
    transposed: bool,
    sums: &mut PartialSums,
    counters: &mut OpCounters,
) -> Result<(), DatapathError> {
    if w.layout != WeightLayout::Winograd {
        return Err(DatapathError::Shape("winograd convolution given direct weights".into()));
    }
    let b = check_band(w, band)?;
    let (h, wd) = (band.height, band.width);
    if sums.width != wd || sums.out_ch != w.out_ch {
        return Err(DatapathError::Shape("partial sums do not match the layer output".into()));
    }
    if sums.rows.start % 4 != 0 || (sums.rows.end % 4 != 0 && sums.rows.end != h) {
        return Err(DatapathError::Band(format!("rows {:?} are not tile aligned", sums.rows)));
    }
    band.require_rows(sums.rows.start as isize - 1..sums.rows.end as isize + 1)?;
    let cb = band.channels.len();
    let bits = w.cfg.mantissa_bits;
    let lsb = bits as i32 - 2;

    let mut v = vec![[0f32; 36]; cb];
    let mut vm = vec![0i32; 36 * cb];
    let mut ve = [0i32; 36];
    let mut column = vec![0f32; cb];
    for ty in sums.rows.start / 4..sums.rows.end.div_ceil(4) {
        for tx in 0..wd.div_ceil(4) {
            for (c, vc) in v.iter_mut().enumerate() {
                let x: [f32; 36] = std::array::from_fn(|i| {
                    let y = (ty * 4 + i / 6) as isize - 1;
                    let xx = (tx * 4 + i % 6) as isize - 1;
                    band.get(c, y, xx).to_f32()
                });
                *vc = input_transform(&x, transposed, counters);
            }
            for p in 0..36 {
                for (c, col) in column.iter_mut().enumerate() {
                    *col = v[c][p];
                }
                ve[p] = normalize_into(&column, bits, &mut vm[p * cb..(p + 1) * cb])?;
            }
            for o in 0..w.out_ch {
                let mut m = [0f64; 36];
                for p in 0..36 {
                    let (wm, we) = w.block(o, p, b);
                    m[p] = ScaledInt {
                        value: crate::bfp::dot_mantissas(wm, &vm[p * cb..(p + 1) * cb]),
                        exponent: we + ve[p] - 2 * lsb,
                    }
                    .to_f64();
                }
                counters.mac_ops += TILE_MULTS * cb as u64;
                counters.transform_mults += TILE_MULTS * cb as u64;
                for i in 0..4 {
                    let oy = ty * 4 + i;
                    if oy >= h {
                        break;
                    }
                    for j in 0..4 {
                        let ox = tx * 4 + j;
                        if ox >= wd {
                            break;
                        }
                        let y = output_entry(&m, i, j, transposed);
                        let slot = sums.slot(o, oy, ox);
                        *slot = slot.add(ExtAccum::from_f64_saturating(y).0);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Entry `(i, j)` of `A^T M A`, summed in the original orientation's order.
#[inline]
fn output_entry(m: &[f64; 36], i: usize, j: usize, transposed: bool) -> f64 {
    let (ci, cj) = if transposed { (j, i) } else { (i, j) };
    let mut s = 0.0;
    for k in 0..6 {
        let a = AT[ci][k];
        if a == 0.0 {
            continue;
        }
        for l in 0..6 {
            let coef = a * AT[cj][l];
            if coef == 0.0 {
                continue;
            }
            let mv = if transposed { m[l * 6 + k] } else { m[k * 6 + l] };
            s += coef * mv;
        }
    }
    s
}

/// Stride-1 3x3 convolution through Winograd tiles over the whole map.
pub fn conv_winograd(
    input: &Tensor<f16>,
    w: &ConvWeights,
    relu: bool,
    counters: &mut OpCounters,
) -> Result<Tensor<f16>, DatapathError> {
    if input.channels() != w.in_ch {
        return Err(DatapathError::Shape(format!(
            "input has {} channels, weights expect {}",
            input.channels(),
            w.in_ch
        )));
    }
    let (_, h, wd) = input.shape();
    let mut sums = PartialSums::new(w.out_ch, 0..h, wd);
    for b in 0..w.blocks() {
        let band = RowBand::from_tensor(input, block_range(b, w.cfg.block_size, w.in_ch), 0..h);
        accumulate_winograd(w, &band, false, &mut sums, counters)?;
    }
    Ok(Tensor::from_vec(w.out_ch, h, wd, sums.finish(&w.bias, relu)).expect("shape"))
}

/// Point-wise MAC convolution (1x1, 3x3 or 7x7; stride 1 or 2) over the
/// whole map.
pub fn conv_direct(
    input: &Tensor<f16>,
    w: &ConvWeights,
    stride: usize,
    relu: bool,
    counters: &mut OpCounters,
) -> Result<Tensor<f16>, DatapathError> {
    if input.channels() != w.in_ch || !matches!(stride, 1 | 2) {
        return Err(DatapathError::Shape(format!(
            "input has {} channels (weights expect {}), stride {stride}",
            input.channels(),
            w.in_ch
        )));
    }
    let (_, h, wd) = input.shape();
    let (oh, ow) = (h.div_ceil(stride), wd.div_ceil(stride));
    let mut sums = PartialSums::new(w.out_ch, 0..oh, ow);
    for b in 0..w.blocks() {
        let band = RowBand::from_tensor(input, block_range(b, w.cfg.block_size, w.in_ch), 0..h);
        accumulate_direct(w, &band, stride, false, &mut sums, counters)?;
    }
    Ok(Tensor::from_vec(w.out_ch, oh, ow, sums.finish(&w.bias, relu)).expect("shape"))
}
