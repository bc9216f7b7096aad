use std::collections::BTreeMap;

use crate::datapath::UpsampleMode;
use crate::ir::{LayerKind, LayerSpec, ModelGraph, ResidualRole, WeightStore, INPUT_ID};
use crate::scalar::Real;
use crate::tensor::Tensor;

use super::OracleError;

/// Runs `graph` at precision `T` and returns every layer output by id
/// (plus the input under [`INPUT_ID`]).
pub fn reference_layers<T: Real>(
    graph: &ModelGraph,
    weights: &WeightStore,
    input: &Tensor<T>,
    upsample: UpsampleMode,
) -> Result<BTreeMap<String, Tensor<T>>, OracleError> {
    let mut maps: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    maps.insert(INPUT_ID.to_string(), input.clone());
    for l in graph.layers() {
        let get = |id: &String| {
            maps.get(id)
                .ok_or_else(|| OracleError::Graph(format!("{:?} reads unknown map {id:?}", l.id)))
        };
        let x = if l.residual != ResidualRole::AddCached && l.inputs.len() > 1 {
            let parts = l.inputs.iter().map(get).collect::<Result<Vec<_>, _>>()?;
            Tensor::concat(&parts).map_err(|e| OracleError::Shape(e.to_string()))?
        } else {
            get(&l.inputs[0])?.clone()
        };
        if x.channels() != l.in_ch as usize {
            return Err(OracleError::Shape(format!(
                "{:?} expects {} channels, got {}",
                l.id,
                l.in_ch,
                x.channels()
            )));
        }
        let y = match l.kind {
            LayerKind::Conv => {
                let mut y = conv(l, weights, &x)?;
                if l.residual == ResidualRole::AddCached {
                    let cached = get(&l.inputs[1])?;
                    if cached.shape() != y.shape() {
                        return Err(OracleError::Shape(format!("{:?} adds a cached map of another shape", l.id)));
                    }
                    for (a, &b) in y.data_mut().iter_mut().zip(cached.data()) {
                        *a += b;
                    }
                }
                if l.relu {
                    y = y.map(|v| if v > T::zero() { v } else { T::zero() });
                }
                y
            }
            LayerKind::MaxPool => max_pool(&x, l.kernel.size()),
            LayerKind::Upsample => upsample2x(&x, upsample),
            LayerKind::Sigmoid => x.map(|v| T::one() / (T::one() + (-v).exp())),
            LayerKind::Null => x,
        };
        maps.insert(l.id.clone(), y);
    }
    Ok(maps)
}

/// The `score` and `link` outputs of `graph` at precision `T`.
pub fn reference_forward<T: Real>(
    graph: &ModelGraph,
    weights: &WeightStore,
    input: &Tensor<T>,
    upsample: UpsampleMode,
) -> Result<BTreeMap<String, Tensor<T>>, OracleError> {
    let mut all = reference_layers(graph, weights, input, upsample)?;
    let outs = graph.outputs();
    let mut res = BTreeMap::new();
    for (name, id) in [("score", &outs.score), ("link", &outs.link)] {
        let t = all
            .get(id)
            .cloned()
            .ok_or_else(|| OracleError::Graph(format!("output {name} refers to unknown layer {id:?}")))?;
        res.insert(name.to_string(), t);
    }
    all.clear();
    Ok(res)
}

fn conv<T: Real>(l: &LayerSpec, weights: &WeightStore, x: &Tensor<T>) -> Result<Tensor<T>, OracleError> {
    let p = weights
        .get(&l.id)
        .ok_or_else(|| OracleError::Graph(format!("no weights for {:?}", l.id)))?;
    let (k, s) = (l.kernel.size(), l.stride.step());
    if p.kernel != k || p.in_ch != l.in_ch as usize || p.out_ch != l.out_ch as usize {
        return Err(OracleError::Shape(format!("weights for {:?} do not match the layer", l.id)));
    }
    let (c_in, h, w) = x.shape();
    let pad = (k / 2) as isize;
    let (oh, ow) = (h.div_ceil(s), w.div_ceil(s));
    let lit = |v: f32| T::lit(v as f64);
    let mut y = Tensor::zeros(p.out_ch, oh, ow);
    for o in 0..p.out_ch {
        // batch norm applied after the convolution, as trained
        let (scale, shift) = match &l.bn {
            Some(bn) => {
                let sc = lit(bn.gamma[o]) / (lit(bn.variance[o]) + lit(bn.epsilon)).sqrt();
                (sc, lit(bn.beta[o]) - lit(bn.mean[o]) * sc)
            }
            None => (T::one(), T::zero()),
        };
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * s + ky) as isize - pad;
                            let ix = (ox * s + kx) as isize - pad;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += lit(p.w(o, c, ky, kx)) * x.at(c, iy as usize, ix as usize);
                            }
                        }
                    }
                }
                y.set(o, oy, ox, (acc + lit(p.bias[o])) * scale + shift);
            }
        }
    }
    Ok(y)
}

fn max_pool<T: Real>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let (c, h, w) = x.shape();
    let off = (k as isize - 1) / 2;
    Tensor::from_fn(c, h.div_ceil(2), w.div_ceil(2), |ch, oy, ox| {
        let mut best = T::neg_infinity();
        for dy in 0..k as isize {
            for dx in 0..k as isize {
                let (y, xx) = (2 * oy as isize - off + dy, 2 * ox as isize - off + dx);
                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                    best = best.max(x.at(ch, y as usize, xx as usize));
                }
            }
        }
        best
    })
}

/// Interpolating 2x upsample. Bilinear outputs between samples average their
/// neighbors, with samples past the border counted as zero.
fn upsample2x<T: Real>(x: &Tensor<T>, mode: UpsampleMode) -> Tensor<T> {
    let (c, h, w) = x.shape();
    let half = T::lit(0.5);
    let at = |ch: usize, i: usize, j: usize| if i < h && j < w { x.at(ch, i, j) } else { T::zero() };
    Tensor::from_fn(c, 2 * h, 2 * w, |ch, y, xx| {
        let (i, j) = (y / 2, xx / 2);
        match mode {
            UpsampleMode::Nearest => x.at(ch, i, j),
            UpsampleMode::Bilinear => {
                let row = |i: usize| {
                    if xx % 2 == 0 {
                        at(ch, i, j)
                    } else {
                        (at(ch, i, j) + at(ch, i, j + 1)) * half
                    }
                };
                if y % 2 == 0 {
                    row(i)
                } else {
                    (row(i) + row(i + 1)) * half
                }
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{BatchNormParams, ConvParams, Kernel, Outputs, Stride};

    #[test]
    fn bilinear_interpolates_between_samples() {
        let x = Tensor::from_vec(1, 1, 2, vec![2.0f64, 4.0]).unwrap();
        let y = upsample2x(&x, UpsampleMode::Bilinear);
        assert_eq!(y.channel(0), &[2.0, 3.0, 4.0, 2.0, 1.0, 1.5, 2.0, 1.0]);
        let n = upsample2x(&x, UpsampleMode::Nearest);
        assert_eq!(n.channel(0), &[2.0, 2.0, 4.0, 4.0, 2.0, 2.0, 4.0, 4.0]);
    }

    #[test]
    fn unfolded_batchnorm_applies_after_bias() {
        let bn = BatchNormParams {
            gamma: vec![2.0],
            beta: vec![1.0],
            mean: vec![0.5],
            variance: vec![4.0],
            epsilon: 0.0,
        };
        let layers = vec![LayerSpec::conv("c", INPUT_ID, 1, 1, Kernel::K1, Stride::S1, false).with_bn(bn)];
        let g = ModelGraph::new(layers, Outputs { score: "c".into(), link: "c".into() }).unwrap();
        let mut w = WeightStore::new();
        w.insert("c", ConvParams::new(1, 1, 1, vec![3.0], vec![0.5]).unwrap());
        let x = Tensor::from_vec(1, 1, 1, vec![1.0f64]).unwrap();
        let out = reference_forward(&g, &w, &x, UpsampleMode::Bilinear).unwrap();
        // (3 + 0.5 - 0.5) * 2 / 2 + 1
        assert_eq!(out["score"].data(), &[4.0]);
    }
}
