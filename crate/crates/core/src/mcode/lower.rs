use std::collections::BTreeMap;

use crate::bfp::BfpConfig;
use crate::datapath::{ConvWeights, UpsampleMode};
use crate::ir::{fold_batchnorm, Kernel, LayerKind, ModelGraph, ResidualRole, Stride, WeightStore, INPUT_ID};

use super::program::{MicroProgram, Region, TensorRef};
use super::word::*;
use super::McodeError;

/// Region alignment in external memory.
pub const ALIGN: u64 = 64;
const ADDR_SPACE: u64 = 1 << 34;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LowerOptions {
    /// Widest feature map the datapath takes without transposition.
    pub width_limit: u32,
    pub bfp: BfpConfig,
    pub upsample: UpsampleMode,
}

impl Default for LowerOptions {
    fn default() -> Self {
        Self {
            width_limit: 4096,
            bfp: BfpConfig::default(),
            upsample: UpsampleMode::Bilinear,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Shape {
    c: u32,
    h: u32,
    w: u32,
}

impl Shape {
    fn bytes(self) -> u64 {
        self.c as u64 * self.h as u64 * self.w as u64 * 2
    }
}

fn align_up(v: u64) -> u64 {
    v.div_ceil(ALIGN) * ALIGN
}

/// Lowers a validated graph for an input of `input_shape = (C, H, W)`.
///
/// Batch-norm annotations are folded first. When `W` exceeds the width limit
/// but `H` does not, the program is emitted in transposed orientation: every
/// op carries the transpose bit, swapped height/width and transposed kernels.
pub fn lower(
    graph: &ModelGraph,
    weights: &WeightStore,
    input_shape: (usize, usize, usize),
    opts: &LowerOptions,
) -> Result<MicroProgram, McodeError> {
    opts.bfp.validate().map_err(crate::datapath::DatapathError::from)?;
    let (c, h, w) = input_shape;
    let limit = opts.width_limit as usize;
    if w > limit && h > limit {
        return Err(McodeError::Unsupported(format!(
            "input {h}x{w} exceeds the width limit {limit} in both dimensions"
        )));
    }
    if c == 0 || h == 0 || w == 0 {
        return Err(McodeError::Shape(format!("empty input shape {c}x{h}x{w}")));
    }
    let program = if w > limit {
        lower_oriented(graph, weights, (c, h, w), opts)?.transposed()
    } else {
        lower_oriented(graph, weights, (c, h, w), opts)?
    };
    Ok(program)
}

fn lower_oriented(
    graph: &ModelGraph,
    weights: &WeightStore,
    (c, h, w): (usize, usize, usize),
    opts: &LowerOptions,
) -> Result<MicroProgram, McodeError> {
    let folded;
    let (graph, weights) = if graph.has_batchnorm() {
        folded = fold_batchnorm(graph, weights)?;
        (&folded.0, &folded.1)
    } else {
        (graph, weights)
    };
    let layers = graph.layers();
    let input = Shape {
        c: c as u32,
        h: h as u32,
        w: w as u32,
    };
    if input.c as usize != c || input.h as usize != h || input.w as usize != w {
        return Err(McodeError::Unsupported("input dimensions overflow".into()));
    }

    // shape inference
    let mut in_shapes = Vec::with_capacity(layers.len());
    let mut out_shapes: Vec<Shape> = Vec::with_capacity(layers.len());
    let shape_of = |id: &str, outs: &[Shape]| -> Shape {
        if id == INPUT_ID {
            input
        } else {
            outs[graph.index_of(id).expect("validated")]
        }
    };
    for l in layers {
        let is_concat = l.residual != ResidualRole::AddCached && l.inputs.len() > 1;
        let src = if is_concat {
            let parts: Vec<Shape> = l.inputs.iter().map(|i| shape_of(i, &out_shapes)).collect();
            if parts.iter().any(|p| (p.h, p.w) != (parts[0].h, parts[0].w)) {
                return Err(McodeError::Shape(format!(
                    "concat into {:?} joins maps of different sizes",
                    l.id
                )));
            }
            Shape {
                c: parts.iter().map(|p| p.c).sum(),
                ..parts[0]
            }
        } else {
            shape_of(&l.inputs[0], &out_shapes)
        };
        if src.c != l.in_ch {
            return Err(McodeError::Shape(format!(
                "layer {:?} expects {} channels, input has {}",
                l.id, l.in_ch, src.c
            )));
        }
        let out = match l.kind {
            LayerKind::Conv => {
                let s = l.stride.step() as u32;
                Shape {
                    c: l.out_ch,
                    h: src.h.div_ceil(s),
                    w: src.w.div_ceil(s),
                }
            }
            LayerKind::MaxPool => Shape {
                h: src.h.div_ceil(2),
                w: src.w.div_ceil(2),
                ..src
            },
            LayerKind::Upsample => Shape {
                h: src.h * 2,
                w: src.w * 2,
                ..src
            },
            LayerKind::Sigmoid | LayerKind::Null => src,
        };
        if l.residual == ResidualRole::AddCached {
            let cached = shape_of(&l.inputs[1], &out_shapes);
            if cached != out {
                return Err(McodeError::Shape(format!(
                    "residual add in {:?}: output {}x{}x{} vs cached {}x{}x{}",
                    l.id, out.c, out.h, out.w, cached.c, cached.h, cached.w
                )));
            }
        }
        in_shapes.push(src);
        out_shapes.push(out);
    }

    // allocation: input at 0, then one region per layer in order; concat
    // groups are reserved as one contiguous block when their first member
    // is reached
    let mut next = align_up(input.bytes());
    let mut out_addr = vec![u64::MAX; layers.len()];
    let groups = graph.concat_groups();
    let mut bump = |bytes: u64| -> Result<u64, McodeError> {
        let at = next;
        next = align_up(at + bytes);
        if next > ADDR_SPACE {
            return Err(McodeError::Alloc(format!("2^34-byte address space exhausted at {at:#x}")));
        }
        Ok(at)
    };
    let addr_of = |id: &str, out_addr: &[u64]| -> u64 {
        if id == INPUT_ID {
            0
        } else {
            out_addr[graph.index_of(id).expect("validated")]
        }
    };
    let mut ops = Vec::with_capacity(layers.len());
    let mut alloc_map = BTreeMap::new();
    let mut conv_weights = BTreeMap::new();
    alloc_map.insert(
        INPUT_ID.to_string(),
        Region {
            in_addr: 0,
            out_addr: 0,
            bytes: input.bytes(),
        },
    );
    for (i, l) in layers.iter().enumerate() {
        let src = in_shapes[i];
        let in_addr = addr_of(&l.inputs[0], &out_addr);
        if out_addr[i] == u64::MAX {
            if l.kind == LayerKind::Null {
                out_addr[i] = in_addr;
            } else if let Some(g) = l.concat {
                let members = &groups[&g];
                let total: u64 = members.iter().map(|&j| out_shapes[j].bytes()).sum();
                let mut at = bump(total)?;
                for &j in members {
                    out_addr[j] = at;
                    at += out_shapes[j].bytes();
                }
            } else {
                out_addr[i] = bump(out_shapes[i].bytes())?;
            }
        }
        for (field, v, bits) in [("in_channels", src.c, 16), ("height", src.h, 20), ("width", src.w, 15), ("out_channels", l.out_ch, 16)] {
            if v >> bits != 0 {
                return Err(McodeError::Unsupported(format!(
                    "layer {:?}: {field} {v} exceeds the {bits}-bit field",
                    l.id
                )));
            }
        }
        let mut op = MicroOp {
            in_channels: src.c,
            out_channels: l.out_ch,
            height: src.h,
            width: src.w,
            in_addr,
            out_addr: out_addr[i],
            res_op: match l.residual {
                ResidualRole::None => RES_NONE,
                ResidualRole::CacheStart => RES_CACHE,
                ResidualRole::AddCached => RES_ADD,
            },
            ..Default::default()
        };
        match l.kind {
            LayerKind::Conv => {
                op.layer_type = OP_CONV;
                op.kernel_code = match l.kernel {
                    Kernel::K1 => K1,
                    Kernel::K3 => K3,
                    Kernel::K7 => K7,
                    Kernel::K2 => unreachable!("validated"),
                };
                op.stride_code = (l.stride == Stride::S2) as u8;
                op.set_relu(l.relu);
                let p = weights
                    .get(&l.id)
                    .ok_or_else(|| McodeError::Shape(format!("no weights for conv layer {:?}", l.id)))?;
                if (p.out_ch, p.in_ch, p.kernel) != (l.out_ch as usize, l.in_ch as usize, l.kernel.size()) {
                    return Err(McodeError::Shape(format!(
                        "weights for {:?} are {}x{}x{k}x{k}, layer needs {}x{}x{s}x{s}",
                        l.id,
                        p.out_ch,
                        p.in_ch,
                        l.out_ch,
                        l.in_ch,
                        k = p.kernel,
                        s = l.kernel.size()
                    )));
                }
                let cw = if l.kernel == Kernel::K3 && l.stride == Stride::S1 {
                    ConvWeights::winograd(p, opts.bfp)?
                } else {
                    ConvWeights::direct(p, opts.bfp)?
                };
                conv_weights.insert(l.id.clone(), cw);
            }
            LayerKind::MaxPool => {
                op.layer_type = OP_POOL;
                op.kernel_code = if l.kernel == Kernel::K2 { K2 } else { K3 };
                op.stride_code = 1;
            }
            LayerKind::Sigmoid => op.layer_type = OP_POOL,
            LayerKind::Upsample => {
                op.layer_type = OP_UPSAMPLE;
                op.kernel_code = match opts.upsample {
                    UpsampleMode::Nearest => UPSAMPLE_NEAREST,
                    UpsampleMode::Bilinear => UPSAMPLE_BILINEAR,
                };
            }
            LayerKind::Null => op.layer_type = OP_NULL,
        }
        encode(&op)?;
        alloc_map.insert(
            l.id.clone(),
            Region {
                in_addr,
                out_addr: out_addr[i],
                bytes: out_shapes[i].bytes(),
            },
        );
        ops.push(op);
    }

    let fs = graph.fusion_start();
    let tref = |id: &str| {
        let i = graph.index_of(id).expect("validated");
        let s = out_shapes[i];
        TensorRef {
            addr: out_addr[i],
            channels: s.c,
            height: s.h,
            width: s.w,
        }
    };
    let outputs = BTreeMap::from([
        ("score".to_string(), tref(&graph.outputs().score)),
        ("link".to_string(), tref(&graph.outputs().link)),
    ]);
    Ok(MicroProgram {
        fusion: ops.split_off(fs),
        extraction: ops,
        layer_ids: layers.iter().map(|l| l.id.clone()).collect(),
        weights: conv_weights,
        alloc_map,
        outputs,
        input: TensorRef {
            addr: 0,
            channels: input.c,
            height: input.h,
            width: input.w,
        },
        bfp: opts.bfp,
        transposed: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{ConvParams, LayerSpec, Outputs};

    fn conv_weights(store: &mut WeightStore, id: &str, o: usize, c: usize, k: usize) {
        store.insert(id, ConvParams::new(o, c, k, vec![0.01; o * c * k * k], vec![0.0; o]).unwrap());
    }

    #[test]
    fn single_layer() {
        let g = ModelGraph::new(
            vec![LayerSpec::conv("c", INPUT_ID, 3, 8, Kernel::K3, Stride::S1, true)],
            Outputs {
                score: "c".into(),
                link: "c".into(),
            },
        )
        .unwrap();
        let mut w = WeightStore::new();
        conv_weights(&mut w, "c", 8, 3, 3);
        let p = lower(&g, &w, (3, 10, 10), &LowerOptions::default()).unwrap();
        assert_eq!(p.extraction.len(), 1);
        let op = p.extraction[0];
        assert_eq!(op.in_addr, 0);
        assert_eq!(op.out_addr, align_up(3 * 10 * 10 * 2));
        assert_eq!(op.out_addr, 640);
        assert!(op.relu());
        assert_eq!(p.alloc_map["c"].bytes, 8 * 10 * 10 * 2);
    }

    #[test]
    fn concat_members_are_adjacent() {
        let layers = vec![
            LayerSpec::conv("a", INPUT_ID, 4, 32, Kernel::K1, Stride::S1, false).with_concat(0),
            LayerSpec::conv("b", INPUT_ID, 4, 32, Kernel::K1, Stride::S1, false).with_concat(0),
            LayerSpec::conv("m", "a", 64, 2, Kernel::K1, Stride::S1, false).with_inputs(&["a", "b"]),
        ];
        let g = ModelGraph::new(layers, Outputs { score: "m".into(), link: "m".into() }).unwrap();
        let mut w = WeightStore::new();
        conv_weights(&mut w, "a", 32, 4, 1);
        conv_weights(&mut w, "b", 32, 4, 1);
        conv_weights(&mut w, "m", 2, 64, 1);
        let p = lower(&g, &w, (4, 5, 7), &LowerOptions::default()).unwrap();
        let ops: Vec<_> = p.ops().map(|(_, op)| *op).collect();
        assert_eq!(ops[1].out_addr, ops[0].out_addr + 32 * 5 * 7 * 2);
        assert_eq!(ops[2].in_addr, ops[0].out_addr);
        assert_eq!(ops[2].in_channels, 64);
        // the consumer of a concat starts the fusion list
        assert_eq!(p.fusion.len(), 1);
    }

    #[test]
    fn wide_inputs_lower_transposed() {
        let g = ModelGraph::new(
            vec![LayerSpec::conv("c", INPUT_ID, 1, 1, Kernel::K3, Stride::S1, false)],
            Outputs { score: "c".into(), link: "c".into() },
        )
        .unwrap();
        let mut w = WeightStore::new();
        conv_weights(&mut w, "c", 1, 1, 3);
        let opts = LowerOptions { width_limit: 16, ..Default::default() };
        let p = lower(&g, &w, (1, 8, 20), &opts).unwrap();
        assert!(p.transposed);
        assert!(p.extraction[0].transpose());
        assert_eq!((p.extraction[0].height, p.extraction[0].width), (20, 8));
        assert!(matches!(lower(&g, &w, (1, 20, 20), &opts), Err(McodeError::Unsupported(_))));
    }

    #[test]
    fn missing_weights() {
        let g = ModelGraph::new(
            vec![LayerSpec::conv("c", INPUT_ID, 1, 1, Kernel::K3, Stride::S1, false)],
            Outputs { score: "c".into(), link: "c".into() },
        )
        .unwrap();
        assert!(lower(&g, &WeightStore::new(), (1, 4, 4), &LowerOptions::default()).is_err());
    }
}
