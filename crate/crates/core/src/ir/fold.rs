use super::{IrError, LayerKind, ModelGraph, WeightStore};

/// Merges every batch-norm annotation into its convolution:
/// `W' = W * g / sqrt(v + eps)` and `b' = (b - mean) * g / sqrt(v + eps) + beta`
/// per output channel. The returned graph carries no `bn` annotations.
pub fn fold_batchnorm(graph: &ModelGraph, weights: &WeightStore) -> Result<(ModelGraph, WeightStore), IrError> {
    let mut graph = graph.clone();
    let mut weights = weights.clone();
    for layer in graph.layers_mut() {
        let Some(bn) = layer.bn.take() else { continue };
        if layer.kind != LayerKind::Conv {
            return Err(IrError::Schema(format!("bn on non-conv layer {:?}", layer.id)));
        }
        let out_ch = layer.out_ch as usize;
        bn.check(out_ch)?;
        let p = weights
            .get_mut(&layer.id)
            .ok_or_else(|| IrError::Graph(format!("no weights for conv {:?}", layer.id)))?;
        if p.out_ch != out_ch {
            return Err(IrError::Shape(format!(
                "weights for {:?} have {} output channels, bn has {out_ch}",
                layer.id, p.out_ch
            )));
        }
        let per_out = p.in_ch * p.kernel * p.kernel;
        for o in 0..out_ch {
            let scale = bn.gamma[o] as f64 / (bn.variance[o] as f64 + bn.epsilon as f64).sqrt();
            for w in &mut p.weight[o * per_out..(o + 1) * per_out] {
                *w = (*w as f64 * scale) as f32;
            }
            p.bias[o] = ((p.bias[o] as f64 - bn.mean[o] as f64) * scale + bn.beta[o] as f64) as f32;
        }
    }
    Ok((graph, weights))
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;

    fn graph_with_bn(bn: BatchNormParams) -> ModelGraph {
        let layers = vec![LayerSpec::conv("c", INPUT_ID, 2, 2, Kernel::K1, Stride::S1, false).with_bn(bn)];
        ModelGraph::new(layers, Outputs { score: "c".into(), link: "c".into() }).unwrap()
    }

    fn store() -> WeightStore {
        let mut s = WeightStore::new();
        s.insert("c", ConvParams::new(2, 2, 1, vec![0.5, -1.0, 2.0, 0.25], vec![0.125, -3.0]).unwrap());
        s
    }

    fn bn(gamma: f32) -> BatchNormParams {
        BatchNormParams {
            gamma: vec![gamma; 2],
            beta: vec![0.0; 2],
            mean: vec![0.0; 2],
            variance: vec![1.0; 2],
            epsilon: 0.0,
        }
    }

    #[test]
    fn identity_normalization_keeps_weights() {
        let (g, w) = fold_batchnorm(&graph_with_bn(bn(1.0)), &store()).unwrap();
        assert!(!g.has_batchnorm());
        assert_eq!(w, store());
    }

    #[test]
    fn pure_scale_doubles_everything() {
        let (_, w) = fold_batchnorm(&graph_with_bn(bn(2.0)), &store()).unwrap();
        let p = w.get("c").unwrap();
        assert_eq!(p.weight, vec![1.0, -2.0, 4.0, 0.5]);
        assert_eq!(p.bias, vec![0.25, -6.0]);
    }

    #[test]
    fn mismatched_weights_are_a_shape_error() {
        let mut s = WeightStore::new();
        s.insert("c", ConvParams::new(1, 2, 1, vec![1.0, 1.0], vec![0.0]).unwrap());
        assert!(matches!(fold_batchnorm(&graph_with_bn(bn(1.0)), &s), Err(IrError::Shape(_))));
    }
}
