//! Layer-level model description: the JSON document a model is described in,
//! its validation rules, and the weight store that accompanies it.

mod fold;
mod weights;

pub use fold::fold_batchnorm;
pub use weights::{ConvParams, WeightStore};

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved id that refers to the network input image.
pub const INPUT_ID: &str = "input";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IrError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("shape error: {0}")]
    Shape(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    MaxPool,
    Upsample,
    Sigmoid,
    Null,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    K1,
    K2,
    K3,
    K7,
}

impl Kernel {
    pub fn size(self) -> usize {
        match self {
            Kernel::K1 => 1,
            Kernel::K2 => 2,
            Kernel::K3 => 3,
            Kernel::K7 => 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Stride {
    #[default]
    S1,
    S2,
}

impl Stride {
    pub fn step(self) -> usize {
        match self {
            Stride::S1 => 1,
            Stride::S2 => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ResidualRole {
    #[default]
    None,
    CacheStart,
    AddCached,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub variance: Vec<f32>,
    pub epsilon: f32,
}

impl BatchNormParams {
    pub fn check(&self, out_channels: usize) -> Result<(), IrError> {
        for (name, v) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("mean", &self.mean),
            ("variance", &self.variance),
        ] {
            if v.len() != out_channels {
                return Err(IrError::Shape(format!(
                    "bn.{name} has {} entries, expected {out_channels}",
                    v.len()
                )));
            }
        }
        if !(self.epsilon >= 0.0) {
            return Err(IrError::Shape(format!("bn.epsilon {} is negative", self.epsilon)));
        }
        if let Some(v) = self.variance.iter().find(|&&v| !(v >= 0.0) || v + self.epsilon <= 0.0) {
            return Err(IrError::Shape(format!(
                "bn.variance {v} with epsilon {} is not positive",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    pub in_ch: u32,
    pub out_ch: u32,
    #[serde(default)]
    pub kernel: Kernel,
    #[serde(default)]
    pub stride: Stride,
    #[serde(default)]
    pub relu: bool,
    pub inputs: Vec<String>,
    #[serde(default)]
    pub residual: ResidualRole,
    #[serde(default)]
    pub concat: Option<u32>,
    #[serde(default)]
    pub bn: Option<BatchNormParams>,
}

impl LayerSpec {
    pub fn conv(id: &str, input: &str, in_ch: u32, out_ch: u32, kernel: Kernel, stride: Stride, relu: bool) -> Self {
        Self {
            id: id.into(),
            kind: LayerKind::Conv,
            in_ch,
            out_ch,
            kernel,
            stride,
            relu,
            inputs: vec![input.into()],
            residual: ResidualRole::None,
            concat: None,
            bn: None,
        }
    }

    /// A channel-preserving layer of `kind` (pooling, upsample, sigmoid, null).
    pub fn passthrough(id: &str, kind: LayerKind, input: &str, channels: u32) -> Self {
        Self {
            kind,
            ..Self::conv(id, input, channels, channels, Kernel::K1, Stride::S1, false)
        }
    }

    pub fn with_kernel(mut self, kernel: Kernel) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn with_stride(mut self, stride: Stride) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_inputs(mut self, inputs: &[&str]) -> Self {
        self.inputs = inputs.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_residual(mut self, role: ResidualRole) -> Self {
        self.residual = role;
        self
    }

    pub fn with_concat(mut self, group: u32) -> Self {
        self.concat = Some(group);
        self
    }

    pub fn with_bn(mut self, bn: BatchNormParams) -> Self {
        self.bn = Some(bn);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    pub score: String,
    pub link: String,
}

/// Which accelerator module a layer runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Extraction,
    Fusion,
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct Document {
    layers: Vec<LayerSpec>,
    outputs: Outputs,
}

/// A validated, topologically ordered layer graph.
///
/// Layers up to (excluding) the first upsample, sigmoid or concat consumer
/// form the extraction network; the remainder is the fusion network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    layers: Vec<LayerSpec>,
    outputs: Outputs,
    fusion_start: usize,
}

impl ModelGraph {
    pub fn new(layers: Vec<LayerSpec>, outputs: Outputs) -> Result<Self, IrError> {
        let fusion_start = validate(&layers, &outputs)?;
        Ok(Self {
            layers,
            outputs,
            fusion_start,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn outputs(&self) -> &Outputs {
        &self.outputs
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn stage(&self, index: usize) -> Stage {
        if index < self.fusion_start {
            Stage::Extraction
        } else {
            Stage::Fusion
        }
    }

    /// Index of the first fusion layer (`len()` when there is none).
    pub fn fusion_start(&self) -> usize {
        self.fusion_start
    }

    /// Members of each concat group, in layer order.
    pub fn concat_groups(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(g) = l.concat {
                groups.entry(g).or_default().push(i);
            }
        }
        groups
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| l.bn.is_some())
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerSpec] {
        &mut self.layers
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&Document {
            layers: self.layers.clone(),
            outputs: self.outputs.clone(),
        })
        .expect("model graphs always serialize")
    }
}

/// Parses and validates a model description document.
pub fn parse_model(text: &str) -> Result<ModelGraph, IrError> {
    let doc: Document = serde_json::from_str(text).map_err(|e| {
        IrError::Schema(format!("line {} column {}: {e}", e.line(), e.column()))
    })?;
    ModelGraph::new(doc.layers, doc.outputs)
}

fn validate(layers: &[LayerSpec], outputs: &Outputs) -> Result<usize, IrError> {
    if layers.is_empty() {
        return Err(IrError::Schema("model has no layers".into()));
    }
    let mut position: HashMap<&str, usize> = HashMap::new();
    for (i, l) in layers.iter().enumerate() {
        if l.id.is_empty() || l.id == INPUT_ID {
            return Err(IrError::Schema(format!("layer {i}: invalid id {:?}", l.id)));
        }
        if position.insert(&l.id, i).is_some() {
            return Err(IrError::Schema(format!("duplicate layer id {:?}", l.id)));
        }
    }

    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, l) in layers.iter().enumerate() {
        if let Some(g) = l.concat {
            groups.entry(g).or_default().push(i);
        }
    }
    for (g, members) in &groups {
        if members.len() < 2 {
            return Err(IrError::Graph(format!("concat group {g} has a single member")));
        }
    }

    let mut pending_cache: Option<usize> = None;
    let mut fusion_start = layers.len();
    for (i, l) in layers.iter().enumerate() {
        check_layer_local(l)?;
        if l.inputs.is_empty() {
            return Err(IrError::Schema(format!("layer {:?} has no inputs", l.id)));
        }
        let mut srcs = Vec::with_capacity(l.inputs.len());
        for name in &l.inputs {
            if name == INPUT_ID {
                srcs.push(None);
                continue;
            }
            match position.get(name.as_str()) {
                None => {
                    return Err(IrError::Graph(format!(
                        "layer {:?} references unknown layer {name:?}",
                        l.id
                    )))
                }
                Some(&j) if j >= i => {
                    return Err(IrError::Graph(format!(
                        "layer {:?} reads {name:?} before it is computed (cycle or misordering)",
                        l.id
                    )))
                }
                Some(&j) => srcs.push(Some(j)),
            }
        }
        let width = |s: Option<usize>| s.map(|j| layers[j].out_ch);

        let concat_consumer = l.residual != ResidualRole::AddCached && srcs.len() > 1;
        if fusion_start == layers.len()
            && (matches!(l.kind, LayerKind::Upsample | LayerKind::Sigmoid) || concat_consumer)
        {
            fusion_start = i;
        }

        match l.residual {
            ResidualRole::None => {}
            ResidualRole::CacheStart => {
                if pending_cache.is_some() {
                    return Err(IrError::Graph(format!(
                        "layer {:?} opens a residual while another is pending",
                        l.id
                    )));
                }
                pending_cache = Some(i);
            }
            ResidualRole::AddCached => {
                if l.kind != LayerKind::Conv {
                    return Err(IrError::Unsupported(format!(
                        "residual add on {:?} layer {:?}",
                        l.kind, l.id
                    )));
                }
                let Some(open) = pending_cache.take() else {
                    return Err(IrError::Graph(format!(
                        "layer {:?} adds a cached result but no residual is open",
                        l.id
                    )));
                };
                if srcs.len() != 2 || srcs[1] != Some(open) {
                    return Err(IrError::Graph(format!(
                        "layer {:?} must list [main, {:?}] as inputs",
                        l.id, layers[open].id
                    )));
                }
                if layers[open].out_ch != l.out_ch {
                    return Err(IrError::Graph(format!(
                        "residual {:?} has {} channels, {:?} produces {}",
                        layers[open].id, layers[open].out_ch, l.id, l.out_ch
                    )));
                }
            }
        }

        let in_channels = if concat_consumer {
            let g = srcs
                .iter()
                .map(|s| s.and_then(|j| layers[j].concat))
                .collect::<Option<Vec<_>>>()
                .filter(|gs| gs.windows(2).all(|w| w[0] == w[1]))
                .and_then(|gs| gs.first().copied())
                .ok_or_else(|| {
                    IrError::Graph(format!(
                        "layer {:?} has several inputs that are not one concat group",
                        l.id
                    ))
                })?;
            let members = &groups[&g];
            if srcs.iter().map(|s| s.unwrap()).ne(members.iter().copied()) {
                return Err(IrError::Graph(format!(
                    "layer {:?} must read every member of concat group {g} in order",
                    l.id
                )));
            }
            Some(members.iter().map(|&j| layers[j].out_ch).sum())
        } else {
            width(srcs[0])
        };
        if let Some(c) = in_channels {
            if c != l.in_ch {
                return Err(IrError::Graph(format!(
                    "layer {:?} expects {} input channels but receives {c}",
                    l.id, l.in_ch
                )));
            }
        }

        if i >= fusion_start {
            match (l.kind, l.kernel) {
                (LayerKind::MaxPool, _) => {
                    return Err(IrError::Unsupported(format!(
                        "max pooling {:?} inside the fusion network",
                        l.id
                    )))
                }
                (LayerKind::Conv, Kernel::K7) => {
                    return Err(IrError::Unsupported(format!(
                        "7x7 convolution {:?} inside the fusion network",
                        l.id
                    )))
                }
                _ => {}
            }
        }
    }
    if let Some(open) = pending_cache {
        return Err(IrError::Graph(format!(
            "residual opened by {:?} is never added",
            layers[open].id
        )));
    }
    for name in [&outputs.score, &outputs.link] {
        if !position.contains_key(name.as_str()) {
            return Err(IrError::Graph(format!("output {name:?} is not a layer")));
        }
    }
    Ok(fusion_start)
}

fn check_layer_local(l: &LayerSpec) -> Result<(), IrError> {
    if l.in_ch == 0 || l.out_ch == 0 {
        return Err(IrError::Schema(format!("layer {:?}: channel counts must be positive", l.id)));
    }
    match l.kind {
        LayerKind::Conv => {
            if l.kernel == Kernel::K2 {
                return Err(IrError::Unsupported(format!(
                    "conv {:?}: kernel 2x2 (supported: 1x1, 3x3, 7x7)",
                    l.id
                )));
            }
        }
        LayerKind::MaxPool => {
            if !matches!(l.kernel, Kernel::K2 | Kernel::K3) {
                return Err(IrError::Unsupported(format!(
                    "max pool {:?}: kernel must be 2x2 or 3x3",
                    l.id
                )));
            }
            if l.stride != Stride::S2 {
                return Err(IrError::Unsupported(format!("max pool {:?}: stride must be 2", l.id)));
            }
        }
        LayerKind::Upsample | LayerKind::Sigmoid | LayerKind::Null => {
            if l.stride == Stride::S2 {
                return Err(IrError::Unsupported(format!(
                    "{:?} layer {:?} cannot have stride 2",
                    l.kind, l.id
                )));
            }
        }
    }
    if l.kind != LayerKind::Conv && l.in_ch != l.out_ch {
        return Err(IrError::Graph(format!(
            "{:?} layer {:?} must preserve channels ({} -> {})",
            l.kind, l.id, l.in_ch, l.out_ch
        )));
    }
    if l.kind == LayerKind::Null && l.concat.is_some() {
        return Err(IrError::Unsupported(format!("null layer {:?} in a concat group", l.id)));
    }
    if let Some(bn) = &l.bn {
        if l.kind != LayerKind::Conv {
            return Err(IrError::Schema(format!("layer {:?}: bn only attaches to conv", l.id)));
        }
        bn.check(l.out_ch as usize)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_conv() -> &'static str {
        r#"{"layers":[{"id":"c1","kind":"conv","in_ch":3,"out_ch":64,"kernel":"k3",
            "stride":"s1","relu":true,"inputs":["input"],"residual":"none","concat":null,"bn":null}],
            "outputs":{"score":"c1","link":"c1"}}"#
    }

    #[test]
    fn minimal_graph_parses() {
        let g = parse_model(single_conv()).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.layers()[0].kernel, Kernel::K3);
        assert_eq!(g.stage(0), Stage::Extraction);
    }

    #[test]
    fn round_trips_through_json() {
        let g = parse_model(single_conv()).unwrap();
        assert_eq!(parse_model(&g.to_json()).unwrap(), g);
    }

    #[test]
    fn unknown_field_is_a_schema_error() {
        let text = single_conv().replace("\"relu\":true", "\"relu\":true,\"dilation\":2");
        assert!(matches!(parse_model(&text), Err(IrError::Schema(_))));
        let text = single_conv().replace("\"k3\"", "\"k5\"");
        assert!(matches!(parse_model(&text), Err(IrError::Schema(_))));
    }

    #[test]
    fn channel_mismatch_after_strided_1x1() {
        let layers = vec![
            LayerSpec::conv("a", INPUT_ID, 3, 32, Kernel::K1, Stride::S2, true),
            LayerSpec::conv("b", "a", 16, 8, Kernel::K3, Stride::S1, true),
        ];
        let out = Outputs { score: "b".into(), link: "b".into() };
        assert!(matches!(ModelGraph::new(layers, out), Err(IrError::Graph(_))));
    }

    #[test]
    fn dangling_and_misordered_references() {
        let out = Outputs { score: "a".into(), link: "a".into() };
        let dangling = vec![LayerSpec::conv("a", "ghost", 3, 4, Kernel::K1, Stride::S1, false)];
        assert!(matches!(ModelGraph::new(dangling, out.clone()), Err(IrError::Graph(_))));
        let cyclic = vec![
            LayerSpec::conv("a", "b", 4, 4, Kernel::K1, Stride::S1, false),
            LayerSpec::conv("b", "a", 4, 4, Kernel::K1, Stride::S1, false),
        ];
        assert!(matches!(ModelGraph::new(cyclic, out), Err(IrError::Graph(_))));
    }

    #[test]
    fn unsupported_kernels() {
        let out = Outputs { score: "a".into(), link: "a".into() };
        let k2 = vec![LayerSpec::conv("a", INPUT_ID, 3, 4, Kernel::K2, Stride::S1, false)];
        assert!(matches!(ModelGraph::new(k2, out.clone()), Err(IrError::Unsupported(_))));
        let pool_k1 = vec![LayerSpec::passthrough("a", LayerKind::MaxPool, INPUT_ID, 3)
            .with_stride(Stride::S2)];
        assert!(matches!(ModelGraph::new(pool_k1, out.clone()), Err(IrError::Unsupported(_))));
        let up_s2 = vec![LayerSpec::passthrough("a", LayerKind::Upsample, INPUT_ID, 3)
            .with_stride(Stride::S2)];
        assert!(matches!(ModelGraph::new(up_s2, out), Err(IrError::Unsupported(_))));
    }

    #[test]
    fn residual_pairing_rules() {
        let out = Outputs { score: "c".into(), link: "c".into() };
        let ok = vec![
            LayerSpec::conv("a", INPUT_ID, 3, 8, Kernel::K3, Stride::S1, true)
                .with_residual(ResidualRole::CacheStart),
            LayerSpec::conv("b", "a", 8, 8, Kernel::K1, Stride::S1, true),
            LayerSpec::conv("c", "b", 8, 8, Kernel::K3, Stride::S1, true)
                .with_inputs(&["b", "a"])
                .with_residual(ResidualRole::AddCached),
        ];
        ModelGraph::new(ok.clone(), out.clone()).unwrap();

        let mut nested = ok.clone();
        nested[1].residual = ResidualRole::CacheStart;
        assert!(matches!(ModelGraph::new(nested, out.clone()), Err(IrError::Graph(_))));

        let mut unclosed = ok.clone();
        unclosed[2].residual = ResidualRole::None;
        unclosed[2].inputs = vec!["b".into()];
        assert!(matches!(ModelGraph::new(unclosed, out.clone()), Err(IrError::Graph(_))));

        let mut wrong_shortcut = ok;
        wrong_shortcut[2].inputs = vec!["b".into(), "b".into()];
        assert!(matches!(ModelGraph::new(wrong_shortcut, out), Err(IrError::Graph(_))));
    }

    #[test]
    fn concat_groups_sum_channels_and_start_fusion() {
        let layers = vec![
            LayerSpec::conv("a", INPUT_ID, 3, 32, Kernel::K3, Stride::S1, true).with_concat(0),
            LayerSpec::conv("b", INPUT_ID, 3, 32, Kernel::K1, Stride::S1, true).with_concat(0),
            LayerSpec::conv("c", "a", 64, 2, Kernel::K1, Stride::S1, false).with_inputs(&["a", "b"]),
        ];
        let out = Outputs { score: "c".into(), link: "c".into() };
        let g = ModelGraph::new(layers.clone(), out.clone()).unwrap();
        assert_eq!(g.fusion_start(), 2);
        assert_eq!(g.concat_groups()[&0], vec![0, 1]);

        let mut reversed = layers.clone();
        reversed[2].inputs = vec!["b".into(), "a".into()];
        assert!(matches!(ModelGraph::new(reversed, out.clone()), Err(IrError::Graph(_))));

        let mut short = layers;
        short[2].in_ch = 32;
        assert!(matches!(ModelGraph::new(short, out), Err(IrError::Graph(_))));
    }

    #[test]
    fn pooling_is_rejected_in_fusion() {
        let layers = vec![
            LayerSpec::passthrough("u", LayerKind::Upsample, INPUT_ID, 3),
            LayerSpec::passthrough("p", LayerKind::MaxPool, "u", 3)
                .with_kernel(Kernel::K2)
                .with_stride(Stride::S2),
        ];
        let out = Outputs { score: "p".into(), link: "p".into() };
        assert!(matches!(ModelGraph::new(layers, out), Err(IrError::Unsupported(_))));
    }

    #[test]
    fn batchnorm_shape_is_checked() {
        let bn = BatchNormParams {
            gamma: vec![1.0; 3],
            beta: vec![0.0; 4],
            mean: vec![0.0; 4],
            variance: vec![1.0; 4],
            epsilon: 1e-5,
        };
        let layers = vec![LayerSpec::conv("a", INPUT_ID, 3, 4, Kernel::K3, Stride::S1, true).with_bn(bn)];
        let out = Outputs { score: "a".into(), link: "a".into() };
        assert!(matches!(ModelGraph::new(layers, out), Err(IrError::Shape(_))));
    }
}
