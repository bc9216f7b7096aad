//! Reference architectures and seeded random models, weights and inputs.

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ir::{
    ConvParams, Kernel, LayerKind, LayerSpec, ModelGraph, Outputs, ResidualRole, Stride, WeightStore, INPUT_ID,
};
use crate::tensor::Tensor;

fn outputs(score: &str, link: &str) -> Outputs {
    Outputs {
        score: score.into(),
        link: link.into(),
    }
}

/// Canonical ResNet-50 feature extractor (stem, max pool, 16 bottlenecks).
/// Identity shortcuts are null layers that open the residual; projection
/// shortcuts are 1x1 convolutions.
pub fn resnet50_extractor() -> ModelGraph {
    let mut layers = vec![
        LayerSpec::conv("stem", INPUT_ID, 3, 64, Kernel::K7, Stride::S2, true),
        LayerSpec::passthrough("pool", LayerKind::MaxPool, "stem", 64)
            .with_kernel(Kernel::K3)
            .with_stride(Stride::S2),
    ];
    let mut prev = "pool".to_string();
    let mut in_ch = 64u32;
    for (stage, (&blocks, &width)) in [3usize, 4, 6, 3].iter().zip(&[64u32, 128, 256, 512]).enumerate() {
        for b in 0..blocks {
            let name = format!("s{}b{}", stage + 1, b + 1);
            let stride = if b == 0 && stage > 0 { Stride::S2 } else { Stride::S1 };
            let out = width * 4;
            let short = format!("{name}_short");
            if b == 0 {
                layers.push(
                    LayerSpec::conv(&short, &prev, in_ch, out, Kernel::K1, stride, false)
                        .with_residual(ResidualRole::CacheStart),
                );
            } else {
                layers.push(
                    LayerSpec::passthrough(&short, LayerKind::Null, &prev, in_ch).with_residual(ResidualRole::CacheStart),
                );
            }
            let (a, bb, c) = (format!("{name}_a"), format!("{name}_b"), format!("{name}_c"));
            layers.push(LayerSpec::conv(&a, &prev, in_ch, width, Kernel::K1, Stride::S1, true));
            layers.push(LayerSpec::conv(&bb, &a, width, width, Kernel::K3, stride, true));
            layers.push(
                LayerSpec::conv(&c, &bb, width, out, Kernel::K1, Stride::S1, true)
                    .with_inputs(&[&bb, &short])
                    .with_residual(ResidualRole::AddCached),
            );
            prev = c;
            in_ch = out;
        }
    }
    ModelGraph::new(layers, outputs(&prev, &prev)).expect("resnet-50 is valid")
}

/// VGG-16 feature extractor: 13 3x3 convolutions and 5 2x2 max pools.
pub fn vgg16_extractor() -> ModelGraph {
    let cfg: [u32; 18] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0];
    let mut layers = Vec::new();
    let mut prev = INPUT_ID.to_string();
    let mut ch = 3;
    for (i, &c) in cfg.iter().enumerate() {
        let id = format!("l{i}");
        if c == 0 {
            layers.push(
                LayerSpec::passthrough(&id, LayerKind::MaxPool, &prev, ch)
                    .with_kernel(Kernel::K2)
                    .with_stride(Stride::S2),
            );
        } else {
            layers.push(LayerSpec::conv(&id, &prev, ch, c, Kernel::K3, Stride::S1, true));
            ch = c;
        }
        prev = id;
    }
    ModelGraph::new(layers, outputs(&prev, &prev)).expect("vgg-16 is valid")
}

/// One residual bottleneck with a projection shortcut: the shortcut opens
/// the residual, the expanding 1x1 closes it.
pub fn bottleneck(in_ch: u32, width: u32) -> ModelGraph {
    let out = width * 4;
    let layers = vec![
        LayerSpec::conv("short", INPUT_ID, in_ch, out, Kernel::K1, Stride::S1, false)
            .with_residual(ResidualRole::CacheStart),
        LayerSpec::conv("a", INPUT_ID, in_ch, width, Kernel::K1, Stride::S1, true),
        LayerSpec::conv("b", "a", width, width, Kernel::K3, Stride::S1, true),
        LayerSpec::conv("c", "b", width, out, Kernel::K1, Stride::S1, true)
            .with_inputs(&["b", "short"])
            .with_residual(ResidualRole::AddCached),
    ];
    ModelGraph::new(layers, outputs("c", "c")).expect("bottleneck is valid")
}

/// A small U-shaped detector with a 2-channel score head and a 16-channel
/// link head over the same half-resolution grid.
pub fn text_detector(in_ch: u32) -> ModelGraph {
    let layers = vec![
        LayerSpec::conv("e1", INPUT_ID, in_ch, 16, Kernel::K3, Stride::S2, true),
        LayerSpec::conv("e2", "e1", 16, 16, Kernel::K3, Stride::S1, true).with_residual(ResidualRole::CacheStart),
        LayerSpec::conv("e3", "e2", 16, 16, Kernel::K3, Stride::S1, true)
            .with_inputs(&["e2", "e2"])
            .with_residual(ResidualRole::AddCached),
        LayerSpec::conv("e4", "e3", 16, 32, Kernel::K3, Stride::S2, true),
        LayerSpec::conv("e5", "e4", 32, 32, Kernel::K1, Stride::S1, true),
        LayerSpec::passthrough("up", LayerKind::Upsample, "e5", 32).with_concat(0),
        LayerSpec::conv("skip", "e3", 16, 16, Kernel::K1, Stride::S1, true).with_concat(0),
        LayerSpec::conv("f1", "up", 48, 16, Kernel::K3, Stride::S1, true).with_inputs(&["up", "skip"]),
        LayerSpec::conv("score", "f1", 16, 2, Kernel::K1, Stride::S1, false),
        LayerSpec::conv("link", "f1", 16, 16, Kernel::K1, Stride::S1, false),
    ];
    ModelGraph::new(layers, outputs("score", "link")).expect("detector is valid")
}

/// Uniform weights scaled by `1 / sqrt(fan_in)` and small biases.
pub fn random_weights(graph: &ModelGraph, seed: u64) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    for l in graph.layers().iter().filter(|l| l.kind == LayerKind::Conv) {
        let (o, c, k) = (l.out_ch as usize, l.in_ch as usize, l.kernel.size());
        let a = (3.0 / (c * k * k) as f32).sqrt();
        let weight = (0..o * c * k * k).map(|_| rng.gen_range(-a..a)).collect();
        let bias = (0..o).map(|_| rng.gen_range(-0.1f32..0.1)).collect();
        store.insert(l.id.clone(), ConvParams::new(o, c, k, weight, bias).expect("sizes match"));
    }
    store
}

pub fn random_input(shape: (usize, usize, usize), seed: u64) -> Tensor<f16> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.0, shape.1, shape.2, |_, _, _| f16::from_f32(rng.gen_range(-1.0f32..1.0)))
}

/// A seeded random model of 3 to 8 layers that always contains one
/// residual pair and one concat, with weights and an input shape.
///
/// Skeleton: `r` opens the residual and is the first concat member, `q`
/// closes it (reading `r`'s chain) and is the second member, `m` consumes
/// the concat. Optional layers go before `r`, between `r` and `q`, and
/// after `m`.
pub fn random_model(seed: u64) -> (ModelGraph, WeightStore, (usize, usize, usize)) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = [4u32, 8, 12, 16, 24, 40];
    let pick = |rng: &mut ChaCha8Rng| widths[rng.gen_range(0..widths.len())];
    let in_ch = rng.gen_range(1..=4u32);
    let shape = (in_ch as usize, rng.gen_range(6..=20), rng.gen_range(6..=20));
    let extra = rng.gen_range(0..=5usize);
    let (mut pre, mut mid, mut post) = (0, 0, 0);
    for _ in 0..extra {
        match rng.gen_range(0..3) {
            0 => pre += 1,
            1 => mid += 1,
            _ => post += 1,
        }
    }
    let kernel = |rng: &mut ChaCha8Rng| [Kernel::K1, Kernel::K3, Kernel::K3][rng.gen_range(0..3)];

    let mut layers = Vec::new();
    let (mut prev, mut ch) = (INPUT_ID.to_string(), in_ch);
    for i in 0..pre {
        let id = format!("p{i}");
        let c = pick(&mut rng);
        let layer = match rng.gen_range(0..4) {
            0 if i == 0 => LayerSpec::conv(&id, &prev, ch, c, Kernel::K7, Stride::S2, true),
            1 if shape.1 > 8 && shape.2 > 8 => LayerSpec::conv(&id, &prev, ch, c, kernel(&mut rng), Stride::S2, true),
            2 if i > 0 => LayerSpec::passthrough(&id, LayerKind::MaxPool, &prev, ch)
                .with_kernel([Kernel::K2, Kernel::K3][rng.gen_range(0..2)])
                .with_stride(Stride::S2),
            _ => LayerSpec::conv(&id, &prev, ch, c, kernel(&mut rng), Stride::S1, rng.gen()),
        };
        ch = layer.out_ch;
        prev = id;
        layers.push(layer);
    }
    let rc = pick(&mut rng);
    layers.push(
        LayerSpec::conv("r", &prev, ch, rc, kernel(&mut rng), Stride::S1, true)
            .with_residual(ResidualRole::CacheStart)
            .with_concat(0),
    );
    let mut chain = "r".to_string();
    for i in 0..mid {
        let id = format!("b{i}");
        layers.push(LayerSpec::conv(&id, &chain, rc, rc, kernel(&mut rng), Stride::S1, true));
        chain = id;
    }
    layers.push(
        LayerSpec::conv("q", &chain, rc, rc, kernel(&mut rng), Stride::S1, rng.gen())
            .with_inputs(&[&chain, "r"])
            .with_residual(ResidualRole::AddCached)
            .with_concat(0),
    );
    let mc = pick(&mut rng);
    layers.push(LayerSpec::conv("m", "r", 2 * rc, mc, kernel(&mut rng), Stride::S1, true).with_inputs(&["r", "q"]));
    let (mut prev, mut ch) = ("m".to_string(), mc);
    for i in 0..post {
        let id = format!("f{i}");
        let layer = match rng.gen_range(0..4) {
            0 => LayerSpec::passthrough(&id, LayerKind::Upsample, &prev, ch),
            1 if i + 1 == post => LayerSpec::passthrough(&id, LayerKind::Sigmoid, &prev, ch),
            _ => {
                let c = pick(&mut rng);
                LayerSpec::conv(&id, &prev, ch, c, kernel(&mut rng), Stride::S1, rng.gen())
            }
        };
        ch = layer.out_ch;
        prev = id;
        layers.push(layer);
    }
    let n = layers.len();
    let link = layers[n.saturating_sub(2)].id.clone();
    let graph = ModelGraph::new(layers, outputs(&prev, &link)).expect("random model is valid");
    let weights = random_weights(&graph, seed ^ 0x5eed);
    (graph, weights, shape)
}
