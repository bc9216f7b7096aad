use std::collections::BTreeMap;

use half::f16;
use proptest::prelude::*;

use fcnvm::bfp::{half_from_f64, BfpBlock};
use fcnvm::datapath::UpsampleMode;
use fcnvm::fixtures;
use fcnvm::ir::{parse_model, ConvParams, Kernel, LayerSpec, ModelGraph, Outputs, Stride, WeightStore, INPUT_ID};
use fcnvm::mcode::{decode, encode, MicroOp, Word256};
use fcnvm::oracle::{compare_runs, reference_forward};
use fcnvm::postproc::{extract_boxes, PredictionMaps};
use fcnvm::tensor::Tensor;

fn micro_op() -> impl Strategy<Value = MicroOp> {
    (0u8..4, 0u8..4, any::<u16>(), any::<u16>(), 0u32..1 << 20, 0u32..1 << 15, 0u8..4, 0u8..2, 0u8..3, 0u64..1 << 34, 0u64..1 << 34)
        .prop_map(|(t, tr, ic, oc, h, w, k, s, r, ia, oa)| MicroOp {
            layer_type: t,
            transpose_relu: tr,
            in_channels: ic as u32,
            out_channels: oc as u32,
            height: h,
            width: w,
            kernel_code: match t {
                1 => k % 3,
                3 => k % 2,
                _ => k,
            },
            stride_code: s,
            res_op: r,
            in_addr: ia,
            out_addr: oa,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn word_round_trip(op in micro_op()) {
        let w = encode(&op).unwrap();
        prop_assert_eq!(decode(&w).unwrap(), op);
        prop_assert_eq!(Word256::from_hex(&w.to_hex()), Some(w));
    }

    #[test]
    fn reserved_bits_are_rejected(op in micro_op(), bit in 144usize..256) {
        let mut w = encode(&op).unwrap();
        w.0[bit / 8] |= 1 << (bit % 8);
        prop_assert!(decode(&w).is_err());
    }

    #[test]
    fn model_json_round_trip(seed in 0u64..10_000) {
        let (g, _, _) = fixtures::random_model(seed);
        prop_assert_eq!(parse_model(&g.to_json()).unwrap(), g);
    }

    #[test]
    fn bfp_scale_covariance(vals in prop::collection::vec(-1000.0f64..1000.0, 1..64), k in -20i32..20, bits in 4u32..=24) {
        let scaled: Vec<f64> = vals.iter().map(|v| v * 2f64.powi(k)).collect();
        let a = BfpBlock::normalize(&vals, bits).unwrap();
        let b = BfpBlock::normalize(&scaled, bits).unwrap();
        prop_assert_eq!(a.mantissas(), b.mantissas());
        if a.mantissas().iter().any(|&m| m != 0) {
            prop_assert_eq!(a.shared_exponent() + k, b.shared_exponent());
        }
    }

    #[test]
    fn bfp_error_is_below_one_lsb(vals in prop::collection::vec(-10.0f64..10.0, 1..64), bits in 4u32..=24) {
        let b = BfpBlock::normalize(&vals, bits).unwrap();
        let lsb = 2f64.powi(b.lsb_exponent());
        for (v, r) in vals.iter().zip(b.reconstruct()) {
            prop_assert!((v - r).abs() < lsb);
            prop_assert!(r.abs() <= v.abs());
        }
    }

    #[test]
    fn half_rounding_is_nearest(x in -70000.0f64..70000.0) {
        let (h, sat) = half_from_f64(x);
        if !sat {
            let ours = h.to_f64();
            let theirs = f16::from_f64(x).to_f64();
            prop_assert_eq!(ours, theirs);
        }
    }

    #[test]
    fn raising_score_threshold_never_adds_pixels(
        scores in prop::collection::vec(0.0f32..1.0, 64),
        links in prop::collection::vec(0.0f32..1.0, 512),
        t1 in 0.05f32..0.95,
        dt in 0.0f32..0.5,
    ) {
        let t2 = (t1 + dt).min(0.99);
        let maps = PredictionMaps::new(
            Tensor::from_vec(1, 8, 8, scores.iter().map(|&v| f16::from_f32(v)).collect()).unwrap(),
            Tensor::from_vec(8, 8, 8, links.iter().map(|&v| f16::from_f32(v)).collect()).unwrap(),
        ).unwrap();
        let area = |t| extract_boxes(&maps, t, 0.5, 0).unwrap().iter().map(|b| b.area).sum::<usize>();
        prop_assert!(area(t2) <= area(t1));
    }

    #[test]
    fn compare_is_symmetric(a in prop::collection::vec(-5.0f64..5.0, 1..32), d in prop::collection::vec(-0.1f64..0.1, 32)) {
        let n = a.len();
        let b: Vec<f64> = a.iter().zip(&d).map(|(x, e)| x + e).collect();
        let wrap = |v: Vec<f64>| BTreeMap::from([("t".to_string(), Tensor::from_vec(1, 1, n, v).unwrap())]);
        let ab = compare_runs(&wrap(a.clone()), &wrap(b.clone())).unwrap();
        let ba = compare_runs(&wrap(b.clone()), &wrap(a.clone())).unwrap();
        prop_assert_eq!(ab.max_abs(), ba.max_abs());
        prop_assert_eq!(ab.tensors[0].rms, ba.tensors[0].rms);
        prop_assert_eq!(ab.max_abs() == 0.0, a == b);
    }
}

fn linear_model() -> (ModelGraph, WeightStore) {
    let layers = vec![
        LayerSpec::conv("a", INPUT_ID, 2, 3, Kernel::K3, Stride::S1, false),
        LayerSpec::conv("b", "a", 3, 2, Kernel::K7, Stride::S2, false),
    ];
    let g = ModelGraph::new(layers, Outputs { score: "b".into(), link: "a".into() }).unwrap();
    let mut w = fixtures::random_weights(&g, 3);
    // linearity needs zero biases
    for (id, p) in w.clone().iter() {
        w.insert(id.clone(), ConvParams::new(p.out_ch, p.in_ch, p.kernel, p.weight.clone(), vec![0.0; p.out_ch]).unwrap());
    }
    (g, w)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn oracle_is_linear_without_relu(seed in 0u64..1000) {
        let (g, w) = linear_model();
        let x = fixtures::random_input((2, 9, 11), seed).to_f32();
        let y = fixtures::random_input((2, 9, 11), seed + 1).to_f32();
        let sum = Tensor::from_fn(2, 9, 11, |c, i, j| x.at(c, i, j) + y.at(c, i, j));
        let f = |t: &Tensor<f32>| reference_forward(&g, &w, t, UpsampleMode::Bilinear).unwrap();
        let (fx, fy, fs) = (f(&x), f(&y), f(&sum));
        for k in ["score", "link"] {
            for ((a, b), s) in fx[k].data().iter().zip(fy[k].data()).zip(fs[k].data()) {
                prop_assert!((a + b - s).abs() <= 1e-5 * (1.0 + s.abs()));
            }
        }
    }

    #[test]
    fn oracle_precisions_agree(seed in 0u64..1000) {
        let (g, w, shape) = fixtures::random_model(seed);
        let x = fixtures::random_input(shape, seed);
        let lo = reference_forward(&g, &w, &x.to_f32(), UpsampleMode::Bilinear).unwrap();
        let hi = reference_forward(&g, &w, &x.map(|v| v.to_f64()), UpsampleMode::Bilinear).unwrap();
        let lo: BTreeMap<_, _> = lo.iter().map(|(k, v)| (k.clone(), v.map(|x| x as f64))).collect();
        prop_assert!(compare_runs(&lo, &hi).unwrap().max_rel() < 1e-5);
    }
}

#[test]
fn identity_network_reproduces_input() {
    let layers = vec![LayerSpec::conv("id", INPUT_ID, 2, 2, Kernel::K1, Stride::S1, false)];
    let g = ModelGraph::new(layers, Outputs { score: "id".into(), link: "id".into() }).unwrap();
    let mut w = WeightStore::new();
    w.insert("id", ConvParams::new(2, 2, 1, vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 2]).unwrap());
    let x = fixtures::random_input((2, 5, 4), 1).to_f32();
    let out = reference_forward(&g, &w, &x, UpsampleMode::Bilinear).unwrap();
    assert_eq!(out["score"], x);
}

#[test]
fn hand_computed_two_layer_network() {
    // 1x4x4 ramp, 3x3 box sum then 1x1 scale by -0.5 with bias 1 and relu
    let layers = vec![
        LayerSpec::conv("box", INPUT_ID, 1, 1, Kernel::K3, Stride::S1, false),
        LayerSpec::conv("out", "box", 1, 1, Kernel::K1, Stride::S1, true),
    ];
    let g = ModelGraph::new(layers, Outputs { score: "out".into(), link: "box".into() }).unwrap();
    let mut w = WeightStore::new();
    w.insert("box", ConvParams::new(1, 1, 3, vec![1.0; 9], vec![0.0]).unwrap());
    w.insert("out", ConvParams::new(1, 1, 1, vec![-0.5], vec![1.0]).unwrap());
    let x = Tensor::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f64 * 0.25);
    let out = reference_forward(&g, &w, &x, UpsampleMode::Bilinear).unwrap();
    #[rustfmt::skip]
    let boxed = [
        2.5, 4.5, 6.0, 4.5,
        6.75, 11.25, 13.5, 9.75,
        12.75, 20.25, 22.5, 15.75,
        10.5, 16.5, 18.0, 12.5,
    ];
    assert_eq!(out["link"].data(), &boxed);
    let expect: Vec<f64> = boxed.iter().map(|b| (1.0 - 0.5 * b).max(0.0)).collect();
    assert_eq!(out["score"].data(), &expect[..]);
}
