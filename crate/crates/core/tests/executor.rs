use half::f16;

use fcnvm::datapath::{conv_direct, conv_winograd, ConvWeights, OpCounters};
use fcnvm::executor::{run_pipeline, run_program, run_transposed, ExecConfig, ExecError};
use fcnvm::fixtures;
use fcnvm::io::half_to_bytes;
use fcnvm::ir::{Kernel, LayerSpec, ModelGraph, Outputs, Stride, WeightStore, INPUT_ID};
use fcnvm::mcode::{lower, LowerOptions, MicroOp, MicroProgram, OP_NULL, RES_ADD, RES_CACHE};
use fcnvm::tensor::Tensor;

fn single_conv(c: u32, o: u32, k: Kernel, s: Stride) -> (ModelGraph, WeightStore) {
    let layers = vec![LayerSpec::conv("c", INPUT_ID, c, o, k, s, true)];
    let g = ModelGraph::new(layers, Outputs { score: "c".into(), link: "c".into() }).unwrap();
    let w = fixtures::random_weights(&g, 11);
    (g, w)
}

fn compile(g: &ModelGraph, w: &WeightStore, shape: (usize, usize, usize)) -> MicroProgram {
    lower(g, w, shape, &LowerOptions::default()).unwrap()
}

#[test]
fn single_conv_matches_the_kernel_bit_for_bit() {
    let cfg = LowerOptions::default().bfp;
    for (k, s) in [(Kernel::K3, Stride::S1), (Kernel::K7, Stride::S2), (Kernel::K1, Stride::S1), (Kernel::K3, Stride::S2)] {
        let (g, w) = single_conv(5, 7, k, s);
        let shape = (5, 19, 13);
        let x = fixtures::random_input(shape, 1);
        let out = run_program(&compile(&g, &w, shape), &x, &ExecConfig::default()).unwrap();
        let p = w.get("c").unwrap();
        let mut oc = OpCounters::default();
        let expect = if (k, s) == (Kernel::K3, Stride::S1) {
            conv_winograd(&x, &ConvWeights::winograd(p, cfg).unwrap(), true, &mut oc).unwrap()
        } else {
            conv_direct(&x, &ConvWeights::direct(p, cfg).unwrap(), s.step(), true, &mut oc).unwrap()
        };
        assert_eq!(half_to_bytes(&out.outputs["score"]), half_to_bytes(&expect), "{k:?} {s:?}");
        assert_eq!(out.counters.mac_ops, oc.mac_ops);
    }
}

#[test]
fn tiling_sweep_on_odd_height() {
    let (g, w) = single_conv(4, 8, Kernel::K7, Stride::S1);
    let shape = (4, 37, 11);
    let p = compile(&g, &w, shape);
    let x = fixtures::random_input(shape, 2);
    let base = run_program(&p, &x, &ExecConfig::default()).unwrap();
    for buffer_bytes in [1 << 20, 4096, 2048, 1024] {
        let out = run_program(&p, &x, &ExecConfig { buffer_bytes, ..ExecConfig::default() }).unwrap();
        assert_eq!(out.outputs, base.outputs, "buffer {buffer_bytes}");
        assert_eq!(out.counters.mac_ops, base.counters.mac_ops);
    }
    let err = run_program(&p, &x, &ExecConfig { buffer_bytes: 256, ..ExecConfig::default() }).unwrap_err();
    assert!(matches!(err, ExecError::Config(_)), "{err}");
}

#[test]
fn transposed_run_on_square_input() {
    let g = fixtures::text_detector(3);
    let w = fixtures::random_weights(&g, 3);
    let shape = (3, 16, 16);
    let p = compile(&g, &w, shape);
    let x = fixtures::random_input(shape, 3);
    let a = run_program(&p, &x, &ExecConfig::default()).unwrap();
    let b = run_transposed(&p, &x, &ExecConfig::default()).unwrap();
    assert_eq!(a.outputs, b.outputs);
    assert_eq!(a.counters.mac_ops, b.counters.mac_ops);
}

#[test]
fn wide_input_runs_transposed() {
    let (g, w) = single_conv(1, 4, Kernel::K3, Stride::S1);
    let shape = (1, 64, 5000);
    let p = compile(&g, &w, shape);
    assert!(p.transposed);
    let x = fixtures::random_input(shape, 4);
    let out = run_program(&p, &x, &ExecConfig::default()).unwrap();
    assert_eq!(out.outputs["score"].shape(), (4, 64, 5000));

    let opts = LowerOptions { width_limit: 8192, ..LowerOptions::default() };
    let wide = lower(&g, &w, shape, &opts).unwrap();
    assert!(!wide.transposed);
    let direct = run_program(&wide, &x, &ExecConfig { width_limit: 8192, ..ExecConfig::default() }).unwrap();
    assert_eq!(out.outputs, direct.outputs);
}

#[test]
fn both_dimensions_over_the_limit_are_rejected() {
    let (g, w) = single_conv(1, 1, Kernel::K1, Stride::S1);
    let p = compile(&g, &w, (1, 16, 16));
    let x = fixtures::random_input((1, 16, 16), 5);
    let err = run_program(&p, &x, &ExecConfig { width_limit: 8, ..ExecConfig::default() }).unwrap_err();
    assert!(matches!(err, ExecError::Reject(_)), "{err}");
    assert!(lower(&g, &w, (1, 5000, 5000), &LowerOptions::default()).is_err());
}

#[test]
fn pipeline_depth_three_with_fuzz_matches_sequential() {
    let g = fixtures::text_detector(3);
    let w = fixtures::random_weights(&g, 6);
    let shape = (3, 20, 24);
    let p = compile(&g, &w, shape);
    let inputs: Vec<Tensor<f16>> = (0..5).map(|i| fixtures::random_input(shape, 100 + i)).collect();
    let seq = run_pipeline(&p, &inputs, &ExecConfig::default());
    for seed in 0..3 {
        let cfg = ExecConfig { pipeline_depth: 3, fuzz_seed: Some(seed), ..ExecConfig::default() };
        let par = run_pipeline(&p, &inputs, &cfg);
        for (a, b) in seq.results.iter().zip(&par.results) {
            assert_eq!(a.as_ref().unwrap().outputs, b.as_ref().unwrap().outputs);
        }
        assert!(par.makespan_cycles <= seq.makespan_cycles);
    }
}

fn null_op(res_op: u8) -> MicroOp {
    MicroOp {
        layer_type: OP_NULL,
        in_channels: 1,
        out_channels: 1,
        height: 4,
        width: 4,
        res_op,
        ..MicroOp::default()
    }
}

fn hand_built(ops: Vec<MicroOp>) -> MicroProgram {
    let (g, w) = single_conv(1, 1, Kernel::K1, Stride::S1);
    let mut p = compile(&g, &w, (1, 4, 4));
    p.layer_ids = (0..ops.len()).map(|i| format!("n{i}")).collect();
    p.extraction = ops;
    p.fusion.clear();
    p.outputs.clear();
    p
}

#[test]
fn null_program_has_no_outputs() {
    let p = hand_built(vec![null_op(0)]);
    let out = run_program(&p, &fixtures::random_input((1, 4, 4), 7), &ExecConfig::default()).unwrap();
    assert!(out.outputs.is_empty());
    assert_eq!(out.counters.mac_ops, 0);
}

#[test]
fn cache_misuse_faults() {
    let x = fixtures::random_input((1, 4, 4), 8);
    let nested = hand_built(vec![null_op(RES_CACHE), null_op(RES_CACHE)]);
    assert!(matches!(run_program(&nested, &x, &ExecConfig::default()), Err(ExecError::CacheFault(_))));
    let (g, w) = single_conv(1, 1, Kernel::K1, Stride::S1);
    let mut p = compile(&g, &w, (1, 4, 4));
    p.extraction[0].res_op = RES_ADD;
    assert!(matches!(run_program(&p, &x, &ExecConfig::default()), Err(ExecError::CacheFault(_))));
}

#[test]
fn small_memory_faults() {
    let (g, w) = single_conv(2, 2, Kernel::K3, Stride::S1);
    let p = compile(&g, &w, (2, 32, 32));
    let x = fixtures::random_input((2, 32, 32), 9);
    let err = run_program(&p, &x, &ExecConfig { mem_bytes: 1024, ..ExecConfig::default() }).unwrap_err();
    assert!(matches!(err, ExecError::MemoryFault(_)), "{err}");
}

#[test]
fn trace_has_one_line_per_op() {
    let g = fixtures::text_detector(3);
    let w = fixtures::random_weights(&g, 1);
    let p = compile(&g, &w, (3, 8, 8));
    let out = run_program(&p, &fixtures::random_input((3, 8, 8), 1), &ExecConfig { trace: true, ..ExecConfig::default() }).unwrap();
    assert_eq!(out.trace.len(), p.len());
}

#[test]
fn program_file_round_trip_runs_identically() {
    let g = fixtures::text_detector(3);
    let w = fixtures::random_weights(&g, 2);
    let p = compile(&g, &w, (3, 12, 8));
    let q = MicroProgram::from_bytes(&p.to_bytes().unwrap()).unwrap();
    assert_eq!(p, q);
    let x = fixtures::random_input((3, 12, 8), 2);
    assert_eq!(run_program(&p, &x, &ExecConfig::default()).unwrap().outputs, run_program(&q, &x, &ExecConfig::default()).unwrap().outputs);
}
