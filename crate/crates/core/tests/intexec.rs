mod common;

use intq_core::intexec::{
    estimate_cost, exec_plan, op_census, quantize_input, simulate_exact, verify, Census, CostModel, IntTensor, Prim,
    VerifyConfig,
};
use intq_core::lowering::{lower_model, validate_plan, DyadicRational, IntegerPlan, LowerConfig, Op, OpKind};
use intq_core::quantcore::ActQuantizer;
use intq_core::traingraph::{BatchNorm, Conv2d, Layer, ModelGraph, QuantMode};
use intq_core::{Error, Tensor};
use proptest::prelude::*;

fn toy_plan(seed: u64) -> (ModelGraph, IntegerPlan) {
    let g = common::toy_qat(2, 8, 3, seed);
    let p = lower_model(&g, &LowerConfig::default()).unwrap();
    (g, p)
}

fn residual_graph(seed: u64) -> ModelGraph {
    let mut g = ModelGraph::new(1, QuantMode::Fp);
    let x = g.add("input", Layer::Input { shape: [1, 6, 6] }, &[]);
    let q0 = g.add("q0", Layer::quant(8, true), &[x]);
    let c1 = g.add("conv1", Layer::Conv2d(Conv2d::new(1, 3, 3, 1, 1, 8, true)), &[q0]);
    let b1 = g.add("bn1", Layer::BatchNorm(BatchNorm::new(3)), &[c1]);
    let r1 = g.add("relu1", Layer::Relu, &[b1]);
    let q1 = g.add("q1", Layer::quant(2, false), &[r1]);
    let c2 = g.add("conv2", Layer::Conv2d(Conv2d::new(3, 3, 3, 1, 1, 2, false)), &[q1]);
    let b2 = g.add("bn2", Layer::BatchNorm(BatchNorm::new(3)), &[c2]);
    let s = g.add("skip", Layer::SkipAdd, &[q1, b2]);
    let r2 = g.add("relu2", Layer::Relu, &[s]);
    let q2 = g.add("q2", Layer::quant(2, false), &[r2]);
    let p = g.add("pool", Layer::MaxPool { kernel: Some(2) }, &[q2]);
    let u = g.add("up", Layer::Upsample, &[p]);
    g.add("out", Layer::output_quant(8), &[u]);
    g.init_params(seed);
    let calib = common::random_input([8, 1, 6, 6], seed + 1);
    intq_core::traingraph::init_quantized_from_fp(&g.with_bits(2).unwrap(), &g, &calib).unwrap()
}

#[test]
fn census_examples() {
    let p = IntegerPlan::empty([1, 2, 2], ActQuantizer { nu: 1.0, bits: 8 });
    assert_eq!(op_census(&p).unwrap(), Census::default());

    let mut p = IntegerPlan::empty([1, 2, 2], ActQuantizer { nu: 1.0, bits: 8 });
    p.ops.push(Op {
        name: "conv".into(),
        inputs: vec![0],
        kind: OpKind::IntConv {
            in_c: 1,
            out_c: 1,
            kh: 1,
            kw: 1,
            stride: 1,
            pad: 0,
            weight_bits: 2,
            weights: vec![3],
            alpha: 1.0,
        },
    });
    let c = op_census(&p).unwrap();
    assert_eq!((c.get(Prim::Mul8), c.get(Prim::Add32)), (4, 0));
    p.ops.push(Op {
        name: "bn".into(),
        inputs: vec![1],
        kind: OpKind::BnOffsetAdd {
            offsets: vec![vec![2]],
            alpha: vec![vec![1.0]],
        },
    });
    let c = op_census(&p).unwrap();
    assert_eq!((c.get(Prim::Mul8), c.get(Prim::Add32)), (4, 4));
}

#[test]
fn cost_examples() {
    let m = CostModel::default();
    let mut c = Census::default();
    c.add(Prim::Mul8, 1);
    assert_eq!(estimate_cost(&c, &m).unwrap(), 0.2);
    let mut c = Census::default();
    c.add(Prim::Add32, 1);
    assert_eq!(estimate_cost(&c, &m).unwrap(), 0.1);
    let n = 1000;
    let mut c = Census::default();
    c.add(Prim::Mul8, n);
    c.add(Prim::Add32, n);
    assert!((estimate_cost(&c, &m).unwrap() - 0.3 * n as f64).abs() < 1e-9);
    assert_eq!(estimate_cost(&Census::default(), &m).unwrap(), 0.0);

    let mut partial = m.clone();
    partial.prices.remove(&Prim::Shift32);
    let mut c = Census::default();
    c.add(Prim::Shift32, 1);
    assert!(matches!(estimate_cost(&c, &partial), Err(Error::MissingPrice(_))));
    partial.prices.insert(Prim::Cmp32, -1.0);
    assert!(partial.validate().is_err());
    assert!(m.validate().is_ok());
}

#[test]
fn integer_plan_is_cheaper_than_float() {
    let (_, p) = toy_plan(1);
    let c = op_census(&p).unwrap();
    assert_eq!(c.float_entries(), 0);
    let m = CostModel::default();
    assert!(estimate_cost(&c, &m).unwrap() < estimate_cost(&c.as_float32(), &m).unwrap());
}

#[test]
fn zero_input_yields_bn_offsets() {
    let mut p = IntegerPlan::empty([1, 2, 2], ActQuantizer { nu: 1.0, bits: 8 });
    p.ops.push(Op {
        name: "conv".into(),
        inputs: vec![0],
        kind: OpKind::IntConv {
            in_c: 1,
            out_c: 2,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
            weight_bits: 2,
            weights: vec![1, -3, 3, -1, 1, 3, -3, 1, 1, 3, 3, 3, -1, -1, -1, 1, -3, 3],
            alpha: 1.0,
        },
    });
    p.ops.push(Op {
        name: "bn".into(),
        inputs: vec![1],
        kind: OpKind::BnOffsetAdd {
            offsets: vec![vec![5, -7]],
            alpha: vec![vec![1.0, 1.0]],
        },
    });
    let out = exec_plan(&p, &IntTensor::zeros([2, 1, 2, 2]), false).unwrap();
    assert_eq!(out.eta[0].data, [5, 5, 5, 5, -7, -7, -7, -7].repeat(2));
}

#[test]
fn exec_rejects_bad_input() {
    let (_, p) = toy_plan(2);
    let bad = IntTensor::from_vec([1, 1, 8, 8], vec![256; 64]).unwrap();
    assert!(exec_plan(&p, &bad, false).is_err());
    let wrong = IntTensor::zeros([1, 2, 8, 8]);
    assert!(exec_plan(&p, &wrong, false).is_err());
    let mut invalid = p.clone();
    invalid.ops[0].inputs = vec![5];
    assert!(matches!(exec_plan(&invalid, &IntTensor::zeros([1, 1, 8, 8]), false), Err(Error::InvalidPlan(_))));
}

#[test]
fn runtime_overflow_is_caught_with_op_index() {
    // Static validation rejects this plan; the executor's own check is reached
    // through the low-level kernel with an oversized accumulator.
    let x = IntTensor::from_vec([1, 1, 1, 2], vec![i32::MAX / 2, i32::MAX / 2]).unwrap();
    let r = intq_core::intexec::int_conv_apply(&x, &[3, 3], (1, 1, 1, 2, 1, 0));
    assert!(matches!(r, Err(Error::Overflow { op: 0 })));
}

fn check_plan(g: &ModelGraph, p: &IntegerPlan, n: usize, seed: u64) {
    let [c, h, w] = p.input_shape;
    let x = common::random_input([n, c, h, w], seed);
    let eta = quantize_input(p, &x).unwrap();
    let out = exec_plan(p, &eta, true).unwrap();
    let exact = simulate_exact(p, &eta).unwrap();
    for (s, (a, b)) in out.slots.as_ref().unwrap().iter().zip(&exact).enumerate() {
        for (t, r) in a.iter().zip(b) {
            assert!(r.matches(t), "slot {s} differs");
        }
    }
    assert_eq!(out.report.float_ops_before_dequant, 0);
    assert_eq!(out.report.census.float_entries(), 0);
    let static_census = op_census(p).unwrap();
    assert_eq!(out.report.census, static_census.scaled(n as u64));
    let report = validate_plan(p);
    assert!(report.valid);
    for (t, b) in out.report.ops.iter().zip(&report.op_bounds) {
        assert!(t.max_abs <= (*b).max(t.max_abs.min(255)), "{}: {} > {}", t.name, t.max_abs, b);
    }
    assert!(out.report.max_accumulator <= report.max_accumulator.max(255));
    let v = verify(p, g, &x, &VerifyConfig::default()).unwrap();
    assert!(v.exact, "{v:?}");
}

#[test]
fn toy_plan_is_bit_exact_and_census_sound() {
    let (g, p) = toy_plan(3);
    check_plan(&g, &p, 32, 7);
}

#[test]
fn residual_plan_is_bit_exact_and_census_sound() {
    let g = residual_graph(4);
    let p = lower_model(&g, &LowerConfig::default()).unwrap();
    assert_eq!(
        p.ops.iter().filter(|o| matches!(o.kind, OpKind::DyadicSkipAdd { .. })).count(),
        1
    );
    check_plan(&g, &p, 16, 8);
    let fqn = lower_model(
        &g,
        &LowerConfig {
            mode: intq_core::lowering::LowerMode::Fqn,
            ..LowerConfig::default()
        },
    )
    .unwrap();
    check_plan(&g, &fqn, 16, 9);
}

#[test]
fn exec_is_deterministic_across_threads() {
    let (_, p) = toy_plan(5);
    let x = common::random_input([8, 1, 8, 8], 11);
    let eta = quantize_input(&p, &x).unwrap();
    let seq = exec_plan(&p, &eta, false).unwrap();
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let (p, eta) = (p.clone(), eta.clone());
            std::thread::spawn(move || exec_plan(&p, &eta, false).unwrap())
        })
        .collect();
    for h in handles {
        let out = h.join().unwrap();
        assert_eq!(out.eta, seq.eta);
        assert_eq!(out.report.ops, seq.report.ops);
    }
}

#[test]
fn verify_reports_injected_fault() {
    let (g, mut p) = toy_plan(6);
    let x = common::random_input([16, 1, 8, 8], 12);
    let clean = verify(&p, &g, &x, &VerifyConfig::default()).unwrap();
    assert!(clean.exact && clean.passed, "{clean:?}");
    assert_eq!(clean.mismatched, 0);

    let idx = p.ops.iter().position(|o| matches!(o.kind, OpKind::BnOffsetAdd { .. })).unwrap();
    if let OpKind::BnOffsetAdd { offsets, .. } = &mut p.ops[idx].kind {
        offsets[0][0] += 1;
    }
    let r = verify(&p, &g, &x, &VerifyConfig::default()).unwrap();
    assert!(!r.exact && !r.passed);
    assert_eq!(r.first_mismatch_op, Some(idx));
    assert_eq!(r.first_mismatch_name.as_deref(), Some(p.ops[idx].name.as_str()));
}

#[test]
fn verify_checks_provenance() {
    let (mut g, p) = toy_plan(7);
    let x = common::random_input([4, 1, 8, 8], 13);
    if let Layer::Conv2d(c) = &mut g.nodes[2].layer {
        c.weights[0] += 0.5;
    }
    assert!(matches!(verify(&p, &g, &x, &VerifyConfig::default()), Err(Error::Provenance { .. })));
}

#[test]
fn toy_drift_is_small() {
    let (g, p) = toy_plan(8);
    let x = common::random_input([64, 1, 8, 8], 14);
    let r = verify(&p, &g, &x, &VerifyConfig::default()).unwrap();
    assert!(r.exact);
    assert!(r.drift_ok, "{r:?}");
    assert!(r.to_kv().starts_with("passed=true\n"));
}

#[test]
fn drift_is_zero_for_dyadic_scales() {
    let g = common::dyadic_graph();
    let p = lower_model(&g, &LowerConfig::default()).unwrap();
    for op in &p.ops {
        if let OpKind::Requant { mult, .. } = &op.kind {
            assert!(mult.iter().flatten().all(|m| *m == DyadicRational::ONE));
        }
    }
    let x = common::random_input([32, 1, 4, 4], 15);
    let r = verify(&p, &g, &x, &VerifyConfig::default()).unwrap();
    assert!(r.exact);
    assert_eq!(r.max_drift, Some(0.0));
    assert_eq!(r.mean_drift, Some(0.0));
    assert!(r.output_range.unwrap() > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exec_matches_exact_reference(seed in 0u64..1000, bits in prop::sample::select(vec![2u32, 3, 4])) {
        let g = common::toy_qat(bits, 6, 3, seed);
        let p = lower_model(&g, &LowerConfig::default()).unwrap();
        let x = common::random_input([4, 1, 6, 6], seed + 99);
        let eta = quantize_input(&p, &x).unwrap();
        let out = exec_plan(&p, &eta, true).unwrap();
        let exact = simulate_exact(&p, &eta).unwrap();
        for (a, b) in out.slots.unwrap().iter().zip(&exact) {
            for (t, r) in a.iter().zip(b) {
                prop_assert!(r.matches(t));
            }
        }
    }
}

#[test]
fn dequant_output_matches_shape() {
    let (_, p) = toy_plan(9);
    let x: Tensor = common::random_input([3, 1, 8, 8], 16);
    let out = exec_plan(&p, &quantize_input(&p, &x).unwrap(), false).unwrap();
    let real = out.real.unwrap();
    assert_eq!(real[0].shape, [3, 3, 1, 1]);
    assert_eq!(out.report.dequant_mults, 9);
}
