#![allow(dead_code)]

use intq_core::quantcore::{ActQuantizer, SignedQuantizer, WtQuantizer};
use intq_core::traingraph::{init_quantized_from_fp, BatchNorm, Conv2d, Dataset, Layer, Linear, ModelGraph, QuantMode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Input -> Quant8 -> conv3x3 -> BN -> ReLU -> Quant(b) -> conv3x3 -> BN -> ReLU -> linear,
/// with intervals calibrated on a random batch.
pub fn two_conv_net(bits: u32, in_hw: usize, classes: usize, seed: u64) -> ModelGraph {
    let mut g = ModelGraph::new(1, QuantMode::Fp);
    let x = g.add("input", Layer::Input { shape: [1, in_hw, in_hw] }, &[]);
    let q0 = g.add("q0", Layer::quant(8, true), &[x]);
    let c1 = g.add("conv1", Layer::Conv2d(Conv2d::new(1, 4, 3, 1, 1, 8, true)), &[q0]);
    let b1 = g.add("bn1", Layer::BatchNorm(BatchNorm::new(4)), &[c1]);
    let r1 = g.add("relu1", Layer::Relu, &[b1]);
    let q1 = g.add("q1", Layer::quant(bits, false), &[r1]);
    let c2 = g.add("conv2", Layer::Conv2d(Conv2d::new(4, 4, 3, 1, 1, bits, false)), &[q1]);
    let b2 = g.add("bn2", Layer::BatchNorm(BatchNorm::new(4)), &[c2]);
    let r2 = g.add("relu2", Layer::Relu, &[b2]);
    g.add("fc", Layer::Linear(Linear::new([4, in_hw, in_hw], classes, 8, true)), &[r2]);
    g.init_params(seed);
    g.snap_to_f32();
    let calib = random_input([8, 1, in_hw, in_hw], seed ^ 0x5eed);
    init_quantized_from_fp(&g.with_bits(bits).unwrap(), &g, &calib).unwrap()
}

/// Conv block followed by a boundary linear classifier and signed output quantizer.
pub fn toy_classifier(bits: u32, hw: usize, classes: usize, seed: u64) -> ModelGraph {
    let mut g = ModelGraph::new(1, QuantMode::Fp);
    let x = g.add("input", Layer::Input { shape: [1, hw, hw] }, &[]);
    let q0 = g.add("q0", Layer::quant(8, true), &[x]);
    let c1 = g.add("conv1", Layer::Conv2d(Conv2d::new(1, 4, 3, 1, 1, 8, true)), &[q0]);
    let b1 = g.add("bn1", Layer::BatchNorm(BatchNorm::new(4)), &[c1]);
    let r1 = g.add("relu1", Layer::Relu, &[b1]);
    let q1 = g.add("q1", Layer::quant(bits, false), &[r1]);
    let c2 = g.add("conv2", Layer::Conv2d(Conv2d::new(4, 4, 3, 1, 1, bits, false)), &[q1]);
    let b2 = g.add("bn2", Layer::BatchNorm(BatchNorm::new(4)), &[c2]);
    let r2 = g.add("relu2", Layer::Relu, &[b2]);
    let q2 = g.add("q2", Layer::quant(8, true), &[r2]);
    let fc = g.add("fc", Layer::Linear(Linear::new([4, hw, hw], classes, 8, true)), &[q2]);
    g.add("out", Layer::output_quant(8), &[fc]);
    g.init_params(seed);
    g.snap_to_f32();
    g
}

/// Two classes: bright top half versus bright bottom half, plus noise.
pub fn halves_dataset(n: usize, hw: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Tensor::zeros([n, 1, hw, hw]);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        for y in 0..hw {
            for x in 0..hw {
                let on = (y < hw / 2) == (label == 0);
                let v = if on { 0.8 } else { 0.0 } + rng.gen_range(0.0..0.2);
                img.data[(i * hw + y) * hw + x] = v;
            }
        }
        labels.push(label);
    }
    Dataset::new(img, labels, vec![0; n]).unwrap()
}

pub fn random_input(shape: [usize; 4], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-0.5..1.5)).collect()).unwrap()
}

/// `r = m * 2^e` with `m` odd (or zero).
pub fn f64_parts(r: f64) -> (i128, i32) {
    assert!(r.is_finite() && r > 0.0);
    let bits = r.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = (bits & ((1u64 << 52) - 1)) as i128;
    let (mut m, mut e) = if exp == 0 { (frac, -1074) } else { (frac | (1i128 << 52), exp - 1075) };
    while m & 1 == 0 {
        m >>= 1;
        e += 1;
    }
    (m, e)
}

/// `|r - c / 2^d| * 2^scale` as an exact integer, for `scale >= d` and `scale >= -e`.
pub fn scaled_error(r: (i128, i32), c: i64, d: u32, scale: i32) -> i128 {
    let (m, e) = r;
    let lhs = m << (e + scale);
    let rhs = (c as i128) << (scale - d as i32);
    (lhs - rhs).abs()
}

/// Exact minimum of `|r - c/2^d|` over `d <= d_max`, `1 <= c <= c_cap(d)`, as
/// `(scaled error, scale)`. The error is convex in `c`, so checking the
/// neighbours of `r 2^d` and both ends of the feasible range is exhaustive.
pub fn brute_force_dyadic(r: f64, d_max: u32, max_abs: i64) -> Option<(i128, i32, Vec<(i64, u32)>)> {
    let parts = f64_parts(r);
    let scale = (d_max as i32).max(-parts.1);
    let mut best: Option<i128> = None;
    let mut argmins = Vec::new();
    for d in 0..=d_max {
        let half = if d == 0 { 0 } else { 1i64 << (d - 1) };
        let cap = (i32::MAX as i64 - half) / max_abs.max(1);
        if cap < 1 {
            continue;
        }
        let centre = (r * (d as f64).exp2()).floor() as i64;
        let mut cands: Vec<i64> = (centre - 2..=centre + 2).collect();
        cands.extend([1, cap]);
        for c in cands {
            if c < 1 || c > cap {
                continue;
            }
            let err = scaled_error(parts, c, d, scale);
            match best {
                Some(b) if err > b => {}
                Some(b) if err == b => {
                    if !argmins.contains(&(c, d)) {
                        argmins.push((c, d));
                    }
                }
                _ => {
                    best = Some(err);
                    argmins = vec![(c, d)];
                }
            }
        }
    }
    best.map(|b| (b, scale, argmins))
}

pub struct FactoredProductReport {
    pub pairs: usize,
    /// Pairs where the factored integer form differs from the product in exact arithmetic.
    pub mismatches: usize,
    /// Largest relative f64 discrepancy between the two evaluation orders, in units of epsilon.
    pub max_float_eps: f64,
}

/// Exhaustive check over every `(eta_x, eta_w)` that the quantizers' grid values
/// satisfy `xbar * wbar = eta_x (2 eta_w - Q) alpha_conv` with
/// `alpha_conv = nu_x nu_w / Q^2`, evaluated in exact rationals.
pub fn factored_product_check(bits: u32, nx: f64, nw: f64) -> FactoredProductReport {
    use intq_core::lowering::{lower_conv, map_weights};
    use intq_core::quantcore::{quantize_activation, quantize_weight, ActQuantizer, WtQuantizer};
    use intq_core::traingraph::Conv2d;
    use num_bigint::BigInt;
    use num_rational::BigRational;

    let aq = ActQuantizer { nu: nx, bits };
    let wq = WtQuantizer { nu: nw, bits };
    let q = (1i64 << bits) - 1;
    // Grid points; each must quantize back to its own code.
    let xs: Vec<f64> = (0..=q).map(|k| k as f64 * nx / q as f64).collect();
    let ws: Vec<f64> = (0..=q).map(|k| (2 * k - q) as f64 * nw / q as f64).collect();
    let (ex, xbar) = quantize_activation(&xs, &aq).unwrap();
    let (ew, wbar) = quantize_weight(&ws, &wq).unwrap();
    assert_eq!(ex, (0..=q as i32).collect::<Vec<_>>());
    assert_eq!(ew, (0..=q as i32).collect::<Vec<_>>());
    let mut conv = Conv2d::new(1, 1, 1, 1, 0, bits, false);
    conv.wq = wq;
    let (_, alpha) = lower_conv(&conv, &aq).unwrap();
    let mapped = map_weights(&ew, bits);

    let rat = |v: f64| BigRational::from_float(v).unwrap();
    let qq = BigRational::from_integer(BigInt::from(q));
    let (rx, rw) = (rat(nx), rat(nw));
    let mut rep = FactoredProductReport {
        pairs: 0,
        mismatches: 0,
        max_float_eps: 0.0,
    };
    for (i, &xf) in xbar.iter().enumerate() {
        for (j, &wf) in wbar.iter().enumerate() {
            rep.pairs += 1;
            let x = BigRational::from_integer(BigInt::from(ex[i])) * &rx / &qq;
            let w = BigRational::from_integer(BigInt::from(2 * ew[j] as i64 - q)) * &rw / &qq;
            let factored = BigRational::from_integer(BigInt::from(ex[i] as i64 * mapped[j] as i64)) * &rx * &rw
                / (&qq * &qq);
            if x * w != factored {
                rep.mismatches += 1;
            }
            let direct = xf * wf;
            let fl = (ex[i] * mapped[j]) as f64 * alpha;
            if direct != 0.0 {
                rep.max_float_eps = rep.max_float_eps.max(((direct - fl) / direct).abs() / f64::EPSILON);
            }
        }
    }
    rep
}

/// [`toy_classifier`] fine-tune initialization at `bits`, calibrated on random input.
pub fn toy_qat(bits: u32, hw: usize, classes: usize, seed: u64) -> ModelGraph {
    let fp = toy_classifier(bits, hw, classes, seed);
    let calib = random_input([16, 1, hw, hw], seed ^ 0xca1b);
    init_quantized_from_fp(&fp.with_bits(bits).unwrap(), &fp, &calib).unwrap()
}

/// Every scale ratio in this graph is exactly 1 after lowering, so the
/// integer plan reproduces the training graph bit for bit.
pub fn dyadic_graph() -> ModelGraph {
    let mut g = ModelGraph::new(1, QuantMode::Qat);
    let x = g.add("input", Layer::Input { shape: [1, 4, 4] }, &[]);
    let q0 = g.add(
        "q0",
        Layer::Quant {
            q: ActQuantizer { nu: 255.0 / 64.0, bits: 8 },
            boundary: true,
        },
        &[x],
    );
    let mut conv = Conv2d::new(1, 2, 3, 1, 1, 2, false);
    conv.wq = WtQuantizer { nu: 0.75, bits: 2 };
    let grid = [-0.75, -0.25, 0.25, 0.75];
    conv.weights = (0..18).map(|i| grid[(i * 7 + 3) % 4]).collect();
    let c = g.add("conv", Layer::Conv2d(conv), &[q0]);
    let mut bn = BatchNorm::new(2);
    bn.eps = 0.25;
    bn.running_var = vec![0.75, 0.75];
    bn.running_mean = vec![3.0 / 256.0, -5.0 / 256.0];
    let b = g.add("bn", Layer::BatchNorm(bn), &[c]);
    let r = g.add("relu", Layer::Relu, &[b]);
    let q1 = g.add(
        "q1",
        Layer::Quant {
            q: ActQuantizer { nu: 3.0 / 256.0, bits: 2 },
            boundary: false,
        },
        &[r],
    );
    g.add(
        "out",
        Layer::OutputQuant {
            q: SignedQuantizer { nu: 127.0 / 256.0, bits: 8 },
        },
        &[q1],
    );
    g
}
