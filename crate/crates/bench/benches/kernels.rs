use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use intq_core::intexec::{exec_plan, quantize_input};
use intq_core::lowering::{dyadic_approx, lower_model, LowerConfig};
use intq_core::pyramidlab::{build_fpn_model, gen_dataset, to_dataset, BnMode, DatasetConfig, FpnConfig, Precision};
use intq_core::traingraph::{forward, init_quantized_from_fp, ForwardOptions, ModelGraph};
use intq_core::Tensor;

const IMAGE: usize = 16;

fn images(n: usize) -> Tensor {
    let cfg = DatasetConfig {
        image: IMAGE,
        ..Default::default()
    };
    to_dataset(&gen_dataset(1, n, &cfg).unwrap(), IMAGE).unwrap().images
}

/// Calibrated but untrained 2-bit pyramid model.
fn model(mode: BnMode) -> ModelGraph {
    let cfg = FpnConfig {
        image: IMAGE,
        ..Default::default()
    };
    let mut fp = build_fpn_model(mode, Precision::Fp, &cfg).unwrap();
    fp.init_params(0);
    let template = build_fpn_model(mode, Precision::Bits(2), &cfg).unwrap();
    init_quantized_from_fp(&template, &fp, &images(64)).unwrap()
}

fn bench_exec(c: &mut Criterion) {
    let mut group = c.benchmark_group("exec_plan");
    for mode in [BnMode::Shared, BnMode::Multilevel] {
        let p = lower_model(&model(mode), &LowerConfig::default()).unwrap();
        let eta = quantize_input(&p, &images(32)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(mode), &eta, |b, eta| {
            b.iter(|| exec_plan(&p, black_box(eta), false).unwrap())
        });
    }
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let g = model(BnMode::Multilevel);
    let x = images(32);
    c.bench_function("forward_eval", |b| {
        b.iter(|| forward(&g, black_box(&x), &ForwardOptions::eval()).unwrap())
    });
}

fn bench_dyadic(c: &mut Criterion) {
    let ratios: Vec<f64> = (0..64).map(|k| (k as f64 / 4.0 - 8.0).exp2() * 1.37).collect();
    let mut group = c.benchmark_group("dyadic_approx");
    for d_max in [16u32, 30] {
        group.bench_with_input(BenchmarkId::from_parameter(d_max), &d_max, |b, &d| {
            b.iter(|| {
                for &r in &ratios {
                    black_box(dyadic_approx(r, 1.0, d, 255).unwrap());
                }
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_exec, bench_forward, bench_dyadic);
criterion_main!(benches);
