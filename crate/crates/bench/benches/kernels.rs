use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use forgetir_core::degrade::{build_corpus, CorpusConfig, DegradationParams};
use forgetir_core::metrics::{psnr, ssim};
use forgetir_core::train::{train_step, Adam, OptimizerConfig, PatchBatch};
use forgetir_core::unlearn::{partition, unlearn_step, ForgetBatch, UnlearnConfig};
use forgetir_core::{DegradationKind, Graph, ModelConfig, RestorationModel, Tensor};

fn ramp(shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| ((i as f64) * 0.618).fract() * scale).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let x = ramp(&[8, 16, 32, 32], 1.0);
    let k = ramp(&[16, 16, 3, 3], 0.1);
    c.bench_function("conv2d 8x16x32x32 k3 forward+backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.input(&x.clone().with_grad()).unwrap();
            let kv = g.input(&k.clone().with_grad()).unwrap();
            let y = g.conv2d(xv, kv, 1, 1).unwrap();
            let l = g.mean(y).unwrap();
            g.backward(l).unwrap();
            black_box(g.grad(kv).unwrap()[0])
        })
    });
}

fn steps(c: &mut Criterion) {
    let cfg = CorpusConfig {
        per_kind: 8,
        ..CorpusConfig::default()
    };
    let corpus = build_corpus(&cfg, &DegradationParams::default()).unwrap();
    let pairs: Vec<_> = corpus.iter().step_by(3).collect();
    let batch = PatchBatch::whole(&pairs).unwrap();
    let model = RestorationModel::new(ModelConfig::default()).unwrap();

    c.bench_function("restore_batch 8x3x48x48", |b| {
        b.iter(|| black_box(model.restore_batch(&batch.degraded).unwrap()))
    });

    c.bench_function("train_step batch 8 48x48", |b| {
        b.iter_batched(
            || (model.clone(), Adam::new(OptimizerConfig::default()).unwrap()),
            |(mut m, mut opt)| black_box(train_step(&mut m, &batch, &mut opt).unwrap()),
            BatchSize::SmallInput,
        )
    });

    let part = partition(&corpus, DegradationKind::Haze).unwrap();
    let fpairs: Vec<_> = part.forget().iter().take(8).collect();
    let rpairs: Vec<_> = part.retain().iter().take(8).collect();
    let forget = ForgetBatch::new(PatchBatch::whole(&fpairs).unwrap(), 1).unwrap();
    let retain = PatchBatch::whole(&rpairs).unwrap();
    let ucfg = UnlearnConfig::default();
    c.bench_function("unlearn_step batch 8+8 48x48", |b| {
        b.iter_batched(
            || (model.clone(), Adam::new(ucfg.optimizer).unwrap()),
            |(mut m, mut opt)| black_box(unlearn_step(&mut m, &forget, Some(&retain), &ucfg, &mut opt).unwrap()),
            BatchSize::SmallInput,
        )
    });
}

fn metrics(c: &mut Criterion) {
    let a = ramp(&[3, 48, 48], 1.0);
    let b = ramp(&[3, 48, 48], 0.9);
    c.bench_function("psnr 3x48x48", |bch| bch.iter(|| black_box(psnr(&a, &b).unwrap())));
    c.bench_function("ssim 3x48x48", |bch| bch.iter(|| black_box(ssim(&a, &b).unwrap())));
}

criterion_group!(benches, conv, steps, metrics);
criterion_main!(benches);
