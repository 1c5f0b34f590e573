use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use gldn_core::training::{train_step, Adam, AdamConfig};
use gldn_core::{Gldn, ModelConfig, Tape, Tensor};

fn noise(shape: &[usize], seed: u32) -> Tensor<f32> {
    let mut s = seed | 1;
    Tensor::from_fn(shape, |_| {
        s ^= s << 13;
        s ^= s >> 17;
        s ^= s << 5;
        s as f32 / u32::MAX as f32 - 0.5
    })
}

fn conv3d(c: &mut Criterion) {
    let x = noise(&[2, 16, 16, 24, 16], 1);
    let w = noise(&[16, 16, 3, 3, 3], 2);
    let b = noise(&[16], 3);
    c.bench_function("conv3d forward 2x16x16x24x16", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let (x, w, b) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
            black_box(t.conv3d(x, w, b).unwrap());
        })
    });
    c.bench_function("conv3d forward+backward 2x16x16x24x16", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let x = t.param(x.clone());
            let (w, b) = (t.param(w.clone()), t.param(b.clone()));
            let y = t.conv3d(x, w, b).unwrap();
            let loss = t.sum(y).unwrap();
            t.backward(loss).unwrap();
            black_box(t.grad(w).is_some());
        })
    });
}

fn model(c: &mut Criterion) {
    let mut g = c.benchmark_group("gldn");
    g.sample_size(10);
    for (name, cfg, batch) in [("tiny", ModelConfig::tiny(), 4), ("desk", ModelConfig::desk(), 2)] {
        let (net, store) = Gldn::build::<f32>(&cfg, 0).unwrap();
        let [d, h, w] = cfg.input_shape;
        let x = noise(&[batch, 1, d, h, w], 4);
        let ages: Vec<f64> = (0..batch).map(|i| 20.0 + 15.0 * i as f64).collect();
        g.bench_function(format!("{name} predict batch {batch}"), |bench| {
            bench.iter(|| black_box(net.predict(&store, &x).unwrap()))
        });
        g.bench_function(format!("{name} train_step batch {batch}"), |bench| {
            bench.iter_batched(
                || (store.clone(), Adam::new(&store, AdamConfig::default())),
                |(mut s, mut adam)| {
                    black_box(train_step(&net, &mut s, &mut adam, x.clone(), &ages, 2.0, 1.0, 1e-4).unwrap())
                },
                BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, conv3d, model);
criterion_main!(benches);
