use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use emag_bench::{attention, model, points};
use emag_core::attention_guidance::{Branch, EmaState};
use emag_core::hooks::AttentionHookBus;
use emag_core::metrics::distribution::{frechet_gaussian, prdc};
use emag_core::model::{Conditioning, Denoiser};
use emag_core::rng::NoiseStream;

fn forward(c: &mut Criterion) {
    let m = model();
    let x = NoiseStream::new(0, 0).normal_tensor([8, m.pixels()]);
    let cond = Conditioning::labels(vec![Some(1); 8]);
    let time = vec![0.5; 8];
    c.bench_function("forward_batch8", |b| {
        b.iter(|| {
            m.predict(black_box(&x), &time, &cond, &mut AttentionHookBus::new())
                .unwrap()
        })
    });
}

fn ema(c: &mut Criterion) {
    let a = attention(8, 1);
    c.bench_function("ema_update", |b| {
        let mut state = EmaState::new(0.988).unwrap();
        b.iter(|| {
            state.update(1, Branch::Conditional, black_box(&a)).unwrap();
        })
    });
}

fn metrics(c: &mut Criterion) {
    let (real, fake) = (points(256, 2), points(256, 3));
    c.bench_function("prdc_256", |b| b.iter(|| prdc(black_box(&real), &fake, 5).unwrap()));
    c.bench_function("frechet_256", |b| {
        b.iter(|| frechet_gaussian(black_box(&real), &fake).unwrap())
    });
}

criterion_group!(benches, forward, ema, metrics);
criterion_main!(benches);
