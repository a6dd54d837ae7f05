use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use setsum_bench::{desk_model, random_images};
use setsum_core::regressor::{hydra_loss, LossKind};
use setsum_core::tensor::{AdadeltaConfig, AdadeltaState};
use setsum_core::Tensor;

fn forward_backward(c: &mut Criterion) {
    let model = desk_model(16);
    let images = random_images(4, 16, 1);
    c.bench_function("predict 16x16", |b| {
        b.iter(|| model.predict(black_box(&images[0])).unwrap())
    });
    let slots: Vec<Option<&Tensor>> =
        vec![Some(&images[0]), Some(&images[1]), None, Some(&images[3])];
    c.bench_function("set loss n=4 with gradients", |b| {
        b.iter(|| hydra_loss(&model, black_box(&slots), 6.0, LossKind::Mse, None).unwrap())
    });
}

fn optimizer_step(c: &mut Criterion) {
    let mut model = desk_model(16);
    let images = random_images(4, 16, 2);
    let slots: Vec<Option<&Tensor>> = images.iter().map(Some).collect();
    let grads = hydra_loss(&model, &slots, 6.0, LossKind::Mse, None)
        .unwrap()
        .gradients;
    let mut state = AdadeltaState::new(model.params(), AdadeltaConfig::default()).unwrap();
    c.bench_function("adadelta step", |b| {
        b.iter(|| state.step(model.params_mut(), black_box(&grads)).unwrap())
    });
}

criterion_group!(benches, forward_backward, optimizer_step);
criterion_main!(benches);
