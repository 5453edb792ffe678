//! Scoring and gradient kernels on the training hot path.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dirrec_bench::fixture;
use dirrec_core::embedding::{event_loss_and_grads, scores_for_context, GradientBuffer};
use dirrec_core::evaluation::EvalPhase;
use dirrec_core::models::ModelKind;

fn bench_axis_scores(c: &mut Criterion) {
    let fx = fixture(ModelKind::DirMf, 16);
    let ctx: Vec<f64> = {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (0..16).map(|_| rng.gen_range(-0.5..0.5)).collect()
    };
    c.bench_function("scores_for_context", |b| {
        b.iter(|| scores_for_context(black_box(&fx.model.store), black_box(&ctx)))
    });
}

fn bench_score_items(c: &mut Criterion) {
    let fx = fixture(ModelKind::DirMf, 16);
    c.bench_function("score_items_one_user", |b| {
        b.iter(|| {
            fx.model
                .score_items(&fx.catalog, &fx.space, Some(&fx.alloc), black_box(7), EvalPhase::Test)
                .expect("scores")
        })
    });
}

fn bench_event_gradients(c: &mut Criterion) {
    let fx = fixture(ModelKind::DirMf, 16);
    let ctx: Vec<f64> = {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..16).map(|_| rng.gen_range(-0.5..0.5)).collect()
    };
    let coords = fx.alloc.coords(11).expect("allocated item");
    let mut d_ctx = vec![0.0; 16];
    let mut grads = GradientBuffer::default();
    c.bench_function("event_loss_and_grads", |b| {
        b.iter(|| {
            grads.clear();
            d_ctx.fill(0.0);
            event_loss_and_grads(
                black_box(&fx.model.store),
                black_box(coords),
                black_box(&ctx),
                &mut d_ctx,
                &mut grads,
            )
        })
    });
}

criterion_group!(benches, bench_axis_scores, bench_score_items, bench_event_gradients);
criterion_main!(benches);
