use std::hint::black_box;

use asgd_bench::fixture;
use asgd_core::adaptive::adapt;
use asgd_core::{
    merge_update, minibatch_update, parzen_accept, ControllerState, ModelState, NetworkModel, SimTransport,
    UpdateMessage,
};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn gradient(c: &mut Criterion) {
    let mut g = c.benchmark_group("minibatch_update");
    for (n, k) in [(10, 10), (100, 100)] {
        let (data, w) = fixture(n, k, 5000);
        for b in [10, 500] {
            let batch: Vec<&[f64]> = (0..b).map(|i| data.point(i)).collect();
            g.bench_with_input(BenchmarkId::new(format!("n{n}k{k}"), b), &batch, |bench, batch| {
                bench.iter(|| minibatch_update(batch.iter().copied(), black_box(&w)).unwrap())
            });
        }
    }
    g.finish();
}

fn parzen(c: &mut Criterion) {
    let (data, w) = fixture(100, 100, 2000);
    let batch: Vec<&[f64]> = (0..50).map(|i| data.point(i)).collect();
    let step = minibatch_update(batch.iter().copied(), &w).unwrap();
    let mut other = w.clone();
    for v in other.as_mut_slice() {
        *v += 0.01;
    }
    c.bench_function("parzen_accept/n100k100", |b| {
        b.iter(|| parzen_accept(black_box(&w), black_box(&other), &step, 0.01).unwrap())
    });
    c.bench_function("merge_update/n100k100", |b| {
        b.iter(|| merge_update(black_box(&w), Some(&other), &step, 0.01).unwrap())
    });
}

fn transport(c: &mut Criterion) {
    c.bench_function("sim_transport/post_advance_poll", |b| {
        let mut t = SimTransport::new(NetworkModel::ethernet(), 8).unwrap();
        let mut now = 0.0;
        let mut i = 0usize;
        b.iter(|| {
            let msg = UpdateMessage {
                state: ModelState::zeros(10, 10),
                sender: i % 8,
                sender_iteration: i as u64,
            };
            t.post_send(i % 8, (i + 1) % 8, msg, now).unwrap();
            now += 1e-5;
            t.advance(now).unwrap();
            black_box(t.poll_receive((i + 1) % 8));
            i += 1;
        })
    });
}

fn controller(c: &mut Criterion) {
    let cs = ControllerState {
        q_opt: 32.0,
        q1: 30.0,
        q2: 28.0,
        gamma: 1.0,
        b: 500,
        b_min: 8,
        b_max: 100_000,
        interval: Some(10),
    };
    c.bench_function("adapt", |b| b.iter(|| adapt(black_box(&cs), black_box(17))));
}

criterion_group!(benches, gradient, parzen, transport, controller);
criterion_main!(benches);
