//! Training-step and encoder throughput. Run once with default features
//! and once with `--no-default-features` to compare the rayon and
//! sequential builds; the parallel build also measures a one-thread pool.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hardmask::corpus::{batch_prepared, generate_synthetic, prepare, FrameBatch, Prepared, SynthConfig};
use hardmask::masking::SeededRng;
use hardmask::network::{encode, FrontendConfig};
use hardmask::par;
use hardmask::trainer::{train_step, TrainConfig, TrainState};

fn desk_batch() -> FrameBatch {
    let fe = FrontendConfig::default();
    let utts = generate_synthetic(&SynthConfig::default(), &fe).expect("synthetic corpus");
    let data = prepare(&utts, &fe).expect("features");
    let items: Vec<&Prepared> = data.iter().take(8).collect();
    batch_prepared(&items).expect("batch").frames
}

fn mode() -> &'static str {
    if par::is_parallel() {
        "parallel"
    } else {
        "sequential"
    }
}

fn bench_step(c: &mut Criterion, label: &str) {
    let batch = desk_batch();
    let cfg = TrainConfig::default();
    let mut state = TrainState::<f32>::init(&cfg).expect("init");
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    group.bench_function(BenchmarkId::new(label, batch.frames), |b| {
        let mut step = 1u64;
        b.iter(|| {
            let mut rng = SeededRng::new(step);
            let out = train_step(
                &mut state.student,
                &mut state.teacher,
                &mut state.optimizer,
                &batch,
                &cfg,
                0,
                step,
                &mut rng,
            )
            .expect("step");
            step = step % cfg.total_steps + 1;
            out.record.joint_loss
        })
    });
    group.finish();

    let mut group = c.benchmark_group("encode");
    group.bench_function(BenchmarkId::new(label, batch.frames), |b| {
        b.iter(|| encode(&state.teacher, &batch, None).expect("encode"))
    });
    group.finish();
}

fn throughput(c: &mut Criterion) {
    bench_step(c, mode());
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool");
        pool.install(|| bench_step(c, "rayon_1_thread"));
    }
}

criterion_group!(benches, throughput);
criterion_main!(benches);
