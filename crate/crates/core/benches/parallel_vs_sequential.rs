use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use stepstone::evaluation::{
    numbered_tasks, staged_evaluate, Domain, DomainSpec, EvalContext, StagedEvalPolicy, SyntheticEvaluator,
};
use stepstone::generation::sandbox::SandboxLimits;
use stepstone::generation::{Landscape, SimulatedParams};
use stepstone::metrics::{bootstrap_ci, BootstrapParams};
use stepstone::rng::substream;
use stepstone::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bootstrap(c: &mut Criterion) {
    let mut rng = substream(1, "bench", 0, 0);
    let samples: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..1.0)).collect();
    let params = BootstrapParams {
        resamples: 2000,
        ..BootstrapParams::default()
    };
    let mut group = c.benchmark_group("bootstrap_ci");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| bootstrap_ci(&samples, &params, exec).unwrap())
        });
    }
    group.finish();
}

fn staged(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    SimulatedParams::default().initial.write(dir.path()).unwrap();
    let spec = DomainSpec::new("bench", numbered_tasks("t", 256), StagedEvalPolicy::ungated(256));
    let domain = Domain::new(spec, Arc::new(SyntheticEvaluator::new(Landscape::two_peak())));
    let mut group = c.benchmark_group("staged_evaluate");
    for (name, exec) in MODES {
        let ctx = EvalContext {
            iteration: 1,
            slot: 0,
            payload_ref: "bench".into(),
            payload_dir: dir.path().to_path_buf(),
            limits: SandboxLimits::default(),
            master_seed: 0,
            exec,
            concurrency: 256,
        };
        group.bench_with_input(BenchmarkId::from_parameter(name), &ctx, |b, ctx| {
            b.iter(|| staged_evaluate(ctx, &domain))
        });
    }
    group.finish();
}

criterion_group!(benches, bootstrap, staged);
criterion_main!(benches);
