use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use modcausal::graph::generate_er;
use modcausal::metrics::evaluate;
use modcausal::nn::{ModelStack, HIDDEN};
use modcausal::par::Exec;
use modcausal::scm::{GroundTruthScm, InterventionMode};
use modcausal::seed;
use modcausal::training::{contrast_gradient, sample_masks, train_expert, ExpertMode, SoftAdjacency, TrainConfig};

fn exec_modes(c: &mut Criterion) {
    let n = 20;
    let dag = generate_er(n, 1.0, &mut seed::stream(0, &[])).unwrap();
    let scm = GroundTruthScm::init(dag.clone(), 10, &mut seed::stream(1, &[])).unwrap();
    let obs = scm.sample_observational(500, &mut seed::stream(2, &[])).unwrap();
    let tests = scm
        .make_test_suite(20, 500, InterventionMode::Fixed, &mut seed::stream(3, &[]))
        .unwrap();
    let stack = ModelStack::new(n, 10, HIDDEN, 4).unwrap();
    let gamma = SoftAdjacency::uniform(n, 0.25).unwrap();
    let mut rng = seed::stream(5, &[]);
    let masks: Vec<_> = (0..20).map(|_| sample_masks(&gamma, &mut rng)).collect();
    let batch = tests[0].row_refs()[..32].to_vec();

    let mut group = c.benchmark_group("exec");
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        let name = format!("{exec:?}");
        group.bench_with_input(BenchmarkId::new("train_expert_20it", &name), &exec, |b, &exec| {
            let cfg = TrainConfig {
                iterations: 20,
                exec,
                ..Default::default()
            };
            b.iter(|| {
                let mut s = stack.clone();
                train_expert(&mut s, &obs, &dag, ExpertMode::Causal, &cfg).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("evaluate", &name), &exec, |b, &exec| {
            b.iter(|| evaluate(&stack, &dag, &tests, exec).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("contrast_gradient", &name), &exec, |b, &exec| {
            b.iter(|| contrast_gradient(&stack, &masks, &batch, Some(0), 0.01, exec))
        });
    }
    group.finish();
}

criterion_group!(benches, exec_modes);
criterion_main!(benches);
