use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use momentflow_core::heads::predict_analytic_batch;
use momentflow_core::model::{Activation, LayerSpec, NetworkModel, Task};
use momentflow_core::oracle::{mc_predict, McConfig};
use momentflow_core::posterior::{LayerPosterior, PosteriorSpec};
use momentflow_core::propagate::PropagationConfig;
use momentflow_core::{Execution, Matrix, SeededRng, Vector};

fn setup() -> (NetworkModel, PosteriorSpec, Matrix) {
    let mut rng = SeededRng::new(0, 0);
    let net = NetworkModel::mlp(&[784, 128, 64, 10], Activation::Relu, Task::Classification, &mut rng).unwrap();
    let mut post = PosteriorSpec::new();
    for (i, l) in net.indexed_layers() {
        if let LayerSpec::Linear(l) = l {
            post.insert(i, LayerPosterior::diagonal(l.weight.map(|_| 1e-4), Vector::filled(l.d_out(), 1e-4)).unwrap());
        }
    }
    let xs = Matrix::from_fn(64, 784, |_, _| rng.uniform());
    (net, post, xs)
}

fn analytic_batch(c: &mut Criterion) {
    let (net, post, xs) = setup();
    let cfg = PropagationConfig::diag();
    let mut group = c.benchmark_group("analytic_diag_batch64");
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_function(BenchmarkId::from_parameter(format!("{exec:?}")), |b| {
            b.iter(|| predict_analytic_batch(&net, &post, &xs, &cfg, 0.0, 1.0, exec).unwrap())
        });
    }
    group.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let (net, post, xs) = setup();
    let mut group = c.benchmark_group("mc_s200");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        let cfg = McConfig {
            exec,
            ..McConfig::new(200, 1)
        };
        group.bench_function(BenchmarkId::from_parameter(format!("{exec:?}")), |b| {
            b.iter(|| mc_predict(&net, &post, xs.row(0), &cfg, 0.0).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, analytic_batch, monte_carlo);
criterion_main!(benches);
