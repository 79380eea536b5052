//! Monte Carlo reference for the analytic engine, plus wall-clock benchmarks.
//!
//! Sample `s` draws from its own RNG stream `(seed, s)`, weights first and
//! then the input. Reductions run in sample order, so results are identical
//! for any thread count.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::heads::{predict_analytic, PredictiveDist};
use crate::model::{write_atomic, NetworkModel, Task};
use crate::numerics::{psd_factor, Matrix, SeededRng, Vector};
use crate::posterior::{PosteriorSampler, PosteriorSpec};
use crate::propagate::{Covariance, MomentState, PropagationConfig};

/// Default sample count for regression and classification runs.
pub const DEFAULT_SAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub num_samples: usize,
    pub seed: u64,
    /// Layers (pre-order index) whose outputs [`mc_layer_moments`] records.
    pub capture_layers: Vec<usize>,
    pub exec: Execution,
}

impl McConfig {
    pub fn new(num_samples: usize, seed: u64) -> Self {
        McConfig {
            num_samples,
            seed,
            capture_layers: Vec::new(),
            exec: Execution::Sequential,
        }
    }

    fn check(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::Config("Monte Carlo needs at least one sample".into()));
        }
        Ok(())
    }
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig::new(DEFAULT_SAMPLES, 0)
    }
}

/// Draws `x ~ N(mean, cov)` given a factor `L` of the covariance.
enum InputSampler {
    Fixed,
    Diagonal(Vec<f64>),
    Factor(Matrix),
}

impl InputSampler {
    fn new(state: &MomentState) -> Result<Self> {
        Ok(match state.cov() {
            Covariance::Deterministic => InputSampler::Fixed,
            Covariance::Diagonal(v) => InputSampler::Diagonal(v.iter().map(|x| x.sqrt()).collect()),
            Covariance::Full(m) => InputSampler::Factor(psd_factor(m)?),
        })
    }

    fn draw(&self, mean: &[f64], rng: &mut SeededRng) -> Vec<f64> {
        match self {
            InputSampler::Fixed => mean.to_vec(),
            InputSampler::Diagonal(sd) => mean.iter().zip(sd).map(|(m, s)| m + s * rng.normal()).collect(),
            InputSampler::Factor(l) => {
                let mut z = vec![0.0; mean.len()];
                rng.fill_normal(&mut z);
                let lz = l.matvec(&z);
                mean.iter().zip(lz.iter()).map(|(m, v)| m + v).collect()
            }
        }
    }
}

/// One forward pass per sample; `observe` sees every layer output.
fn run_samples<T: Send>(
    net: &NetworkModel,
    post: &PosteriorSpec,
    input: &MomentState,
    cfg: &McConfig,
    per_sample: impl Fn(&NetworkModel, &[f64]) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    cfg.check()?;
    if input.dim() != net.input_dim() {
        return Err(Error::structural(format!(
            "input has {} values, network expects {}",
            input.dim(),
            net.input_dim()
        )));
    }
    let sampler = PosteriorSampler::new(post, net)?;
    let inputs = InputSampler::new(input)?;
    cfg.exec.try_map_indexed(cfg.num_samples, |s| {
        let mut rng = SeededRng::new(cfg.seed, s as u64);
        let model = sampler.sample(net, &mut rng);
        let x = inputs.draw(input.mean(), &mut rng);
        per_sample(&model, &x)
    })
}

/// Mean computed as `x₀ + Σ(xₛ − x₀)/S`, exact when all samples agree.
fn sample_mean(samples: &[Vector]) -> Vector {
    let first = &samples[0];
    let s = samples.len() as f64;
    let mut acc = vec![0.0; first.len()];
    for x in &samples[1..] {
        for (a, (v, f)) in acc.iter_mut().zip(x.iter().zip(first.iter())) {
            *a += v - f;
        }
    }
    first.iter().zip(acc).map(|(f, a)| f + a / s).collect()
}

/// Covariance with the `1/S` normalisation.
fn sample_cov(samples: &[Vector], mean: &[f64]) -> Matrix {
    let d = mean.len();
    let mut c = Matrix::zeros(d, d);
    for x in samples {
        let r: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
        for i in 0..d {
            if r[i] == 0.0 {
                continue;
            }
            let row = c.row_mut(i);
            for j in 0..d {
                row[j] += r[i] * r[j];
            }
        }
    }
    c.scale(1.0 / samples.len() as f64)
}

fn softmax(z: &[f64]) -> Vector {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct McPrediction {
    pub dist: PredictiveDist,
    /// Raw network outputs, one per sample.
    pub outputs: Vec<Vector>,
}

/// Monte Carlo predictive for a deterministic input. Classification averages
/// the per-sample softmax; regression uses the sample mean and the sample
/// variance (`1/S`) plus `obs_noise`.
pub fn mc_predict(net: &NetworkModel, post: &PosteriorSpec, x: &[f64], cfg: &McConfig, obs_noise: f64) -> Result<McPrediction> {
    let input = MomentState::deterministic(net.input(), Vector::from(x))?;
    let outputs = run_samples(net, post, &input, cfg, |m, x| m.forward(x))?;
    let mean = sample_mean(&outputs);
    let cov = sample_cov(&outputs, &mean);
    let dist = match net.task() {
        Task::Classification => {
            let probs: Vec<Vector> = outputs.iter().map(|o| softmax(o)).collect();
            PredictiveDist::Classification {
                probs: sample_mean(&probs),
                logit_var: cov.diag(),
                logit_mean: mean,
                scale: 1.0,
            }
        }
        Task::Regression => {
            if mean.len() != 1 {
                return Err(Error::structural("regression head expects one output"));
            }
            PredictiveDist::Regression {
                mean: mean[0],
                variance: cov[(0, 0)],
                obs_noise,
                scale: 1.0,
            }
        }
    };
    Ok(McPrediction { dist, outputs })
}

/// Sample mean and covariance of the network output for a Gaussian input.
pub fn mc_output_moments(net: &NetworkModel, post: &PosteriorSpec, input: &MomentState, cfg: &McConfig) -> Result<(Vector, Matrix)> {
    let outputs = run_samples(net, post, input, cfg, |m, x| m.forward(x))?;
    let mean = sample_mean(&outputs);
    let cov = sample_cov(&outputs, &mean);
    Ok((mean, cov))
}

/// Empirical moments of one layer's output.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMoments {
    pub index: usize,
    pub mean: Vector,
    /// `1/S` normalised.
    pub cov: Matrix,
    /// Standard error of each mean entry.
    pub mean_se: Vector,
    /// Standard error of each marginal variance, from the fourth central moment.
    pub var_se: Vector,
}

pub fn mc_layer_moments(
    net: &NetworkModel,
    post: &PosteriorSpec,
    input: &MomentState,
    cfg: &McConfig,
) -> Result<Vec<LayerMoments>> {
    let nodes = net.node_count();
    if let Some(bad) = cfg.capture_layers.iter().find(|&&i| i >= nodes) {
        return Err(Error::Config(format!("capture layer {bad} does not exist ({nodes} layers)")));
    }
    let capture = &cfg.capture_layers;
    let captured = run_samples(net, post, input, cfg, |m, x| {
        let mut out: Vec<Option<Vector>> = vec![None; capture.len()];
        m.forward_observed(x, &mut |i, v| {
            for (slot, &c) in out.iter_mut().zip(capture) {
                if c == i {
                    *slot = Some(Vector::from(v));
                }
            }
        })?;
        Ok(out.into_iter().map(|v| v.expect("layer visited")).collect::<Vec<_>>())
    })?;
    let s = cfg.num_samples as f64;
    let mut result = Vec::with_capacity(capture.len());
    for (slot, &index) in capture.iter().enumerate() {
        let samples: Vec<Vector> = captured.iter().map(|c| c[slot].clone()).collect();
        let mean = sample_mean(&samples);
        let cov = sample_cov(&samples, &mean);
        let var = cov.diag();
        let mean_se = var.iter().map(|v| (v / s).sqrt()).collect();
        let var_se = (0..mean.len())
            .map(|i| {
                let m4 = samples.iter().map(|x| (x[i] - mean[i]).powi(4)).sum::<f64>() / s;
                ((m4 - var[i] * var[i]).max(0.0) / s).sqrt()
            })
            .collect();
        result.push(LayerMoments {
            index,
            mean,
            cov,
            mean_se,
            var_se,
        });
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Map,
    Mc(usize),
    Analytic(PropagationConfig),
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Map => f.write_str("map"),
            Strategy::Mc(_) => f.write_str("mc"),
            Strategy::Analytic(c) => write!(f, "analytic-{}", c.activation_cov_mode),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub strategy: String,
    pub samples: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub n_inputs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub warmup: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            warmup: 1,
            repeats: 9,
            seed: 0,
        }
    }
}

fn run_strategy(net: &NetworkModel, post: &PosteriorSpec, x: &[f64], s: &Strategy, seed: u64) -> Result<()> {
    match s {
        Strategy::Map => {
            std::hint::black_box(net.forward(x)?);
        }
        Strategy::Mc(n) => {
            std::hint::black_box(mc_predict(net, post, x, &McConfig::new(*n, seed), 0.0)?);
        }
        Strategy::Analytic(cfg) => {
            std::hint::black_box(predict_analytic(net, post, x, cfg, 0.0, 1.0)?);
        }
    }
    Ok(())
}

/// Single-threaded timings, batch size one. Per input, `warmup` runs are
/// dropped and `repeats` are timed; mean and standard deviation are taken
/// over all timed runs.
pub fn bench_runtime(
    net: &NetworkModel,
    post: &PosteriorSpec,
    xs: &Matrix,
    strategies: &[Strategy],
    cfg: &BenchConfig,
) -> Result<Vec<BenchRow>> {
    if cfg.repeats == 0 || xs.rows() == 0 {
        return Err(Error::Config("benchmark needs at least one input and one repeat".into()));
    }
    let mut rows = Vec::with_capacity(strategies.len());
    for s in strategies {
        if let Strategy::Mc(0) = s {
            return Err(Error::Config("Monte Carlo needs at least one sample".into()));
        }
        let mut times = Vec::with_capacity(xs.rows() * cfg.repeats);
        for n in 0..xs.rows() {
            let x = xs.row(n);
            for _ in 0..cfg.warmup {
                run_strategy(net, post, x, s, cfg.seed)?;
            }
            for _ in 0..cfg.repeats {
                let t0 = Instant::now();
                run_strategy(net, post, x, s, cfg.seed)?;
                times.push(t0.elapsed().as_secs_f64() * 1e3);
            }
        }
        let k = times.len() as f64;
        let mean = times.iter().sum::<f64>() / k;
        let std = if times.len() > 1 {
            (times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (k - 1.0)).sqrt()
        } else {
            0.0
        };
        rows.push(BenchRow {
            strategy: s.to_string(),
            samples: match s {
                Strategy::Mc(n) => *n,
                _ => 0,
            },
            mean_ms: mean,
            std_ms: std,
            n_inputs: xs.rows(),
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

pub fn write_bench_csv(path: impl AsRef<Path>, rows: &[BenchRow]) -> Result<()> {
    write_atomic(path.as_ref(), &bench_csv(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, LayerSpec, Linear, Shape};
    use crate::posterior::{Flattening, KfacPosterior, LayerPosterior};
    use crate::propagate::propagate_network;

    fn mlp(seed: u64) -> NetworkModel {
        let mut rng = SeededRng::new(seed, 0);
        NetworkModel::mlp(&[3, 6, 2], Activation::Relu, Task::Classification, &mut rng).unwrap()
    }

    fn diag_spec(net: &NetworkModel, v: f64) -> PosteriorSpec {
        let mut spec = PosteriorSpec::new();
        for (i, l) in net.indexed_layers() {
            if let LayerSpec::Linear(l) = l {
                spec.insert(i, LayerPosterior::diagonal(l.weight.map(|_| v), Vector::filled(l.d_out(), v)).unwrap());
            }
        }
        spec
    }

    #[test]
    fn deterministic_posterior_reproduces_map_exactly() {
        let net = mlp(1);
        let x = [0.3, -0.2, 1.1];
        let logits = net.forward(&x).unwrap();
        for s in [1, 7, 50] {
            let p = mc_predict(&net, &PosteriorSpec::new(), &x, &McConfig::new(s, 3), 0.0).unwrap();
            let PredictiveDist::Classification { probs, logit_mean, logit_var, .. } = &p.dist else { panic!() };
            assert_eq!(logit_mean, &logits);
            assert_eq!(probs, &softmax(&logits));
            assert!(logit_var.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_samples_is_config_error() {
        let net = mlp(1);
        assert!(matches!(
            mc_predict(&net, &PosteriorSpec::new(), &[0.0; 3], &McConfig::new(0, 0), 0.0),
            Err(Error::Config(_))
        ));
        assert_eq!(McConfig::default().num_samples, 1000);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let net = mlp(2);
        let post = diag_spec(&net, 0.05);
        let x = [1.0, 0.5, -0.5];
        let mut cfg = McConfig::new(300, 9);
        let a = mc_predict(&net, &post, &x, &cfg, 0.0).unwrap();
        cfg.exec = Execution::Parallel;
        let b = mc_predict(&net, &post, &x, &cfg, 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn linear_gaussian_network_matches_analytic() {
        let mut rng = SeededRng::new(3, 0);
        let net = NetworkModel::new(
            Shape::Flat(3),
            vec![
                LayerSpec::Linear(Linear::new(Matrix::from_fn(2, 3, |_, _| rng.normal()), Vector::from(vec![0.5, -0.5])).unwrap()),
            ],
            Task::Regression,
        )
        .unwrap();
        let net = NetworkModel::new(
            net.input(),
            vec![
                net.layers()[0].clone(),
                LayerSpec::Linear(Linear::new(Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap(), Vector::from(vec![0.1])).unwrap()),
            ],
            Task::Regression,
        )
        .unwrap();
        let g = Matrix::from_fn(3, 3, |_, _| rng.normal());
        let post = PosteriorSpec::new()
            .with(0, LayerPosterior::diagonal(Matrix::from_fn(2, 3, |_, _| 0.1 * rng.uniform()), Vector::filled(2, 0.05)).unwrap())
            .with(1, LayerPosterior::Kfac(KfacPosterior::new(g.matmul(&g.transpose()).add_diag(1.0), Matrix::identity(1), 4.0, Flattening::Row).unwrap()));
        let x = [0.4, -1.0, 2.0];
        let input = MomentState::deterministic(Shape::Flat(3), Vector::from(&x[..])).unwrap();
        let analytic = propagate_network(&net, &post, &input, &PropagationConfig::full()).unwrap();
        let cfg = McConfig::new(100_000, 5);
        let p = mc_predict(&net, &post, &x, &cfg, 0.0).unwrap();
        let PredictiveDist::Regression { mean, variance, .. } = p.dist else { panic!() };
        let av = analytic.variances()[0];
        let se = (av / 1e5).sqrt();
        assert!((mean - analytic.mean()[0]).abs() < 3.0 * se.max(1e-12) + 0.01 * analytic.mean()[0].abs());
        assert!((variance - av).abs() / av < 0.01 + 3.0 * (2.0f64 / 1e5).sqrt());
    }

    #[test]
    fn first_layer_moments_converge() {
        let net = mlp(4);
        let post = diag_spec(&net, 0.02);
        let x = Vector::from(vec![0.5, 1.0, -1.5]);
        let input = MomentState::deterministic(Shape::Flat(3), x).unwrap();
        let analytic = {
            let mut first = None;
            crate::propagate::propagate_network_observed(&net, &post, &input, &PropagationConfig::full(), &mut |i, s| {
                if i == 0 {
                    first = Some(s.clone());
                }
            })
            .unwrap();
            first.unwrap()
        };
        let mut errs = Vec::new();
        for s in [1_000, 100_000] {
            let mut cfg = McConfig::new(s, 11);
            cfg.capture_layers = vec![0];
            let m = &mc_layer_moments(&net, &post, &input, &cfg).unwrap()[0];
            for i in 0..6 {
                assert!((m.mean[i] - analytic.mean()[i]).abs() < 4.0 * m.mean_se[i]);
                assert!((m.cov[(i, i)] - analytic.variances()[i]).abs() < 4.0 * m.var_se[i]);
            }
            errs.push(m.cov.sub(&analytic.cov_matrix()).frobenius());
        }
        assert!(errs[1] < errs[0]);
    }

    #[test]
    fn zero_variance_posterior_has_zero_layer_covariance() {
        let net = mlp(5);
        let input = MomentState::deterministic(Shape::Flat(3), Vector::from(vec![1.0, 2.0, 3.0])).unwrap();
        let mut cfg = McConfig::new(20, 0);
        cfg.capture_layers = vec![0, 1, 2];
        for m in mc_layer_moments(&net, &diag_spec(&net, 0.0), &input, &cfg).unwrap() {
            assert_eq!(m.cov.max_abs(), 0.0);
        }
        cfg.capture_layers = vec![9];
        assert!(mc_layer_moments(&net, &PosteriorSpec::new(), &input, &cfg).is_err());
    }

    #[test]
    fn bench_rows_and_csv() {
        let net = mlp(6);
        let post = diag_spec(&net, 0.01);
        let xs = Matrix::from_fn(2, 3, |r, c| (r + c) as f64);
        let rows = bench_runtime(
            &net,
            &post,
            &xs,
            &[Strategy::Map, Strategy::Mc(3), Strategy::Analytic(PropagationConfig::diag())],
            &BenchConfig::default(),
        )
        .unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1].samples, 3);
        assert!(rows.iter().all(|r| r.n_inputs == 2 && r.mean_ms >= 0.0));
        let text = String::from_utf8(bench_csv(&rows)).unwrap();
        assert!(text.starts_with("strategy,samples,mean_ms,std_ms,n_inputs\nmap,0,"));
        assert!(text.contains("\nanalytic-diag,0,"));
    }
}
