//! MAP training and Laplace posteriors.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grad::{backward, flatten_params, forward_tape, param_offsets, set_params};
use crate::heads::{compute_metrics, predict_analytic_batch};
use crate::model::{Dataset, LayerSpec, NetworkModel, Targets, Task};
use crate::numerics::{from_eig, log_grid, sym_eig, Matrix, SeededRng, Vector};
use crate::posterior::{Flattening, KfacPosterior, LayerPosterior, PosteriorSpec};
use crate::propagate::PropagationConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Mse,
    CrossEntropy,
}

impl Loss {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Regression => Loss::Mse,
            Task::Classification => Loss::CrossEntropy,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: Loss,
}

impl TrainConfig {
    pub fn new(loss: Loss) -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            loss,
        }
    }

    fn check(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with the usual defaults.
pub(crate) struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub(crate) fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub(crate) fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Loss value and its gradient with respect to the network output.
fn loss_and_grad(loss: Loss, out: &[f64], targets: &Targets, n: usize) -> Result<(f64, Vec<f64>)> {
    match (loss, targets) {
        (Loss::Mse, Targets::Regression(y)) => {
            if out.len() != 1 {
                return Err(Error::structural("squared-error loss expects one output"));
            }
            let r = out[0] - y[n];
            Ok((0.5 * r * r, vec![r]))
        }
        (Loss::CrossEntropy, Targets::Classification { labels, .. }) => {
            let mut p = softmax(out);
            let c = labels[n];
            if c >= p.len() {
                return Err(Error::structural(format!("class {c} out of range for {} outputs", p.len())));
            }
            let l = -p[c].max(f64::MIN_POSITIVE).ln();
            p[c] -= 1.0;
            Ok((l, p))
        }
        _ => Err(Error::Config("loss does not match the target type".into())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
}

/// Adam on the mean per-example loss (half squared error or cross-entropy)
/// plus `weight_decay/2 · ‖θ‖²`. Deterministic given the seed.
pub fn train_map(net: &NetworkModel, data: &Dataset, cfg: &TrainConfig) -> Result<(NetworkModel, Vec<EpochLog>)> {
    cfg.check()?;
    if data.dim() != net.input_dim() {
        return Err(Error::structural(format!(
            "dataset has {} features, network expects {}",
            data.dim(),
            net.input_dim()
        )));
    }
    let mut model = net.clone();
    let mut log = Vec::new();
    if cfg.epochs == 0 || data.is_empty() {
        return Ok((model, log));
    }
    let mut params = flatten_params(&model);
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let mut rng = SeededRng::new(cfg.seed, 0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = vec![0.0; params.len()];
            for &n in batch {
                let (out, tape) = forward_tape(&model, data.x(n))?;
                let (l, g) = loss_and_grad(cfg.loss, &out, &data.targets, n)?;
                total += l;
                backward(&model, &tape, &g, &mut grads, &mut |_, _| {});
            }
            let inv = 1.0 / batch.len() as f64;
            for (g, p) in grads.iter_mut().zip(&params) {
                *g = *g * inv + cfg.weight_decay * p;
            }
            adam.step(&mut params, &grads);
            set_params(&mut model, &params)?;
        }
        let loss = total / data.len() as f64;
        if !loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        log.push(EpochLog { epoch, loss });
    }
    Ok((model, log))
}

pub fn training_log_csv(log: &[EpochLog]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in log {
        w.serialize(r).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Structure {
    #[default]
    Diagonal,
    Kfac,
    Full,
}

impl FromStr for Structure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diag" | "diagonal" => Ok(Structure::Diagonal),
            "kfac" => Ok(Structure::Kfac),
            "full" => Ok(Structure::Full),
            _ => Err(Error::Config(format!("unknown posterior structure '{s}' (diag|kfac|full)"))),
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Structure::Diagonal => "diag",
            Structure::Kfac => "kfac",
            Structure::Full => "full",
        })
    }
}

/// Curvature used in place of the Hessian of the negative log likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Curvature {
    /// Generalised Gauss-Newton.
    #[default]
    Ggn,
    /// Outer products of per-example gradients at the observed targets.
    EmpiricalFisher,
}

impl FromStr for Curvature {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ggn" => Ok(Curvature::Ggn),
            "ef" | "empirical-fisher" => Ok(Curvature::EmpiricalFisher),
            _ => Err(Error::Config(format!("unknown curvature '{s}' (ggn|ef)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceConfig {
    pub structure: Structure,
    /// Candidate prior precisions λ².
    pub prior_precision_grid: Vec<f64>,
    /// Pre-order indices of Bayesian layers; `None` means every linear layer.
    pub layer_subset: Option<Vec<usize>>,
    pub curvature: Curvature,
    /// Regression noise variance; fitted on training residuals when `None`.
    pub obs_noise: Option<f64>,
    /// Treat biases as Bayesian too.
    pub include_bias: bool,
    /// Propagation settings used when scoring the grid.
    pub propagation: PropagationConfig,
}

impl Default for LaplaceConfig {
    fn default() -> Self {
        LaplaceConfig {
            structure: Structure::Diagonal,
            prior_precision_grid: default_prior_grid(),
            layer_subset: None,
            curvature: Curvature::Ggn,
            obs_noise: None,
            include_bias: true,
            propagation: PropagationConfig::diag(),
        }
    }
}

/// 21 log-spaced prior precisions on `[1e-2, 1e3]`.
pub fn default_prior_grid() -> Vec<f64> {
    log_grid(1e-2, 1e3, 21)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceFit {
    pub posterior: PosteriorSpec,
    pub prior_precision: f64,
    pub obs_noise: f64,
    /// `(λ², mean NLPD)` for every grid point scored.
    pub grid_nlpd: Vec<(f64, f64)>,
}

/// Linear layers, in pre-order.
pub fn linear_layer_indices(net: &NetworkModel) -> Vec<usize> {
    net.indexed_layers()
        .into_iter()
        .filter(|(_, l)| matches!(l, LayerSpec::Linear(_)))
        .map(|(i, _)| i)
        .collect()
}

/// Parameter slice of a Bayesian layer within the flat layout and its shape.
struct Target {
    index: usize,
    /// Offset of the Bayesian block in the flat parameter vector.
    offset: usize,
    d_out: usize,
    d_in: usize,
    bias: bool,
    kind: Kind,
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Linear,
    Conv,
    Value,
}

impl Target {
    fn weights(&self) -> usize {
        self.d_out * self.d_in
    }

    fn size(&self) -> usize {
        self.weights() + if self.bias { self.d_out } else { 0 }
    }
}

fn targets(net: &NetworkModel, cfg: &LaplaceConfig) -> Result<Vec<Target>> {
    let offsets = param_offsets(net);
    let subset = cfg.layer_subset.clone().unwrap_or_else(|| linear_layer_indices(net));
    if subset.is_empty() {
        return Err(Error::Config("no layers selected for the Laplace fit".into()));
    }
    let mut out = Vec::new();
    for idx in subset {
        let layer = net
            .layer(idx)
            .ok_or_else(|| Error::Config(format!("layer {idx} does not exist")))?;
        let t = match layer {
            LayerSpec::Linear(l) => Target {
                index: idx,
                offset: offsets[idx],
                d_out: l.d_out(),
                d_in: l.d_in(),
                bias: cfg.include_bias,
                kind: Kind::Linear,
            },
            LayerSpec::Conv2d(c) => {
                if cfg.structure != Structure::Diagonal {
                    return Err(Error::Config(format!("layer {idx}: convolutions support diagonal posteriors only")));
                }
                Target {
                    index: idx,
                    offset: offsets[idx],
                    d_out: c.out_channels(),
                    d_in: c.kernels.cols(),
                    bias: cfg.include_bias,
                    kind: Kind::Conv,
                }
            }
            LayerSpec::Attention(a) => {
                if cfg.structure == Structure::Kfac {
                    return Err(Error::Config(format!("layer {idx}: KFAC is available for linear layers only")));
                }
                let d = a.dim();
                Target {
                    index: idx,
                    offset: offsets[idx] + 2 * d * d,
                    d_out: d,
                    d_in: d,
                    bias: false,
                    kind: Kind::Value,
                }
            }
            other => {
                return Err(Error::Config(format!("layer {idx} ({}) has no weights", other.name())));
            }
        };
        out.push(t);
    }
    Ok(out)
}

/// Vectors `u` with `Σ u uᵀ` equal to the curvature of the per-example
/// negative log likelihood with respect to the network output.
fn output_factors(curv: Curvature, out: &[f64], targets: &Targets, n: usize, obs_noise: f64) -> Vec<Vec<f64>> {
    match targets {
        Targets::Regression(y) => {
            let sd = obs_noise.sqrt();
            match curv {
                Curvature::Ggn => vec![vec![1.0 / sd]],
                Curvature::EmpiricalFisher => vec![vec![(out[0] - y[n]) / obs_noise]],
            }
        }
        Targets::Classification { labels, .. } => {
            let p = softmax(out);
            match curv {
                // diag(p) − ppᵀ = Σ_c p_c (e_c − p)(e_c − p)ᵀ
                Curvature::Ggn => (0..p.len())
                    .map(|c| {
                        let s = p[c].sqrt();
                        p.iter()
                            .enumerate()
                            .map(|(j, &pj)| s * (if j == c { 1.0 } else { 0.0 } - pj))
                            .collect()
                    })
                    .collect(),
                Curvature::EmpiricalFisher => {
                    let mut g = p;
                    g[labels[n]] -= 1.0;
                    vec![g]
                }
            }
        }
    }
}

/// Accumulated curvature for one Bayesian layer.
enum Acc {
    Diagonal(Vec<f64>),
    Full(Matrix),
    Kfac { a: Matrix, b: Matrix, count: usize },
}

impl Acc {
    fn new(t: &Target, s: Structure) -> Self {
        match s {
            Structure::Diagonal => Acc::Diagonal(vec![0.0; t.size()]),
            Structure::Full => Acc::Full(Matrix::zeros(t.size(), t.size())),
            Structure::Kfac => {
                let da = t.d_in + usize::from(t.bias);
                Acc::Kfac {
                    a: Matrix::zeros(da, da),
                    b: Matrix::zeros(t.d_out, t.d_out),
                    count: 0,
                }
            }
        }
    }
}

/// Layer gradient block `[vec_r(W) ; b]` (bias omitted if not Bayesian).
fn block_of(t: &Target, grads: &[f64], net: &NetworkModel) -> Vec<f64> {
    let mut v = grads[t.offset..t.offset + t.weights()].to_vec();
    if t.bias {
        let n_bias = match net.layer(t.index) {
            Some(LayerSpec::Linear(l)) => l.weight.data().len(),
            Some(LayerSpec::Conv2d(c)) => c.kernels.data().len(),
            _ => 0,
        };
        let start = t.offset + n_bias;
        v.extend_from_slice(&grads[start..start + t.d_out]);
    }
    v
}

/// Maximum-likelihood noise variance from the training residuals of a
/// regression network (1 for classification data).
pub fn mle_noise(net: &NetworkModel, data: &Dataset) -> Result<f64> {
    let Targets::Regression(y) = &data.targets else {
        return Ok(1.0);
    };
    let mut s = 0.0;
    for n in 0..data.len() {
        let r = net.forward(data.x(n))?[0] - y[n];
        s += r * r;
    }
    let v = s / data.len() as f64;
    if !(v > 0.0) {
        return Err(Error::numerical("zero training residual: observation noise is not identifiable"));
    }
    Ok(v)
}

/// Summed curvature per Bayesian layer.
fn accumulate(net: &NetworkModel, data: &Dataset, tgts: &[Target], cfg: &LaplaceConfig, obs_noise: f64) -> Result<Vec<Acc>> {
    let mut accs: Vec<Acc> = tgts.iter().map(|t| Acc::new(t, cfg.structure)).collect();
    let kfac = cfg.structure == Structure::Kfac;
    let n_params = net.parameter_count();
    for n in 0..data.len() {
        let (out, tape) = forward_tape(net, data.x(n))?;
        let factors = output_factors(cfg.curvature, &out, &data.targets, n, obs_noise);
        if kfac {
            for (t, acc) in tgts.iter().zip(accs.iter_mut()) {
                let Acc::Kfac { a, count, .. } = acc else { unreachable!() };
                for xt in tape.input(t.index).chunks(t.d_in) {
                    let mut ab = xt.to_vec();
                    if t.bias {
                        ab.push(1.0);
                    }
                    add_outer(a, &ab, &ab, 1.0);
                    *count += 1;
                }
            }
        }
        for u in &factors {
            if kfac {
                let mut seen: Vec<(usize, Vec<f64>)> = Vec::new();
                backward(net, &tape, u, &mut [], &mut |i, g| {
                    if tgts.iter().any(|t| t.index == i) {
                        seen.push((i, g.to_vec()));
                    }
                });
                for (t, acc) in tgts.iter().zip(accs.iter_mut()) {
                    let Acc::Kfac { b, .. } = acc else { unreachable!() };
                    let (_, g) = seen.iter().find(|(i, _)| *i == t.index).expect("layer visited");
                    for gt in g.chunks(t.d_out) {
                        add_outer(b, gt, gt, 1.0);
                    }
                }
            } else {
                let mut grads = vec![0.0; n_params];
                backward(net, &tape, u, &mut grads, &mut |_, _| {});
                for (t, acc) in tgts.iter().zip(accs.iter_mut()) {
                    let v = block_of(t, &grads, net);
                    match acc {
                        Acc::Diagonal(d) => {
                            for (a, g) in d.iter_mut().zip(&v) {
                                *a += g * g;
                            }
                        }
                        Acc::Full(m) => add_outer(m, &v, &v, 1.0),
                        Acc::Kfac { .. } => unreachable!(),
                    }
                }
            }
        }
    }
    Ok(accs)
}

fn add_outer(m: &mut Matrix, a: &[f64], b: &[f64], w: f64) {
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        let row = m.row_mut(i);
        for (r, &bj) in row.iter_mut().zip(b) {
            *r += w * ai * bj;
        }
    }
}

/// Eigen-decomposed curvature, reused across the prior grid.
enum Prepared {
    Diagonal(Vec<f64>),
    Full(Vector, Matrix),
    Kfac { a: Matrix, b: Matrix },
}

fn prepare(acc: Acc, n: usize) -> Result<Prepared> {
    Ok(match acc {
        Acc::Diagonal(d) => Prepared::Diagonal(d),
        Acc::Full(m) => {
            let (mut e, q) = sym_eig(&m)?;
            for v in e.iter_mut() {
                *v = v.max(0.0);
            }
            Prepared::Full(e, q)
        }
        Acc::Kfac { a, b, count } => {
            // N·(B̄ ⊗ Ā) split as √N per factor; Ā averages over tokens too
            let root = (n as f64).sqrt();
            let a = a.scale(root / count.max(1) as f64);
            let b = b.scale(root / n as f64);
            Prepared::Kfac { a, b }
        }
    })
}

fn posterior_for(t: &Target, p: &Prepared, lambda2: f64) -> Result<LayerPosterior> {
    let singular = || {
        Error::numerical(format!(
            "layer {}: curvature is singular and the prior precision is zero",
            t.index
        ))
    };
    match p {
        Prepared::Diagonal(c) => {
            let mut var = Vec::with_capacity(c.len());
            for &v in c {
                let prec = v + lambda2;
                if !(prec > 0.0) {
                    return Err(singular());
                }
                var.push(1.0 / prec);
            }
            let bias = if t.bias { Vector::from(&var[t.weights()..]) } else { Vector::zeros(0) };
            let w = Matrix::new(t.d_out, t.d_in, var[..t.weights()].to_vec())?;
            LayerPosterior::diagonal(w, bias)
        }
        Prepared::Full(e, q) => {
            if e.iter().any(|&v| !(v + lambda2 > 0.0)) {
                return Err(singular());
            }
            let inv: Vec<f64> = e.iter().map(|v| 1.0 / (v + lambda2)).collect();
            let mut cov = from_eig(&inv, q);
            cov.symmetrize();
            LayerPosterior::full(cov, Flattening::Row)
        }
        Prepared::Kfac { a, b } => {
            let k = KfacPosterior::new(a.clone(), b.clone(), lambda2, Flattening::Row).map_err(|e| match e {
                Error::NotPositiveDefinite { .. } | Error::Numerical(_) if lambda2 == 0.0 => singular(),
                e => e.at_layer(t.index),
            })?;
            Ok(LayerPosterior::Kfac(k))
        }
    }
}

fn build(tgts: &[Target], prepared: &[Prepared], lambda2: f64) -> Result<PosteriorSpec> {
    let mut spec = PosteriorSpec::new();
    for (t, p) in tgts.iter().zip(prepared) {
        spec.insert(t.index, posterior_for(t, p, lambda2)?);
    }
    Ok(spec)
}

/// Laplace posterior around the weights of `net`. The prior precision is
/// chosen on `val` (the training data when `val` is `None` or empty) by the
/// NLPD of the analytic predictive.
pub fn fit_laplace(net: &NetworkModel, train: &Dataset, val: Option<&Dataset>, cfg: &LaplaceConfig) -> Result<LaplaceFit> {
    if cfg.prior_precision_grid.is_empty() || cfg.prior_precision_grid.iter().any(|&l| l < 0.0 || !l.is_finite()) {
        return Err(Error::Config("prior precision grid must be nonempty and nonnegative".into()));
    }
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if train.dim() != net.input_dim() {
        return Err(Error::structural("dataset and network input sizes differ"));
    }
    let tgts = targets(net, cfg)?;
    if tgts.iter().any(|t| t.kind == Kind::Conv) && cfg.structure != Structure::Diagonal {
        return Err(Error::Config("convolutions support diagonal posteriors only".into()));
    }
    let obs_noise = match (&train.targets, cfg.obs_noise) {
        (Targets::Classification { .. }, _) => 0.0,
        (_, Some(v)) if v > 0.0 => v,
        (_, Some(v)) => return Err(Error::Config(format!("observation noise must be positive, got {v}"))),
        (_, None) => mle_noise(net, train)?,
    };
    let accs = accumulate(net, train, &tgts, cfg, obs_noise.max(f64::MIN_POSITIVE))?;
    let prepared: Vec<Prepared> = accs.into_iter().map(|a| prepare(a, train.len())).collect::<Result<_>>()?;

    if cfg.prior_precision_grid.len() == 1 {
        let l = cfg.prior_precision_grid[0];
        return Ok(LaplaceFit {
            posterior: build(&tgts, &prepared, l)?,
            prior_precision: l,
            obs_noise,
            grid_nlpd: Vec::new(),
        });
    }
    let score_set = match val {
        Some(v) if !v.is_empty() => v,
        _ => train,
    };
    let mut best: Option<(f64, f64, PosteriorSpec)> = None;
    let mut grid_nlpd = Vec::new();
    for &l in &cfg.prior_precision_grid {
        let spec = match build(&tgts, &prepared, l) {
            Ok(s) => s,
            Err(e) if e.is_numerical() => continue,
            Err(e) => return Err(e),
        };
        let preds = predict_analytic_batch(
            net,
            &spec,
            &score_set.features,
            &cfg.propagation,
            obs_noise,
            1.0,
            Execution::best(),
        )?;
        let nlpd = compute_metrics(&preds, &score_set.targets)?.nlpd;
        grid_nlpd.push((l, nlpd));
        if best.as_ref().is_none_or(|b| nlpd < b.1) {
            best = Some((l, nlpd, spec));
        }
    }
    let (prior_precision, _, posterior) =
        best.ok_or_else(|| Error::numerical("no prior precision on the grid gives a proper posterior"))?;
    Ok(LaplaceFit {
        posterior,
        prior_precision,
        obs_noise,
        grid_nlpd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Linear, Shape};
    use crate::posterior::LayerPosterior;

    fn scalar_net(w: f64) -> NetworkModel {
        NetworkModel::new(
            Shape::Flat(1),
            vec![LayerSpec::Linear(
                Linear::new(Matrix::from_rows(&[vec![w]]).unwrap(), Vector::zeros(1)).unwrap(),
            )],
            Task::Regression,
        )
        .unwrap()
    }

    fn data(xs: &[f64], ys: &[f64]) -> Dataset {
        Dataset::new(
            Matrix::new(xs.len(), 1, xs.to_vec()).unwrap(),
            Targets::Regression(ys.to_vec().into()),
        )
        .unwrap()
    }

    fn weight_only(structure: Structure, lambda2: f64) -> LaplaceConfig {
        LaplaceConfig {
            structure,
            prior_precision_grid: vec![lambda2],
            obs_noise: Some(1.0),
            include_bias: false,
            ..LaplaceConfig::default()
        }
    }

    fn scalar_var(p: &LayerPosterior) -> f64 {
        match p {
            LayerPosterior::Diagonal { var_weight, .. } => var_weight[(0, 0)],
            LayerPosterior::Full { cov, .. } => cov[(0, 0)],
            LayerPosterior::Kfac(k) => k.dense()[(0, 0)],
            LayerPosterior::Deterministic => 0.0,
        }
    }

    #[test]
    fn linear_regression_recovers_slope() {
        let xs: Vec<f64> = (0..40).map(|i| i as f64 / 20.0 - 1.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        let d = data(&xs, &ys);
        let cfg = TrainConfig {
            epochs: 600,
            batch_size: 8,
            learning_rate: 1e-2,
            ..TrainConfig::new(Loss::Mse)
        };
        let (net, log) = train_map(&scalar_net(0.0), &d, &cfg).unwrap();
        let LayerSpec::Linear(l) = &net.layers()[0] else { unreachable!() };
        assert!((l.weight[(0, 0)] - 2.0).abs() < 1e-3, "{}", l.weight[(0, 0)]);
        assert_eq!(log.len(), 600);
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let mut rng = SeededRng::new(1, 0);
        let net = NetworkModel::mlp(&[2, 4, 1], Activation::Tanh, Task::Regression, &mut rng).unwrap();
        let xs = Matrix::from_fn(30, 2, |_, _| rng.normal());
        let ys: Vector = (0..30).map(|i| xs[(i, 0)] - xs[(i, 1)]).collect();
        let d = Dataset::new(xs, Targets::Regression(ys)).unwrap();
        let zero = TrainConfig {
            epochs: 0,
            ..TrainConfig::new(Loss::Mse)
        };
        assert_eq!(train_map(&net, &d, &zero).unwrap().0, net);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 7,
            ..TrainConfig::new(Loss::Mse)
        };
        let a = train_map(&net, &d, &cfg).unwrap();
        let b = train_map(&net, &d, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_reports_epoch() {
        let d = data(&[1.0, 2.0], &[1e300, -1e300]);
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::new(Loss::Mse)
        };
        assert!(matches!(train_map(&scalar_net(0.0), &d, &cfg), Err(Error::Diverged { epoch: 0 })));
    }

    #[test]
    fn conjugate_posterior_variance() {
        let d = data(&[1.0, 2.0], &[0.5, 1.5]);
        for s in [Structure::Full, Structure::Diagonal, Structure::Kfac] {
            let fit = fit_laplace(&scalar_net(0.7), &d, None, &weight_only(s, 1.0)).unwrap();
            let v = scalar_var(fit.posterior.get(0));
            if s == Structure::Kfac {
                // the factor split gives (√N·a + 1)⁻¹(√N·b + 1)⁻¹, not 1/(N·ab + 1)
                let (a, b) = (2.5f64, 1.0f64);
                let r = 2f64.sqrt();
                assert!((v - 1.0 / ((r * a + 1.0) * (r * b + 1.0))).abs() < 1e-12);
            } else {
                assert!((v - 1.0 / 6.0).abs() < 1e-12, "{s}: {v}");
            }
        }
    }

    #[test]
    fn kfac_matches_diagonal_on_scalar_layer_without_prior() {
        let d = data(&[1.0, 2.0, -0.5], &[0.0, 0.0, 0.0]);
        let k = fit_laplace(&scalar_net(0.3), &d, None, &weight_only(Structure::Kfac, 0.0)).unwrap();
        let g = fit_laplace(&scalar_net(0.3), &d, None, &weight_only(Structure::Diagonal, 0.0)).unwrap();
        let (a, b) = (scalar_var(k.posterior.get(0)), scalar_var(g.posterior.get(0)));
        assert!((a - b).abs() < 1e-12 * b);
    }

    #[test]
    fn joint_weight_and_bias_posterior_is_exact() {
        let xs = [1.0, 2.0, -1.0, 0.5];
        let d = data(&xs, &[0.0; 4]);
        let cfg = LaplaceConfig {
            structure: Structure::Full,
            prior_precision_grid: vec![0.5],
            obs_noise: Some(0.25),
            ..LaplaceConfig::default()
        };
        let fit = fit_laplace(&scalar_net(1.0), &d, None, &cfg).unwrap();
        let LayerPosterior::Full { cov, .. } = fit.posterior.get(0) else { panic!() };
        let x = Matrix::from_fn(4, 2, |r, c| if c == 0 { xs[r] } else { 1.0 });
        let prec = x.transpose().matmul(&x).scale(4.0).add_diag(0.5);
        let exact = crate::numerics::inverse_spd(&prec).unwrap();
        assert!(cov.rel_diff(&exact) < 1e-10);
    }

    #[test]
    fn singular_curvature_without_prior_fails() {
        let d = data(&[0.0, 0.0], &[1.0, 2.0]);
        let err = fit_laplace(&scalar_net(1.0), &d, None, &weight_only(Structure::Full, 0.0)).unwrap_err();
        assert!(err.is_numerical());
        let err = fit_laplace(&scalar_net(1.0), &d, None, &weight_only(Structure::Diagonal, 0.0)).unwrap_err();
        assert!(err.is_numerical());
    }

    #[test]
    fn larger_prior_precision_shrinks_variances() {
        let mut rng = SeededRng::new(4, 0);
        let net = NetworkModel::mlp(&[3, 4, 2], Activation::Tanh, Task::Classification, &mut rng).unwrap();
        let xs = Matrix::from_fn(20, 3, |_, _| rng.normal());
        let d = Dataset::new(
            xs,
            Targets::Classification {
                labels: (0..20).map(|i| i % 2).collect(),
                num_classes: 2,
            },
        )
        .unwrap();
        for s in [Structure::Diagonal, Structure::Kfac, Structure::Full] {
            let mut prev: Option<Vec<f64>> = None;
            for &l in &default_prior_grid() {
                let cfg = LaplaceConfig {
                    structure: s,
                    prior_precision_grid: vec![l],
                    ..LaplaceConfig::default()
                };
                let fit = fit_laplace(&net, &d, None, &cfg).unwrap();
                let vars: Vec<f64> = fit
                    .posterior
                    .iter()
                    .flat_map(|(_, p)| match p {
                        LayerPosterior::Diagonal { var_weight, .. } => var_weight.data().to_vec(),
                        LayerPosterior::Full { cov, .. } => cov.diag().into_inner(),
                        LayerPosterior::Kfac(k) => k.dense().diag().into_inner(),
                        LayerPosterior::Deterministic => vec![],
                    })
                    .collect();
                if let Some(p) = &prev {
                    assert!(vars.iter().zip(p).all(|(a, b)| *a <= b * (1.0 + 1e-12)), "{s} at {l}");
                }
                prev = Some(vars);
            }
        }
    }

    #[test]
    fn diagonal_equals_full_without_cross_curvature() {
        // two inputs that are never active together: the curvature is diagonal
        let xs = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 0.0]]).unwrap();
        let d = Dataset::new(xs, Targets::Regression(Vector::zeros(3))).unwrap();
        let net = NetworkModel::new(
            Shape::Flat(2),
            vec![LayerSpec::Linear(Linear::new(Matrix::from_rows(&[vec![0.1, 0.2]]).unwrap(), Vector::zeros(1)).unwrap())],
            Task::Regression,
        )
        .unwrap();
        let full = fit_laplace(&net, &d, None, &weight_only(Structure::Full, 0.3)).unwrap();
        let diag = fit_laplace(&net, &d, None, &weight_only(Structure::Diagonal, 0.3)).unwrap();
        let LayerPosterior::Full { cov, .. } = full.posterior.get(0) else { panic!() };
        let LayerPosterior::Diagonal { var_weight, .. } = diag.posterior.get(0) else { panic!() };
        for i in 0..2 {
            assert!((cov[(i, i)] - var_weight[(0, i)]).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_search_and_noise_estimate() {
        let mut rng = SeededRng::new(5, 0);
        let xs: Vec<f64> = (0..60).map(|_| rng.normal()).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.5 * x + 0.3 * rng.normal()).collect();
        let d = data(&xs, &ys);
        let cfg = LaplaceConfig {
            structure: Structure::Full,
            ..LaplaceConfig::default()
        };
        let fit = fit_laplace(&scalar_net(1.5), &d, None, &cfg).unwrap();
        assert_eq!(fit.grid_nlpd.len(), 21);
        let best = fit.grid_nlpd.iter().map(|g| g.1).fold(f64::INFINITY, f64::min);
        assert!(fit.grid_nlpd.iter().any(|g| g.0 == fit.prior_precision && g.1 == best));
        let r: f64 = xs.iter().zip(&ys).map(|(x, y)| (1.5 * x - y).powi(2)).sum::<f64>() / 60.0;
        assert!((fit.obs_noise - r).abs() < 1e-12);
    }

    #[test]
    fn structure_names_parse() {
        assert!("banana".parse::<Structure>().is_err());
        assert_eq!("kfac".parse::<Structure>().unwrap(), Structure::Kfac);
    }
}
