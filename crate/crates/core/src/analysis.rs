//! Input sensitivity maps, the local-linearity probe and predictive-entropy
//! densities.

use std::f64::consts::{E, PI};
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fit::Adam;
use crate::grad::{forward_tape, variance_backward};
use crate::model::{write_atomic, NetworkModel, Task};
use crate::numerics::{log_grid, normal_pdf, Matrix, Vector};
use crate::posterior::PosteriorSpec;
use crate::propagate::{propagate_network, MomentState, PropagationConfig, ValueCov};

const PROBIT_FACTOR: f64 = PI / 8.0;

/// NLPD increase that ends the optimisation.
pub const DEFAULT_THRESHOLD: f64 = 0.1;
/// Tighter stopping preset.
pub const TIGHT_THRESHOLD: f64 = 1e-2;
/// Kernel variance for entropy densities.
pub const DEFAULT_BANDWIDTH_VARIANCE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityOptions {
    pub threshold: f64,
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Starting input variance, shared by every dimension.
    pub init_variance: f64,
    pub value_cov: ValueCov,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        SensitivityOptions {
            threshold: DEFAULT_THRESHOLD,
            learning_rate: 5e-3,
            max_iterations: 2000,
            init_variance: 1e-5,
            value_cov: ValueCov::Full,
        }
    }
}

impl SensitivityOptions {
    pub fn tight() -> Self {
        SensitivityOptions {
            threshold: TIGHT_THRESHOLD,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SensitivityStep {
    pub iteration: usize,
    pub loss: f64,
    pub nlpd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMap {
    pub sigma: Vector,
    /// Accepted optimiser steps.
    pub iterations: usize,
    /// NLPD of the returned iterate minus the initial NLPD.
    pub final_nlpd_gap: f64,
    pub normalised_map: Vector,
    pub trace: Vec<SensitivityStep>,
}

/// Value and gradient of the sensitivity objective at one input.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityLoss {
    /// Cross-entropy of the probit predictive minus the input entropy.
    pub loss: f64,
    pub nlpd: f64,
    /// Gradient with respect to the log input variances.
    pub grad: Vec<f64>,
}

fn check_classifier(net: &NetworkModel, y: usize) -> Result<()> {
    if net.task() != Task::Classification {
        return Err(Error::Config("sensitivity maps need a classification network".into()));
    }
    if y >= net.num_outputs() {
        return Err(Error::Config(format!("class {y} out of range for {} outputs", net.num_outputs())));
    }
    Ok(())
}

/// Cross-entropy after propagating `N(x, diag(exp ρ))` in diagonal mode,
/// minus the Gaussian entropy `½ Σ (ln 2πe + ρ)`.
pub fn sensitivity_loss(
    net: &NetworkModel,
    post: &PosteriorSpec,
    x: &[f64],
    y: usize,
    log_var: &[f64],
    value_cov: ValueCov,
) -> Result<SensitivityLoss> {
    check_classifier(net, y)?;
    if log_var.len() != x.len() {
        return Err(Error::structural("one log variance per input dimension"));
    }
    let var: Vector = log_var.iter().map(|r| r.exp()).collect();
    let input = MomentState::diagonal(net.input(), Vector::from(x), var.clone())?;
    let cfg = PropagationConfig::diag().with_value_cov(value_cov);
    let out = propagate_network(net, post, &input, &cfg)?;
    let mu = out.mean();
    let v = out.variances();

    let kappa: Vec<f64> = v.iter().map(|v| 1.0 / (1.0 + PROBIT_FACTOR * v).sqrt()).collect();
    let z: Vec<f64> = mu.iter().zip(&kappa).map(|(m, k)| m * k).collect();
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = zmax + z.iter().map(|z| (z - zmax).exp()).sum::<f64>().ln();
    let nlpd = lse - z[y];

    // d nlpd / d v_c = (p_c - [c = y]) μ_c dκ_c/dv_c
    let grad_v: Vec<f64> = (0..z.len())
        .map(|c| {
            let p = (z[c] - lse).exp() - if c == y { 1.0 } else { 0.0 };
            p * mu[c] * (-0.5 * PROBIT_FACTOR) * kappa[c].powi(3)
        })
        .collect();
    let (_, tape) = forward_tape(net, x)?;
    let grad_in = variance_backward(net, post, &tape, value_cov, &grad_v)?;
    let grad = grad_in.iter().zip(var.iter()).map(|(g, s)| g * s - 0.5).collect();

    let entropy: f64 = log_var.iter().map(|r| 0.5 * ((2.0 * PI * E).ln() + r)).sum();
    Ok(SensitivityLoss {
        loss: nlpd - entropy,
        nlpd,
        grad,
    })
}

/// Learns a diagonal input covariance for one datum with Adam on the log
/// variances. A step is accepted only while the NLPD stays within
/// `threshold` of its initial value; the last accepted iterate is returned.
pub fn optimize_input_covariance(
    net: &NetworkModel,
    post: &PosteriorSpec,
    x: &[f64],
    y: usize,
    opts: &SensitivityOptions,
) -> Result<SensitivityMap> {
    if !(opts.init_variance > 0.0) || !(opts.learning_rate > 0.0) || opts.threshold.is_nan() || opts.threshold < 0.0 {
        return Err(Error::Config("invalid sensitivity options".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("input contains non-finite values"));
    }
    let mut rho = vec![opts.init_variance.ln(); x.len()];
    let mut adam = Adam::new(rho.len(), opts.learning_rate);
    let mut current = sensitivity_loss(net, post, x, y, &rho, opts.value_cov)?;
    let initial = current.nlpd;
    let mut trace = vec![SensitivityStep {
        iteration: 0,
        loss: current.loss,
        nlpd: current.nlpd,
    }];
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        let mut next = rho.clone();
        adam.step(&mut next, &current.grad);
        let eval = sensitivity_loss(net, post, x, y, &next, opts.value_cov)?;
        if !eval.loss.is_finite() || eval.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { epoch: iterations + 1 });
        }
        if eval.nlpd - initial > opts.threshold {
            break;
        }
        rho = next;
        current = eval;
        iterations += 1;
        trace.push(SensitivityStep {
            iteration: iterations,
            loss: current.loss,
            nlpd: current.nlpd,
        });
    }
    let sigma: Vector = rho.iter().map(|r| (0.5 * r).exp()).collect();
    Ok(SensitivityMap {
        normalised_map: min_max(&sigma),
        sigma,
        iterations,
        final_nlpd_gap: current.nlpd - initial,
        trace,
    })
}

/// Independent optimisation per row of `xs`.
pub fn optimize_batch(
    net: &NetworkModel,
    post: &PosteriorSpec,
    xs: &Matrix,
    ys: &[usize],
    opts: &SensitivityOptions,
    exec: Execution,
) -> Result<Vec<SensitivityMap>> {
    if xs.rows() != ys.len() {
        return Err(Error::structural("one label per input row"));
    }
    exec.try_map_indexed(xs.rows(), |n| optimize_input_covariance(net, post, xs.row(n), ys[n], opts))
}

fn min_max(v: &[f64]) -> Vector {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        v.iter().map(|s| (s - lo) / (hi - lo)).collect()
    } else {
        Vector::zeros(v.len())
    }
}

/// Binary graymap of the normalised map. Values below 0.5 render black,
/// 1.0 renders white.
pub fn sensitivity_pgm(map: &SensitivityMap, width: usize, height: usize) -> Result<Vec<u8>> {
    if width * height != map.normalised_map.len() {
        return Err(Error::structural(format!(
            "{}x{} image does not match {} pixels",
            width,
            height,
            map.normalised_map.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(
        map.normalised_map
            .iter()
            .map(|v| (((v - 0.5) / 0.5).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn sensitivity_csv(map: &SensitivityMap) -> Vec<u8> {
    let mut s = String::from("index,sigma,normalised\n");
    for (i, (sig, n)) in map.sigma.iter().zip(map.normalised_map.iter()).enumerate() {
        let _ = writeln!(s, "{i},{sig},{n}");
    }
    s.into_bytes()
}

pub fn write_sensitivity(dir: impl AsRef<Path>, stem: &str, map: &SensitivityMap, width: usize, height: usize) -> Result<()> {
    let dir = dir.as_ref();
    write_atomic(&dir.join(format!("{stem}.pgm")), &sensitivity_pgm(map, width, height)?)?;
    write_atomic(&dir.join(format!("{stem}.csv")), &sensitivity_csv(map))
}

/// Mean absolute deviation from linearity, per output dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearityProbe {
    pub eps: Vec<f64>,
    /// `delta[k][c]` for `eps[k]` and output `c`.
    pub delta: Vec<Vector>,
    /// Max minus min of each output over the inputs.
    pub output_range: Vector,
    /// Max minus min over all input values.
    pub input_range: f64,
}

impl LinearityProbe {
    /// Deviations divided by the output range (dimensions with zero range
    /// are left unscaled).
    pub fn scaled(&self) -> Vec<Vector> {
        self.delta
            .iter()
            .map(|d| {
                d.iter()
                    .zip(self.output_range.iter())
                    .map(|(v, r)| if *r > 0.0 { v / r } else { *v })
                    .collect()
            })
            .collect()
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let scaled = self.scaled();
        let mut s = String::from("eps,output,delta,scaled_delta\n");
        for (k, e) in self.eps.iter().enumerate() {
            for c in 0..self.delta[k].len() {
                let _ = writeln!(s, "{e},{c},{},{}", self.delta[k][c], scaled[k][c]);
            }
        }
        s.into_bytes()
    }
}

/// `1e-6, 1e-5, …, 1`.
pub fn default_probe_eps() -> Vec<f64> {
    log_grid(1e-6, 1.0, 7)
}

/// Averages `|f(z(1±ε)) − f(z)(1±ε)|` over the rows of `inputs` and both
/// signs, on the raw network outputs.
pub fn linearity_probe(net: &NetworkModel, inputs: &Matrix, eps: &[f64]) -> Result<LinearityProbe> {
    if inputs.rows() == 0 {
        return Err(Error::Config("linearity probe needs at least one input".into()));
    }
    if eps.iter().any(|e| !(*e >= 0.0)) {
        return Err(Error::Config("eps values must be nonnegative".into()));
    }
    let base: Vec<Vector> = (0..inputs.rows()).map(|n| net.forward(inputs.row(n))).collect::<Result<_>>()?;
    let k = base[0].len();
    let mut lo = vec![f64::INFINITY; k];
    let mut hi = vec![f64::NEG_INFINITY; k];
    for f in &base {
        for c in 0..k {
            lo[c] = lo[c].min(f[c]);
            hi[c] = hi[c].max(f[c]);
        }
    }
    let xmin = inputs.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let xmax = inputs.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let count = 2.0 * inputs.rows() as f64;
    let mut delta = Vec::with_capacity(eps.len());
    for &e in eps {
        let mut acc = vec![0.0; k];
        for (n, f) in base.iter().enumerate() {
            for factor in [1.0 + e, 1.0 - e] {
                let z: Vec<f64> = inputs.row(n).iter().map(|v| v * factor).collect();
                let fz = net.forward(&z)?;
                for c in 0..k {
                    acc[c] += (fz[c] - f[c] * factor).abs();
                }
            }
        }
        delta.push(acc.into_iter().map(|a| a / count).collect());
    }
    Ok(LinearityProbe {
        eps: eps.to_vec(),
        delta,
        output_range: hi.iter().zip(&lo).map(|(h, l)| h - l).collect(),
        input_range: xmax - xmin,
    })
}

/// Entropy in nats, with `0 log 0 = 0`.
pub fn predictive_entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyDensity {
    pub grid: Vector,
    pub density: Vector,
    pub bandwidth_variance: f64,
}

impl EntropyDensity {
    /// Trapezoid integral over the grid.
    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.density)
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut s = String::from("grid,density\n");
        for (g, d) in self.grid.iter().zip(self.density.iter()) {
            let _ = writeln!(s, "{g},{d}");
        }
        s.into_bytes()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_csv())
    }
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

/// Evenly spaced grid reaching eight kernel widths past the extreme samples.
pub fn entropy_grid(entropies: &[f64], bandwidth_variance: f64, points: usize) -> Vector {
    let pad = 8.0 * bandwidth_variance.sqrt();
    let lo = entropies.iter().cloned().fold(f64::INFINITY, f64::min) - pad;
    let hi = entropies.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + pad;
    let n = points.max(2);
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Gaussian kernel density `(1/N) Σ N(t; e_n, h)` evaluated on `grid`.
pub fn entropy_kde(entropies: &[f64], grid: &[f64], bandwidth_variance: f64) -> Result<EntropyDensity> {
    if entropies.is_empty() {
        return Err(Error::Config("no entropies to estimate a density from".into()));
    }
    if !(bandwidth_variance > 0.0) {
        return Err(Error::Config("bandwidth variance must be positive".into()));
    }
    if grid.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Config("density grid must be sorted".into()));
    }
    let sd = bandwidth_variance.sqrt();
    let n = entropies.len() as f64;
    let density = grid
        .iter()
        .map(|t| entropies.iter().map(|e| normal_pdf((t - e) / sd) / sd).sum::<f64>() / n)
        .collect();
    Ok(EntropyDensity {
        grid: Vector::from(grid),
        density,
        bandwidth_variance,
    })
}
