//! Predictive heads, metrics and the validation-fitted variance scale.

use std::f64::consts::PI;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{write_atomic, NetworkModel, Targets, Task};
use crate::numerics::{log_grid, Matrix, Vector};
use crate::posterior::PosteriorSpec;
use crate::propagate::{propagate_network, MomentState, PropagationConfig};

/// Number of equal-width confidence bins used for ECE.
pub const ECE_BINS: usize = 15;
/// Default variance-scale grid: 41 log-spaced points on `[1e-3, 1e3]`.
pub const SCALE_GRID: (f64, f64, usize) = (1e-3, 1e3, 41);

const PROBIT_FACTOR: f64 = PI / 8.0;

#[derive(Debug, Clone, PartialEq)]
pub enum PredictiveDist {
    /// `N(mean, scale·variance + obs_noise)`; `variance` is the unscaled model variance.
    Regression {
        mean: f64,
        variance: f64,
        obs_noise: f64,
        scale: f64,
    },
    Classification {
        probs: Vector,
        logit_mean: Vector,
        logit_var: Vector,
        scale: f64,
    },
}

impl PredictiveDist {
    /// Rebuild with a different variance scale.
    pub fn rescaled(&self, scale: f64) -> Result<PredictiveDist> {
        match self {
            PredictiveDist::Regression {
                mean,
                variance,
                obs_noise,
                ..
            } => regression_predict(*mean, *variance, *obs_noise, scale),
            PredictiveDist::Classification {
                logit_mean, logit_var, ..
            } => classification_predict(logit_mean.clone(), logit_var.clone(), scale),
        }
    }

    pub fn total_variance(&self) -> Option<f64> {
        match self {
            PredictiveDist::Regression {
                variance,
                obs_noise,
                scale,
                ..
            } => Some(scale * variance + obs_noise),
            PredictiveDist::Classification { .. } => None,
        }
    }

    pub fn probs(&self) -> Option<&Vector> {
        match self {
            PredictiveDist::Classification { probs, .. } => Some(probs),
            PredictiveDist::Regression { .. } => None,
        }
    }

    /// Build from network output moments.
    pub fn from_moments(task: Task, mean: &Vector, var: &Vector, obs_noise: f64, scale: f64) -> Result<Self> {
        match task {
            Task::Classification => classification_predict(mean.clone(), var.clone(), scale),
            Task::Regression => {
                if mean.len() != 1 {
                    return Err(Error::structural(format!(
                        "regression head expects one output, got {}",
                        mean.len()
                    )));
                }
                regression_predict(mean[0], var[0], obs_noise, scale)
            }
        }
    }

    /// Negative log predictive density of one target.
    pub fn nlpd(&self, target: Target) -> Result<f64> {
        match (self, target) {
            (PredictiveDist::Regression { mean, .. }, Target::Value(y)) => {
                let v = self.total_variance().unwrap();
                if v <= 0.0 {
                    return Err(Error::numerical("predictive variance is zero"));
                }
                Ok(0.5 * (2.0 * PI * v).ln() + 0.5 * (y - mean) * (y - mean) / v)
            }
            (PredictiveDist::Classification { probs, .. }, Target::Class(c)) => {
                let p = probs
                    .get(c)
                    .ok_or_else(|| Error::structural(format!("class {c} out of range for {} classes", probs.len())))?;
                Ok(-p.max(f64::MIN_POSITIVE).ln())
            }
            _ => Err(Error::structural("target kind does not match the predictive")),
        }
    }
}

/// One target value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Value(f64),
    Class(usize),
}

impl Targets {
    pub fn get(&self, n: usize) -> Target {
        match self {
            Targets::Regression(v) => Target::Value(v[n]),
            Targets::Classification { labels, .. } => Target::Class(labels[n]),
        }
    }
}

fn softmax(z: &[f64]) -> Vector {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("variance scale must be positive, got {scale}")));
    }
    Ok(())
}

/// Mean-field probit: `softmax(μ_c / sqrt(1 + π/8 · scale · σ_c²))`.
pub fn probit_classify(logit_mean: &[f64], logit_var: &[f64], scale: f64) -> Result<Vector> {
    check_scale(scale)?;
    if logit_mean.len() != logit_var.len() || logit_mean.is_empty() {
        return Err(Error::structural("logit means and variances must be nonempty and aligned"));
    }
    if logit_var.iter().any(|&v| v < 0.0 || v.is_nan()) {
        return Err(Error::numerical("negative logit variance"));
    }
    let z: Vec<f64> = logit_mean
        .iter()
        .zip(logit_var)
        .map(|(&m, &v)| m / (1.0 + PROBIT_FACTOR * scale * v).sqrt())
        .collect();
    Ok(softmax(&z))
}

fn classification_predict(logit_mean: Vector, logit_var: Vector, scale: f64) -> Result<PredictiveDist> {
    let probs = probit_classify(&logit_mean, &logit_var, scale)?;
    Ok(PredictiveDist::Classification {
        probs,
        logit_mean,
        logit_var,
        scale,
    })
}

pub fn regression_predict(mean: f64, model_var: f64, obs_noise: f64, scale: f64) -> Result<PredictiveDist> {
    check_scale(scale)?;
    if model_var < 0.0 || obs_noise < 0.0 || model_var.is_nan() || obs_noise.is_nan() {
        return Err(Error::numerical("variances must be nonnegative"));
    }
    Ok(PredictiveDist::Regression {
        mean,
        variance: model_var,
        obs_noise,
        scale,
    })
}

/// Analytic predictive for one deterministic input.
pub fn predict_analytic(
    net: &NetworkModel,
    post: &PosteriorSpec,
    x: &[f64],
    cfg: &PropagationConfig,
    obs_noise: f64,
    scale: f64,
) -> Result<PredictiveDist> {
    let input = MomentState::deterministic(net.input(), Vector::from(x))?;
    let out = propagate_network(net, post, &input, cfg)?;
    PredictiveDist::from_moments(net.task(), out.mean(), &out.variances(), obs_noise, scale)
}

/// [`predict_analytic`] over the rows of `xs`.
pub fn predict_analytic_batch(
    net: &NetworkModel,
    post: &PosteriorSpec,
    xs: &Matrix,
    cfg: &PropagationConfig,
    obs_noise: f64,
    scale: f64,
    exec: Execution,
) -> Result<Vec<PredictiveDist>> {
    exec.try_map_indexed(xs.rows(), |n| predict_analytic(net, post, xs.row(n), cfg, obs_noise, scale))
}

fn mean_of(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn mean_nlpd(preds: &[PredictiveDist], targets: &Targets, scale: f64) -> Result<f64> {
    let mut total = Vec::with_capacity(preds.len());
    for (n, p) in preds.iter().enumerate() {
        total.push(p.rescaled(scale)?.nlpd(targets.get(n))?);
    }
    Ok(mean_of(&total))
}

/// Pick the grid point with the lowest mean validation NLPD. Exact ties go to
/// the point closest to 1 on the log scale.
pub fn fit_variance_scale(preds: &[PredictiveDist], targets: &Targets, grid: &[f64]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Config("variance scale needs a nonempty validation set".into()));
    }
    if preds.len() != targets.len() {
        return Err(Error::structural("predictions and targets differ in length"));
    }
    if grid.is_empty() {
        return Err(Error::Config("empty scale grid".into()));
    }
    let mut best: Option<(f64, f64)> = None;
    for &s in grid {
        let nlpd = mean_nlpd(preds, targets, s)?;
        let better = match best {
            None => true,
            Some((bs, bn)) => nlpd < bn || (nlpd == bn && s.ln().abs() < bs.ln().abs()),
        };
        if better {
            best = Some((s, nlpd));
        }
    }
    Ok(best.unwrap().0)
}

pub fn default_scale_grid() -> Vec<f64> {
    log_grid(SCALE_GRID.0, SCALE_GRID.1, SCALE_GRID.2)
}

/// Per-datum evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatumRecord {
    pub index: usize,
    pub nlpd: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub squared_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub nlpd: f64,
    /// Classification only.
    pub acc: Option<f64>,
    /// Regression only.
    pub rmse: Option<f64>,
    /// Classification only.
    pub ece: Option<f64>,
    pub records: Vec<DatumRecord>,
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Expected calibration error over equal-width bins of the top-class confidence.
pub fn expected_calibration_error(confidence: &[f64], correct: &[f64], bins: usize) -> f64 {
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut acc_sum = vec![0.0; bins];
    for (&c, &a) in confidence.iter().zip(correct) {
        let b = ((c * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        acc_sum[b] += a;
    }
    let n = confidence.len() as f64;
    (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let k = count[b] as f64;
            k / n * (acc_sum[b] / k - conf_sum[b] / k).abs()
        })
        .sum()
}

pub fn compute_metrics(preds: &[PredictiveDist], targets: &Targets) -> Result<MetricReport> {
    if preds.len() != targets.len() {
        return Err(Error::structural("predictions and targets differ in length"));
    }
    if preds.is_empty() {
        return Err(Error::Config("no predictions to evaluate".into()));
    }
    let mut records = Vec::with_capacity(preds.len());
    for (n, p) in preds.iter().enumerate() {
        let t = targets.get(n);
        let nlpd = p.nlpd(t)?;
        let mut r = DatumRecord {
            index: n,
            nlpd,
            correct: None,
            confidence: None,
            squared_error: None,
            probs: None,
            mean: None,
            variance: None,
        };
        match (p, t) {
            (PredictiveDist::Classification { probs, .. }, Target::Class(c)) => {
                let k = argmax(probs);
                r.correct = Some(if k == c { 1.0 } else { 0.0 });
                r.confidence = Some(probs[k]);
                r.probs = Some(probs.to_vec());
            }
            (PredictiveDist::Regression { mean, .. }, Target::Value(y)) => {
                r.squared_error = Some((y - mean) * (y - mean));
                r.mean = Some(*mean);
                r.variance = p.total_variance();
            }
            _ => unreachable!("nlpd checked the pairing"),
        }
        records.push(r);
    }
    let nlpd = mean_of(&records.iter().map(|r| r.nlpd).collect::<Vec<_>>());
    let report = match targets {
        Targets::Classification { .. } => {
            let correct: Vec<f64> = records.iter().map(|r| r.correct.unwrap()).collect();
            let conf: Vec<f64> = records.iter().map(|r| r.confidence.unwrap()).collect();
            MetricReport {
                nlpd,
                acc: Some(mean_of(&correct)),
                rmse: None,
                ece: Some(expected_calibration_error(&conf, &correct, ECE_BINS)),
                records,
            }
        }
        Targets::Regression(_) => {
            let se: Vec<f64> = records.iter().map(|r| r.squared_error.unwrap()).collect();
            MetricReport {
                nlpd,
                acc: None,
                rmse: Some(mean_of(&se).sqrt()),
                ece: None,
                records,
            }
        }
    };
    Ok(report)
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub dataset: String,
    pub method: String,
    pub acc: Option<f64>,
    pub nlpd: f64,
    pub ece: Option<f64>,
    pub rmse: Option<f64>,
    pub scale: f64,
    pub runtime_ms: Option<f64>,
}

impl MetricRow {
    pub fn new(dataset: &str, method: &str, report: &MetricReport, scale: f64) -> Self {
        MetricRow {
            dataset: dataset.to_string(),
            method: method.to_string(),
            acc: report.acc,
            nlpd: report.nlpd,
            ece: report.ece,
            rmse: report.rmse,
            scale,
            runtime_ms: None,
        }
    }
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))
}

pub fn metrics_csv(rows: &[MetricRow]) -> Result<Vec<u8>> {
    csv_bytes(rows)
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    write_atomic(path.as_ref(), &metrics_csv(rows)?)
}

/// Per-datum records as JSON lines.
pub fn records_jsonl(records: &[DatumRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        out.extend(serde_json::to_vec(r).expect("records serialise"));
        out.push(b'\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn probit_examples() {
        let p = probit_classify(&[1.0, 0.0], &[0.0, 0.0], 3.0).unwrap();
        assert!(close(p[0], 0.7311, 1e-4) && close(p[1], 0.2689, 1e-4));
        let p = probit_classify(&[0.0, 0.0], &[2.5, 2.5], 1.0).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
        let p = probit_classify(&[2.0, 0.0], &[24.0 / PI, 0.0], 1.0).unwrap();
        let q = softmax(&[1.0, 0.0]);
        assert!(close(p[0], q[0], 1e-15) && close(p[1], q[1], 1e-15));
    }

    #[test]
    fn probit_rejects_bad_scale() {
        assert!(probit_classify(&[0.0], &[0.0], 0.0).is_err());
        assert!(probit_classify(&[0.0], &[-1.0], 1.0).is_err());
    }

    #[test]
    fn regression_examples() {
        let p = regression_predict(1.5, 0.0, 0.2, 7.0).unwrap();
        assert_eq!(p.total_variance(), Some(0.2));
        let p = regression_predict(0.0, 0.3, 0.1, 2.0).unwrap();
        assert!(close(p.total_variance().unwrap(), 0.7, 1e-15));
        let p = regression_predict(2.0, 0.5, 0.5, 1.0).unwrap();
        assert!(close(p.nlpd(Target::Value(2.0)).unwrap(), 0.9189385332046727, 1e-15));
    }

    #[test]
    fn metric_examples() {
        let preds: Vec<_> = (0..3)
            .map(|c| {
                let mut m = vec![-50.0; 3];
                m[c] = 50.0;
                classification_predict(m.into(), Vector::zeros(3), 1.0).unwrap()
            })
            .collect();
        let t = Targets::Classification {
            labels: vec![0, 1, 2],
            num_classes: 3,
        };
        let r = compute_metrics(&preds, &t).unwrap();
        assert_eq!(r.acc, Some(1.0));
        assert!(r.ece.unwrap() < 1e-15);

        let uni: Vec<_> = (0..5)
            .map(|_| classification_predict(Vector::zeros(10), Vector::zeros(10), 1.0).unwrap())
            .collect();
        let t = Targets::Classification {
            labels: vec![0, 3, 9, 2, 2],
            num_classes: 10,
        };
        assert!(close(compute_metrics(&uni, &t).unwrap().nlpd, 10f64.ln(), 1e-12));

        let t = Targets::Classification {
            labels: vec![10],
            num_classes: 11,
        };
        assert!(compute_metrics(&uni[..1], &t).is_err());
    }

    #[test]
    fn ece_hand_example() {
        // bins of width 1/15: 0.95 and 0.99 share bin 14, 0.6 is bin 9, 0.7 is bin 10
        let conf = [0.95, 0.99, 0.6, 0.7];
        let correct = [1.0, 0.0, 1.0, 1.0];
        let want = 0.5 * (0.5f64 - 0.97).abs() + 0.25 * 0.4 + 0.25 * 0.3;
        assert!(close(expected_calibration_error(&conf, &correct, 15), want, 1e-15));
    }

    #[test]
    fn aggregates_equal_record_means() {
        let mut rng = SeededRng::new(3, 0);
        let preds: Vec<_> = (0..37)
            .map(|_| regression_predict(rng.normal(), rng.uniform(), 0.1, 1.0).unwrap())
            .collect();
        let t = Targets::Regression((0..37).map(|_| rng.normal()).collect());
        let r = compute_metrics(&preds, &t).unwrap();
        let nl: Vec<f64> = r.records.iter().map(|x| x.nlpd).collect();
        assert_eq!(r.nlpd, mean_of(&nl));
        let se: Vec<f64> = r.records.iter().map(|x| x.squared_error.unwrap()).collect();
        assert_eq!(r.rmse.unwrap(), mean_of(&se).sqrt());
    }

    fn synthetic(inflation: f64, n: usize, seed: u64) -> (Vec<PredictiveDist>, Targets) {
        let mut rng = SeededRng::new(seed, 0);
        let mut preds = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..n {
            let mean = rng.normal();
            let var = 0.1 + rng.uniform();
            ys.push(mean + (inflation * var).sqrt() * rng.normal());
            preds.push(regression_predict(mean, var, 0.0, 1.0).unwrap());
        }
        (preds, Targets::Regression(ys.into()))
    }

    fn grid_index(grid: &[f64], s: f64) -> usize {
        grid.iter().position(|&g| g == s).unwrap()
    }

    fn nearest(grid: &[f64], s: f64) -> usize {
        let mut best = 0;
        for (i, g) in grid.iter().enumerate() {
            if (g.ln() - s.ln()).abs() < (grid[best].ln() - s.ln()).abs() {
                best = i;
            }
        }
        best
    }

    #[test]
    fn scale_recovers_inflation() {
        let grid = default_scale_grid();
        for s in [0.25, 1.0, 4.0] {
            let (p, t) = synthetic(s, 20_000, 11);
            let got = fit_variance_scale(&p, &t, &grid).unwrap();
            let (a, b) = (grid_index(&grid, got), nearest(&grid, s));
            assert!(a.abs_diff(b) <= 1, "inflation {s} picked {got}");
        }
    }

    #[test]
    fn scale_calibrated_classification() {
        let mut rng = SeededRng::new(12, 0);
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..20_000 {
            let m: Vector = (0..3).map(|_| 2.0 * rng.normal()).collect();
            let p = classification_predict(m, Vector::filled(3, 1.0), 1.0).unwrap();
            let u = rng.uniform();
            let probs = p.probs().unwrap();
            let mut c = 0;
            let mut acc = probs[0];
            while u > acc && c < 2 {
                c += 1;
                acc += probs[c];
            }
            labels.push(c);
            preds.push(p);
        }
        let t = Targets::Classification { labels, num_classes: 3 };
        let grid = default_scale_grid();
        let got = fit_variance_scale(&preds, &t, &grid).unwrap();
        assert!(grid_index(&grid, got).abs_diff(nearest(&grid, 1.0)) <= 1, "picked {got}");
    }

    #[test]
    fn single_point_grid_and_empty_set() {
        let (p, t) = synthetic(1.0, 10, 1);
        assert_eq!(fit_variance_scale(&p, &t, &[3.5]).unwrap(), 3.5);
        assert!(fit_variance_scale(&[], &Targets::Regression(Vector::zeros(0)), &[1.0]).is_err());
    }

    #[test]
    fn ties_prefer_unit_scale() {
        let p = vec![regression_predict(0.0, 0.0, 1.0, 1.0).unwrap()];
        let t = Targets::Regression(Vector::from(vec![0.3]));
        assert_eq!(fit_variance_scale(&p, &t, &[0.5, 1.0, 2.0]).unwrap(), 1.0);
    }

    #[test]
    fn metrics_csv_layout() {
        let row = MetricRow {
            dataset: "servo".into(),
            method: "ours".into(),
            acc: None,
            nlpd: 0.5,
            ece: None,
            rmse: Some(0.25),
            scale: 1.0,
            runtime_ms: None,
        };
        let text = String::from_utf8(metrics_csv(&[row]).unwrap()).unwrap();
        assert_eq!(text, "dataset,method,acc,nlpd,ece,rmse,scale,runtime_ms\nservo,ours,,0.5,,0.25,1.0,\n");
    }

    proptest! {
        #[test]
        fn probit_shift_invariant_with_equal_variances(
            m in prop::collection::vec(-5.0f64..5.0, 2..8), v in 0.0f64..10.0, c in -10.0f64..10.0
        ) {
            let var = vec![v; m.len()];
            let shifted: Vec<f64> = m.iter().map(|x| x + c).collect();
            let a = probit_classify(&m, &var, 1.0).unwrap();
            let b = probit_classify(&shifted, &var, 1.0).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn probit_sums_to_one(m in prop::collection::vec(-30.0f64..30.0, 1..10), s in 1e-3f64..1e3) {
            let var: Vec<f64> = m.iter().map(|x| x.abs()).collect();
            let p = probit_classify(&m, &var, s).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}
