//! Gaussian posteriors over layer parameters.
//!
//! Every Bayesian layer is viewed through its augmented weight matrix
//! `W̄ = [W b]` (`D_out × D_in'`, with `D_in' = D_in + 1` when the layer has a
//! bias). Covariances are exposed as row blocks `Cov[W̄[k,:], W̄[l,:]]`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::io::{from_versioned_json, to_lossless_json, write_atomic};
use crate::model::{LayerSpec, NetworkModel};
use crate::numerics::{cholesky, from_eig, psd_factor, sym_eig, Matrix, SeededRng, Vector};

pub const POSTERIOR_VERSION: u64 = 1;

/// Relative eigenvalue tolerance for accepting a matrix as PSD.
const PSD_TOL: f64 = 1e-10;
const FULL_SYMMETRY_TOL: f64 = 1e-8;

/// How a weight matrix is flattened into a parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flattening {
    #[default]
    Row,
    Column,
}

/// `((a + λI)⁻¹, (b + λI)⁻¹)` through eigendecompositions of the factors.
///
/// Eigenvalues slightly below zero (within `1e-10` of the largest) are
/// clamped to zero before the shift.
pub fn kfac_invert(a: &Matrix, b: &Matrix, lambda: f64) -> Result<(Matrix, Matrix)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("KFAC shift must be finite and >= 0, got {lambda}")));
    }
    Ok((shifted_inverse(a, lambda, "a")?, shifted_inverse(b, lambda, "b")?))
}

fn clamp_psd(values: &[f64], what: &str) -> Result<Vec<f64>> {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if let Some(v) = values.iter().find(|&&v| v < -PSD_TOL * max) {
        return Err(Error::numerical(format!("{what} is not PSD (eigenvalue {v:e})")));
    }
    Ok(values.iter().map(|v| v.max(0.0)).collect())
}

fn shifted_inverse(m: &Matrix, lambda: f64, what: &str) -> Result<Matrix> {
    let (values, vectors) = sym_eig(m)?;
    let values = clamp_psd(&values, &format!("KFAC factor {what}"))?;
    let top = values.iter().fold(lambda, |a, &v| a.max(v + lambda));
    let mut inv = Vec::with_capacity(values.len());
    for v in values {
        let s = v + lambda;
        if s <= f64::EPSILON * top || s == 0.0 {
            return Err(Error::numerical(format!("KFAC factor {what} + λI is singular")));
        }
        inv.push(1.0 / s);
    }
    Ok(from_eig(&inv, &vectors))
}

/// Kronecker-factored posterior. Raw curvature factors are kept alongside
/// their shifted inverses `ã`, `b̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct KfacPosterior {
    a_factor: Matrix,
    b_factor: Matrix,
    prior_precision: f64,
    convention: Flattening,
    a_tilde: Matrix,
    b_tilde: Matrix,
}

impl KfacPosterior {
    /// `a_factor` is input-side (`D_in` or bias-augmented `D_in + 1`),
    /// `b_factor` output-side (`D_out`). The prior precision `λ²` is split as
    /// `λ` onto each factor.
    pub fn new(a_factor: Matrix, b_factor: Matrix, prior_precision: f64, convention: Flattening) -> Result<Self> {
        if !(prior_precision >= 0.0 && prior_precision.is_finite()) {
            return Err(Error::Config(format!(
                "prior precision must be finite and >= 0, got {prior_precision}"
            )));
        }
        let (a_tilde, b_tilde) = kfac_invert(&a_factor, &b_factor, prior_precision.sqrt())?;
        Ok(KfacPosterior {
            a_factor,
            b_factor,
            prior_precision,
            convention,
            a_tilde,
            b_tilde,
        })
    }

    pub fn a_factor(&self) -> &Matrix {
        &self.a_factor
    }

    pub fn b_factor(&self) -> &Matrix {
        &self.b_factor
    }

    pub fn prior_precision(&self) -> f64 {
        self.prior_precision
    }

    pub fn convention(&self) -> Flattening {
        self.convention
    }

    pub fn a_tilde(&self) -> &Matrix {
        &self.a_tilde
    }

    pub fn b_tilde(&self) -> &Matrix {
        &self.b_tilde
    }

    /// Input-side dimension (bias-augmented if the factor includes the bias).
    pub fn d_in(&self) -> usize {
        self.a_tilde.rows()
    }

    pub fn d_out(&self) -> usize {
        self.b_tilde.rows()
    }

    /// Dense covariance over the row-major flattened weights.
    pub fn dense(&self) -> Matrix {
        match self.convention {
            Flattening::Row => self.b_tilde.kron(&self.a_tilde),
            Flattening::Column => self.a_tilde.kron(&self.b_tilde),
        }
    }
}

/// `Cov[W[k,:], W[l,:]]` for a KFAC posterior.
///
/// Row convention: `b̃[k,l]·ã`. Column convention: the covariance is
/// `ã ⊗ b̃` read with row-major parameter labels; the required `D_in × D_in`
/// window is cut out of the few Kronecker blocks that overlap it.
pub fn kfac_row_cov(p: &KfacPosterior, k: usize, l: usize) -> Result<Matrix> {
    let (d_in, d_out) = (p.d_in(), p.d_out());
    if k >= d_out || l >= d_out {
        return Err(Error::structural(format!(
            "row pair ({k}, {l}) out of range for {d_out} output rows"
        )));
    }
    match p.convention {
        Flattening::Row => Ok(p.a_tilde.scale(p.b_tilde[(k, l)])),
        Flattening::Column => {
            let row_start = k * d_in / d_out;
            let row_end = ((k + 1) * d_in).div_ceil(d_out);
            let col_start = l * d_in / d_out;
            let col_end = ((l + 1) * d_in).div_ceil(d_out);
            let blocks = p
                .a_tilde
                .submatrix(row_start, row_end, col_start, col_end)
                .kron(&p.b_tilde);
            let r0 = (k * d_in) % d_out;
            let c0 = (l * d_in) % d_out;
            Ok(blocks.submatrix(r0, r0 + d_in, c0, c0 + d_in))
        }
    }
}

/// Posterior over one layer's parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum LayerPosterior {
    #[default]
    Deterministic,
    /// Elementwise variances. `var_bias` may be empty (deterministic bias).
    Diagonal { var_weight: Matrix, var_bias: Vector },
    Kfac(KfacPosterior),
    /// Dense covariance over `weights ‖ bias`, weights flattened per `flattening`.
    Full { cov: Matrix, flattening: Flattening },
}

impl LayerPosterior {
    pub fn diagonal(var_weight: Matrix, var_bias: Vector) -> Result<Self> {
        if var_weight.data().iter().chain(var_bias.iter()).any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::numerical("diagonal posterior variances must be finite and >= 0"));
        }
        Ok(LayerPosterior::Diagonal { var_weight, var_bias })
    }

    /// Validates symmetry and PSD-ness; tiny negative eigenvalues are clamped.
    pub fn full(mut cov: Matrix, flattening: Flattening) -> Result<Self> {
        if !cov.is_square() || !cov.is_symmetric(FULL_SYMMETRY_TOL) {
            return Err(Error::structural("full posterior covariance must be square and symmetric"));
        }
        cov.symmetrize();
        if cholesky(&cov).is_err() {
            let (values, vectors) = sym_eig(&cov)?;
            let values = clamp_psd(&values, "full posterior covariance")?;
            cov = from_eig(&values, &vectors);
        }
        Ok(LayerPosterior::Full { cov, flattening })
    }

    pub fn structure(&self) -> &'static str {
        match self {
            LayerPosterior::Deterministic => "deterministic",
            LayerPosterior::Diagonal { .. } => "diagonal",
            LayerPosterior::Kfac(_) => "kfac",
            LayerPosterior::Full { .. } => "full",
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, LayerPosterior::Deterministic)
    }

    /// Multiply every covariance entry by `c` (KFAC: `ã` is scaled).
    pub fn scaled(&self, c: f64) -> LayerPosterior {
        match self {
            LayerPosterior::Deterministic => LayerPosterior::Deterministic,
            LayerPosterior::Diagonal { var_weight, var_bias } => LayerPosterior::Diagonal {
                var_weight: var_weight.scale(c),
                var_bias: var_bias.iter().map(|v| v * c).collect(),
            },
            LayerPosterior::Kfac(k) => {
                let mut k = k.clone();
                k.a_tilde = k.a_tilde.scale(c);
                LayerPosterior::Kfac(k)
            }
            LayerPosterior::Full { cov, flattening } => LayerPosterior::Full {
                cov: cov.scale(c),
                flattening: *flattening,
            },
        }
    }
}

static DETERMINISTIC: LayerPosterior = LayerPosterior::Deterministic;

/// Posterior for a whole network, keyed by pre-order layer index. Missing
/// layers are deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PosteriorSpec {
    layers: BTreeMap<usize, LayerPosterior>,
}

impl PosteriorSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: usize, post: LayerPosterior) -> &mut Self {
        if post.is_deterministic() {
            self.layers.remove(&layer);
        } else {
            self.layers.insert(layer, post);
        }
        self
    }

    pub fn with(mut self, layer: usize, post: LayerPosterior) -> Self {
        self.insert(layer, post);
        self
    }

    pub fn get(&self, layer: usize) -> &LayerPosterior {
        self.layers.get(&layer).unwrap_or(&DETERMINISTIC)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &LayerPosterior)> {
        self.layers.iter().map(|(&i, p)| (i, p))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn scaled(&self, c: f64) -> PosteriorSpec {
        PosteriorSpec {
            layers: self.layers.iter().map(|(&i, p)| (i, p.scaled(c))).collect(),
        }
    }

    /// Check every entry against the layer it refers to.
    pub fn validate(&self, net: &NetworkModel) -> Result<()> {
        for (&idx, post) in &self.layers {
            let layer = net
                .layer(idx)
                .ok_or_else(|| Error::structural(format!("posterior refers to missing layer {idx}")))?;
            validate_layer(layer, post).map_err(|e| e.at_layer(idx))?;
        }
        Ok(())
    }
}

/// Mean weight matrix and bias of a layer that may carry a posterior.
/// Attention exposes its value projection.
pub(crate) fn layer_params(layer: &LayerSpec) -> Option<(&Matrix, Option<&Vector>)> {
    match layer {
        LayerSpec::Linear(l) => Some((&l.weight, Some(&l.bias))),
        LayerSpec::Conv2d(c) => Some((&c.kernels, Some(&c.bias))),
        LayerSpec::Attention(a) => Some((&a.wv, None)),
        _ => None,
    }
}

fn layer_params_mut(layer: &mut LayerSpec) -> Option<(&mut Matrix, Option<&mut Vector>)> {
    match layer {
        LayerSpec::Linear(l) => Some((&mut l.weight, Some(&mut l.bias))),
        LayerSpec::Conv2d(c) => Some((&mut c.kernels, Some(&mut c.bias))),
        LayerSpec::Attention(a) => Some((&mut a.wv, None)),
        _ => None,
    }
}

fn validate_layer(layer: &LayerSpec, post: &LayerPosterior) -> Result<()> {
    let (w, bias) = layer_params(layer).ok_or_else(|| {
        Error::structural(format!("a {} layer cannot carry a posterior", layer.name()))
    })?;
    validate_params(w, bias.is_some(), post)
}

/// Check a posterior against a weight matrix (`D_out × D_in`) and bias presence.
pub(crate) fn validate_params(w: &Matrix, has_bias: bool, post: &LayerPosterior) -> Result<()> {
    let (d_out, d_in) = (w.rows(), w.cols());
    match post {
        LayerPosterior::Deterministic => Ok(()),
        LayerPosterior::Diagonal { var_weight, var_bias } => {
            if var_weight.rows() != d_out || var_weight.cols() != d_in {
                return Err(Error::structural(format!(
                    "variance matrix is {}x{}, weights are {d_out}x{d_in}",
                    var_weight.rows(),
                    var_weight.cols()
                )));
            }
            if !var_bias.is_empty() && (!has_bias || var_bias.len() != d_out) {
                return Err(Error::structural("bias variance length does not match the layer"));
            }
            if var_weight.data().iter().chain(var_bias.iter()).any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::numerical("negative or non-finite posterior variance"));
            }
            Ok(())
        }
        LayerPosterior::Kfac(k) => {
            if k.d_out() != d_out {
                return Err(Error::structural(format!(
                    "KFAC output factor is {0}x{0}, layer has {d_out} outputs",
                    k.d_out()
                )));
            }
            if k.d_in() != d_in && !(has_bias && k.d_in() == d_in + 1) {
                return Err(Error::structural(format!(
                    "KFAC input factor is {0}x{0}, layer has {d_in} inputs",
                    k.d_in()
                )));
            }
            Ok(())
        }
        LayerPosterior::Full { cov, .. } => {
            let n = cov.rows();
            if n != d_out * d_in && !(has_bias && n == d_out * (d_in + 1)) {
                return Err(Error::structural(format!(
                    "full covariance has {n} rows, layer has {} weights",
                    d_out * d_in
                )));
            }
            Ok(())
        }
    }
}

/// Read-only view of one layer's posterior over its augmented weights.
pub(crate) struct WeightCov<'a> {
    post: &'a LayerPosterior,
    d_out: usize,
    d_in: usize,
    bias: bool,
}

impl<'a> WeightCov<'a> {
    pub(crate) fn new(post: &'a LayerPosterior, d_out: usize, d_in: usize, bias: bool) -> Self {
        WeightCov { post, d_out, d_in, bias }
    }

    pub(crate) fn aug(&self) -> usize {
        self.d_in + usize::from(self.bias)
    }

    pub(crate) fn posterior(&self) -> &'a LayerPosterior {
        self.post
    }

    /// True when distinct weights are uncorrelated.
    pub(crate) fn is_elementwise(&self) -> bool {
        matches!(self.post, LayerPosterior::Deterministic | LayerPosterior::Diagonal { .. })
    }

    /// Variances of augmented row `k`.
    pub(crate) fn row_var(&self, k: usize) -> Vec<f64> {
        match self.post {
            LayerPosterior::Deterministic => vec![0.0; self.aug()],
            LayerPosterior::Diagonal { var_weight, var_bias } => {
                let mut v = var_weight.row(k).to_vec();
                if self.bias {
                    v.push(var_bias.get(k).copied().unwrap_or(0.0));
                }
                v
            }
            _ => self.block(k, k).diag().into_inner(),
        }
    }

    /// `Cov[W̄[k,:], W̄[l,:]]`, `D_in' × D_in'`.
    pub(crate) fn block(&self, k: usize, l: usize) -> Matrix {
        let n = self.aug();
        match self.post {
            LayerPosterior::Deterministic => Matrix::zeros(n, n),
            LayerPosterior::Diagonal { .. } => {
                if k == l {
                    Matrix::from_diag(&self.row_var(k))
                } else {
                    Matrix::zeros(n, n)
                }
            }
            LayerPosterior::Kfac(p) => {
                let b = kfac_row_cov(p, k, l).expect("validated row indices");
                pad(b, n)
            }
            LayerPosterior::Full { cov, flattening } => {
                let with_bias = cov.rows() == self.d_out * (self.d_in + 1);
                let index = |row: usize, i: usize| -> Option<usize> {
                    if i < self.d_in {
                        Some(match flattening {
                            Flattening::Row => row * self.d_in + i,
                            Flattening::Column => i * self.d_out + row,
                        })
                    } else if with_bias {
                        Some(self.d_out * self.d_in + row)
                    } else {
                        None
                    }
                };
                Matrix::from_fn(n, n, |i, j| match (index(k, i), index(l, j)) {
                    (Some(p), Some(q)) => cov[(p, q)],
                    _ => 0.0,
                })
            }
        }
    }

    /// Row-convention KFAC factors `(ã padded to D_in', b̃)`.
    pub(crate) fn kfac_row(&self) -> Option<(Matrix, &'a Matrix)> {
        match self.post {
            LayerPosterior::Kfac(p) if p.convention == Flattening::Row => {
                Some((pad(p.a_tilde.clone(), self.aug()), &p.b_tilde))
            }
            _ => None,
        }
    }
}

fn pad(m: Matrix, n: usize) -> Matrix {
    if m.rows() == n {
        return m;
    }
    Matrix::from_fn(n, n, |i, j| {
        if i < m.rows() && j < m.cols() {
            m[(i, j)]
        } else {
            0.0
        }
    })
}

enum LayerSampler {
    Diagonal { sd_weight: Matrix, sd_bias: Vec<f64> },
    Kfac { la: Matrix, lb: Matrix, convention: Flattening },
    Full { l: Matrix, flattening: Flattening },
}

impl LayerSampler {
    fn new(post: &LayerPosterior) -> Result<Option<Self>> {
        Ok(Some(match post {
            LayerPosterior::Deterministic => return Ok(None),
            LayerPosterior::Diagonal { var_weight, var_bias } => LayerSampler::Diagonal {
                sd_weight: var_weight.map(f64::sqrt),
                sd_bias: var_bias.iter().map(|v| v.sqrt()).collect(),
            },
            LayerPosterior::Kfac(p) => LayerSampler::Kfac {
                la: psd_factor(&p.a_tilde)?,
                lb: psd_factor(&p.b_tilde)?,
                convention: p.convention,
            },
            LayerPosterior::Full { cov, flattening } => LayerSampler::Full {
                l: psd_factor(cov)?,
                flattening: *flattening,
            },
        }))
    }

    /// Add one zero-mean draw to `w` (and `bias`).
    fn perturb(&self, w: &mut Matrix, mut bias: Option<&mut Vector>, rng: &mut SeededRng) {
        let (d_out, d_in) = (w.rows(), w.cols());
        let add = |k: usize, i: usize, v: f64, w: &mut Matrix, bias: &mut Option<&mut Vector>| {
            if i < d_in {
                w[(k, i)] += v;
            } else if let Some(b) = bias.as_deref_mut() {
                b[k] += v;
            }
        };
        match self {
            LayerSampler::Diagonal { sd_weight, sd_bias } => {
                for (x, &sd) in w.data_mut().iter_mut().zip(sd_weight.data()) {
                    let z = rng.normal();
                    if sd != 0.0 {
                        *x += sd * z;
                    }
                }
                if let Some(b) = bias {
                    for (x, &sd) in b.iter_mut().zip(sd_bias) {
                        let z = rng.normal();
                        if sd != 0.0 {
                            *x += sd * z;
                        }
                    }
                }
            }
            LayerSampler::Kfac { la, lb, convention } => {
                let n = la.rows();
                match convention {
                    Flattening::Row => {
                        let z = Matrix::from_fn(d_out, n, |_, _| rng.normal());
                        let e = lb.matmul(&z).matmul(&la.transpose());
                        for k in 0..d_out {
                            for i in 0..n {
                                add(k, i, e[(k, i)], w, &mut bias);
                            }
                        }
                    }
                    Flattening::Column => {
                        let z = Matrix::from_fn(n, d_out, |_, _| rng.normal());
                        let x = la.matmul(&z).matmul(&lb.transpose());
                        for (p, &v) in x.data().iter().enumerate() {
                            add(p / n, p % n, v, w, &mut bias);
                        }
                    }
                }
            }
            LayerSampler::Full { l, flattening } => {
                let mut z = vec![0.0; l.rows()];
                rng.fill_normal(&mut z);
                let x = l.matvec(&z);
                let n_w = d_out * d_in;
                for (p, &v) in x.iter().enumerate() {
                    if p >= n_w {
                        add(p - n_w, d_in, v, w, &mut bias);
                    } else {
                        let (k, i) = match flattening {
                            Flattening::Row => (p / d_in, p % d_in),
                            Flattening::Column => (p % d_out, p / d_out),
                        };
                        add(k, i, v, w, &mut bias);
                    }
                }
            }
        }
    }
}

/// Precomputed square-root factors for repeated posterior sampling.
pub struct PosteriorSampler {
    layers: Vec<(usize, LayerSampler)>,
}

impl PosteriorSampler {
    pub fn new(spec: &PosteriorSpec, net: &NetworkModel) -> Result<Self> {
        spec.validate(net)?;
        let mut layers = Vec::new();
        for (idx, post) in spec.iter() {
            if let Some(s) = LayerSampler::new(post).map_err(|e| e.at_layer(idx))? {
                layers.push((idx, s));
            }
        }
        Ok(PosteriorSampler { layers })
    }

    /// One joint parameter draw. Layers are visited in index order.
    pub fn sample(&self, net: &NetworkModel, rng: &mut SeededRng) -> NetworkModel {
        let mut out = net.clone();
        for (idx, s) in &self.layers {
            let layer = out.layer_mut(*idx).expect("validated layer index");
            let (w, b) = layer_params_mut(layer).expect("validated parametric layer");
            s.perturb(w, b, rng);
        }
        out
    }
}

/// A network whose Bayesian layers hold one joint posterior draw.
pub fn sample_weights(spec: &PosteriorSpec, net: &NetworkModel, rng: &mut SeededRng) -> Result<NetworkModel> {
    Ok(PosteriorSampler::new(spec, net)?.sample(net, rng))
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "structure", rename_all = "lowercase", deny_unknown_fields)]
enum LayerPosteriorFile {
    Deterministic {},
    Diagonal {
        var_weight: Vec<Vec<f64>>,
        #[serde(default)]
        var_bias: Vec<f64>,
    },
    Kfac {
        a_factor: Vec<Vec<f64>>,
        b_factor: Vec<Vec<f64>>,
        prior_precision: f64,
        #[serde(default)]
        convention: Flattening,
    },
    Full {
        cov: Vec<Vec<f64>>,
        #[serde(default)]
        flattening: Flattening,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PosteriorFile {
    version: u64,
    layers: BTreeMap<usize, LayerPosteriorFile>,
}

pub fn posterior_to_json(spec: &PosteriorSpec) -> Vec<u8> {
    let layers = spec
        .iter()
        .map(|(i, p)| {
            let f = match p {
                LayerPosterior::Deterministic => LayerPosteriorFile::Deterministic {},
                LayerPosterior::Diagonal { var_weight, var_bias } => LayerPosteriorFile::Diagonal {
                    var_weight: var_weight.to_rows(),
                    var_bias: var_bias.to_vec(),
                },
                LayerPosterior::Kfac(k) => LayerPosteriorFile::Kfac {
                    a_factor: k.a_factor.to_rows(),
                    b_factor: k.b_factor.to_rows(),
                    prior_precision: k.prior_precision,
                    convention: k.convention,
                },
                LayerPosterior::Full { cov, flattening } => LayerPosteriorFile::Full {
                    cov: cov.to_rows(),
                    flattening: *flattening,
                },
            };
            (i, f)
        })
        .collect();
    to_lossless_json(&PosteriorFile {
        version: POSTERIOR_VERSION,
        layers,
    })
}

/// Parse a posterior file. KFAC factors are inverted here.
pub fn posterior_from_json(text: &str) -> Result<PosteriorSpec> {
    let file: PosteriorFile = from_versioned_json(text, POSTERIOR_VERSION)?;
    let mut spec = PosteriorSpec::new();
    for (idx, f) in file.layers {
        let post = match f {
            LayerPosteriorFile::Deterministic {} => LayerPosterior::Deterministic,
            LayerPosteriorFile::Diagonal { var_weight, var_bias } => {
                LayerPosterior::diagonal(Matrix::from_rows(&var_weight)?, Vector::new(var_bias))?
            }
            LayerPosteriorFile::Kfac {
                a_factor,
                b_factor,
                prior_precision,
                convention,
            } => LayerPosterior::Kfac(KfacPosterior::new(
                Matrix::from_rows(&a_factor)?,
                Matrix::from_rows(&b_factor)?,
                prior_precision,
                convention,
            )?),
            LayerPosteriorFile::Full { cov, flattening } => {
                LayerPosterior::full(Matrix::from_rows(&cov)?, flattening)?
            }
        };
        spec.insert(idx, post);
    }
    Ok(spec)
}

pub fn save_posterior(spec: &PosteriorSpec, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &posterior_to_json(spec))
}

pub fn load_posterior(path: impl AsRef<Path>) -> Result<PosteriorSpec> {
    posterior_from_json(&std::fs::read_to_string(path)?)
}
