//! Analytic propagation of Gaussian moments through a network.
//!
//! Stochastic linear maps use the local Gaussian approximation: output
//! moments are the exact first two moments of `W a + b` for independent
//! `W`, `a`. Nonlinearities are linearised at the mean. Mean paths share
//! their kernels with [`NetworkModel::forward`], so with no uncertainty the
//! propagated mean is bit-identical to the plain forward pass.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::kernels;
use crate::model::{Activation, Attention, Conv2d, LayerNorm, LayerSpec, Linear, NetworkModel, Shape};
use crate::numerics::{Matrix, Vector};
use crate::posterior::{validate_params, LayerPosterior, PosteriorSpec, WeightCov};

/// Computed variances below this are treated as corruption, not rounding.
pub const NEGATIVE_VARIANCE_TOL: f64 = 1e-12;
const STATE_SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Deterministic,
    Diagonal(Vector),
    Full(Matrix),
}

impl Covariance {
    pub fn name(&self) -> &'static str {
        match self {
            Covariance::Deterministic => "deterministic",
            Covariance::Diagonal(_) => "diagonal",
            Covariance::Full(_) => "full",
        }
    }
}

/// Mean and covariance of a layer's activations. Token states are stored
/// token-major (`T × D` flattened).
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    shape: Shape,
    mean: Vector,
    cov: Covariance,
}

impl MomentState {
    pub fn deterministic(shape: Shape, mean: Vector) -> Result<Self> {
        Self::new(shape, mean, Covariance::Deterministic)
    }

    pub fn diagonal(shape: Shape, mean: Vector, var: Vector) -> Result<Self> {
        Self::new(shape, mean, Covariance::Diagonal(var))
    }

    pub fn full(shape: Shape, mean: Vector, cov: Matrix) -> Result<Self> {
        Self::new(shape, mean, Covariance::Full(cov))
    }

    pub fn new(shape: Shape, mean: Vector, cov: Covariance) -> Result<Self> {
        let n = shape.numel();
        if mean.len() != n {
            return Err(Error::structural(format!("mean has {} entries, shape {shape:?} needs {n}", mean.len())));
        }
        if !mean.is_finite() {
            return Err(Error::numerical("non-finite mean"));
        }
        match &cov {
            Covariance::Deterministic => {}
            Covariance::Diagonal(v) => {
                if v.len() != n {
                    return Err(Error::structural(format!("{} variances for {n} features", v.len())));
                }
                if v.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                    return Err(Error::numerical("variances must be finite and >= 0"));
                }
            }
            Covariance::Full(m) => {
                if m.rows() != n || m.cols() != n {
                    return Err(Error::structural(format!("{}x{} covariance for {n} features", m.rows(), m.cols())));
                }
                if !m.is_finite() || !m.is_symmetric(STATE_SYMMETRY_TOL) {
                    return Err(Error::numerical("covariance must be finite and symmetric"));
                }
                if (0..n).any(|i| m[(i, i)] < 0.0) {
                    return Err(Error::numerical("covariance has a negative diagonal"));
                }
            }
        }
        Ok(MomentState { shape, mean, cov })
    }

    /// Floors rounding-level negative variances at zero; larger negatives are errors.
    fn checked(shape: Shape, mean: Vec<f64>, cov: Covariance) -> Result<Self> {
        let floor = |v: &mut f64| -> Result<()> {
            if *v < -NEGATIVE_VARIANCE_TOL || v.is_nan() {
                return Err(Error::numerical(format!("computed variance {v:e} is negative")));
            }
            if *v < 0.0 {
                *v = 0.0;
            }
            Ok(())
        };
        let cov = match cov {
            Covariance::Diagonal(mut v) => {
                for x in v.iter_mut() {
                    floor(x)?;
                }
                Covariance::Diagonal(v)
            }
            Covariance::Full(mut m) => {
                for i in 0..m.rows() {
                    floor(&mut m[(i, i)])?;
                }
                Covariance::Full(m)
            }
            c => c,
        };
        let mean = Vector::new(mean);
        if !mean.is_finite() {
            return Err(Error::numerical("non-finite propagated mean"));
        }
        Ok(MomentState { shape, mean, cov })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn cov(&self) -> &Covariance {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self.cov, Covariance::Deterministic)
    }

    /// Marginal variances (zeros when deterministic).
    pub fn variances(&self) -> Vector {
        match &self.cov {
            Covariance::Deterministic => Vector::zeros(self.dim()),
            Covariance::Diagonal(v) => v.clone(),
            Covariance::Full(m) => m.diag(),
        }
    }

    /// Dense covariance matrix.
    pub fn cov_matrix(&self) -> Matrix {
        match &self.cov {
            Covariance::Deterministic => Matrix::zeros(self.dim(), self.dim()),
            Covariance::Diagonal(v) => Matrix::from_diag(v),
            Covariance::Full(m) => m.clone(),
        }
    }

    fn variances_opt(&self) -> Option<Vector> {
        match self.cov {
            Covariance::Deterministic => None,
            _ => Some(self.variances()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovMode {
    /// Keep marginal variances only.
    #[default]
    Diag,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ValueCov {
    #[default]
    Full,
    /// Drop within-token value cross-covariances.
    VarianceOnly,
}

impl FromStr for CovMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diag" => Ok(CovMode::Diag),
            "full" => Ok(CovMode::Full),
            _ => Err(Error::Config(format!("unknown covariance mode '{s}' (diag|full)"))),
        }
    }
}

impl FromStr for ValueCov {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ValueCov::Full),
            "var-only" | "variance_only" | "variance-only" => Ok(ValueCov::VarianceOnly),
            _ => Err(Error::Config(format!("unknown value covariance '{s}' (full|var-only)"))),
        }
    }
}

impl fmt::Display for CovMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CovMode::Diag => "diag",
            CovMode::Full => "full",
        })
    }
}

impl fmt::Display for ValueCov {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueCov::Full => "full",
            ValueCov::VarianceOnly => "var-only",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PropagationConfig {
    pub activation_cov_mode: CovMode,
    pub attention_value_cov: ValueCov,
    /// Distinct tokens' values are treated as independent. Only `true` is supported.
    pub token_independence: bool,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            activation_cov_mode: CovMode::Diag,
            attention_value_cov: ValueCov::Full,
            token_independence: true,
        }
    }
}

impl PropagationConfig {
    pub fn diag() -> Self {
        Self::default()
    }

    pub fn full() -> Self {
        PropagationConfig {
            activation_cov_mode: CovMode::Full,
            ..Self::default()
        }
    }

    pub fn with_value_cov(mut self, v: ValueCov) -> Self {
        self.attention_value_cov = v;
        self
    }

    fn check(&self) -> Result<()> {
        if !self.token_independence {
            return Err(Error::Config("only independent tokens are supported".into()));
        }
        Ok(())
    }
}

fn token_count(shape: Shape, d: usize, what: &str) -> Result<usize> {
    match shape {
        Shape::Flat(n) if n == d => Ok(1),
        Shape::Tokens { tokens, dim } if dim == d => Ok(tokens),
        other => Err(Error::structural(format!("{what} expects width {d}, got {other:?}"))),
    }
}

fn with_width(shape: Shape, d: usize) -> Shape {
    match shape {
        Shape::Tokens { tokens, .. } => Shape::Tokens { tokens, dim: d },
        _ => Shape::Flat(d),
    }
}

fn augmented(x: &[f64], bias: bool) -> Vec<f64> {
    let mut v = x.to_vec();
    if bias {
        v.push(1.0);
    }
    v
}

/// `xᵀ M y`.
fn bilinear(x: &[f64], m: &Matrix, y: &[f64]) -> f64 {
    x.iter().enumerate().map(|(i, &xi)| xi * crate::numerics::dot(m.row(i), y)).sum()
}

/// Input covariance entry `Cov[a_{t,i}, a_{s,j}]`.
fn input_cov(cov: &Covariance, d_in: usize, t: usize, s: usize, i: usize, j: usize) -> f64 {
    match cov {
        Covariance::Deterministic => 0.0,
        Covariance::Diagonal(v) => {
            if t == s && i == j {
                v[t * d_in + i]
            } else {
                0.0
            }
        }
        Covariance::Full(m) => m[(t * d_in + i, s * d_in + j)],
    }
}

/// `Σ_ij Cov[a_{t,i}, a_{s,j}] B[i,j]` over the non-constant inputs.
fn input_cov_dot(cov: &Covariance, d_in: usize, t: usize, s: usize, b: &Matrix) -> f64 {
    match cov {
        Covariance::Deterministic => 0.0,
        Covariance::Diagonal(v) => {
            if t == s {
                (0..d_in).map(|i| v[t * d_in + i] * b[(i, i)]).sum()
            } else {
                0.0
            }
        }
        Covariance::Full(m) => {
            let mut acc = 0.0;
            for i in 0..d_in {
                let row = &m.row(t * d_in + i)[s * d_in..(s + 1) * d_in];
                acc += crate::numerics::dot(row, &b.row(i)[..d_in]);
            }
            acc
        }
    }
}

/// Marginal output variances of `W̄ ā` per token, dropping input correlations.
fn linear_var_diag(w: &Matrix, bias: bool, wc: &WeightCov, x: &[f64], v: Option<&[f64]>, tokens: usize) -> Vec<f64> {
    let (d_out, d_in) = (w.rows(), w.cols());
    let mut out = vec![0.0; tokens * d_out];
    let post = wc.posterior();
    if wc.is_elementwise() {
        for k in 0..d_out {
            let wrow = w.row(k);
            let rv = (!post.is_deterministic()).then(|| wc.row_var(k));
            for t in 0..tokens {
                let xt = &x[t * d_in..(t + 1) * d_in];
                let vt = v.map(|v| &v[t * d_in..(t + 1) * d_in]);
                let mut acc = 0.0;
                for i in 0..d_in {
                    let a = xt[i];
                    let va = vt.map_or(0.0, |v| v[i]);
                    let mw = wrow[i];
                    let vw = rv.as_ref().map_or(0.0, |r| r[i]);
                    acc += va * vw + va * (mw * mw) + vw * (a * a);
                }
                if bias {
                    acc += rv.as_ref().map_or(0.0, |r| r[d_in]);
                }
                out[t * d_out + k] = acc;
            }
        }
        return out;
    }
    let bars: Vec<Vec<f64>> = (0..tokens).map(|t| augmented(&x[t * d_in..(t + 1) * d_in], bias)).collect();
    let kfac = wc.kfac_row();
    let kfac_quads: Option<Vec<f64>> = kfac
        .as_ref()
        .map(|(a, _)| bars.iter().map(|ab| bilinear(ab, a, ab)).collect());
    for k in 0..d_out {
        let wrow = w.row(k);
        let (diag_b, quads): (Vec<f64>, Vec<f64>) = match (&kfac, &kfac_quads) {
            (Some((a, b)), Some(q)) => {
                let bkk = b[(k, k)];
                ((0..d_in).map(|i| bkk * a[(i, i)]).collect(), q.iter().map(|v| bkk * v).collect())
            }
            _ => {
                let blk = wc.block(k, k);
                ((0..d_in).map(|i| blk[(i, i)]).collect(), bars.iter().map(|ab| bilinear(ab, &blk, ab)).collect())
            }
        };
        for t in 0..tokens {
            let mut acc = 0.0;
            if let Some(v) = v {
                let vt = &v[t * d_in..(t + 1) * d_in];
                for i in 0..d_in {
                    acc += vt[i] * (wrow[i] * wrow[i] + diag_b[i]);
                }
            }
            out[t * d_out + k] = acc + quads[t];
        }
    }
    out
}

/// Full output covariance of `W̄ ā` over all tokens (weights shared across tokens).
fn linear_cov_full(w: &Matrix, bias: bool, wc: &WeightCov, x: &[f64], cov: &Covariance, tokens: usize) -> Matrix {
    let (d_out, d_in) = (w.rows(), w.cols());
    let n = tokens * d_out;
    // E[W] Cov[a] E[W]ᵀ per token pair
    let mut out = match cov {
        Covariance::Deterministic => Matrix::zeros(n, n),
        Covariance::Diagonal(v) => {
            let mut m = Matrix::zeros(n, n);
            for t in 0..tokens {
                let vt = &v[t * d_in..(t + 1) * d_in];
                for k in 0..d_out {
                    for l in k..d_out {
                        let s: f64 = (0..d_in).map(|i| w[(k, i)] * vt[i] * w[(l, i)]).sum();
                        m[(t * d_out + k, t * d_out + l)] = s;
                        m[(t * d_out + l, t * d_out + k)] = s;
                    }
                }
            }
            m
        }
        Covariance::Full(sigma) => {
            if tokens == 1 {
                w.sandwich(sigma)
            } else {
                Matrix::identity(tokens).kron(w).sandwich(sigma)
            }
        }
    };
    let post = wc.posterior();
    if post.is_deterministic() {
        out.symmetrize();
        return out;
    }
    let bars: Vec<Vec<f64>> = (0..tokens).map(|t| augmented(&x[t * d_in..(t + 1) * d_in], bias)).collect();
    if wc.is_elementwise() {
        for k in 0..d_out {
            let rv = wc.row_var(k);
            for t in 0..tokens {
                for s in t..tokens {
                    let mut acc = 0.0;
                    for (i, &r) in rv.iter().enumerate() {
                        let c = if i < d_in { input_cov(cov, d_in, t, s, i, i) } else { 0.0 };
                        acc += (bars[t][i] * bars[s][i] + c) * r;
                    }
                    out[(t * d_out + k, s * d_out + k)] += acc;
                    if s != t {
                        out[(s * d_out + k, t * d_out + k)] += acc;
                    }
                }
            }
        }
    } else if let Some((a, b)) = wc.kfac_row() {
        for t in 0..tokens {
            for s in t..tokens {
                let g = bilinear(&bars[t], &a, &bars[s]) + input_cov_dot(cov, d_in, t, s, &a);
                for k in 0..d_out {
                    for l in 0..d_out {
                        let v = b[(k, l)] * g;
                        out[(t * d_out + k, s * d_out + l)] += v;
                        if s != t {
                            out[(s * d_out + l, t * d_out + k)] += v;
                        }
                    }
                }
            }
        }
    } else {
        for k in 0..d_out {
            for l in k..d_out {
                let blk = wc.block(k, l);
                for t in 0..tokens {
                    let s0 = if k == l { t } else { 0 };
                    for s in s0..tokens {
                        let v = bilinear(&bars[t], &blk, &bars[s]) + input_cov_dot(cov, d_in, t, s, &blk);
                        let (p, q) = (t * d_out + k, s * d_out + l);
                        out[(p, q)] += v;
                        if p != q {
                            out[(q, p)] += v;
                        }
                    }
                }
            }
        }
    }
    out.symmetrize();
    out
}

fn linear_cov(
    w: &Matrix,
    bias: bool,
    post: &LayerPosterior,
    x: &[f64],
    state: &MomentState,
    tokens: usize,
    mode: CovMode,
) -> Covariance {
    if state.is_deterministic() && post.is_deterministic() {
        return Covariance::Deterministic;
    }
    let wc = WeightCov::new(post, w.rows(), w.cols(), bias);
    match mode {
        CovMode::Diag => {
            let v = state.variances_opt();
            Covariance::Diagonal(Vector::new(linear_var_diag(w, bias, &wc, x, v.as_ref().map(|v| v.as_slice()), tokens)))
        }
        CovMode::Full => Covariance::Full(linear_cov_full(w, bias, &wc, x, &state.cov, tokens)),
    }
}

/// Moments of `h = W a + b` (per token) under a Gaussian weight posterior.
pub fn propagate_linear(
    state: &MomentState,
    layer: &Linear,
    post: &LayerPosterior,
    cfg: &PropagationConfig,
) -> Result<MomentState> {
    cfg.check()?;
    let tokens = token_count(state.shape, layer.d_in(), "linear layer")?;
    validate_params(&layer.weight, true, post)?;
    let mean = kernels::linear_tokens(&layer.weight, &layer.bias, &state.mean);
    let cov = linear_cov(&layer.weight, true, post, &state.mean, state, tokens, cfg.activation_cov_mode);
    MomentState::checked(with_width(state.shape, layer.d_out()), mean, cov)
}

/// Local linearisation `g(μ) + g'(μ)(h − μ)`.
pub fn propagate_activation(state: &MomentState, kind: Activation) -> Result<MomentState> {
    let mean: Vec<f64> = state.mean.iter().map(|&v| kind.apply(v)).collect();
    let cov = match &state.cov {
        Covariance::Deterministic => Covariance::Deterministic,
        Covariance::Diagonal(v) => Covariance::Diagonal(
            v.iter()
                .zip(state.mean.iter())
                .map(|(&v, &m)| {
                    let d = kind.derivative(m);
                    (d * d) * v
                })
                .collect(),
        ),
        Covariance::Full(s) => {
            let j: Vec<f64> = state.mean.iter().map(|&m| kind.derivative(m)).collect();
            let n = j.len();
            Covariance::Full(Matrix::from_fn(n, n, |r, c| (j[r] * j[c]) * s[(r, c)]))
        }
    };
    MomentState::checked(state.shape, mean, cov)
}

/// Layer normalisation with statistics frozen at the mean:
/// `y = diag(γ)/s̄ · (I − 11ᵀ/D) h + const`.
pub fn propagate_layernorm(state: &MomentState, ln: &LayerNorm, cfg: &PropagationConfig) -> Result<MomentState> {
    cfg.check()?;
    let d = ln.gamma.len();
    if d == 0 {
        return Err(Error::structural("layer norm over zero features"));
    }
    let tokens = token_count(state.shape, d, "layer norm")?;
    let mean = kernels::layernorm_forward(ln, &state.mean);
    let scales: Vec<f64> = state
        .mean
        .chunks(d)
        .map(|c| kernels::layernorm_stats(c, ln.epsilon).1)
        .collect();
    let cov = match (&state.cov, cfg.activation_cov_mode) {
        (Covariance::Deterministic, _) => Covariance::Deterministic,
        (_, CovMode::Diag) => {
            let v = state.variances();
            Covariance::Diagonal(
                (0..tokens * d)
                    .map(|p| {
                        let g = ln.gamma[p % d] / scales[p / d];
                        (g * g) * v[p]
                    })
                    .collect(),
            )
        }
        (cov, CovMode::Full) => {
            let a: Vec<Matrix> = scales
                .iter()
                .map(|&s| {
                    Matrix::from_fn(d, d, |r, c| {
                        let centre = if r == c { 1.0 } else { 0.0 } - 1.0 / d as f64;
                        ln.gamma[r] / s * centre
                    })
                })
                .collect();
            let mut out = Matrix::zeros(tokens * d, tokens * d);
            for t in 0..tokens {
                for s in 0..tokens {
                    if let Covariance::Diagonal(_) = cov {
                        if s != t {
                            continue;
                        }
                    }
                    let block = Matrix::from_fn(d, d, |i, j| input_cov(cov, d, t, s, i, j));
                    let y = a[t].matmul(&block).matmul(&a[s].transpose());
                    for i in 0..d {
                        for j in 0..d {
                            out[(t * d + i, s * d + j)] = y[(i, j)];
                        }
                    }
                }
            }
            out.symmetrize();
            Covariance::Full(out)
        }
    };
    MomentState::checked(state.shape, mean, cov)
}

/// Skip connection: means and covariances add (branch assumed independent).
pub fn propagate_residual(state_in: &MomentState, inner_out: &MomentState) -> Result<MomentState> {
    if state_in.shape != inner_out.shape {
        return Err(Error::structural(format!(
            "residual branch maps {:?} to {:?}",
            state_in.shape, inner_out.shape
        )));
    }
    let mean = kernels::add(&state_in.mean, &inner_out.mean);
    let cov = match (&state_in.cov, &inner_out.cov) {
        (Covariance::Deterministic, c) | (c, Covariance::Deterministic) => c.clone(),
        (Covariance::Diagonal(a), Covariance::Diagonal(b)) => Covariance::Diagonal(kernels::add(a, b).into()),
        _ => Covariance::Full(state_in.cov_matrix().add(&inner_out.cov_matrix())),
    };
    MomentState::checked(state_in.shape, mean, cov)
}

/// Attention with queries and keys taken at the mean. Values carry the
/// uncertainty of the input and of `W_V`; tokens and heads are treated as
/// independent. `W_O` is deterministic.
pub fn propagate_attention(
    state: &MomentState,
    layer: &Attention,
    post: &LayerPosterior,
    cfg: &PropagationConfig,
) -> Result<MomentState> {
    cfg.check()?;
    let d = layer.dim();
    if layer.heads == 0 || d % layer.heads != 0 {
        return Err(Error::structural(format!("{} heads do not divide D={d}", layer.heads)));
    }
    let tokens = match state.shape {
        Shape::Tokens { tokens, dim } if dim == d => tokens,
        other => return Err(Error::structural(format!("attention expects tokens of width {d}, got {other:?}"))),
    };
    validate_params(&layer.wv, false, post)?;
    let var_in = match &state.cov {
        Covariance::Deterministic => None,
        Covariance::Diagonal(v) => Some(v.clone()),
        Covariance::Full(m) => {
            let n = m.rows();
            if (0..n).any(|r| (0..n).any(|c| r != c && m[(r, c)] != 0.0)) {
                return Err(Error::structural(
                    "attention needs a diagonal input covariance (use diag mode)",
                ));
            }
            Some(m.diag())
        }
    };
    let fwd = kernels::attention_forward(layer, &state.mean, tokens);
    if var_in.is_none() && post.is_deterministic() {
        return MomentState::checked(state.shape, fwd.output, Covariance::Deterministic);
    }

    let wc = WeightCov::new(post, d, d, false);
    let value_cov: Vec<Matrix> = (0..tokens)
        .map(|s| {
            let x = &state.mean[s * d..(s + 1) * d];
            let cov = match &var_in {
                Some(v) => Covariance::Diagonal(Vector::from(&v[s * d..(s + 1) * d])),
                None => Covariance::Deterministic,
            };
            let c = linear_cov_full(&layer.wv, false, &wc, x, &cov, 1);
            match cfg.attention_value_cov {
                ValueCov::Full => c,
                ValueCov::VarianceOnly => Matrix::from_diag(&c.diag()),
            }
        })
        .collect();

    let dh = layer.head_dim();
    let mut out_blocks = Vec::with_capacity(tokens);
    for t in 0..tokens {
        let mut mixed = Matrix::zeros(d, d);
        for (head, scores) in fwd.scores.iter().enumerate() {
            let range = head * dh..(head + 1) * dh;
            for (s, vc) in value_cov.iter().enumerate() {
                let w2 = scores[(t, s)] * scores[(t, s)];
                for r in range.clone() {
                    for c in range.clone() {
                        mixed[(r, c)] += w2 * vc[(r, c)];
                    }
                }
            }
        }
        out_blocks.push(layer.wo.sandwich(&mixed));
    }
    let cov = match cfg.activation_cov_mode {
        CovMode::Diag => Covariance::Diagonal(out_blocks.iter().flat_map(|b| b.diag().into_inner()).collect()),
        CovMode::Full => {
            let mut m = Matrix::zeros(tokens * d, tokens * d);
            for (t, b) in out_blocks.iter().enumerate() {
                for i in 0..d {
                    for j in 0..d {
                        m[(t * d + i, t * d + j)] = b[(i, j)];
                    }
                }
            }
            m.symmetrize();
            Covariance::Full(m)
        }
    };
    MomentState::checked(state.shape, fwd.output, cov)
}

/// Convolution in diag mode with a deterministic or diagonal kernel posterior.
pub fn propagate_conv2d(
    state: &MomentState,
    conv: &Conv2d,
    post: &LayerPosterior,
    cfg: &PropagationConfig,
) -> Result<MomentState> {
    cfg.check()?;
    if cfg.activation_cov_mode == CovMode::Full {
        return Err(Error::Config("convolution layers need diag covariance mode".into()));
    }
    let (height, width) = match state.shape {
        Shape::Image { channels, height, width } if channels == conv.in_channels => (height, width),
        other => {
            return Err(Error::structural(format!(
                "conv2d expects an image with {} channels, got {other:?}",
                conv.in_channels
            )))
        }
    };
    let (oh, ow) = conv
        .output_hw(height, width)
        .ok_or_else(|| Error::structural("stride/padding leave an empty output"))?;
    let out_shape = Shape::Image {
        channels: conv.out_channels(),
        height: oh,
        width: ow,
    };
    let (vw, vb) = match post {
        LayerPosterior::Deterministic => (None, None),
        LayerPosterior::Diagonal { var_weight, var_bias } => (Some(var_weight), Some(var_bias)),
        _ => {
            return Err(Error::structural(format!(
                "convolution layers support deterministic or diagonal posteriors, got {}",
                post.structure()
            )))
        }
    };
    validate_params(&conv.kernels, true, post)?;
    let mean = kernels::conv2d_forward(conv, state.shape, &state.mean);
    let var_in = state.variances_opt();
    if var_in.is_none() && vw.is_none() {
        return MomentState::checked(out_shape, mean, Covariance::Deterministic);
    }
    let n_out = out_shape.numel();
    let mut var = vec![0.0; n_out];
    if let Some(vw) = vw {
        let sq: Vec<f64> = state.mean.iter().map(|m| m * m).collect();
        let bias = (!vb.unwrap().is_empty()).then(|| vb.unwrap().as_slice());
        var = kernels::conv2d_apply(conv, state.shape, &sq, vw, bias);
    }
    if let Some(v) = &var_in {
        let second = match vw {
            Some(vw) => conv.kernels.map(|w| w * w).add(vw),
            None => conv.kernels.map(|w| w * w),
        };
        let t = kernels::conv2d_apply(conv, state.shape, v, &second, None);
        var = kernels::add(&var, &t);
    }
    MomentState::checked(out_shape, mean, Covariance::Diagonal(var.into()))
}

/// Average pooling: a fixed linear map.
pub fn propagate_avgpool(state: &MomentState, window: usize, stride: usize) -> Result<MomentState> {
    let out_shape = LayerSpec::AvgPool2d { window, stride }.output_shape(state.shape)?;
    let mean = kernels::avgpool_forward(window, stride, state.shape, &state.mean);
    let k2 = (window * window) as f64;
    let cov = match &state.cov {
        Covariance::Deterministic => Covariance::Deterministic,
        Covariance::Diagonal(v) => {
            Covariance::Diagonal(kernels::avgpool_apply(window, stride, state.shape, v, 1.0 / (k2 * k2)).into())
        }
        Covariance::Full(m) => {
            let n_in = state.dim();
            // rows of the pooling matrix via its transpose on unit vectors
            let n_out = out_shape.numel();
            let mut p = Matrix::zeros(n_out, n_in);
            for o in 0..n_out {
                let mut e = vec![0.0; n_out];
                e[o] = 1.0;
                let row = kernels::avgpool_transpose(window, stride, state.shape, &e, 1.0 / k2);
                p.row_mut(o).copy_from_slice(&row);
            }
            let mut out = p.sandwich(m);
            out.symmetrize();
            Covariance::Full(out)
        }
    };
    MomentState::checked(out_shape, mean, cov)
}

/// Push `input` through every layer of `net`.
pub fn propagate_network(
    net: &NetworkModel,
    post: &PosteriorSpec,
    input: &MomentState,
    cfg: &PropagationConfig,
) -> Result<MomentState> {
    propagate_network_observed(net, post, input, cfg, &mut |_, _| {})
}

/// [`propagate_network`] reporting the state after every layer (pre-order index).
pub fn propagate_network_observed(
    net: &NetworkModel,
    post: &PosteriorSpec,
    input: &MomentState,
    cfg: &PropagationConfig,
    observe: &mut dyn FnMut(usize, &MomentState),
) -> Result<MomentState> {
    cfg.check()?;
    if input.shape.numel() != net.input_dim() {
        return Err(Error::structural(format!(
            "input state has {} features, network expects {}",
            input.dim(),
            net.input_dim()
        )));
    }
    post.validate(net)?;
    let state = MomentState {
        shape: net.input(),
        mean: input.mean.clone(),
        cov: input.cov.clone(),
    };
    let mut index = 0;
    propagate_layers(net.layers(), post, state, cfg, &mut index, observe)
}

fn propagate_layers(
    layers: &[LayerSpec],
    post: &PosteriorSpec,
    mut state: MomentState,
    cfg: &PropagationConfig,
    index: &mut usize,
    observe: &mut dyn FnMut(usize, &MomentState),
) -> Result<MomentState> {
    for layer in layers {
        let my = *index;
        *index += 1;
        let p = post.get(my);
        let next = match layer {
            LayerSpec::Linear(l) => propagate_linear(&state, l, p, cfg),
            LayerSpec::Activation(a) => propagate_activation(&state, *a),
            LayerSpec::LayerNorm(ln) => propagate_layernorm(&state, ln, cfg),
            LayerSpec::Residual(inner) => {
                let branch = propagate_layers(inner, post, state.clone(), cfg, index, observe)?;
                propagate_residual(&state, &branch)
            }
            LayerSpec::Attention(a) => propagate_attention(&state, a, p, cfg),
            LayerSpec::Conv2d(c) => propagate_conv2d(&state, c, p, cfg),
            LayerSpec::AvgPool2d { window, stride } => propagate_avgpool(&state, *window, *stride),
            LayerSpec::Flatten => Ok(MomentState {
                shape: Shape::Flat(state.dim()),
                ..state.clone()
            }),
        };
        state = next.map_err(|e| e.at_layer(my))?;
        observe(my, &state);
    }
    Ok(state)
}
