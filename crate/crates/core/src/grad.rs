//! Reverse-mode gradients through the layer vocabulary.
//!
//! Parameters are flattened in pre-order: linear weight (row-major) then
//! bias, layer-norm gamma then beta, attention `W_Q, W_K, W_V, W_O`, conv
//! kernels then bias. The variance backward pass differentiates the
//! diag-mode output variances with respect to the input variances, which is
//! a linear map once the means are fixed.

use crate::error::{Error, Result};
use crate::model::kernels::{self, AttentionForward};
use crate::model::{LayerSpec, NetworkModel, Shape};
use crate::numerics::{dot, Matrix};
use crate::posterior::{PosteriorSpec, WeightCov};
use crate::propagate::ValueCov;

fn layer_param_count(layer: &LayerSpec) -> usize {
    match layer {
        LayerSpec::Linear(l) => l.weight.data().len() + l.bias.len(),
        LayerSpec::LayerNorm(ln) => 2 * ln.gamma.len(),
        LayerSpec::Attention(a) => 4 * a.dim() * a.dim(),
        LayerSpec::Conv2d(c) => c.kernels.data().len() + c.bias.len(),
        _ => 0,
    }
}

/// Start of each layer's parameters in the flat vector, by pre-order index.
pub fn param_offsets(net: &NetworkModel) -> Vec<usize> {
    let mut out = Vec::new();
    let mut next = 0;
    for (_, l) in net.indexed_layers() {
        out.push(next);
        next += layer_param_count(l);
    }
    out.push(next);
    out
}

pub fn flatten_params(net: &NetworkModel) -> Vec<f64> {
    let mut out = Vec::with_capacity(net.parameter_count());
    for (_, l) in net.indexed_layers() {
        match l {
            LayerSpec::Linear(l) => {
                out.extend_from_slice(l.weight.data());
                out.extend_from_slice(&l.bias);
            }
            LayerSpec::LayerNorm(ln) => {
                out.extend_from_slice(&ln.gamma);
                out.extend_from_slice(&ln.beta);
            }
            LayerSpec::Attention(a) => {
                for m in [&a.wq, &a.wk, &a.wv, &a.wo] {
                    out.extend_from_slice(m.data());
                }
            }
            LayerSpec::Conv2d(c) => {
                out.extend_from_slice(c.kernels.data());
                out.extend_from_slice(&c.bias);
            }
            _ => {}
        }
    }
    out
}

pub fn set_params(net: &mut NetworkModel, params: &[f64]) -> Result<()> {
    if params.len() != net.parameter_count() {
        return Err(Error::structural(format!(
            "{} parameters given, network has {}",
            params.len(),
            net.parameter_count()
        )));
    }
    let offsets = param_offsets(net);
    for idx in 0..net.node_count() {
        let mut p = &params[offsets[idx]..offsets[idx + 1]];
        let mut take = |dst: &mut [f64]| {
            let (a, b) = p.split_at(dst.len());
            dst.copy_from_slice(a);
            p = b;
        };
        match net.layer_mut(idx).expect("index in range") {
            LayerSpec::Linear(l) => {
                take(l.weight.data_mut());
                take(&mut l.bias);
            }
            LayerSpec::LayerNorm(ln) => {
                take(&mut ln.gamma);
                take(&mut ln.beta);
            }
            LayerSpec::Attention(a) => {
                take(a.wq.data_mut());
                take(a.wk.data_mut());
                take(a.wv.data_mut());
                take(a.wo.data_mut());
            }
            LayerSpec::Conv2d(c) => {
                take(c.kernels.data_mut());
                take(&mut c.bias);
            }
            _ => {}
        }
    }
    Ok(())
}

enum Extra {
    None,
    LayerNorm(Vec<f64>),
    Attention { fwd: AttentionForward, q: Vec<f64>, k: Vec<f64> },
}

/// Layer inputs recorded during a forward pass, by pre-order index.
pub struct Tape {
    inputs: Vec<Vec<f64>>,
    shapes: Vec<Shape>,
    extra: Vec<Extra>,
}

impl Tape {
    pub fn input(&self, index: usize) -> &[f64] {
        &self.inputs[index]
    }

    pub fn shape(&self, index: usize) -> Shape {
        self.shapes[index]
    }
}

/// Forward pass keeping everything the backward passes need.
pub fn forward_tape(net: &NetworkModel, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
    if x.len() != net.input_dim() {
        return Err(Error::structural(format!(
            "input has {} values, network expects {}",
            x.len(),
            net.input_dim()
        )));
    }
    let n = net.node_count();
    let mut tape = Tape {
        inputs: Vec::with_capacity(n),
        shapes: Vec::with_capacity(n),
        extra: Vec::with_capacity(n),
    };
    let out = forward_layers(net.layers(), net.input(), x.to_vec(), &mut tape);
    Ok((out, tape))
}

fn forward_layers(layers: &[LayerSpec], mut shape: Shape, mut x: Vec<f64>, tape: &mut Tape) -> Vec<f64> {
    for layer in layers {
        let slot = tape.inputs.len();
        tape.inputs.push(x.clone());
        tape.shapes.push(shape);
        tape.extra.push(Extra::None);
        let next = layer.output_shape(shape).expect("validated at construction");
        x = match layer {
            LayerSpec::Linear(l) => kernels::linear_tokens(&l.weight, &l.bias, &x),
            LayerSpec::Activation(a) => x.iter().map(|&v| a.apply(v)).collect(),
            LayerSpec::LayerNorm(ln) => {
                let d = ln.gamma.len();
                tape.extra[slot] = Extra::LayerNorm(
                    x.chunks(d).map(|c| kernels::layernorm_stats(c, ln.epsilon).1).collect(),
                );
                kernels::layernorm_forward(ln, &x)
            }
            LayerSpec::Residual(inner) => {
                let branch = forward_layers(inner, shape, x.clone(), tape);
                kernels::add(&x, &branch)
            }
            LayerSpec::Attention(a) => {
                let d = a.dim();
                let fwd = kernels::attention_forward(a, &x, x.len() / d);
                let out = fwd.output.clone();
                tape.extra[slot] = Extra::Attention {
                    q: kernels::linear_no_bias(&a.wq, &x, d),
                    k: kernels::linear_no_bias(&a.wk, &x, d),
                    fwd,
                };
                out
            }
            LayerSpec::Conv2d(c) => kernels::conv2d_forward(c, shape, &x),
            LayerSpec::AvgPool2d { window, stride } => kernels::avgpool_forward(*window, *stride, shape, &x),
            LayerSpec::Flatten => x,
        };
        shape = next;
    }
    x
}

fn layer_indices(layers: &[LayerSpec], start: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(layers.len());
    let mut next = start;
    for l in layers {
        out.push(next);
        next += l.node_count();
    }
    out
}

/// Outer product accumulation `g += a bᵀ` into a row-major block.
fn add_outer(g: &mut [f64], a: &[f64], b: &[f64]) {
    let n = b.len();
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        for (j, &bj) in b.iter().enumerate() {
            g[i * n + j] += ai * bj;
        }
    }
}

/// Backpropagate `grad_out` through the network. Parameter gradients are
/// accumulated into `grads` (flat layout, may be empty to skip them).
/// `observe` sees `(index, dL/d output)` for every layer.
pub fn backward(
    net: &NetworkModel,
    tape: &Tape,
    grad_out: &[f64],
    grads: &mut [f64],
    observe: &mut dyn FnMut(usize, &[f64]),
) -> Vec<f64> {
    let offsets = if grads.is_empty() { Vec::new() } else { param_offsets(net) };
    backward_layers(net.layers(), 0, tape, grad_out.to_vec(), &offsets, grads, observe)
}

fn backward_layers(
    layers: &[LayerSpec],
    start: usize,
    tape: &Tape,
    mut g: Vec<f64>,
    offsets: &[usize],
    grads: &mut [f64],
    observe: &mut dyn FnMut(usize, &[f64]),
) -> Vec<f64> {
    let want = !offsets.is_empty();
    let idx = layer_indices(layers, start);
    for (layer, &i) in layers.iter().zip(&idx).rev() {
        observe(i, &g);
        let x = &tape.inputs[i];
        let shape = tape.shapes[i];
        g = match layer {
            LayerSpec::Linear(l) => {
                let (d_out, d_in) = (l.d_out(), l.d_in());
                if want {
                    let (gw, gb) = grads[offsets[i]..offsets[i + 1]].split_at_mut(d_out * d_in);
                    for (xt, gt) in x.chunks(d_in).zip(g.chunks(d_out)) {
                        add_outer(gw, gt, xt);
                        for (b, v) in gb.iter_mut().zip(gt) {
                            *b += v;
                        }
                    }
                }
                g.chunks(d_out).flat_map(|gt| l.weight.matvec_t(gt).into_inner()).collect()
            }
            LayerSpec::Activation(a) => x.iter().zip(&g).map(|(&v, gv)| a.derivative(v) * gv).collect(),
            LayerSpec::LayerNorm(ln) => {
                let d = ln.gamma.len();
                let Extra::LayerNorm(scales) = &tape.extra[i] else { unreachable!() };
                let mut gx = Vec::with_capacity(x.len());
                for ((xt, gt), &s) in x.chunks(d).zip(g.chunks(d)).zip(scales) {
                    let m = xt.iter().sum::<f64>() / d as f64;
                    let xhat: Vec<f64> = xt.iter().map(|v| (v - m) / s).collect();
                    if want {
                        let (gg, gb) = grads[offsets[i]..offsets[i + 1]].split_at_mut(d);
                        for k in 0..d {
                            gg[k] += gt[k] * xhat[k];
                            gb[k] += gt[k];
                        }
                    }
                    let gh: Vec<f64> = gt.iter().zip(ln.gamma.iter()).map(|(a, b)| a * b).collect();
                    let mean_g = gh.iter().sum::<f64>() / d as f64;
                    let mean_gx = dot(&gh, &xhat) / d as f64;
                    gx.extend((0..d).map(|k| (gh[k] - mean_g - xhat[k] * mean_gx) / s));
                }
                gx
            }
            LayerSpec::Residual(inner) => {
                let branch = backward_layers(inner, i + 1, tape, g.clone(), offsets, grads, observe);
                kernels::add(&g, &branch)
            }
            LayerSpec::Attention(a) => {
                let Extra::Attention { fwd, q, k } = &tape.extra[i] else { unreachable!() };
                let off = if want { Some(offsets[i]) } else { None };
                attention_backward(a, x, fwd, q, k, &g, off.map(|o| &mut grads[o..o + 4 * a.dim() * a.dim()]))
            }
            LayerSpec::Conv2d(c) => {
                if want {
                    let gw = kernels::conv2d_weight_grad(c, shape, x, &g);
                    let n_w = gw.data().len();
                    let (dw, db) = grads[offsets[i]..offsets[i + 1]].split_at_mut(n_w);
                    for (a, b) in dw.iter_mut().zip(gw.data()) {
                        *a += b;
                    }
                    let per = g.len() / c.out_channels();
                    for (co, b) in db.iter_mut().enumerate() {
                        *b += g[co * per..(co + 1) * per].iter().sum::<f64>();
                    }
                }
                kernels::conv2d_transpose(c, shape, &g, &c.kernels)
            }
            LayerSpec::AvgPool2d { window, stride } => {
                kernels::avgpool_transpose(*window, *stride, shape, &g, 1.0 / (window * window) as f64)
            }
            LayerSpec::Flatten => g,
        };
    }
    g
}

fn attention_backward(
    a: &crate::model::Attention,
    x: &[f64],
    fwd: &AttentionForward,
    q: &[f64],
    k: &[f64],
    g: &[f64],
    grads: Option<&mut [f64]>,
) -> Vec<f64> {
    let d = a.dim();
    let dh = a.head_dim();
    let tokens = x.len() / d;
    let scale = (dh as f64).sqrt();
    let g_mixed: Vec<f64> = g.chunks(d).flat_map(|gt| a.wo.matvec_t(gt).into_inner()).collect();
    let mut g_v = vec![0.0; x.len()];
    let mut g_q = vec![0.0; x.len()];
    let mut g_k = vec![0.0; x.len()];
    for (head, s) in fwd.scores.iter().enumerate() {
        let cols = head * dh..(head + 1) * dh;
        for t in 0..tokens {
            let gm = &g_mixed[t * d..(t + 1) * d][cols.clone()];
            let g_s: Vec<f64> = (0..tokens)
                .map(|u| dot(gm, &fwd.values[u * d..(u + 1) * d][cols.clone()]))
                .collect();
            for u in 0..tokens {
                for (c, gmc) in cols.clone().zip(gm) {
                    g_v[u * d + c] += s[(t, u)] * gmc;
                }
            }
            let avg: f64 = (0..tokens).map(|u| s[(t, u)] * g_s[u]).sum();
            for u in 0..tokens {
                let gl = s[(t, u)] * (g_s[u] - avg) / scale;
                for c in cols.clone() {
                    g_q[t * d + c] += gl * k[u * d + c];
                    g_k[u * d + c] += gl * q[t * d + c];
                }
            }
        }
    }
    if let Some(grads) = grads {
        let n = d * d;
        let (gq, rest) = grads.split_at_mut(n);
        let (gk, rest) = rest.split_at_mut(n);
        let (gv, go) = rest.split_at_mut(n);
        for t in 0..tokens {
            let r = t * d..(t + 1) * d;
            add_outer(gq, &g_q[r.clone()], &x[r.clone()]);
            add_outer(gk, &g_k[r.clone()], &x[r.clone()]);
            add_outer(gv, &g_v[r.clone()], &x[r.clone()]);
            add_outer(go, &g[r.clone()], &fwd.mixed[r]);
        }
    }
    let mut gx = vec![0.0; x.len()];
    for t in 0..tokens {
        let r = t * d..(t + 1) * d;
        let a1 = a.wq.matvec_t(&g_q[r.clone()]);
        let a2 = a.wk.matvec_t(&g_k[r.clone()]);
        let a3 = a.wv.matvec_t(&g_v[r.clone()]);
        for i in 0..d {
            gx[t * d + i] = a1[i] + a2[i] + a3[i];
        }
    }
    gx
}

/// `∂ L / ∂ v_in` given `∂ L / ∂ v_out`, for diag-mode propagation from a
/// diagonal input covariance. The map from input variances to output
/// variances is linear with the means fixed, so this is its transpose.
pub fn variance_backward(
    net: &NetworkModel,
    post: &PosteriorSpec,
    tape: &Tape,
    value_cov: ValueCov,
    grad_var_out: &[f64],
) -> Result<Vec<f64>> {
    variance_backward_layers(net.layers(), 0, post, tape, value_cov, grad_var_out.to_vec())
}

fn diag_block(wc: &WeightCov, k: usize, kfac: &Option<(Matrix, &Matrix)>) -> Vec<f64> {
    if wc.is_elementwise() {
        return wc.row_var(k);
    }
    match kfac {
        Some((a, b)) => (0..a.rows()).map(|i| b[(k, k)] * a[(i, i)]).collect(),
        None => wc.block(k, k).diag().into_inner(),
    }
}

fn variance_backward_layers(
    layers: &[LayerSpec],
    start: usize,
    post: &PosteriorSpec,
    tape: &Tape,
    value_cov: ValueCov,
    mut g: Vec<f64>,
) -> Result<Vec<f64>> {
    let idx = layer_indices(layers, start);
    for (layer, &i) in layers.iter().zip(&idx).rev() {
        let x = &tape.inputs[i];
        let shape = tape.shapes[i];
        let p = post.get(i);
        g = match layer {
            LayerSpec::Linear(l) => {
                let (d_out, d_in) = (l.d_out(), l.d_in());
                let wc = WeightCov::new(p, d_out, d_in, true);
                let kfac = wc.kfac_row();
                let mut m = Matrix::from_fn(d_out, d_in, |k, i| l.weight[(k, i)] * l.weight[(k, i)]);
                if !p.is_deterministic() {
                    for k in 0..d_out {
                        let b = diag_block(&wc, k, &kfac);
                        for i in 0..d_in {
                            m[(k, i)] += b[i];
                        }
                    }
                }
                g.chunks(d_out).flat_map(|gt| m.matvec_t(gt).into_inner()).collect()
            }
            LayerSpec::Activation(a) => x
                .iter()
                .zip(&g)
                .map(|(&v, gv)| {
                    let d = a.derivative(v);
                    (d * d) * gv
                })
                .collect(),
            LayerSpec::LayerNorm(ln) => {
                let d = ln.gamma.len();
                let Extra::LayerNorm(scales) = &tape.extra[i] else { unreachable!() };
                g.iter()
                    .enumerate()
                    .map(|(p, gv)| {
                        let c = ln.gamma[p % d] / scales[p / d];
                        (c * c) * gv
                    })
                    .collect()
            }
            LayerSpec::Residual(inner) => {
                let branch = variance_backward_layers(inner, i + 1, post, tape, value_cov, g.clone())?;
                kernels::add(&g, &branch)
            }
            LayerSpec::Attention(a) => {
                let Extra::Attention { fwd, .. } = &tape.extra[i] else { unreachable!() };
                attention_variance_backward(a, p, fwd, value_cov, &g)
            }
            LayerSpec::Conv2d(c) => {
                let second = match p {
                    crate::posterior::LayerPosterior::Diagonal { var_weight, .. } => {
                        c.kernels.map(|w| w * w).add(var_weight)
                    }
                    crate::posterior::LayerPosterior::Deterministic => c.kernels.map(|w| w * w),
                    other => {
                        return Err(Error::structural(format!(
                            "convolution layers support deterministic or diagonal posteriors, got {}",
                            other.structure()
                        ))
                        .at_layer(i))
                    }
                };
                kernels::conv2d_transpose(c, shape, &g, &second)
            }
            LayerSpec::AvgPool2d { window, stride } => {
                let k2 = (window * window) as f64;
                kernels::avgpool_transpose(*window, *stride, shape, &g, 1.0 / (k2 * k2))
            }
            LayerSpec::Flatten => g,
        };
    }
    Ok(g)
}

fn attention_variance_backward(
    a: &crate::model::Attention,
    p: &crate::posterior::LayerPosterior,
    fwd: &AttentionForward,
    value_cov: ValueCov,
    g: &[f64],
) -> Vec<f64> {
    let d = a.dim();
    let dh = a.head_dim();
    let tokens = g.len() / d;
    let wc = WeightCov::new(p, d, d, false);
    let kfac = wc.kfac_row();
    let generic_blocks: Option<Vec<Vec<Matrix>>> = (!p.is_deterministic() && !wc.is_elementwise() && kfac.is_none())
        .then(|| (0..d).map(|r| (0..d).map(|c| wc.block(r, c)).collect()).collect());
    let row_vars: Option<Vec<Vec<f64>>> =
        (!p.is_deterministic() && wc.is_elementwise()).then(|| (0..d).map(|r| wc.row_var(r)).collect());

    // G_t = W_Oᵀ diag(g_t) W_O
    let gt: Vec<Matrix> = (0..tokens)
        .map(|t| {
            let gv = &g[t * d..(t + 1) * d];
            Matrix::from_fn(d, d, |r, c| (0..d).map(|o| gv[o] * a.wo[(o, r)] * a.wo[(o, c)]).sum())
        })
        .collect();
    let mut out = vec![0.0; tokens * d];
    for s in 0..tokens {
        let mut h = Matrix::zeros(d, d);
        for (head, sc) in fwd.scores.iter().enumerate() {
            for t in 0..tokens {
                let w2 = sc[(t, s)] * sc[(t, s)];
                for r in head * dh..(head + 1) * dh {
                    for c in head * dh..(head + 1) * dh {
                        if value_cov == ValueCov::VarianceOnly && r != c {
                            continue;
                        }
                        h[(r, c)] += w2 * gt[t][(r, c)];
                    }
                }
            }
        }
        for i in 0..d {
            let mut acc = 0.0;
            for r in 0..d {
                for c in 0..d {
                    let hv = h[(r, c)];
                    if hv == 0.0 {
                        continue;
                    }
                    let mut dv = a.wv[(r, i)] * a.wv[(c, i)];
                    if let Some(rv) = &row_vars {
                        if r == c {
                            dv += rv[r][i];
                        }
                    } else if let Some((ka, kb)) = &kfac {
                        dv += kb[(r, c)] * ka[(i, i)];
                    } else if let Some(blocks) = &generic_blocks {
                        dv += blocks[r][c][(i, i)];
                    }
                    acc += hv * dv;
                }
            }
            out[s * d + i] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Attention, Conv2d, LayerNorm, Linear, Task};
    use crate::numerics::{SeededRng, Vector};
    use crate::posterior::{Flattening, KfacPosterior, LayerPosterior};
    use crate::propagate::{propagate_network, MomentState, PropagationConfig};

    fn lin(d_out: usize, d_in: usize, rng: &mut SeededRng) -> LayerSpec {
        LayerSpec::Linear(
            Linear::new(
                Matrix::from_fn(d_out, d_in, |_, _| rng.normal() * 0.7),
                (0..d_out).map(|_| rng.normal() * 0.1).collect(),
            )
            .unwrap(),
        )
    }

    fn attention(d: usize, heads: usize, rng: &mut SeededRng) -> Attention {
        let mut m = || Matrix::from_fn(d, d, |_, _| rng.normal() / (d as f64).sqrt());
        Attention {
            wq: m(),
            wk: m(),
            wv: m(),
            wo: m(),
            heads,
        }
    }

    fn transformer(rng: &mut SeededRng) -> NetworkModel {
        let mut ln = LayerNorm::new(4);
        ln.gamma = (0..4).map(|_| 1.0 + 0.2 * rng.normal()).collect();
        ln.beta = (0..4).map(|_| 0.1 * rng.normal()).collect();
        NetworkModel::new(
            Shape::Tokens { tokens: 3, dim: 4 },
            vec![
                LayerSpec::Residual(vec![LayerSpec::LayerNorm(ln), LayerSpec::Attention(attention(4, 2, rng))]),
                lin(4, 4, rng),
                LayerSpec::Activation(Activation::Gelu),
                LayerSpec::Flatten,
                lin(2, 12, rng),
            ],
            Task::Classification,
        )
        .unwrap()
    }

    fn cnn(rng: &mut SeededRng) -> NetworkModel {
        let conv = Conv2d {
            in_channels: 1,
            kernel_h: 3,
            kernel_w: 3,
            kernels: Matrix::from_fn(2, 9, |_, _| rng.normal() * 0.5),
            bias: (0..2).map(|_| rng.normal() * 0.1).collect(),
            stride: 1,
            padding: 1,
        };
        NetworkModel::new(
            Shape::Image { channels: 1, height: 4, width: 4 },
            vec![
                LayerSpec::Conv2d(conv),
                LayerSpec::Activation(Activation::Tanh),
                LayerSpec::AvgPool2d { window: 2, stride: 2 },
                LayerSpec::Flatten,
                lin(3, 8, rng),
            ],
            Task::Classification,
        )
        .unwrap()
    }

    /// Loss `Σ c_k f_k(x)` with fixed random `c`.
    fn check_param_grad(net: &NetworkModel, seed: u64) {
        let mut rng = SeededRng::new(seed, 9);
        let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.normal()).collect();
        let c: Vec<f64> = (0..net.num_outputs()).map(|_| rng.normal()).collect();
        let (out, tape) = forward_tape(net, &x).unwrap();
        assert_eq!(out, net.forward(&x).unwrap().into_inner());
        let mut grads = vec![0.0; net.parameter_count()];
        let gx = backward(net, &tape, &c, &mut grads, &mut |_, _| {});
        let params = flatten_params(net);
        let loss = |p: &[f64], x: &[f64]| {
            let mut n = net.clone();
            set_params(&mut n, p).unwrap();
            dot(&n.forward(x).unwrap(), &c)
        };
        let h = 1e-5;
        let check = |analytic: f64, plus: f64, minus: f64, what: String| {
            let fd = (plus - minus) / (2.0 * h);
            let err = (analytic - fd).abs() / fd.abs().max(analytic.abs()).max(1e-3);
            assert!(err < 1e-4, "{what}: analytic {analytic} fd {fd}");
        };
        for j in 0..params.len() {
            let mut p = params.clone();
            p[j] += h;
            let plus = loss(&p, &x);
            p[j] -= 2.0 * h;
            let minus = loss(&p, &x);
            check(grads[j], plus, minus, format!("param {j}"));
        }
        for j in 0..x.len() {
            let mut xp = x.clone();
            xp[j] += h;
            let plus = loss(&params, &xp);
            xp[j] -= 2.0 * h;
            let minus = loss(&params, &xp);
            check(gx[j], plus, minus, format!("input {j}"));
        }
    }

    #[test]
    fn flatten_roundtrip() {
        let mut rng = SeededRng::new(1, 0);
        let mut net = transformer(&mut rng);
        let p = flatten_params(&net);
        assert_eq!(p.len(), net.parameter_count());
        let q: Vec<f64> = p.iter().map(|v| v * 2.0).collect();
        set_params(&mut net, &q).unwrap();
        assert_eq!(flatten_params(&net), q);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(2, 0);
        for act in [Activation::Tanh, Activation::Gelu, Activation::Identity] {
            let net = NetworkModel::mlp(&[3, 5, 4, 2], act, Task::Classification, &mut rng).unwrap();
            check_param_grad(&net, 2);
        }
    }

    #[test]
    fn transformer_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(3, 0);
        check_param_grad(&transformer(&mut rng), 3);
    }

    #[test]
    fn cnn_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(4, 0);
        check_param_grad(&cnn(&mut rng), 4);
    }

    fn check_variance_grad(net: &NetworkModel, post: &PosteriorSpec, value_cov: ValueCov, seed: u64) {
        let mut rng = SeededRng::new(seed, 5);
        let x: Vector = (0..net.input_dim()).map(|_| rng.normal()).collect();
        let v: Vec<f64> = (0..net.input_dim()).map(|_| 0.05 + 0.1 * rng.uniform()).collect();
        let c: Vec<f64> = (0..net.num_outputs()).map(|_| rng.normal()).collect();
        let cfg = PropagationConfig::diag().with_value_cov(value_cov);
        let f = |v: &[f64]| {
            let s = MomentState::diagonal(net.input(), x.clone(), v.into()).unwrap();
            dot(&propagate_network(net, post, &s, &cfg).unwrap().variances(), &c)
        };
        let (_, tape) = forward_tape(net, &x).unwrap();
        let g = variance_backward(net, post, &tape, value_cov, &c).unwrap();
        // the map is linear: check against exact differences
        let base = f(&v);
        for j in 0..v.len() {
            let mut vp = v.clone();
            vp[j] += 1.0;
            let diff = f(&vp) - base;
            assert!((g[j] - diff).abs() <= 1e-9 * diff.abs().max(1.0), "coord {j}: {} vs {diff}", g[j]);
        }
    }

    fn diag_post(d_out: usize, d_in: usize, bias: bool, rng: &mut SeededRng) -> LayerPosterior {
        LayerPosterior::diagonal(
            Matrix::from_fn(d_out, d_in, |_, _| 0.05 * rng.uniform()),
            if bias { (0..d_out).map(|_| 0.05 * rng.uniform()).collect() } else { Vector::zeros(0) },
        )
        .unwrap()
    }

    fn spd(n: usize, rng: &mut SeededRng) -> Matrix {
        let g = Matrix::from_fn(n, n, |_, _| rng.normal());
        g.matmul(&g.transpose()).add_diag(0.5)
    }

    #[test]
    fn variance_backward_on_mlp() {
        let mut rng = SeededRng::new(6, 0);
        let net = NetworkModel::mlp(&[4, 5, 3], Activation::Tanh, Task::Classification, &mut rng).unwrap();
        let post = PosteriorSpec::new()
            .with(0, diag_post(5, 4, true, &mut rng))
            .with(2, LayerPosterior::Kfac(KfacPosterior::new(spd(6, &mut rng), spd(3, &mut rng), 2.0, Flattening::Column).unwrap()));
        check_variance_grad(&net, &post, ValueCov::Full, 6);
        check_variance_grad(&net, &PosteriorSpec::new(), ValueCov::Full, 7);
    }

    #[test]
    fn variance_backward_on_transformer() {
        let mut rng = SeededRng::new(8, 0);
        let net = transformer(&mut rng);
        // attention is index 2 (residual 0, layernorm 1)
        for post in [
            PosteriorSpec::new().with(2, diag_post(4, 4, false, &mut rng)),
            PosteriorSpec::new().with(2, LayerPosterior::Kfac(KfacPosterior::new(spd(4, &mut rng), spd(4, &mut rng), 3.0, Flattening::Row).unwrap())),
            PosteriorSpec::new().with(2, LayerPosterior::full(spd(16, &mut rng).scale(0.01), Flattening::Row).unwrap()),
        ] {
            for vc in [ValueCov::Full, ValueCov::VarianceOnly] {
                check_variance_grad(&net, &post, vc, 8);
            }
        }
    }

    #[test]
    fn variance_backward_on_cnn() {
        let mut rng = SeededRng::new(9, 0);
        let net = cnn(&mut rng);
        let post = PosteriorSpec::new().with(0, diag_post(2, 9, true, &mut rng));
        check_variance_grad(&net, &post, ValueCov::Full, 9);
    }
}
