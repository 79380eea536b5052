//! Forward kernels shared by the plain forward pass, the moment propagation
//! mean path and the backward pass. Keeping one implementation per kernel is
//! what makes the zero-variance propagation mean bit-identical to `forward`.

use super::{Attention, Conv2d, LayerNorm, Shape};
use crate::numerics::{dot, Matrix};

pub(crate) fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// `W x + b` applied to every `d_in`-wide token of `x`.
pub(crate) fn linear_tokens(w: &Matrix, b: &[f64], x: &[f64]) -> Vec<f64> {
    let d_in = w.cols();
    let mut out = Vec::with_capacity(x.len() / d_in * w.rows());
    for chunk in x.chunks(d_in) {
        let h = w.matvec(chunk);
        out.extend(h.iter().zip(b).map(|(v, bb)| v + bb));
    }
    out
}

/// Mean and `sqrt(var + eps)` of one token.
pub(crate) fn layernorm_stats(x: &[f64], eps: f64) -> (f64, f64) {
    let d = x.len() as f64;
    let m = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d;
    (m, (var + eps).sqrt())
}

pub(crate) fn layernorm_forward(ln: &LayerNorm, x: &[f64]) -> Vec<f64> {
    let d = ln.gamma.len();
    let mut out = Vec::with_capacity(x.len());
    for chunk in x.chunks(d) {
        let (m, s) = layernorm_stats(chunk, ln.epsilon);
        out.extend(
            chunk
                .iter()
                .enumerate()
                .map(|(k, &v)| ln.gamma[k] * ((v - m) / s) + ln.beta[k]),
        );
    }
    out
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in v.iter_mut() {
        *x /= z;
    }
}

/// Row-stochastic attention weights, one `T × T` matrix per head.
pub(crate) fn attention_scores(a: &Attention, x: &[f64], tokens: usize) -> Vec<Matrix> {
    let d = a.dim();
    let dh = a.head_dim();
    let q = linear_no_bias(&a.wq, x, d);
    let k = linear_no_bias(&a.wk, x, d);
    let scale = (dh as f64).sqrt();
    (0..a.heads)
        .map(|head| {
            let cols = head * dh..(head + 1) * dh;
            let mut s = Matrix::zeros(tokens, tokens);
            for t in 0..tokens {
                let qt = &q[t * d..(t + 1) * d][cols.clone()];
                let row = s.row_mut(t);
                for (u, r) in row.iter_mut().enumerate() {
                    let ku = &k[u * d..(u + 1) * d][cols.clone()];
                    *r = dot(qt, ku) / scale;
                }
                softmax_in_place(row);
            }
            s
        })
        .collect()
}

pub(crate) fn linear_no_bias(w: &Matrix, x: &[f64], d: usize) -> Vec<f64> {
    x.chunks(d).flat_map(|c| w.matvec(c).into_inner()).collect()
}

/// Token `t`, head slice `j`: `Σ_s S_j[t,s] v_s[j]`.
pub(crate) fn attention_mix(scores: &[Matrix], values: &[f64], d: usize) -> Vec<f64> {
    let heads = scores.len();
    let dh = d / heads;
    let tokens = values.len() / d;
    let mut out = vec![0.0; values.len()];
    for (head, s) in scores.iter().enumerate() {
        for t in 0..tokens {
            for u in 0..tokens {
                let w = s[(t, u)];
                for c in head * dh..(head + 1) * dh {
                    out[t * d + c] += w * values[u * d + c];
                }
            }
        }
    }
    out
}

pub(crate) struct AttentionForward {
    pub scores: Vec<Matrix>,
    pub values: Vec<f64>,
    pub mixed: Vec<f64>,
    pub output: Vec<f64>,
}

pub(crate) fn attention_forward(a: &Attention, x: &[f64], tokens: usize) -> AttentionForward {
    let d = a.dim();
    let scores = attention_scores(a, x, tokens);
    let values = linear_no_bias(&a.wv, x, d);
    let mixed = attention_mix(&scores, &values, d);
    let output = linear_no_bias(&a.wo, &mixed, d);
    AttentionForward {
        scores,
        values,
        mixed,
        output,
    }
}

fn image_dims(shape: Shape) -> (usize, usize, usize) {
    match shape {
        Shape::Image {
            channels,
            height,
            width,
        } => (channels, height, width),
        other => panic!("expected image shape, got {other:?}"),
    }
}

/// Generic convolution `Σ weights·x (+ bias)` over the receptive fields of
/// `conv`. Padded positions contribute nothing.
pub(crate) fn conv2d_apply(conv: &Conv2d, shape: Shape, x: &[f64], weights: &Matrix, bias: Option<&[f64]>) -> Vec<f64> {
    let (cin, h, w) = image_dims(shape);
    let (oh, ow) = conv.output_hw(h, w).expect("validated");
    let (kh, kw, s, p) = (conv.kernel_h, conv.kernel_w, conv.stride, conv.padding);
    let cout = weights.rows();
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        let wrow = weights.row(co);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for i in 0..kh {
                        let iy = (oy * s + i) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for j in 0..kw {
                            let ix = (ox * s + j) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += wrow[(ci * kh + i) * kw + j] * x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                if let Some(b) = bias {
                    acc += b[co];
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

pub(crate) fn conv2d_forward(conv: &Conv2d, shape: Shape, x: &[f64]) -> Vec<f64> {
    conv2d_apply(conv, shape, x, &conv.kernels, Some(&conv.bias))
}

/// Adjoint of [`conv2d_apply`] (without bias) with respect to `x`.
pub(crate) fn conv2d_transpose(conv: &Conv2d, shape: Shape, grad_out: &[f64], weights: &Matrix) -> Vec<f64> {
    let (cin, h, w) = image_dims(shape);
    let (oh, ow) = conv.output_hw(h, w).expect("validated");
    let (kh, kw, s, p) = (conv.kernel_h, conv.kernel_w, conv.stride, conv.padding);
    let mut gx = vec![0.0; cin * h * w];
    for co in 0..weights.rows() {
        let wrow = weights.row(co);
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out[(co * oh + oy) * ow + ox];
                if g == 0.0 {
                    continue;
                }
                for ci in 0..cin {
                    for i in 0..kh {
                        let iy = (oy * s + i) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for j in 0..kw {
                            let ix = (ox * s + j) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gx[(ci * h + iy as usize) * w + ix as usize] += wrow[(ci * kh + i) * kw + j] * g;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Gradient of `Σ grad_out · conv(x)` with respect to the kernel matrix.
pub(crate) fn conv2d_weight_grad(conv: &Conv2d, shape: Shape, x: &[f64], grad_out: &[f64]) -> Matrix {
    let (cin, h, w) = image_dims(shape);
    let (oh, ow) = conv.output_hw(h, w).expect("validated");
    let (kh, kw, s, p) = (conv.kernel_h, conv.kernel_w, conv.stride, conv.padding);
    let mut gw = Matrix::zeros(conv.out_channels(), conv.kernels.cols());
    for co in 0..conv.out_channels() {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out[(co * oh + oy) * ow + ox];
                if g == 0.0 {
                    continue;
                }
                for ci in 0..cin {
                    for i in 0..kh {
                        let iy = (oy * s + i) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for j in 0..kw {
                            let ix = (ox * s + j) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gw[(co, (ci * kh + i) * kw + j)] += g * x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    gw
}

/// Average pooling; `coef` multiplies each window sum (`1/window²` for the
/// mean, its square for diagonal variances).
pub(crate) fn avgpool_apply(window: usize, stride: usize, shape: Shape, x: &[f64], coef: f64) -> Vec<f64> {
    let (c, h, w) = image_dims(shape);
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for i in 0..window {
                    for j in 0..window {
                        acc += x[(ch * h + oy * stride + i) * w + ox * stride + j];
                    }
                }
                out[(ch * oh + oy) * ow + ox] = acc * coef;
            }
        }
    }
    out
}

pub(crate) fn avgpool_forward(window: usize, stride: usize, shape: Shape, x: &[f64]) -> Vec<f64> {
    avgpool_apply(window, stride, shape, x, 1.0 / (window * window) as f64)
}

pub(crate) fn avgpool_transpose(window: usize, stride: usize, shape: Shape, grad_out: &[f64], coef: f64) -> Vec<f64> {
    let (c, h, w) = image_dims(shape);
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out[(ch * oh + oy) * ow + ox] * coef;
                for i in 0..window {
                    for j in 0..window {
                        gx[(ch * h + oy * stride + i) * w + ox * stride + j] += g;
                    }
                }
            }
        }
    }
    gx
}
