//! Network description, deterministic forward pass and file formats.
//!
//! Layers are numbered in depth-first pre-order: a `Residual` takes an index
//! and its inner layers follow it. Posteriors and Monte Carlo capture lists
//! refer to layers by this index.

mod dataset;
pub(crate) mod io;
pub(crate) mod kernels;

pub use dataset::{load_dataset_csv, Dataset, DatasetSchema, Split, Standardization, Targets};
pub use io::{load_model, model_from_json, model_to_json, save_model, write_atomic};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng, Vector};

/// Shape of the activation flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Flat(usize),
    /// `tokens × dim`, token-major.
    Tokens { tokens: usize, dim: usize },
    /// `channels × height × width`, channel-major.
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Flat(n) => n,
            Shape::Tokens { tokens, dim } => tokens * dim,
            Shape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Gelu => x * crate::numerics::normal_cdf(x),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative used for local linearisation. ReLU'(0) = 0.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => crate::numerics::normal_cdf(x) + x * crate::numerics::normal_pdf(x),
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::structural(format!("unknown activation kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `D_out × D_in`.
    pub weight: Matrix,
    pub bias: Vector,
}

impl Linear {
    pub fn new(weight: Matrix, bias: Vector) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::structural(format!(
                "bias length {} does not match {} output units",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Linear { weight, bias })
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vector,
    pub beta: Vector,
    pub epsilon: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Vector::filled(dim, 1.0),
            beta: Vector::zeros(dim),
            epsilon: 1e-5,
        }
    }
}

/// Multi-head self-attention with output projection. All projections are
/// `D × D` and act on column vectors (`q_t = W_Q h_t`); head `j` owns rows
/// `j·D/heads .. (j+1)·D/heads`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub heads: usize,
}

impl Attention {
    pub fn dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }
}

/// 2-D convolution. `kernels` is stored im2col-style as
/// `C_out × (C_in·K_h·K_w)` with column index `(c_in·K_h + i)·K_w + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub kernels: Matrix,
    pub bias: Vector,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn out_channels(&self) -> usize {
        self.kernels.rows()
    }

    /// Output spatial size for an `h × w` input, `None` if empty.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if self.stride == 0 || ph < self.kernel_h || pw < self.kernel_w {
            return None;
        }
        Some((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Linear(Linear),
    Activation(Activation),
    LayerNorm(LayerNorm),
    Residual(Vec<LayerSpec>),
    Attention(Attention),
    Conv2d(Conv2d),
    AvgPool2d { window: usize, stride: usize },
    Flatten,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Linear(_) => "linear",
            LayerSpec::Activation(_) => "activation",
            LayerSpec::LayerNorm(_) => "layernorm",
            LayerSpec::Residual(_) => "residual",
            LayerSpec::Attention(_) => "attention",
            LayerSpec::Conv2d(_) => "conv2d",
            LayerSpec::AvgPool2d { .. } => "avgpool2d",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Whether the layer carries parameters a posterior may cover.
    pub fn is_parametric(&self) -> bool {
        matches!(
            self,
            LayerSpec::Linear(_) | LayerSpec::Attention(_) | LayerSpec::Conv2d(_)
        )
    }

    /// Number of pre-order indices consumed by this layer and its children.
    pub fn node_count(&self) -> usize {
        match self {
            LayerSpec::Residual(inner) => 1 + inner.iter().map(LayerSpec::node_count).sum::<usize>(),
            _ => 1,
        }
    }

    /// Output shape for `input`, or a structural error.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let mismatch = |what: &str| {
            Err(Error::structural(format!(
                "{} layer cannot take input {:?}: {}",
                self.name(),
                input,
                what
            )))
        };
        match self {
            LayerSpec::Linear(l) => match input {
                Shape::Flat(n) if n == l.d_in() => Ok(Shape::Flat(l.d_out())),
                Shape::Tokens { tokens, dim } if dim == l.d_in() => Ok(Shape::Tokens {
                    tokens,
                    dim: l.d_out(),
                }),
                _ => mismatch(&format!("expects {} input features", l.d_in())),
            },
            LayerSpec::Activation(_) => Ok(input),
            LayerSpec::LayerNorm(ln) => {
                let d = match input {
                    Shape::Flat(n) => n,
                    Shape::Tokens { dim, .. } => dim,
                    Shape::Image { .. } => return mismatch("images are not supported"),
                };
                if d == 0 {
                    return mismatch("zero-width normalisation");
                }
                if ln.gamma.len() != d || ln.beta.len() != d {
                    return mismatch("gamma/beta length");
                }
                Ok(input)
            }
            LayerSpec::Residual(inner) => {
                let mut s = input;
                for l in inner {
                    s = l.output_shape(s)?;
                }
                if s != input {
                    return mismatch(&format!("inner branch maps to {s:?}"));
                }
                Ok(input)
            }
            LayerSpec::Attention(a) => {
                let d = a.dim();
                for m in [&a.wq, &a.wk, &a.wv, &a.wo] {
                    if m.rows() != d || m.cols() != d {
                        return mismatch("projections must all be D×D");
                    }
                }
                if a.heads == 0 || d % a.heads != 0 {
                    return mismatch(&format!("{} heads do not divide D={d}", a.heads));
                }
                match input {
                    Shape::Tokens { dim, .. } if dim == d => Ok(input),
                    _ => mismatch(&format!("expects tokens of width {d}")),
                }
            }
            LayerSpec::Conv2d(c) => {
                if c.kernel_h == 0 || c.kernel_w == 0 {
                    return mismatch("kernel spatial dims must be >= 1");
                }
                if c.kernels.cols() != c.in_channels * c.kernel_h * c.kernel_w {
                    return mismatch("kernel tensor shape");
                }
                if c.bias.len() != c.out_channels() {
                    return mismatch("bias length");
                }
                match input {
                    Shape::Image {
                        channels,
                        height,
                        width,
                    } if channels == c.in_channels => match c.output_hw(height, width) {
                        Some((h, w)) => Ok(Shape::Image {
                            channels: c.out_channels(),
                            height: h,
                            width: w,
                        }),
                        None => mismatch("stride/padding leave an empty output"),
                    },
                    _ => mismatch(&format!("expects an image with {} channels", c.in_channels)),
                }
            }
            LayerSpec::AvgPool2d { window, stride } => match input {
                Shape::Image {
                    channels,
                    height,
                    width,
                } if *window >= 1 && *stride >= 1 && height >= *window && width >= *window => {
                    Ok(Shape::Image {
                        channels,
                        height: (height - window) / stride + 1,
                        width: (width - window) / stride + 1,
                    })
                }
                _ => mismatch("pooling window does not fit"),
            },
            LayerSpec::Flatten => Ok(Shape::Flat(input.numel())),
        }
    }
}

/// An ordered stack of layers holding MAP parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    input: Shape,
    layers: Vec<LayerSpec>,
    task: Task,
    num_outputs: usize,
}

impl NetworkModel {
    pub fn new(input: Shape, layers: Vec<LayerSpec>, task: Task) -> Result<Self> {
        let mut shape = input;
        let mut index = 0;
        for layer in &layers {
            shape = layer.output_shape(shape).map_err(|e| e.at_layer(index))?;
            index += layer.node_count();
        }
        let num_outputs = match shape {
            Shape::Flat(n) if n > 0 => n,
            other => {
                return Err(Error::structural(format!(
                    "network must end in a flat output, ends in {other:?}"
                )))
            }
        };
        Ok(NetworkModel {
            input,
            layers,
            task,
            num_outputs,
        })
    }

    /// Fully connected network `arch[0]-arch[1]-...` with `activation`
    /// between layers and randomly initialised weights (std `1/√d_in`).
    pub fn mlp(arch: &[usize], activation: Activation, task: Task, rng: &mut SeededRng) -> Result<Self> {
        if arch.len() < 2 || arch.contains(&0) {
            return Err(Error::structural(format!("invalid architecture {arch:?}")));
        }
        let mut layers = Vec::new();
        for (i, w) in arch.windows(2).enumerate() {
            let (d_in, d_out) = (w[0], w[1]);
            let std = 1.0 / (d_in as f64).sqrt();
            let weight = Matrix::from_fn(d_out, d_in, |_, _| std * rng.normal());
            let bias = (0..d_out).map(|_| 0.1 * std * rng.normal()).collect();
            layers.push(LayerSpec::Linear(Linear::new(weight, bias)?));
            if i + 2 < arch.len() {
                layers.push(LayerSpec::Activation(activation));
            }
        }
        NetworkModel::new(Shape::Flat(arch[0]), layers, task)
    }

    pub fn input(&self) -> Shape {
        self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn num_outputs(&self) -> usize {
        self.num_outputs
    }

    pub fn input_dim(&self) -> usize {
        self.input.numel()
    }

    /// Total number of pre-order layer indices.
    pub fn node_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::node_count).sum()
    }

    /// Every layer with its pre-order index.
    pub fn indexed_layers(&self) -> Vec<(usize, &LayerSpec)> {
        fn walk<'a>(layers: &'a [LayerSpec], next: &mut usize, out: &mut Vec<(usize, &'a LayerSpec)>) {
            for l in layers {
                out.push((*next, l));
                *next += 1;
                if let LayerSpec::Residual(inner) = l {
                    walk(inner, next, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.layers, &mut 0, &mut out);
        out
    }

    pub fn layer(&self, index: usize) -> Option<&LayerSpec> {
        self.indexed_layers()
            .into_iter()
            .find(|(i, _)| *i == index)
            .map(|(_, l)| l)
    }

    /// Mutable access to a layer by pre-order index.
    pub fn layer_mut(&mut self, index: usize) -> Option<&mut LayerSpec> {
        fn find(layers: &mut [LayerSpec], start: usize, target: usize) -> Option<&mut LayerSpec> {
            let mut next = start;
            for l in layers.iter_mut() {
                let count = l.node_count();
                if target == next {
                    return Some(l);
                }
                if target < next + count {
                    if let LayerSpec::Residual(inner) = l {
                        return find(inner, next + 1, target);
                    }
                }
                next += count;
            }
            None
        }
        find(&mut self.layers, 0, index)
    }

    /// Input shape seen by each layer, by pre-order index.
    pub fn layer_input_shapes(&self) -> Vec<Shape> {
        fn walk(layers: &[LayerSpec], mut shape: Shape, out: &mut Vec<Shape>) -> Shape {
            for l in layers {
                out.push(shape);
                if let LayerSpec::Residual(inner) = l {
                    walk(inner, shape, out);
                }
                shape = l.output_shape(shape).expect("validated at construction");
            }
            shape
        }
        let mut out = Vec::new();
        walk(&self.layers, self.input, &mut out);
        out
    }

    /// Plain forward pass: logits for classification, regression outputs otherwise.
    pub fn forward(&self, x: &[f64]) -> Result<Vector> {
        self.forward_observed(x, &mut |_, _| {})
    }

    /// Forward pass reporting every layer output (pre-order index, value).
    pub fn forward_observed(&self, x: &[f64], observe: &mut dyn FnMut(usize, &[f64])) -> Result<Vector> {
        if x.len() != self.input_dim() {
            return Err(Error::structural(format!(
                "input has {} values, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut index = 0;
        let out = forward_layers(&self.layers, self.input, x.to_vec(), &mut index, observe);
        Ok(Vector::new(out))
    }

    /// Total parameter count.
    pub fn parameter_count(&self) -> usize {
        self.indexed_layers()
            .iter()
            .map(|(_, l)| match l {
                LayerSpec::Linear(l) => l.weight.data().len() + l.bias.len(),
                LayerSpec::LayerNorm(ln) => 2 * ln.gamma.len(),
                LayerSpec::Attention(a) => 4 * a.dim() * a.dim(),
                LayerSpec::Conv2d(c) => c.kernels.data().len() + c.bias.len(),
                _ => 0,
            })
            .sum()
    }
}

fn forward_layers(
    layers: &[LayerSpec],
    mut shape: Shape,
    mut x: Vec<f64>,
    index: &mut usize,
    observe: &mut dyn FnMut(usize, &[f64]),
) -> Vec<f64> {
    for layer in layers {
        let my_index = *index;
        *index += 1;
        let next = layer.output_shape(shape).expect("validated at construction");
        x = match layer {
            LayerSpec::Linear(l) => kernels::linear_tokens(&l.weight, &l.bias, &x),
            LayerSpec::Activation(a) => x.iter().map(|&v| a.apply(v)).collect(),
            LayerSpec::LayerNorm(ln) => kernels::layernorm_forward(ln, &x),
            LayerSpec::Residual(inner) => {
                let branch = forward_layers(inner, shape, x.clone(), index, observe);
                kernels::add(&x, &branch)
            }
            LayerSpec::Attention(a) => {
                let tokens = x.len() / a.dim();
                kernels::attention_forward(a, &x, tokens).output
            }
            LayerSpec::Conv2d(c) => kernels::conv2d_forward(c, shape, &x),
            LayerSpec::AvgPool2d { window, stride } => kernels::avgpool_forward(*window, *stride, shape, &x),
            LayerSpec::Flatten => x,
        };
        observe(my_index, &x);
        shape = next;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(w: &[Vec<f64>], b: &[f64]) -> LayerSpec {
        LayerSpec::Linear(Linear::new(Matrix::from_rows(w).unwrap(), Vector::from(b)).unwrap())
    }

    #[test]
    fn identity_linear_layer() {
        let net = NetworkModel::new(
            Shape::Flat(2),
            vec![linear(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0, 0.0])],
            Task::Regression,
        )
        .unwrap();
        assert_eq!(net.forward(&[1.0, 2.0]).unwrap().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_layer() {
        let net = NetworkModel::new(
            Shape::Flat(2),
            vec![LayerSpec::Activation(Activation::Relu)],
            Task::Regression,
        )
        .unwrap();
        assert_eq!(net.forward(&[-1.0, 3.0]).unwrap().as_slice(), &[0.0, 3.0]);
    }

    #[test]
    fn mnist_mlp_shape() {
        let mut rng = SeededRng::new(0, 0);
        let net = NetworkModel::mlp(&[784, 128, 64, 10], Activation::Relu, Task::Classification, &mut rng)
            .unwrap();
        assert_eq!(net.num_outputs(), 10);
        let out = net.forward(&vec![0.5; 784]).unwrap();
        assert_eq!(out.len(), 10);
        assert!(net.forward(&[0.0; 783]).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = SeededRng::new(1, 0);
        let net = NetworkModel::mlp(&[5, 7, 3], Activation::Gelu, Task::Classification, &mut rng).unwrap();
        let x: Vec<f64> = (0..5).map(|i| i as f64 * 0.3 - 0.7).collect();
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn residual_adds_branch_exactly() {
        let mut rng = SeededRng::new(2, 0);
        let inner_net = NetworkModel::mlp(&[4, 6, 4], Activation::Tanh, Task::Regression, &mut rng).unwrap();
        let inner = inner_net.layers().to_vec();
        let net = NetworkModel::new(Shape::Flat(4), vec![LayerSpec::Residual(inner)], Task::Regression).unwrap();
        let x = [0.3, -1.2, 0.8, 2.0];
        let branch = inner_net.forward(&x).unwrap();
        let out = net.forward(&x).unwrap();
        for i in 0..4 {
            assert_eq!(out[i], x[i] + branch[i]);
        }
    }

    #[test]
    fn single_head_attention_matches_hand_oracle() {
        let mut rng = SeededRng::new(3, 0);
        let d = 3;
        let t = 2;
        let mut m = || Matrix::from_fn(d, d, |_, _| rng.normal());
        let att = Attention {
            wq: m(),
            wk: m(),
            wv: m(),
            wo: m(),
            heads: 1,
        };
        let net = NetworkModel::new(
            Shape::Tokens { tokens: t, dim: d },
            vec![LayerSpec::Attention(att.clone()), LayerSpec::Flatten],
            Task::Regression,
        )
        .unwrap();
        let h = [0.2, -0.4, 1.0, 0.7, 0.1, -0.3];
        let out = net.forward(&h).unwrap();

        // oracle: softmax(Q Kᵀ/√D) V then W_O, written out longhand
        let tok = |s: usize| &h[s * d..(s + 1) * d];
        let proj = |w: &Matrix, s: usize| -> Vec<f64> {
            (0..d).map(|k| (0..d).map(|i| w[(k, i)] * tok(s)[i]).sum()).collect()
        };
        for ti in 0..t {
            let q = proj(&att.wq, ti);
            let logits: Vec<f64> = (0..t)
                .map(|s| {
                    let k = proj(&att.wk, s);
                    q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
                })
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let mut mixed = vec![0.0; d];
            for s in 0..t {
                let v = proj(&att.wv, s);
                for k in 0..d {
                    mixed[k] += logits[s].exp() / z * v[k];
                }
            }
            for k in 0..d {
                let expected: f64 = (0..d).map(|i| att.wo[(k, i)] * mixed[i]).sum();
                assert!((out[ti * d + k] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let conv = Conv2d {
            in_channels: 1,
            kernel_h: 5,
            kernel_w: 5,
            kernels: Matrix::zeros(1, 25),
            bias: Vector::zeros(1),
            stride: 1,
            padding: 0,
        };
        let err = NetworkModel::new(
            Shape::Image {
                channels: 1,
                height: 3,
                width: 3,
            },
            vec![LayerSpec::Conv2d(conv), LayerSpec::Flatten],
            Task::Regression,
        );
        assert!(matches!(err, Err(Error::Layer { layer: 0, .. })));
    }

    #[test]
    fn heads_must_divide_dim() {
        let att = Attention {
            wq: Matrix::identity(3),
            wk: Matrix::identity(3),
            wv: Matrix::identity(3),
            wo: Matrix::identity(3),
            heads: 2,
        };
        assert!(NetworkModel::new(
            Shape::Tokens { tokens: 2, dim: 3 },
            vec![LayerSpec::Attention(att), LayerSpec::Flatten],
            Task::Regression
        )
        .is_err());
    }

    #[test]
    fn preorder_indices() {
        let net = NetworkModel::new(
            Shape::Flat(2),
            vec![
                linear(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0, 0.0]),
                LayerSpec::Residual(vec![
                    linear(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0, 0.0]),
                    LayerSpec::Activation(Activation::Relu),
                ]),
                linear(&[vec![1.0, 1.0]], &[0.0]),
            ],
            Task::Regression,
        )
        .unwrap();
        let names: Vec<_> = net.indexed_layers().iter().map(|(i, l)| (*i, l.name())).collect();
        assert_eq!(
            names,
            vec![(0, "linear"), (1, "residual"), (2, "linear"), (3, "activation"), (4, "linear")]
        );
        assert_eq!(net.node_count(), 5);
        assert!(matches!(net.layer(3), Some(LayerSpec::Activation(_))));
    }
}
