//! JSON model files.
//!
//! ```json
//! { "version": 1, "task": "classification", "input": {"flat": 784},
//!   "layers": [ {"type": "linear", "weight": [[...]], "bias": [...]},
//!               {"type": "activation", "kind": "relu"}, ... ] }
//! ```
//!
//! Reals are written as decimals with 17 significant digits, which is
//! lossless for `f64`.

use std::io::{self, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};
use serde_json::Value;

use super::{Activation, Attention, Conv2d, LayerNorm, LayerSpec, Linear, NetworkModel, Shape, Task};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

pub(crate) const MODEL_VERSION: u64 = 1;

/// Pretty JSON with every `f64` written as `{:.16e}`.
pub(crate) struct LosslessFormatter(PrettyFormatter<'static>);

impl LosslessFormatter {
    pub(crate) fn new() -> Self {
        LosslessFormatter(PrettyFormatter::with_indent(b" "))
    }
}

macro_rules! delegate {
    ($($name:ident),*) => {
        $(
            fn $name<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
                self.0.$name(w)
            }
        )*
    };
}

impl Formatter for LosslessFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    delegate!(begin_array, end_array, end_array_value, begin_object, end_object, begin_object_value, end_object_value);
}

pub(crate) fn to_lossless_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, LosslessFormatter::new());
    value.serialize(&mut ser).expect("serialising to memory cannot fail");
    out.push(b'\n');
    out
}

/// Parse JSON text, checking the top-level `version` before decoding `T`.
pub(crate) fn from_versioned_json<T: DeserializeOwned>(text: &str, expected: u64) -> Result<T> {
    let value: Value = serde_json::from_str(text).map_err(|e| parse_error(text, &e))?;
    let found = value
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Schema("missing integer \"version\" field".into()))?;
    if found != expected {
        return Err(Error::Version { found, expected });
    }
    // re-parse so serde errors still carry positions
    serde_json::from_str(text).map_err(|e| parse_error(text, &e))
}

fn parse_error(text: &str, e: &serde_json::Error) -> Error {
    let offset = if e.line() == 0 {
        text.len()
    } else {
        text.split_inclusive('\n')
            .take(e.line() - 1)
            .map(str::len)
            .sum::<usize>()
            + e.column().saturating_sub(1)
    };
    Error::Parse {
        offset,
        message: e.to_string(),
    }
}

/// Atomically write `bytes` to `path` (temp file in the same directory, then rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum LayerFile {
    Linear {
        weight: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
    Activation {
        kind: Activation,
    },
    Layernorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        #[serde(default = "default_eps")]
        epsilon: f64,
    },
    Residual {
        inner: Vec<LayerFile>,
    },
    Attention {
        wq: Vec<Vec<f64>>,
        wk: Vec<Vec<f64>>,
        wv: Vec<Vec<f64>>,
        wo: Vec<Vec<f64>>,
        heads: usize,
    },
    Conv2d {
        /// `C_out × C_in × K_h × K_w`
        kernels: Vec<Vec<Vec<Vec<f64>>>>,
        bias: Vec<f64>,
        stride: usize,
        padding: usize,
    },
    Avgpool2d {
        window: usize,
        stride: usize,
    },
    Flatten,
}

fn default_eps() -> f64 {
    1e-5
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u64,
    task: Task,
    input: Shape,
    layers: Vec<LayerFile>,
}

fn to_file(layer: &LayerSpec) -> LayerFile {
    match layer {
        LayerSpec::Linear(l) => LayerFile::Linear {
            weight: l.weight.to_rows(),
            bias: l.bias.to_vec(),
        },
        LayerSpec::Activation(kind) => LayerFile::Activation { kind: *kind },
        LayerSpec::LayerNorm(ln) => LayerFile::Layernorm {
            gamma: ln.gamma.to_vec(),
            beta: ln.beta.to_vec(),
            epsilon: ln.epsilon,
        },
        LayerSpec::Residual(inner) => LayerFile::Residual {
            inner: inner.iter().map(to_file).collect(),
        },
        LayerSpec::Attention(a) => LayerFile::Attention {
            wq: a.wq.to_rows(),
            wk: a.wk.to_rows(),
            wv: a.wv.to_rows(),
            wo: a.wo.to_rows(),
            heads: a.heads,
        },
        LayerSpec::Conv2d(c) => {
            let (kh, kw) = (c.kernel_h, c.kernel_w);
            let kernels = (0..c.out_channels())
                .map(|co| {
                    (0..c.in_channels)
                        .map(|ci| {
                            (0..kh)
                                .map(|i| (0..kw).map(|j| c.kernels[(co, (ci * kh + i) * kw + j)]).collect())
                                .collect()
                        })
                        .collect()
                })
                .collect();
            LayerFile::Conv2d {
                kernels,
                bias: c.bias.to_vec(),
                stride: c.stride,
                padding: c.padding,
            }
        }
        LayerSpec::AvgPool2d { window, stride } => LayerFile::Avgpool2d {
            window: *window,
            stride: *stride,
        },
        LayerSpec::Flatten => LayerFile::Flatten,
    }
}

fn finite(v: Vec<f64>) -> Result<Vector> {
    let v = Vector::new(v);
    if !v.is_finite() {
        return Err(Error::Schema("non-finite parameter".into()));
    }
    Ok(v)
}

fn from_file(layer: LayerFile) -> Result<LayerSpec> {
    Ok(match layer {
        LayerFile::Linear { weight, bias } => LayerSpec::Linear(Linear::new(Matrix::from_rows(&weight)?, finite(bias)?)?),
        LayerFile::Activation { kind } => LayerSpec::Activation(kind),
        LayerFile::Layernorm { gamma, beta, epsilon } => {
            if !(epsilon >= 0.0) {
                return Err(Error::Schema("layernorm epsilon must be >= 0".into()));
            }
            LayerSpec::LayerNorm(LayerNorm {
                gamma: finite(gamma)?,
                beta: finite(beta)?,
                epsilon,
            })
        }
        LayerFile::Residual { inner } => {
            LayerSpec::Residual(inner.into_iter().map(from_file).collect::<Result<_>>()?)
        }
        LayerFile::Attention { wq, wk, wv, wo, heads } => LayerSpec::Attention(Attention {
            wq: Matrix::from_rows(&wq)?,
            wk: Matrix::from_rows(&wk)?,
            wv: Matrix::from_rows(&wv)?,
            wo: Matrix::from_rows(&wo)?,
            heads,
        }),
        LayerFile::Conv2d {
            kernels,
            bias,
            stride,
            padding,
        } => {
            let cout = kernels.len();
            let cin = kernels.first().map_or(0, Vec::len);
            let kh = kernels.first().and_then(|k| k.first()).map_or(0, Vec::len);
            let kw = kernels
                .first()
                .and_then(|k| k.first())
                .and_then(|k| k.first())
                .map_or(0, Vec::len);
            let mut flat = Vec::with_capacity(cout * cin * kh * kw);
            for per_out in &kernels {
                if per_out.len() != cin {
                    return Err(Error::Schema("ragged conv kernel tensor".into()));
                }
                for per_in in per_out {
                    if per_in.len() != kh || per_in.iter().any(|r| r.len() != kw) {
                        return Err(Error::Schema("ragged conv kernel tensor".into()));
                    }
                    for row in per_in {
                        flat.extend_from_slice(row);
                    }
                }
            }
            LayerSpec::Conv2d(Conv2d {
                in_channels: cin,
                kernel_h: kh,
                kernel_w: kw,
                kernels: Matrix::new(cout, cin * kh * kw, flat)?,
                bias: finite(bias)?,
                stride,
                padding,
            })
        }
        LayerFile::Avgpool2d { window, stride } => LayerSpec::AvgPool2d { window, stride },
        LayerFile::Flatten => LayerSpec::Flatten,
    })
}

pub fn model_to_json(net: &NetworkModel) -> Vec<u8> {
    let file = ModelFile {
        version: MODEL_VERSION,
        task: net.task(),
        input: net.input(),
        layers: net.layers().iter().map(to_file).collect(),
    };
    to_lossless_json(&file)
}

pub fn model_from_json(text: &str) -> Result<NetworkModel> {
    let file: ModelFile = from_versioned_json(text, MODEL_VERSION)?;
    let layers = file.layers.into_iter().map(from_file).collect::<Result<Vec<_>>>()?;
    NetworkModel::new(file.input, layers, file.task)
}

pub fn save_model(net: &NetworkModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &model_to_json(net))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkModel> {
    let text = std::fs::read_to_string(path)?;
    model_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    fn mixed_model(rng: &mut SeededRng) -> NetworkModel {
        let d = 4;
        let mut m = || Matrix::from_fn(d, d, |_, _| rng.normal());
        let att = Attention { wq: m(), wk: m(), wv: m(), wo: m(), heads: 2 };
        NetworkModel::new(
            Shape::Tokens { tokens: 3, dim: d },
            vec![
                LayerSpec::Residual(vec![LayerSpec::LayerNorm(LayerNorm::new(d)), LayerSpec::Attention(att)]),
                LayerSpec::Activation(Activation::Gelu),
                LayerSpec::Flatten,
                LayerSpec::Linear(Linear::new(Matrix::from_fn(2, 12, |r, c| (r * 12 + c) as f64 / 7.0), Vector::zeros(2)).unwrap()),
            ],
            Task::Classification,
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_mixed_model() {
        let mut rng = SeededRng::new(5, 0);
        let net = mixed_model(&mut rng);
        let back = model_from_json(std::str::from_utf8(&model_to_json(&net)).unwrap()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn conv_roundtrip_keeps_kernel_layout() {
        let mut rng = SeededRng::new(6, 0);
        let conv = Conv2d {
            in_channels: 2,
            kernel_h: 3,
            kernel_w: 2,
            kernels: Matrix::from_fn(3, 12, |_, _| rng.normal()),
            bias: Vector::from(vec![0.1, 0.2, 0.3]),
            stride: 1,
            padding: 1,
        };
        let net = NetworkModel::new(
            Shape::Image { channels: 2, height: 4, width: 4 },
            vec![LayerSpec::Conv2d(conv), LayerSpec::AvgPool2d { window: 2, stride: 2 }, LayerSpec::Flatten],
            Task::Regression,
        )
        .unwrap();
        let back = model_from_json(std::str::from_utf8(&model_to_json(&net)).unwrap()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn truncated_json_is_a_parse_error() {
        let mut rng = SeededRng::new(7, 0);
        let net = NetworkModel::mlp(&[3, 4, 2], Activation::Relu, Task::Regression, &mut rng).unwrap();
        let text = String::from_utf8(model_to_json(&net)).unwrap();
        let cut = &text[..text.len() / 2];
        match model_from_json(cut) {
            Err(Error::Parse { offset, .. }) => assert!(offset <= cut.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_is_rejected() {
        let text = r#"{"version": 2, "task": "regression", "input": {"flat": 1}, "layers": []}"#;
        assert!(matches!(model_from_json(text), Err(Error::Version { found: 2, expected: 1 })));
    }

    #[test]
    fn reals_carry_seventeen_digits() {
        let net = NetworkModel::new(
            Shape::Flat(1),
            vec![LayerSpec::Linear(Linear::new(Matrix::from_rows(&[vec![0.1]]).unwrap(), Vector::from(vec![1.0])).unwrap())],
            Task::Regression,
        )
        .unwrap();
        let text = String::from_utf8(model_to_json(&net)).unwrap();
        assert!(text.contains("1.0000000000000001e-1"), "{text}");
        assert!(text.contains("1.0000000000000000e0"), "{text}");
    }

    proptest! {
        #[test]
        fn random_mlp_roundtrip_is_bit_exact(seed in any::<u64>(), hidden in 1usize..6) {
            let mut rng = SeededRng::new(seed, 0);
            let net = NetworkModel::mlp(&[3, hidden, 2], Activation::Tanh, Task::Classification, &mut rng).unwrap();
            let back = model_from_json(std::str::from_utf8(&model_to_json(&net)).unwrap()).unwrap();
            for ((_, a), (_, b)) in net.indexed_layers().iter().zip(back.indexed_layers().iter()) {
                if let (LayerSpec::Linear(a), LayerSpec::Linear(b)) = (a, b) {
                    prop_assert!(a.weight.data().iter().zip(b.weight.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
                    prop_assert!(a.bias.iter().zip(b.bias.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
                }
            }
        }
    }
}
