//! Declarative layer lists, their text form, and the architecture presets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// 2-d convolution producing `units·pieces` maps, reduced by maxout to `units`.
    MaxoutConv {
        units: usize,
        kernel: usize,
        pieces: usize,
        pad: usize,
    },
    MaxPool {
        window: (usize, usize),
        stride: (usize, usize),
    },
    MaxoutDense {
        units: usize,
        pieces: usize,
    },
    Dense {
        units: usize,
    },
    Softmax,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::MaxoutConv { .. } => "maxout-conv",
            LayerSpec::MaxPool { .. } => "max-pool",
            LayerSpec::MaxoutDense { .. } => "maxout-dense",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Softmax => "softmax",
        }
    }

    pub fn conv(units: usize) -> Self {
        LayerSpec::MaxoutConv {
            units,
            kernel: 3,
            pieces: 2,
            pad: 1,
        }
    }

    pub fn pool(size: usize, stride: usize) -> Self {
        LayerSpec::MaxPool {
            window: (size, size),
            stride: (stride, stride),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::MaxoutConv {
                units,
                kernel,
                pieces,
                pad,
            } => write!(f, "maxout-conv units={units} kernel={kernel} pieces={pieces} pad={pad}"),
            LayerSpec::MaxPool { window, stride } => write!(
                f,
                "max-pool window={}x{} stride={}x{}",
                window.0, window.1, stride.0, stride.1
            ),
            LayerSpec::MaxoutDense { units, pieces } => write!(f, "maxout-dense units={units} pieces={pieces}"),
            LayerSpec::Dense { units } => write!(f, "dense units={units}"),
            LayerSpec::Softmax => write!(f, "softmax"),
        }
    }
}

/// Input extents `[C, H, W]` plus an ordered layer list ending in softmax.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// Parameter tensors a layer owns, as (weight shape, bias shape).
pub(crate) type ParamShapes = Option<(Vec<usize>, Vec<usize>)>;

impl NetworkSpec {
    pub fn new(input: [usize; 3], layers: Vec<LayerSpec>) -> Self {
        NetworkSpec { input, layers }
    }

    /// Per-example activation shape after each layer, validating the chain.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let chain_err = |index: usize, layer: &LayerSpec, detail: String| Error::LayerChain {
            index,
            layer: layer.to_string(),
            detail,
        };
        if self.layers.is_empty() {
            return Err(Error::invalid("network spec has no layers"));
        }
        if self.input.contains(&0) {
            return Err(Error::invalid(format!("input extents {:?} must be positive", self.input)));
        }
        let mut cur = self.input.to_vec();
        let mut shapes = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                LayerSpec::MaxoutConv {
                    units,
                    kernel,
                    pieces,
                    pad,
                } => {
                    let [_, h, w] = cur[..] else {
                        return Err(chain_err(i, layer, format!("needs a C×H×W input, got {cur:?}")));
                    };
                    if units == 0 || pieces == 0 || kernel == 0 {
                        return Err(chain_err(i, layer, "units, pieces and kernel must be positive".into()));
                    }
                    if kernel > h + 2 * pad || kernel > w + 2 * pad {
                        return Err(chain_err(i, layer, format!("kernel {kernel} exceeds padded {h}x{w}")));
                    }
                    vec![units, h + 2 * pad + 1 - kernel, w + 2 * pad + 1 - kernel]
                }
                LayerSpec::MaxPool { window, stride } => {
                    let [c, h, w] = cur[..] else {
                        return Err(chain_err(i, layer, format!("needs a C×H×W input, got {cur:?}")));
                    };
                    if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
                        return Err(chain_err(i, layer, "window and stride must be positive".into()));
                    }
                    if window.0 > h || window.1 > w {
                        return Err(chain_err(i, layer, format!("window exceeds {h}x{w} input")));
                    }
                    vec![c, (h - window.0) / stride.0 + 1, (w - window.1) / stride.1 + 1]
                }
                LayerSpec::MaxoutDense { units, pieces } => {
                    if units == 0 || pieces == 0 {
                        return Err(chain_err(i, layer, "units and pieces must be positive".into()));
                    }
                    vec![units]
                }
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return Err(chain_err(i, layer, "units must be positive".into()));
                    }
                    vec![units]
                }
                LayerSpec::Softmax => {
                    if i != last {
                        return Err(chain_err(i, layer, "softmax must be the final layer".into()));
                    }
                    if cur.len() != 1 {
                        return Err(chain_err(i, layer, format!("needs a flat input, got {cur:?}")));
                    }
                    cur
                }
            };
            shapes.push(cur.clone());
        }
        if self.layers[last] != LayerSpec::Softmax {
            return Err(chain_err(last, &self.layers[last], "final layer must be softmax".into()));
        }
        Ok(shapes)
    }

    pub fn classes(&self) -> Result<usize> {
        Ok(self.output_shapes()?.last().map(|s| s[0]).unwrap_or(0))
    }

    pub(crate) fn param_shapes(&self) -> Result<Vec<ParamShapes>> {
        let shapes = self.output_shapes()?;
        let mut prev = self.input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            let fan: usize = prev.iter().product();
            out.push(match *layer {
                LayerSpec::MaxoutConv {
                    units, kernel, pieces, ..
                } => Some((vec![units * pieces, prev[0], kernel, kernel], vec![units * pieces])),
                LayerSpec::MaxoutDense { units, pieces } => Some((vec![fan, units * pieces], vec![units * pieces])),
                LayerSpec::Dense { units } => Some((vec![fan, units], vec![units])),
                LayerSpec::MaxPool { .. } | LayerSpec::Softmax => None,
            });
            prev = shape.clone();
        }
        Ok(out)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .param_shapes()?
            .into_iter()
            .flatten()
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .sum())
    }

    /// Number of weight-bearing layers (convolutions, dense layers).
    pub fn depth(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| {
                matches!(
                    l,
                    LayerSpec::MaxoutConv { .. } | LayerSpec::MaxoutDense { .. } | LayerSpec::Dense { .. }
                )
            })
            .count()
    }

    /// Looks up a named architecture. `classes` sets the final layer width
    /// where the preset allows it (the MNIST presets are fixed at 10).
    pub fn preset(name: &str, classes: usize) -> Option<NetworkSpec> {
        Some(match name {
            "mnist-teacher" => mnist_teacher(),
            "mnist-student" => mnist_student(),
            "cifar-teacher" => cifar_teacher(classes),
            "student-1" => cifar_student(1, classes),
            "student-2" => cifar_student(2, classes),
            "student-3" => cifar_student(3, classes),
            "student-4" => cifar_student(4, classes),
            "toy-teacher" => toy_teacher(classes),
            "toy-student" => toy_student(classes),
            _ => return None,
        })
    }

    pub const PRESETS: [&'static str; 9] = [
        "mnist-teacher",
        "mnist-student",
        "cifar-teacher",
        "student-1",
        "student-2",
        "student-3",
        "student-4",
        "toy-teacher",
        "toy-student",
    ];
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, h, w] = self.input;
        writeln!(f, "input {c}x{h}x{w}")?;
        for layer in &self.layers {
            writeln!(f, "{layer}")?;
        }
        Ok(())
    }
}

fn parse_pair(s: &str) -> Option<(usize, usize)> {
    let (a, b) = s.split_once('x')?;
    Some((a.parse().ok()?, b.parse().ok()?))
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut words = line.split_whitespace();
        let kind = words.next().ok_or_else(|| Error::invalid("empty layer line"))?;
        let mut fields = std::collections::BTreeMap::new();
        for w in words {
            let (k, v) = w
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected key=value, got `{w}` in `{line}`")))?;
            fields.insert(k, v);
        }
        let num = |key: &str| -> Result<usize> {
            fields
                .get(key)
                .ok_or_else(|| Error::invalid(format!("`{line}` is missing `{key}`")))?
                .parse()
                .map_err(|_| Error::invalid(format!("`{key}` in `{line}` is not an integer")))
        };
        let pair = |key: &str| -> Result<(usize, usize)> {
            let v = fields
                .get(key)
                .ok_or_else(|| Error::invalid(format!("`{line}` is missing `{key}`")))?;
            parse_pair(v).ok_or_else(|| Error::invalid(format!("`{key}` in `{line}` must look like AxB")))
        };
        let layer = match kind {
            "maxout-conv" => LayerSpec::MaxoutConv {
                units: num("units")?,
                kernel: num("kernel")?,
                pieces: num("pieces")?,
                pad: num("pad")?,
            },
            "max-pool" => LayerSpec::MaxPool {
                window: pair("window")?,
                stride: pair("stride")?,
            },
            "maxout-dense" => LayerSpec::MaxoutDense {
                units: num("units")?,
                pieces: num("pieces")?,
            },
            "dense" => LayerSpec::Dense { units: num("units")? },
            "softmax" => LayerSpec::Softmax,
            other => return Err(Error::invalid(format!("unknown layer kind `{other}`"))),
        };
        Ok(layer)
    }
}

impl FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .flat_map(|l| l.split(';'))
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty());
        let header = lines.next().ok_or_else(|| Error::invalid("empty network spec"))?;
        let dims = header
            .strip_prefix("input ")
            .ok_or_else(|| Error::invalid(format!("spec must start with `input CxHxW`, got `{header}`")))?;
        let parts: Vec<usize> = dims
            .trim()
            .split('x')
            .map(|p| p.parse().map_err(|_| Error::invalid(format!("bad input extents `{dims}`"))))
            .collect::<Result<_>>()?;
        let [c, h, w] = parts[..] else {
            return Err(Error::invalid(format!("input needs three extents, got `{dims}`")));
        };
        let layers = lines.map(str::parse).collect::<Result<Vec<_>>>()?;
        Ok(NetworkSpec::new([c, h, w], layers))
    }
}

use LayerSpec as L;

/// Three maxout convolutions (48-48-24) and a 10-way classifier on 28×28.
/// The 4×4 pools use stride 2 so the chain stays valid at this resolution.
pub fn mnist_teacher() -> NetworkSpec {
    NetworkSpec::new(
        [1, 28, 28],
        vec![
            L::conv(48),
            L::pool(4, 2),
            L::conv(48),
            L::pool(4, 2),
            L::conv(24),
            L::pool(2, 2),
            L::Dense { units: 10 },
            L::Softmax,
        ],
    )
}

/// Twice as deep as [`mnist_teacher`]: pairs of 16-16-12 maxout convolutions.
pub fn mnist_student() -> NetworkSpec {
    NetworkSpec::new(
        [1, 28, 28],
        vec![
            L::conv(16),
            L::conv(16),
            L::pool(4, 2),
            L::conv(16),
            L::conv(16),
            L::pool(4, 2),
            L::conv(12),
            L::conv(12),
            L::pool(2, 2),
            L::Dense { units: 10 },
            L::Softmax,
        ],
    )
}

pub fn cifar_teacher(classes: usize) -> NetworkSpec {
    NetworkSpec::new(
        [3, 32, 32],
        vec![
            L::conv(96),
            L::pool(4, 4),
            L::conv(192),
            L::pool(4, 4),
            L::conv(192),
            L::pool(2, 2),
            L::Dense { units: classes },
            L::Softmax,
        ],
    )
}

/// The four thin-and-deep CIFAR students, smallest (1) to largest (4).
pub fn cifar_student(which: u8, classes: usize) -> NetworkSpec {
    let blocks: [&[usize]; 3] = match which {
        1 => [&[16, 16, 16], &[32, 32, 32], &[48, 48, 64]],
        2 => [&[16, 32, 32], &[48, 64, 80], &[96, 96, 128]],
        3 => [&[32, 48, 64, 64], &[80, 80, 80, 80], &[128, 128, 128]],
        _ => [&[32, 32, 32, 48, 48], &[80, 80, 80, 80, 80, 80], &[128, 128, 128, 128, 128, 128]],
    };
    let mut layers = Vec::new();
    for (b, units) in blocks.iter().enumerate() {
        layers.extend(units.iter().map(|&u| L::conv(u)));
        layers.push(if b == 2 { L::pool(8, 8) } else { L::pool(2, 2) });
    }
    layers.push(L::Dense { units: classes });
    layers.push(L::Softmax);
    NetworkSpec::new([3, 32, 32], layers)
}

/// Desk-scale teacher for 8×8 single-channel images.
pub fn toy_teacher(classes: usize) -> NetworkSpec {
    NetworkSpec::new(
        [1, 8, 8],
        vec![
            L::conv(16),
            L::pool(2, 2),
            L::conv(16),
            L::pool(2, 2),
            L::Dense { units: classes },
            L::Softmax,
        ],
    )
}

/// Deeper, thinner counterpart of [`toy_teacher`].
pub fn toy_student(classes: usize) -> NetworkSpec {
    NetworkSpec::new(
        [1, 8, 8],
        vec![
            L::conv(4),
            L::conv(4),
            L::pool(2, 2),
            L::conv(4),
            L::conv(4),
            L::pool(2, 2),
            L::Dense { units: classes },
            L::Softmax,
        ],
    )
}

/// Approximate parameter counts reported for the full-size presets.
pub fn reference_param_count(name: &str) -> Option<usize> {
    match name {
        "mnist-teacher" => Some(361_000),
        "mnist-student" => Some(30_000),
        "cifar-teacher" => Some(9_000_000),
        "student-4" => Some(2_500_000),
        _ => None,
    }
}

/// Actual vs reported parameter count for a preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub preset: String,
    pub actual: usize,
    pub reference: Option<usize>,
    pub relative_deviation: Option<f64>,
    /// Set when the deviation from the reported figure exceeds 15%.
    pub flagged: bool,
}

pub const PARAM_DEVIATION_LIMIT: f64 = 0.15;

pub fn param_report(name: &str, classes: usize) -> Result<ParamReport> {
    let spec = NetworkSpec::preset(name, classes).ok_or_else(|| Error::invalid(format!("unknown preset `{name}`")))?;
    let actual = spec.param_count()?;
    let reference = reference_param_count(name);
    let relative_deviation = reference.map(|r| (actual as f64 - r as f64).abs() / r as f64);
    Ok(ParamReport {
        preset: name.to_string(),
        actual,
        reference,
        relative_deviation,
        flagged: relative_deviation.is_some_and(|d| d > PARAM_DEVIATION_LIMIT),
    })
}
