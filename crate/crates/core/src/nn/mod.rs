//! Maxout networks: parameter sets built from a [`NetworkSpec`] and their
//! differentiable forward pass.

pub mod checkpoint;
pub mod spec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub use spec::{param_report, LayerSpec, NetworkSpec, ParamReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Teacher,
    Student,
}

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Conv,
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Param>,
    role: Role,
}

/// Result of a forward pass: pre-softmax logits `[N×k]`, probabilities
/// `[N×k]`, and the output of every layer.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    pub probs: Var,
    pub taps: Vec<Var>,
}

impl Network {
    /// Fan-in scaled uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn build(spec: NetworkSpec, seed: u64, role: Role) -> Result<Network> {
        let shapes = spec.param_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (i, (layer, shape)) in spec.layers.iter().zip(shapes).enumerate() {
            let Some((w_shape, b_shape)) = shape else { continue };
            let (fan_in, group) = match layer {
                LayerSpec::MaxoutConv { .. } => (w_shape[1] * w_shape[2] * w_shape[3], ParamGroup::Conv),
                _ => (w_shape[0], ParamGroup::Linear),
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let n: usize = w_shape.iter().product();
            let weights = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            params.push(Param {
                name: format!("layer{i}.weight"),
                group,
                value: Tensor::new(w_shape, weights)?,
            });
            params.push(Param {
                name: format!("layer{i}.bias"),
                group,
                value: Tensor::zeros(b_shape),
            });
        }
        Ok(Network { spec, params, role })
    }

    /// Reassembles a network from stored parameters, checking every shape.
    pub fn from_params(spec: NetworkSpec, role: Role, values: Vec<(String, Tensor)>) -> Result<Network> {
        let template = Network::build(spec, 0, role)?;
        if template.params.len() != values.len() {
            return Err(Error::invalid(format!(
                "spec needs {} parameter tensors, got {}",
                template.params.len(),
                values.len()
            )));
        }
        let mut params = Vec::with_capacity(values.len());
        for (t, (name, value)) in template.params.into_iter().zip(values) {
            if t.name != name || t.value.shape() != value.shape() {
                return Err(Error::invalid(format!(
                    "parameter `{name}` {:?} does not match expected `{}` {:?}",
                    value.shape(),
                    t.name,
                    t.value.shape()
                )));
            }
            params.push(Param { value, ..t });
        }
        Ok(Network {
            spec: template.spec,
            params,
            role,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn classes(&self) -> usize {
        self.spec.classes().unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param_values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn set_param_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::invalid("parameter count mismatch"));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::ShapeMismatch {
                    op: "set_param_values",
                    lhs: p.value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            p.value = v;
        }
        Ok(())
    }

    /// Registers the parameters on a tape, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect()
    }

    /// Forward pass for a batch `x[N×C×H×W]` using parameters bound by
    /// [`Network::bind`].
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Forward> {
        let in_shape = tape.shape(x).to_vec();
        if in_shape.len() != 4 || in_shape[1..] != self.spec.input {
            return Err(Error::shape(
                "forward",
                format!("expected [N, {:?}], got {in_shape:?}", self.spec.input),
            ));
        }
        if params.len() != self.params.len() {
            return Err(Error::invalid("bound parameter count does not match network"));
        }
        let n = in_shape[0];
        let mut h = x;
        let mut taps = Vec::with_capacity(self.spec.layers.len());
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter list checked above");
        let mut logits = None;
        for layer in &self.spec.layers {
            h = match *layer {
                LayerSpec::MaxoutConv { pieces, pad, .. } => {
                    let (w, b) = (next(), next());
                    let y = tape.conv2d(h, w, pad)?;
                    let y = tape.add_channel_bias(y, b)?;
                    tape.maxout(y, pieces)?
                }
                LayerSpec::MaxPool { window, stride } => tape.max_pool(h, window, stride)?,
                LayerSpec::MaxoutDense { pieces, .. } => {
                    let (w, b) = (next(), next());
                    let y = dense(tape, h, w, b, n)?;
                    tape.maxout(y, pieces)?
                }
                LayerSpec::Dense { .. } => {
                    let (w, b) = (next(), next());
                    dense(tape, h, w, b, n)?
                }
                LayerSpec::Softmax => {
                    logits = Some(h);
                    tape.softmax(h)?
                }
            };
            taps.push(h);
        }
        let logits = logits.ok_or_else(|| Error::invalid("network has no softmax layer"))?;
        Ok(Forward {
            logits,
            probs: h,
            taps,
        })
    }

    /// Logits and probabilities for a batch `[N×C×H×W]` or a single image
    /// `[C×H×W]`, without keeping a graph.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let batch = if x.rank() == 3 {
            x.reshape([&[1usize][..], x.shape()].concat())?
        } else {
            x.clone()
        };
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let xv = tape.constant(batch);
        let out = self.forward(&mut tape, &params, xv)?;
        Ok((tape.value(out.logits).clone(), tape.value(out.probs).clone()))
    }

    /// True-label probabilities of `softmax(a / temperature)` for a batch and
    /// their gradients with respect to each input, `[N]` and `[N×C×H×W]`.
    /// Temperature 1 gives the raw softmax scores.
    pub fn score_gradient(&self, x: &Tensor, labels: &[usize], temperature: f64) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let xv = tape.leaf(x.clone(), true);
        let out = self.forward(&mut tape, &params, xv)?;
        let scores = softened_scores(&mut tape, &out, labels, temperature)?;
        let total = tape.sum(scores)?;
        let grad = tape.backward(total, &[xv], false)?[0];
        Ok((tape.value(scores).clone(), tape.value(grad).clone()))
    }
}

/// `softmax(a / temperature)[n, y_n]` on the tape, reusing the forward
/// probabilities when the temperature is 1.
pub fn softened_scores(tape: &mut Tape, out: &Forward, labels: &[usize], temperature: f64) -> Result<Var> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let probs = if temperature == 1.0 {
        out.probs
    } else {
        let a = tape.scale(out.logits, 1.0 / temperature)?;
        tape.softmax(a)?
    };
    tape.select_labels(probs, labels)
}

fn dense(tape: &mut Tape, h: Var, w: Var, b: Var, n: usize) -> Result<Var> {
    let flat = if tape.shape(h).len() == 2 {
        h
    } else {
        let d = tape.value(h).len() / n;
        tape.reshape(h, vec![n, d])?
    };
    let y = tape.matmul(flat, w)?;
    tape.add_channel_bias(y, b)
}

/// Maxout over the leading axis of `groups[G·P × …]`, pieces of a unit
/// contiguous, giving `[G × …]`. Ties go to the lowest piece.
pub fn maxout(groups: &Tensor, pieces: usize) -> Result<Tensor> {
    if pieces == 0 {
        return Err(Error::invalid("maxout needs at least one piece"));
    }
    let shape = groups.shape();
    let (&lead, rest) = shape
        .split_first()
        .ok_or_else(|| Error::shape("maxout", "scalar input"))?;
    if lead % pieces != 0 {
        return Err(Error::shape("maxout", format!("{lead} not divisible into {pieces} pieces")));
    }
    let inner = rest.iter().product();
    let idx = tensor::group_max_indices(groups, 1, lead / pieces, pieces, inner);
    let mut out_shape = shape.to_vec();
    out_shape[0] = lead / pieces;
    tensor::gather(groups, &idx, out_shape)
}

/// Differentiable true-label score `o[n, y_n]` for a batch of probability
/// rows: `f_S` or `f_T` depending on which network produced `o`.
pub fn true_label_score(tape: &mut Tape, o: Var, labels: &[usize]) -> Result<Var> {
    tape.select_labels(o, labels)
}

/// `o[y]` for a single probability vector.
pub fn true_label_value(o: &Tensor, y: usize) -> Result<f64> {
    let k = o.len();
    if y >= k {
        return Err(Error::LabelOutOfRange { label: y, classes: k });
    }
    Ok(o.data()[y])
}
