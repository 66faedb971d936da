//! Minibatch SGD with momentum for teachers and students, and evaluation
//! under optional test-time perturbation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{mimic_total, total_loss, LossConfig, LossTerms, TeacherTargets};
use crate::nn::{Network, NetworkSpec, ParamGroup, Role};
use crate::perturb::PerturbationSpec;
use crate::tensor::{argmax_slice, Tensor};

const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Distillation plus gradient matching and score margin.
    Robust,
    /// Distillation only.
    Kd,
    /// Cross-entropy plus squared distance to the teacher's output.
    Mimic,
    /// Cross-entropy on labels only.
    Plain,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Robust => "robust",
            Method::Kd => "kd",
            Method::Mimic => "mimic",
            Method::Plain => "plain",
        }
    }

    /// Loss weights this method trains with, derived from `base`.
    pub fn loss_config(self, base: &LossConfig) -> LossConfig {
        match self {
            Method::Robust => *base,
            Method::Kd => base.kd_only(),
            Method::Mimic => base.kd_only(),
            Method::Plain => LossConfig {
                lambda: 0.0,
                ..base.kd_only()
            },
        }
    }

    fn needs_teacher(self) -> bool {
        self != Method::Plain
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        match s {
            "robust" => Ok(Method::Robust),
            "kd" => Ok(Method::Kd),
            "mimic" => Ok(Method::Mimic),
            "plain" => Ok(Method::Plain),
            other => Err(Error::invalid(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub lr_linear: f64,
    pub lr_conv: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub method: Method,
}

impl Default for TrainConfig {
    /// Full-scale settings: batch 128, 500 epochs, learning rate 0.17 for
    /// dense layers and 0.0085 for convolutions, momentum 0.35.
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig::default(),
            lr_linear: 0.17,
            lr_conv: 0.0085,
            momentum: 0.35,
            batch_size: 128,
            epochs: 500,
            seed: 0,
            method: Method::Robust,
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings for the toy networks: learning rates scaled by
    /// 0.1, batch 32, 20 epochs.
    pub fn toy() -> Self {
        TrainConfig {
            lr_linear: 0.017,
            lr_conv: 0.00085,
            batch_size: 32,
            epochs: 20,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr_linear > 0.0 && self.lr_linear.is_finite()) || !(self.lr_conv > 0.0 && self.lr_conv.is_finite()) {
            return Err(Error::invalid("learning rates must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }

    fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Conv => self.lr_conv,
            ParamGroup::Linear => self.lr_linear,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss over the epoch's batches.
    pub loss: f64,
    pub cross_entropy: f64,
    pub l_kd: f64,
    pub l_g: f64,
    pub l_s: f64,
    /// Mean of `f_S − f_T` over the epoch's batches; zero without a teacher.
    pub mean_margin: f64,
    /// Accuracy of the predictions made during the epoch's forward passes.
    pub train_accuracy: f64,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record fields serialize")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: Vec<Tensor>,
    pub groups: Vec<ParamGroup>,
    pub velocity: Vec<Tensor>,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(net: &Network) -> TrainState {
        let params = net.param_values();
        let velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        TrainState {
            params,
            groups: net.params().iter().map(|p| p.group).collect(),
            velocity,
            epoch: 0,
            history: Vec::new(),
        }
    }
}

/// `v ← m·v − lr·g; θ ← θ + v` with the learning rate of each parameter's
/// group.
pub fn sgd_momentum_step(state: &mut TrainState, grads: &[Tensor], cfg: &TrainConfig) -> Result<()> {
    if grads.len() != state.params.len() {
        return Err(Error::invalid(format!(
            "{} gradients for {} parameters",
            grads.len(),
            state.params.len()
        )));
    }
    for (((theta, v), g), group) in state.params.iter_mut().zip(&mut state.velocity).zip(grads).zip(&state.groups) {
        if g.shape() != theta.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_momentum_step",
                lhs: theta.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let lr = cfg.lr(*group);
        *v = v.zip_map(g, "sgd_momentum_step", |v, g| cfg.momentum * v - lr * g)?;
        *theta = theta.add(v)?;
    }
    Ok(())
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Default)]
struct Running {
    batches: usize,
    loss: f64,
    cross_entropy: f64,
    kd: f64,
    gradient_match: f64,
    score_margin: f64,
    mean_margin: f64,
    correct: usize,
    seen: usize,
}

impl Running {
    fn record(&self, epoch: usize) -> EpochRecord {
        let b = self.batches.max(1) as f64;
        EpochRecord {
            epoch,
            loss: self.loss / b,
            cross_entropy: self.cross_entropy / b,
            l_kd: self.kd / b,
            l_g: self.gradient_match / b,
            l_s: self.score_margin / b,
            mean_margin: self.mean_margin / b,
            train_accuracy: self.correct as f64 / self.seen.max(1) as f64,
        }
    }
}

/// Loss value, logged terms and parameter gradients for one batch.
fn batch_gradients(
    net: &Network,
    values: &[Tensor],
    x: &Tensor,
    labels: &[usize],
    targets: &TeacherTargets,
    method: Method,
    loss_cfg: &LossConfig,
) -> Result<(f64, LossTerms, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let params: Vec<_> = values.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let terms = if method == Method::Mimic {
        mimic_total(&mut tape, net, &params, x, labels, targets, loss_cfg.lambda)?
    } else {
        total_loss(&mut tape, net, &params, x, labels, targets, loss_cfg)?
    };
    let loss = tape.value(terms.total).item()?;
    let grads = tape.backward(terms.total, &params, false)?;
    let grads = grads.iter().map(|g| tape.value(*g).clone()).collect();
    Ok((loss, terms, grads))
}

/// Runs `cfg.epochs` epochs on `net`, calling `on_epoch` after each.
fn run(
    net: &mut Network,
    teacher: Option<&Network>,
    data: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if net.classes() != data.classes {
        return Err(Error::invalid(format!(
            "network predicts {} classes, dataset has {}",
            net.classes(),
            data.classes
        )));
    }
    if let Some(t) = teacher {
        if t.classes() != net.classes() {
            return Err(Error::invalid(format!(
                "teacher predicts {} classes, student {}",
                t.classes(),
                net.classes()
            )));
        }
    }
    let loss_cfg = cfg.method.loss_config(&cfg.loss);
    let mut state = TrainState::new(net);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let mut running = Running::default();
        for (batch_index, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = data.batch(idx)?;
            let active_teacher = teacher.filter(|_| cfg.method.needs_teacher());
            let targets = match active_teacher {
                Some(t) => TeacherTargets::compute(t, &x, &labels, &loss_cfg)?,
                None => TeacherTargets::absent(labels.len(), net.classes()),
            };
            let abort = |detail: String| Error::NumericAbort {
                epoch,
                batch: batch_index,
                detail,
            };
            let (loss, terms, grads) =
                batch_gradients(net, &state.params, &x, &labels, &targets, cfg.method, &loss_cfg).map_err(|e| match e {
                    Error::NonFinite { op } => abort(format!("non-finite value in {op}")),
                    other => other,
                })?;
            if !loss.is_finite() {
                return Err(abort(format!(
                    "loss {loss} (cross-entropy {}, L_G {}, L_S {})",
                    terms.cross_entropy, terms.gradient_match, terms.score_margin
                )));
            }
            if let Some(bad) = grads.iter().position(|g| g.data().iter().any(|v| !v.is_finite())) {
                return Err(abort(format!("non-finite gradient for parameter {bad}")));
            }
            sgd_momentum_step(&mut state, &grads, cfg)?;
            net.set_param_values(state.params.clone())?;

            running.batches += 1;
            running.loss += loss;
            running.cross_entropy += terms.cross_entropy;
            running.kd += terms.kd;
            running.gradient_match += terms.gradient_match;
            running.score_margin += terms.score_margin;
            if active_teacher.is_some() {
                running.mean_margin += terms.mean_margin;
            }
            running.correct += terms.correct;
            running.seen += labels.len();
        }
        state.epoch = epoch + 1;
        let record = running.record(epoch);
        on_epoch(&record);
        state.history.push(record);
    }
    Ok(state.history)
}

/// Plain cross-entropy training of a teacher.
pub fn train_teacher(spec: NetworkSpec, data: &Dataset, cfg: &TrainConfig) -> Result<(Network, Vec<EpochRecord>)> {
    let mut net = Network::build(spec, cfg.seed, Role::Teacher)?;
    let cfg = TrainConfig {
        method: Method::Plain,
        ..*cfg
    };
    let history = run(&mut net, None, data, &cfg, &mut |_| {})?;
    Ok((net, history))
}

/// Trains a fresh student against a frozen teacher with `cfg.method`.
pub fn train_student(
    spec: NetworkSpec,
    teacher: &Network,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Network, Vec<EpochRecord>)> {
    train_student_with(spec, teacher, data, cfg, &mut |_| {})
}

/// [`train_student`] with a callback receiving each epoch's record.
pub fn train_student_with(
    spec: NetworkSpec,
    teacher: &Network,
    data: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(Network, Vec<EpochRecord>)> {
    let mut net = Network::build(spec, cfg.seed, Role::Student)?;
    let history = run(&mut net, Some(teacher), data, cfg, on_epoch)?;
    Ok((net, history))
}

/// Continues training an existing network in place.
pub fn continue_training(
    net: &mut Network,
    teacher: Option<&Network>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    run(net, teacher, data, cfg, &mut |_| {})
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub examples: usize,
    pub accuracy: f64,
    /// Mean probability assigned to the true label.
    pub mean_score: f64,
    /// Accuracy per class; `None` for classes absent from the data.
    pub per_class_accuracy: Vec<Option<f64>>,
}

/// Accuracy and mean true-label score of `net` on `data`, with the
/// perturbation applied to every input when given.
pub fn evaluate(net: &Network, data: &Dataset, perturbation: Option<&PerturbationSpec>) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let k = net.classes();
    let n = data.len();
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let chunk_results: Vec<Result<Vec<(usize, f64)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = starts
            .iter()
            .map(|&start| {
                s.spawn(move || {
                    let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
                    let (mut x, labels) = data.batch(&idx)?;
                    if let Some(p) = perturbation {
                        // per-image seeds follow the global example index
                        let images = (0..idx.len())
                            .map(|i| p.apply_seeded(&x.slice_outer(i)?, p.seed ^ idx[i] as u64))
                            .collect::<Result<Vec<_>>>()?;
                        x = Tensor::stack(&images)?;
                    }
                    let (_, probs) = net.predict(&x)?;
                    Ok(probs
                        .data()
                        .chunks(k)
                        .zip(&labels)
                        .map(|(row, &y)| (argmax_slice(row), row[y]))
                        .collect())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut correct = 0usize;
    let mut score = 0.0;
    let mut per_class = vec![(0usize, 0usize); data.classes];
    let mut i = 0;
    for chunk in chunk_results {
        for (pred, s) in chunk? {
            let y = data.labels[i];
            let hit = pred == y;
            correct += hit as usize;
            score += s;
            per_class[y].0 += hit as usize;
            per_class[y].1 += 1;
            i += 1;
        }
    }
    Ok(Metrics {
        examples: n,
        accuracy: correct as f64 / n as f64,
        mean_score: score / n as f64,
        per_class_accuracy: per_class
            .into_iter()
            .map(|(c, t)| (t > 0).then(|| c as f64 / t as f64))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{toy_dataset, ToyKind};
    use crate::nn::spec::{toy_student, toy_teacher};

    fn scalar_state(theta: f64, group: ParamGroup) -> TrainState {
        TrainState {
            params: vec![Tensor::scalar(theta)],
            groups: vec![group],
            velocity: vec![Tensor::scalar(0.0)],
            epoch: 0,
            history: Vec::new(),
        }
    }

    fn sgd(lr: f64, momentum: f64) -> TrainConfig {
        TrainConfig {
            lr_linear: lr,
            lr_conv: lr,
            momentum,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn momentum_step_arithmetic() {
        let cfg = sgd(0.1, 0.35);
        let mut state = scalar_state(0.0, ParamGroup::Linear);
        let g = [Tensor::scalar(1.0)];
        sgd_momentum_step(&mut state, &g, &cfg).unwrap();
        assert_eq!(state.velocity[0].data(), &[-0.1]);
        assert_eq!(state.params[0].data(), &[-0.1]);
        sgd_momentum_step(&mut state, &g, &cfg).unwrap();
        assert!((state.velocity[0].data()[0] + 0.135).abs() < 1e-15);
        assert!((state.params[0].data()[0] + 0.235).abs() < 1e-15);
    }

    #[test]
    fn momentum_step_uses_group_rates() {
        let cfg = TrainConfig::default();
        let mut conv = scalar_state(0.0, ParamGroup::Conv);
        let mut linear = scalar_state(0.0, ParamGroup::Linear);
        sgd_momentum_step(&mut conv, &[Tensor::scalar(1.0)], &cfg).unwrap();
        sgd_momentum_step(&mut linear, &[Tensor::scalar(1.0)], &cfg).unwrap();
        assert_eq!(conv.params[0].data(), &[-0.0085]);
        assert_eq!(linear.params[0].data(), &[-0.17]);
    }

    #[test]
    fn momentum_step_rejects_mismatched_gradients() {
        let cfg = sgd(0.1, 0.35);
        let mut state = scalar_state(0.0, ParamGroup::Linear);
        assert!(sgd_momentum_step(&mut state, &[Tensor::zeros([2])], &cfg).is_err());
        assert!(sgd_momentum_step(&mut state, &[], &cfg).is_err());
    }

    #[test]
    fn momentum_descends_a_quadratic() {
        let cfg = sgd(0.1, 0.35);
        let mut state = scalar_state(1.0, ParamGroup::Linear);
        for _ in 0..50 {
            let theta = state.params[0].data()[0];
            sgd_momentum_step(&mut state, &[Tensor::scalar(2.0 * theta)], &cfg).unwrap();
        }
        assert!(state.params[0].data()[0].abs() < 1e-3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::toy().validate().is_ok());
        assert!(TrainConfig { momentum: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr_conv: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        let text = r#"{"method":"kd","epochs":3}"#;
        let cfg: TrainConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.method, Method::Kd);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, 128);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch":3}"#).is_err());
    }

    #[test]
    fn methods_select_loss_terms() {
        let base = LossConfig::default();
        assert_eq!(Method::Robust.loss_config(&base), base);
        let kd = Method::Kd.loss_config(&base);
        assert_eq!((kd.lambda, kd.c1, kd.c2), (1.0, 0.0, 0.0));
        let plain = Method::Plain.loss_config(&base);
        assert_eq!((plain.lambda, plain.c1, plain.c2), (0.0, 0.0, 0.0));
        for m in [Method::Robust, Method::Kd, Method::Mimic, Method::Plain] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("fancy".parse::<Method>().is_err());
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let data = toy_dataset(ToyKind::BlobDigits, 20, 1).unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::toy() };
        let (net, history) = train_teacher(toy_teacher(10), &data, &cfg).unwrap();
        let fresh = Network::build(toy_teacher(10), cfg.seed, Role::Teacher).unwrap();
        assert_eq!(net.param_values(), fresh.param_values());
        assert!(history.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_dataset(ToyKind::BlobDigits, 64, 2).unwrap();
        let cfg = TrainConfig { epochs: 2, seed: 5, ..TrainConfig::toy() };
        let (a, ha) = train_teacher(toy_teacher(10), &data, &cfg).unwrap();
        let (b, hb) = train_teacher(toy_teacher(10), &data, &cfg).unwrap();
        assert_eq!(a.param_values(), b.param_values());
        assert_eq!(ha, hb);
        let robust = TrainConfig { method: Method::Robust, epochs: 1, ..cfg };
        let (s1, _) = train_student(toy_student(10), &a, &data, &robust).unwrap();
        let (s2, _) = train_student(toy_student(10), &a, &data, &robust).unwrap();
        assert_eq!(s1.param_values(), s2.param_values());
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let data = toy_dataset(ToyKind::BlobDigits, 20, 1).unwrap();
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::toy() };
        let teacher = Network::build(toy_teacher(3), 0, Role::Teacher).unwrap();
        assert!(train_student(toy_student(10), &teacher, &data, &cfg).is_err());
        assert!(train_teacher(toy_teacher(3), &data, &cfg).is_err());
    }

    #[test]
    fn divergence_aborts_with_location() {
        let data = toy_dataset(ToyKind::BlobDigits, 64, 3).unwrap();
        let cfg = TrainConfig {
            lr_linear: 1e150,
            lr_conv: 1e150,
            epochs: 3,
            ..TrainConfig::toy()
        };
        match train_teacher(toy_teacher(10), &data, &cfg) {
            Err(Error::NumericAbort { epoch, .. }) => assert!(epoch < 3),
            other => panic!("expected a numeric abort, got {:?}", other.map(|(_, h)| h)),
        }
    }

    #[test]
    fn epoch_records_serialize_as_json_lines() {
        let data = toy_dataset(ToyKind::BlobDigits, 32, 4).unwrap();
        let cfg = TrainConfig { epochs: 2, ..TrainConfig::toy() };
        let (teacher, _) = train_teacher(toy_teacher(10), &data, &cfg).unwrap();
        let mut lines = Vec::new();
        let robust = TrainConfig { method: Method::Robust, ..cfg };
        let (_, history) =
            train_student_with(toy_student(10), &teacher, &data, &robust, &mut |r| lines.push(r.to_json_line())).unwrap();
        assert_eq!(lines.len(), 2);
        for (line, record) in lines.iter().zip(&history) {
            assert!(!line.contains('\n'));
            let back: EpochRecord = serde_json::from_str(line).unwrap();
            assert_eq!(&back, record);
            assert!(record.l_g > 0.0 && record.l_s >= 0.0);
        }
    }

    #[test]
    fn evaluate_reports_per_class_accuracy() {
        let data = toy_dataset(ToyKind::BlobDigits, 50, 5).unwrap();
        let net = Network::build(toy_teacher(10), 0, Role::Teacher).unwrap();
        let m = evaluate(&net, &data, None).unwrap();
        assert_eq!(m.examples, 50);
        assert_eq!(m.per_class_accuracy.len(), 10);
        let counts = data.class_counts();
        let weighted: f64 = m
            .per_class_accuracy
            .iter()
            .zip(&counts)
            .map(|(a, &c)| a.unwrap_or(0.0) * c as f64)
            .sum();
        assert!((weighted / 50.0 - m.accuracy).abs() < 1e-12);
        assert!(m.mean_score > 0.0 && m.mean_score < 1.0);
        assert_eq!(evaluate(&net, &data, None).unwrap(), m);
    }
}
