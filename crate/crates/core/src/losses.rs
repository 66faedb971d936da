//! Training objectives: cross-entropy, softened distillation, output mimic,
//! score margin, input-gradient matching and their weighted combination.
//!
//! Single-example functions work on plain tensors. The `*_node` functions
//! and [`total_loss`] build the same quantities on a tape for a batch so
//! they can be differentiated with respect to student parameters.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_rows, softmax_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{softened_scores, Forward, Network};
use crate::tensor::{argmax_slice, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the softened distillation term.
    pub lambda: f64,
    /// Softening temperature.
    pub tau: f64,
    /// Score margin the student must keep over the teacher.
    pub gamma: f64,
    /// Weight of the gradient-matching term.
    pub c1: f64,
    /// Weight of the score-margin term.
    pub c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            tau: 3.0,
            gamma: 0.05,
            c1: 1.0,
            c2: 1.0,
        }
    }
}

impl LossConfig {
    /// Plain cross-entropy: every auxiliary weight zero.
    pub fn plain() -> Self {
        LossConfig {
            lambda: 0.0,
            c1: 0.0,
            c2: 0.0,
            ..Self::default()
        }
    }

    /// Distillation only, no robustness terms.
    pub fn kd_only(self) -> Self {
        LossConfig {
            c1: 0.0,
            c2: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.tau > 0.0, "tau must be > 0"),
            (self.gamma > 0.0, "gamma must be > 0"),
            (self.lambda >= 0.0, "lambda must be >= 0"),
            (self.c1 >= 0.0, "c1 must be >= 0"),
            (self.c2 >= 0.0, "c2 must be >= 0"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::invalid(msg));
            }
        }
        let all = [self.tau, self.gamma, self.lambda, self.c1, self.c2];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("loss coefficients must be finite"));
        }
        Ok(())
    }
}

fn check_label(k: usize, y: usize) -> Result<()> {
    if y >= k {
        return Err(Error::LabelOutOfRange { label: y, classes: k });
    }
    Ok(())
}

fn as_row(t: &Tensor) -> Result<Tensor> {
    t.reshape([1, t.len()])
}

/// `−ln o[y]` for a probability vector.
pub fn cross_entropy(o: &Tensor, y: usize) -> Result<f64> {
    check_label(o.len(), y)?;
    let p = o.data()[y];
    if p <= 0.0 {
        return Err(Error::invalid(format!("probability of label {y} is {p}, log undefined")));
    }
    Ok(-p.ln())
}

/// `softmax(a / τ)` for a logit vector or a batch of rows.
pub fn soften(a: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let rows = if a.rank() == 2 { a.clone() } else { as_row(a)? };
    let scaled = if tau == 1.0 { rows } else { rows.scale(1.0 / tau)? };
    softmax_rows(&scaled)?.reshape(a.shape())
}

/// `−Σ t ln softmax(a / τ)`: cross-entropy of softened student logits `a`
/// against fixed soft targets `t`.
fn soft_cross_entropy(a: &Tensor, target: &Tensor, tau: f64) -> Result<f64> {
    let scaled = if tau == 1.0 { as_row(a)? } else { as_row(a)?.scale(1.0 / tau)? };
    let log_s = log_softmax_rows(&scaled)?;
    Ok(-target.data().iter().zip(log_s.data()).map(|(t, l)| t * l).sum::<f64>())
}

/// Cross-entropy on the student output plus `λ` times the cross-entropy of
/// the softened student against the softened teacher.
pub fn kd_loss(o_s: &Tensor, a_s: &Tensor, a_t: &Tensor, y: usize, cfg: &LossConfig) -> Result<f64> {
    let ce = cross_entropy(o_s, y)?;
    if cfg.lambda == 0.0 {
        return Ok(ce);
    }
    if a_s.shape() != a_t.shape() {
        return Err(Error::ShapeMismatch {
            op: "kd_loss",
            lhs: a_s.shape().to_vec(),
            rhs: a_t.shape().to_vec(),
        });
    }
    let target = soften(a_t, cfg.tau)?;
    Ok(ce + cfg.lambda * soft_cross_entropy(a_s, &target, cfg.tau)?)
}

/// Cross-entropy plus `λ/2 ‖o_S − o_T‖²`.
pub fn mimic_loss(o_s: &Tensor, o_t: &Tensor, y: usize, lambda: f64) -> Result<f64> {
    let diff = o_s.sub(o_t)?;
    Ok(cross_entropy(o_s, y)? + 0.5 * lambda * diff.dot(&diff)?)
}

/// Mean of `max(0, γ + f_T − f_S)` over paired scores.
pub fn score_margin_loss(f_s: &[f64], f_t: &[f64], gamma: f64) -> Result<f64> {
    if f_s.is_empty() {
        return Err(Error::invalid("score margin loss of an empty batch"));
    }
    if f_s.len() != f_t.len() {
        return Err(Error::ShapeMismatch {
            op: "score_margin_loss",
            lhs: vec![f_s.len()],
            rhs: vec![f_t.len()],
        });
    }
    let total: f64 = f_s.iter().zip(f_t).map(|(s, t)| (gamma + (t - s)).max(0.0)).sum();
    Ok(total / f_s.len() as f64)
}

/// `L_KD + C1·L_G + C2·L_S` from precomputed terms.
pub fn combine_terms(kd: f64, gradient_match: f64, score_margin: f64, cfg: &LossConfig) -> f64 {
    let mut total = kd;
    if cfg.c1 != 0.0 {
        total += cfg.c1 * gradient_match;
    }
    if cfg.c2 != 0.0 {
        total += cfg.c2 * score_margin;
    }
    total
}

/// Everything the objective needs from the frozen teacher for one batch.
#[derive(Clone, Debug)]
pub struct TeacherTargets {
    /// Raw output probabilities `[N×k]`.
    pub probs: Tensor,
    /// Softened probabilities `[N×k]`.
    pub soft: Tensor,
    /// Raw true-label scores `[N]`.
    pub scores: Tensor,
    /// Input gradient of the softened true-label score `[N×C×H×W]`,
    /// present when the gradient-matching term is active.
    pub soft_gradient: Option<Tensor>,
}

impl TeacherTargets {
    pub fn compute(teacher: &Network, x: &Tensor, labels: &[usize], cfg: &LossConfig) -> Result<TeacherTargets> {
        let (logits, probs) = teacher.predict(x)?;
        let soft = soften(&logits, cfg.tau)?;
        let scores = Tensor::from_vec(
            labels
                .iter()
                .enumerate()
                .map(|(n, &y)| {
                    check_label(probs.shape()[1], y)?;
                    Ok(probs.data()[n * probs.shape()[1] + y])
                })
                .collect::<Result<_>>()?,
        )?;
        let soft_gradient = if cfg.c1 != 0.0 {
            Some(teacher.score_gradient(x, labels, cfg.tau)?.1)
        } else {
            None
        };
        Ok(TeacherTargets {
            probs,
            soft,
            scores,
            soft_gradient,
        })
    }

    /// Zero targets for `n` examples over `k` classes, for objectives that
    /// use no teacher term.
    pub fn absent(n: usize, k: usize) -> TeacherTargets {
        TeacherTargets {
            probs: Tensor::zeros([n, k]),
            soft: Tensor::zeros([n, k]),
            scores: Tensor::zeros([n]),
            soft_gradient: None,
        }
    }
}

/// Mean cross-entropy of a batch from its logits.
pub fn cross_entropy_node(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let log_p = tape.log_softmax(logits)?;
    let picked = tape.select_labels(log_p, labels)?;
    let m = tape.mean(picked)?;
    tape.neg(m)
}

/// Mean over the batch of `−Σ t ln softmax(a / τ)` against fixed targets.
pub fn soft_cross_entropy_node(tape: &mut Tape, logits: Var, target: &Tensor, tau: f64) -> Result<Var> {
    let n = tape.shape(logits)[0] as f64;
    let scaled = if tau == 1.0 { logits } else { tape.scale(logits, 1.0 / tau)? };
    let log_s = tape.log_softmax(scaled)?;
    let t = tape.constant(target.clone());
    let prod = tape.mul(t, log_s)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / n)
}

/// Mean over the batch of `λ/2 ‖o_S − o_T‖²`.
pub fn mimic_node(tape: &mut Tape, probs: Var, teacher_probs: &Tensor, lambda: f64) -> Result<Var> {
    let n = tape.shape(probs)[0] as f64;
    let t = tape.constant(teacher_probs.clone());
    let d = tape.sub(probs, t)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 0.5 * lambda / n)
}

/// Mean over the batch of `max(0, γ + f_T − f_S)`.
pub fn score_margin_node(tape: &mut Tape, f_s: Var, f_t: &Tensor, gamma: f64) -> Result<Var> {
    let t = tape.constant(f_t.clone());
    let gap = tape.sub(t, f_s)?;
    let shifted = tape.offset(gap, gamma)?;
    let hinge = tape.relu(shifted)?;
    tape.mean(hinge)
}

/// Mean over the batch of `‖∇_x s_S − g_T‖²`, where `s_S` is the student's
/// softened true-label score and `g_T` the teacher's precomputed input
/// gradient. `x` must be a gradient-tracking leaf feeding `out`.
pub fn gradient_match_node(
    tape: &mut Tape,
    out: &Forward,
    x: Var,
    labels: &[usize],
    teacher_gradient: &Tensor,
    tau: f64,
) -> Result<Var> {
    let n = tape.shape(x)[0] as f64;
    let scores = softened_scores(tape, out, labels, tau)?;
    let total = tape.sum(scores)?;
    let grad = tape.backward(total, &[x], true)?[0];
    let t = tape.constant(teacher_gradient.clone());
    let d = tape.sub(grad, t)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / n)
}

/// Loss node plus the value of each term for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub cross_entropy: f64,
    /// `L_KD`: cross-entropy plus the weighted distillation term.
    pub kd: f64,
    pub gradient_match: f64,
    pub score_margin: f64,
    /// Mean of `f_S − f_T` over the batch.
    pub mean_margin: f64,
    /// Examples whose student prediction matches the label.
    pub correct: usize,
}

fn student_pass(tape: &mut Tape, student: &Network, params: &[Var], x: &Tensor, track_input: bool) -> Result<(Var, Forward)> {
    let xv = tape.leaf(x.clone(), track_input);
    let out = student.forward(tape, params, xv)?;
    Ok((xv, out))
}

fn mean_margin(tape: &Tape, out: &Forward, labels: &[usize], teacher_scores: &Tensor) -> f64 {
    let probs = tape.value(out.probs);
    let k = probs.shape()[1];
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(n, &y)| probs.data()[n * k + y] - teacher_scores.data()[n])
        .sum();
    total / labels.len() as f64
}

fn count_correct(tape: &Tape, out: &Forward, labels: &[usize]) -> usize {
    let probs = tape.value(out.probs);
    let k = probs.shape()[1];
    probs
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax_slice(row) == y)
        .count()
}

/// `L_KD + C1·L_G + C2·L_S` for a batch as one node on `tape`, with student
/// parameters `params` bound by [`Network::bind`]. Terms with a zero weight
/// are not built.
pub fn total_loss(
    tape: &mut Tape,
    student: &Network,
    params: &[Var],
    x: &Tensor,
    labels: &[usize],
    teacher: &TeacherTargets,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    let (xv, out) = student_pass(tape, student, params, x, cfg.c1 != 0.0)?;
    let ce = cross_entropy_node(tape, out.logits, labels)?;
    let ce_value = tape.value(ce).item()?;
    let mut total = ce;
    if cfg.lambda != 0.0 {
        let soft = soft_cross_entropy_node(tape, out.logits, &teacher.soft, cfg.tau)?;
        let weighted = tape.scale(soft, cfg.lambda)?;
        total = tape.add(total, weighted)?;
    }
    let kd = tape.value(total).item()?;
    let mut gradient_match = 0.0;
    if cfg.c1 != 0.0 {
        let target = teacher
            .soft_gradient
            .as_ref()
            .ok_or_else(|| Error::invalid("teacher targets lack the input gradient"))?;
        let g = gradient_match_node(tape, &out, xv, labels, target, cfg.tau)?;
        gradient_match = tape.value(g).item()?;
        let weighted = tape.scale(g, cfg.c1)?;
        total = tape.add(total, weighted)?;
    }
    let mut score_margin = 0.0;
    if cfg.c2 != 0.0 {
        let f_s = tape.select_labels(out.probs, labels)?;
        let s = score_margin_node(tape, f_s, &teacher.scores, cfg.gamma)?;
        score_margin = tape.value(s).item()?;
        let weighted = tape.scale(s, cfg.c2)?;
        total = tape.add(total, weighted)?;
    }
    Ok(LossTerms {
        total,
        cross_entropy: ce_value,
        kd,
        gradient_match,
        score_margin,
        mean_margin: mean_margin(tape, &out, labels, &teacher.scores),
        correct: count_correct(tape, &out, labels),
    })
}

/// Cross-entropy plus `λ/2 ‖o_S − o_T‖²` for a batch.
pub fn mimic_total(
    tape: &mut Tape,
    student: &Network,
    params: &[Var],
    x: &Tensor,
    labels: &[usize],
    teacher: &TeacherTargets,
    lambda: f64,
) -> Result<LossTerms> {
    let (_, out) = student_pass(tape, student, params, x, false)?;
    let ce = cross_entropy_node(tape, out.logits, labels)?;
    let ce_value = tape.value(ce).item()?;
    let mut total = ce;
    if lambda != 0.0 {
        let m = mimic_node(tape, out.probs, &teacher.probs, lambda)?;
        total = tape.add(total, m)?;
    }
    Ok(LossTerms {
        total,
        cross_entropy: ce_value,
        kd: tape.value(total).item()?,
        gradient_match: 0.0,
        score_margin: 0.0,
        mean_margin: mean_margin(tape, &out, labels, &teacher.scores),
        correct: count_correct(tape, &out, labels),
    })
}

/// Value of the gradient-matching term between two networks on a batch,
/// without building a student graph.
pub fn gradient_match_value(a: &Network, b: &Network, x: &Tensor, labels: &[usize], tau: f64) -> Result<f64> {
    let ga = a.score_gradient(x, labels, tau)?.1;
    let gb = b.score_gradient(x, labels, tau)?.1;
    let d = ga.sub(&gb)?;
    Ok(d.dot(&d)? / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vec(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    /// `ln x = 2 atanh((x − 1)/(x + 1))` summed as a compensated series.
    fn ln_series(x: f64) -> f64 {
        let u = (x - 1.0) / (x + 1.0);
        let u2 = u * u;
        let (mut sum, mut comp, mut term) = (0.0f64, 0.0f64, u);
        let mut k = 1.0;
        while term.abs() > 1e-300 && k < 20_000.0 {
            let y = term / k - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
            term *= u2;
            k += 2.0;
        }
        2.0 * sum
    }

    fn random_probs(rng: &mut ChaCha8Rng, k: usize) -> Tensor {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let z: f64 = raw.iter().sum();
        vec(&raw.iter().map(|v| v / z).collect::<Vec<_>>())
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(&vec(&[0.5, 0.5]), 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(cross_entropy(&vec(&[0.0, 1.0, 0.0]), 1).unwrap(), 0.0);
        assert!(cross_entropy(&vec(&[0.0, 1.0]), 0).is_err());
        assert!(matches!(
            cross_entropy(&vec(&[0.5, 0.5]), 2),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn cross_entropy_matches_series_log() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let o = random_probs(&mut rng, 5);
            let y = rng.random_range(0..5);
            let want = -ln_series(o.data()[y]);
            let got = cross_entropy(&o, y).unwrap();
            assert!((got - want).abs() <= 1e-14 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn soften_examples() {
        let a = vec(&[0.3, -1.2, 2.0]);
        assert_eq!(soften(&a, 1.0).unwrap(), softmax_rows(&as_row(&a).unwrap()).unwrap().reshape([3]).unwrap());
        for v in soften(&a, 1e6).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
        let e = std::f64::consts::E;
        let s = soften(&vec(&[2.0, 0.0]), 2.0).unwrap();
        assert!((s.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((s.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((s.data()[0] - 0.73106).abs() < 1e-5);
        assert!(soften(&a, 0.0).is_err());
        assert!(soften(&a, -1.0).is_err());
    }

    #[test]
    fn kd_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a_s = vec(&(0..4).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>());
        let a_t = vec(&(0..4).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>());
        let o_s = soften(&a_s, 1.0).unwrap();
        let zero = LossConfig { lambda: 0.0, ..LossConfig::default() };
        assert_eq!(kd_loss(&o_s, &a_s, &a_t, 1, &zero).unwrap(), cross_entropy(&o_s, 1).unwrap());

        let same = LossConfig { lambda: 1.0, tau: 1.0, ..LossConfig::default() };
        let entropy: f64 = o_s.data().iter().map(|p| -p * p.ln()).sum();
        let got = kd_loss(&o_s, &a_s, &a_s, 2, &same).unwrap() - cross_entropy(&o_s, 2).unwrap();
        assert!((got - entropy).abs() < 1e-12);

        let cfg = LossConfig { lambda: 0.5, tau: 3.0, ..LossConfig::default() };
        let s_soft = soften(&a_s, 3.0).unwrap();
        let t_soft = soften(&a_t, 3.0).unwrap();
        let mut cross = 0.0;
        for i in 0..4 {
            cross += t_soft.data()[i] * cross_entropy(&s_soft, i).unwrap();
        }
        let want = cross_entropy(&o_s, 0).unwrap() + 0.5 * cross;
        assert!((kd_loss(&o_s, &a_s, &a_t, 0, &cfg).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn mimic_examples() {
        let o = vec(&[0.2, 0.3, 0.5]);
        assert_eq!(mimic_loss(&o, &o, 2, 3.0).unwrap(), cross_entropy(&o, 2).unwrap());
        let t = vec(&[0.2, 0.1, 0.7]);
        let got = mimic_loss(&o, &t, 1, 2.0).unwrap();
        assert!((got - (cross_entropy(&o, 1).unwrap() + 0.08)).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (a, b) = (random_probs(&mut rng, 6), random_probs(&mut rng, 6));
        let mut sq = 0.0;
        for i in 0..6 {
            sq += (a.data()[i] - b.data()[i]) * (a.data()[i] - b.data()[i]);
        }
        let want = -a.data()[4].ln() + 0.7 / 2.0 * sq;
        assert!((mimic_loss(&a, &b, 4, 0.7).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn score_margin_examples() {
        assert_eq!(score_margin_loss(&[0.95], &[0.8], 0.1).unwrap(), 0.0);
        assert!((score_margin_loss(&[0.82], &[0.8], 0.1).unwrap() - 0.08).abs() < 1e-12);
        assert_eq!(score_margin_loss(&[0.4, 0.7], &[0.4, 0.7], 0.05).unwrap(), 0.05);
        assert!(score_margin_loss(&[], &[], 0.1).is_err());
        assert!(score_margin_loss(&[0.1], &[0.1, 0.2], 0.1).is_err());
    }

    #[test]
    fn combined_from_precomputed_terms() {
        let cfg = LossConfig { c1: 10.0, c2: 1.0, ..LossConfig::default() };
        assert!((combine_terms(0.9, 0.02, 0.05, &cfg) - 1.15).abs() < 1e-12);
        let off = LossConfig { c1: 0.0, c2: 0.0, ..cfg };
        assert_eq!(combine_terms(0.9, 0.02, 0.05, &off), 0.9);
    }

    #[test]
    fn config_validation_and_defaults() {
        let d = LossConfig::default();
        assert_eq!((d.tau, d.lambda, d.gamma, d.c1, d.c2), (3.0, 1.0, 0.05, 1.0, 1.0));
        d.validate().unwrap();
        assert!(LossConfig { tau: 0.0, ..d }.validate().is_err());
        assert!(LossConfig { gamma: 0.0, ..d }.validate().is_err());
        assert!(LossConfig { c1: -1.0, ..d }.validate().is_err());
        assert!(LossConfig { lambda: f64::NAN, ..d }.validate().is_err());
        let parsed: LossConfig = serde_json::from_str(r#"{"tau": 2.0}"#).unwrap();
        assert_eq!(parsed, LossConfig { tau: 2.0, ..d });
        assert!(serde_json::from_str::<LossConfig>(r#"{"beta": 2.0}"#).is_err());
    }

    proptest! {
        #[test]
        fn soften_keeps_the_argmax(seed in 0u64..1000, tau in 0.05f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = vec(&(0..7).map(|_| rng.random_range(-5.0..5.0)).collect::<Vec<_>>());
            prop_assert_eq!(soften(&a, tau).unwrap().argmax(), a.argmax());
        }

        #[test]
        fn score_margin_is_a_hinge(
            pairs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..20),
            gamma in 0.001f64..0.5,
        ) {
            let (s, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let l = score_margin_loss(&s, &t, gamma).unwrap();
            prop_assert!(l >= 0.0);
            let satisfied = s.iter().zip(&t).all(|(s, t)| gamma + (t - s) <= 0.0);
            prop_assert_eq!(l == 0.0, satisfied);
        }
    }
}
