//! Perturbation lower bound for a student whose true-label score exceeds
//! its teacher's, and numerical checks of the argument behind it.
//!
//! With `f_S(x) > f_T(x)`, any perturbation `δ` that makes the teacher win
//! satisfies
//!
//! ```text
//! ‖δ‖_p ≥ (f_S(x) − f_T(x)) / max_{z ∈ B_p(x, R)} ‖∇f_T(z) − ∇f_S(z)‖_q
//! ```
//!
//! with `1/p + 1/q = 1`. Scores are raw softmax probabilities of the true
//! label. The maximum over the ball is estimated by sampling, so the
//! reported denominator is a lower estimate of the true maximum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::{norm_slice, Tensor};

pub const DEFAULT_RADIUS: f64 = 0.5;
pub const DEFAULT_SAMPLES: usize = 1024;
/// Seed for the random fallback of [`flip_search`] on inputs too large for
/// a grid.
pub const FLIP_SEARCH_SEED: u64 = 0x5eed_f11b;

const CHUNK: usize = 128;

/// A differentiable scalar score of the true label.
pub trait LabelScore: Sync {
    /// Scores and input gradients for a batch of points `[M × input…]`,
    /// all evaluated at label `y`.
    fn score_gradients(&self, points: &Tensor, y: usize) -> Result<(Vec<f64>, Tensor)>;

    fn score(&self, z: &Tensor, y: usize) -> Result<f64> {
        Ok(self.score_gradients(&batch_of_one(z)?, y)?.0[0])
    }

    fn gradient(&self, z: &Tensor, y: usize) -> Result<Tensor> {
        self.score_gradients(&batch_of_one(z)?, y)?.1.reshape(z.shape())
    }
}

fn batch_of_one(z: &Tensor) -> Result<Tensor> {
    z.reshape([&[1usize][..], z.shape()].concat())
}

impl LabelScore for Network {
    fn score_gradients(&self, points: &Tensor, y: usize) -> Result<(Vec<f64>, Tensor)> {
        let m = points.shape()[0];
        let (scores, grads) = self.score_gradient(points, &vec![y; m], 1.0)?;
        Ok((scores.into_data(), grads))
    }
}

/// Affine score `w·z + b`, used where closed forms are wanted.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearScore {
    pub weights: Tensor,
    pub bias: f64,
}

impl LabelScore for LinearScore {
    fn score_gradients(&self, points: &Tensor, _y: usize) -> Result<(Vec<f64>, Tensor)> {
        let m = points.shape()[0];
        let mut scores = Vec::with_capacity(m);
        let mut grads = Vec::with_capacity(points.len());
        for i in 0..m {
            let z = points.slice_outer(i)?;
            if z.shape() != self.weights.shape() {
                return Err(Error::ShapeMismatch {
                    op: "linear score",
                    lhs: z.shape().to_vec(),
                    rhs: self.weights.shape().to_vec(),
                });
            }
            scores.push(self.weights.dot(&z)? + self.bias);
            grads.extend_from_slice(self.weights.data());
        }
        Ok((scores, Tensor::new(points.shape().to_vec(), grads)?))
    }
}

/// Dual exponent `q` with `1/p + 1/q = 1`.
pub fn dual_exponent(p: f64) -> f64 {
    if p == 1.0 {
        f64::INFINITY
    } else if p.is_infinite() {
        1.0
    } else {
        p / (p - 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BallSpec {
    pub center: Tensor,
    pub radius: f64,
    pub p: f64,
}

impl BallSpec {
    pub fn new(center: Tensor, radius: f64, p: f64) -> Result<BallSpec> {
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(Error::invalid(format!("ball radius must be finite and >= 0, got {radius}")));
        }
        if p.is_nan() || p < 1.0 {
            return Err(Error::invalid(format!("ball norm order must be >= 1, got {p}")));
        }
        Ok(BallSpec { center, radius, p })
    }

    /// Euclidean ball.
    pub fn l2(center: Tensor, radius: f64) -> Result<BallSpec> {
        Self::new(center, radius, 2.0)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn contains(&self, z: &Tensor) -> Result<bool> {
        Ok(z.sub(&self.center)?.norm(self.p) <= self.radius + 1e-12)
    }

    /// Unit-ball offset drawn uniformly. Each call consumes the generator
    /// the same way regardless of how many points are requested overall,
    /// so sample sets with a common seed are nested.
    fn unit_offset(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let d = self.dim();
        if self.p.is_infinite() {
            return (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
        }
        if self.p == 2.0 {
            let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let r = rng.random::<f64>().powf(1.0 / d as f64);
            return g.into_iter().map(|v| v / norm * r).collect();
        }
        // generalised-Gaussian coordinates plus an exponential slack give a
        // uniform point of the unit l_p ball
        let gamma = Gamma::new(1.0 / self.p, 1.0).expect("p >= 1 gives a valid shape");
        let g: Vec<f64> = (0..d)
            .map(|_| {
                let mag: f64 = gamma.sample(rng);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * mag.powf(1.0 / self.p)
            })
            .collect();
        let w: f64 = Exp1.sample(rng);
        let denom = (g.iter().map(|v| v.abs().powf(self.p)).sum::<f64>() + w).powf(1.0 / self.p);
        g.into_iter().map(|v| v / denom).collect()
    }

    /// `samples` points drawn uniformly from the ball, stacked `[M × input…]`.
    pub fn sample(&self, samples: usize, seed: u64) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::with_capacity(samples);
        for _ in 0..samples {
            let u = self.unit_offset(&mut rng);
            let data = self
                .center
                .data()
                .iter()
                .zip(u)
                .map(|(c, u)| c + self.radius * u)
                .collect();
            points.push(Tensor::new(self.center.shape().to_vec(), data)?);
        }
        if points.is_empty() {
            return Err(Error::invalid("ball sample needs at least one point"));
        }
        Tensor::stack(&points)
    }

    /// Regular grid of `resolution` points per axis over the bounding cube,
    /// restricted to the ball. Only for inputs of dimension at most 3.
    pub fn grid(&self, resolution: usize) -> Result<Tensor> {
        let d = self.dim();
        if d > 3 {
            return Err(Error::invalid(format!("grid over a {d}-dimensional ball is not supported")));
        }
        if resolution < 2 {
            return Err(Error::invalid("grid resolution must be at least 2"));
        }
        let step = 2.0 * self.radius / (resolution - 1) as f64;
        let axis: Vec<f64> = (0..resolution).map(|i| -self.radius + i as f64 * step).collect();
        let mut points = Vec::new();
        let mut idx = vec![0usize; d];
        loop {
            let offset: Vec<f64> = idx.iter().map(|&i| axis[i]).collect();
            let norm = norm_slice(&offset, self.p);
            if norm <= self.radius + 1e-12 {
                let data = self.center.data().iter().zip(&offset).map(|(c, o)| c + o).collect();
                points.push(Tensor::new(self.center.shape().to_vec(), data)?);
            }
            let mut axis_i = d;
            loop {
                if axis_i == 0 {
                    return Tensor::stack(&points);
                }
                axis_i -= 1;
                idx[axis_i] += 1;
                if idx[axis_i] < resolution {
                    break;
                }
                idx[axis_i] = 0;
            }
        }
    }
}

/// `‖∇f_T(z) − ∇f_S(z)‖_norm` at the true label.
pub fn gradient_gap(student: &dyn LabelScore, teacher: &dyn LabelScore, z: &Tensor, y: usize, norm: f64) -> Result<f64> {
    let gs = student.gradient(z, y)?;
    let gt = teacher.gradient(z, y)?;
    Ok(gt.sub(&gs)?.norm(norm))
}

/// Gradient gaps at every point of `points[M × input…]`, evaluated in
/// parallel chunks and returned in point order.
pub fn gradient_gaps(student: &dyn LabelScore, teacher: &dyn LabelScore, points: &Tensor, y: usize, norm: f64) -> Result<Vec<f64>> {
    let m = points.shape()[0];
    let inner = points.len() / m;
    let chunks: Vec<Tensor> = (0..m)
        .step_by(CHUNK)
        .map(|start| {
            let end = (start + CHUNK).min(m);
            let mut shape = points.shape().to_vec();
            shape[0] = end - start;
            Tensor::new(shape, points.data()[start * inner..end * inner].to_vec())
        })
        .collect::<Result<_>>()?;
    let results: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|chunk| {
                s.spawn(move || {
                    let gs = student.score_gradients(chunk, y)?.1;
                    let gt = teacher.score_gradients(chunk, y)?.1;
                    let d = gt.sub(&gs)?;
                    Ok(d.data().chunks(inner).map(|g| norm_slice(g, norm)).collect())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("gradient worker panicked")).collect()
    });
    let mut gaps = Vec::with_capacity(m);
    for r in results {
        gaps.extend(r?);
    }
    Ok(gaps)
}

fn fixed_order_max(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m, &v| m.max(v))
}

/// Largest gradient gap over explicit points.
pub fn max_gap_over_points(student: &dyn LabelScore, teacher: &dyn LabelScore, points: &Tensor, y: usize, norm: f64) -> Result<f64> {
    Ok(fixed_order_max(&gradient_gaps(student, teacher, points, y, norm)?))
}

/// Largest gradient gap over the ball centre and `samples` uniform draws.
/// The gradient norm is the dual of the ball's norm.
pub fn max_gap_over_ball(
    student: &dyn LabelScore,
    teacher: &dyn LabelScore,
    ball: &BallSpec,
    y: usize,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::invalid("max_gap_over_ball needs at least one sample"));
    }
    let q = dual_exponent(ball.p);
    let center = gradient_gap(student, teacher, &ball.center, y, q)?;
    if ball.radius == 0.0 {
        return Ok(center);
    }
    let points = ball.sample(samples, seed)?;
    Ok(center.max(max_gap_over_points(student, teacher, &points, y, q)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundStatus {
    Defined,
    /// The student does not beat the teacher at the point.
    Undefined,
    /// Identical gradients everywhere sampled; no finite bound.
    Unbounded,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundEstimate {
    /// `f_S(x) − f_T(x)`.
    pub numerator: f64,
    /// Estimated maximum gradient gap over the ball.
    pub denominator: f64,
    /// `numerator / denominator` when defined.
    pub bound: Option<f64>,
    pub status: BoundStatus,
    pub radius: f64,
    pub p: f64,
    pub samples: usize,
    pub seed: u64,
    pub method: &'static str,
}

impl BoundEstimate {
    fn assemble(numerator: f64, denominator: f64, ball: &BallSpec, samples: usize, seed: u64, method: &'static str) -> Self {
        let (bound, status) = if numerator <= 0.0 {
            (None, BoundStatus::Undefined)
        } else if denominator == 0.0 {
            (None, BoundStatus::Unbounded)
        } else {
            (Some(numerator / denominator), BoundStatus::Defined)
        };
        BoundEstimate {
            numerator,
            denominator,
            bound,
            status,
            radius: ball.radius,
            p: ball.p,
            samples,
            seed,
            method,
        }
    }
}

fn score_margin(student: &dyn LabelScore, teacher: &dyn LabelScore, x: &Tensor, y: usize) -> Result<f64> {
    Ok(student.score(x, y)? - teacher.score(x, y)?)
}

/// Perturbation lower bound at `ball.center` with a sampled denominator.
pub fn radius_bound(
    student: &dyn LabelScore,
    teacher: &dyn LabelScore,
    ball: &BallSpec,
    y: usize,
    samples: usize,
    seed: u64,
) -> Result<BoundEstimate> {
    let numerator = score_margin(student, teacher, &ball.center, y)?;
    let denominator = max_gap_over_ball(student, teacher, ball, y, samples, seed)?;
    Ok(BoundEstimate::assemble(numerator, denominator, ball, samples, seed, "uniform-ball"))
}

/// Perturbation lower bound with the denominator maximised over explicit
/// points, such as [`BallSpec::grid`].
pub fn radius_bound_on_points(
    student: &dyn LabelScore,
    teacher: &dyn LabelScore,
    ball: &BallSpec,
    y: usize,
    points: &Tensor,
) -> Result<BoundEstimate> {
    let numerator = score_margin(student, teacher, &ball.center, y)?;
    let denominator = max_gap_over_points(student, teacher, points, y, dual_exponent(ball.p))?;
    Ok(BoundEstimate::assemble(numerator, denominator, ball, points.shape()[0], 0, "points"))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChainCheck {
    pub step: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProofChainReport {
    pub steps: usize,
    pub tolerance: f64,
    pub checks: Vec<ChainCheck>,
}

impl ProofChainReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn first_violation(&self) -> Option<&ChainCheck> {
        self.checks.iter().find(|c| !c.passed)
    }
}

/// Absolute tolerance used for `steps`-point midpoint quadrature.
pub fn quadrature_tolerance(steps: usize) -> f64 {
    1e-9 + 0.1 / steps as f64
}

/// Checks the argument behind the bound along the segment `x → x + δ`
/// using `steps`-point midpoint quadrature, under the Euclidean norm:
///
/// * each network's score change equals the line integral of its gradient;
/// * Cauchy–Schwarz holds for the gap integrand at every node;
/// * when the teacher wins at `x + δ`, `‖δ‖₂` is at least the score margin
///   at `x` over the largest gap seen on the segment.
pub fn verify_proof_chain(
    student: &dyn LabelScore,
    teacher: &dyn LabelScore,
    x: &Tensor,
    y: usize,
    delta: &Tensor,
    steps: usize,
) -> Result<ProofChainReport> {
    if steps == 0 {
        return Err(Error::invalid("quadrature needs at least one step"));
    }
    let tol = quadrature_tolerance(steps);
    let end = x.add(delta)?;
    let mut nodes = Vec::with_capacity(steps);
    for i in 0..steps {
        let t = (i as f64 + 0.5) / steps as f64;
        nodes.push(x.add(&delta.scale(t)?)?);
    }
    let nodes = Tensor::stack(&nodes)?;
    let inner = delta.len();
    let (_, gs) = student.score_gradients(&nodes, y)?;
    let (_, gt) = teacher.score_gradients(&nodes, y)?;
    let delta_norm = delta.norm(2.0);

    let mut checks = Vec::new();
    let dot = |g: &[f64]| g.iter().zip(delta.data()).map(|(a, b)| a * b).sum::<f64>();
    for (step, net, grads) in [("student line integral", student, &gs), ("teacher line integral", teacher, &gt)] {
        let integral: f64 = grads.data().chunks(inner).map(dot).sum::<f64>() / steps as f64;
        let change = net.score(&end, y)? - net.score(x, y)?;
        checks.push(ChainCheck {
            step,
            lhs: change,
            rhs: integral,
            passed: (change - integral).abs() <= tol,
        });
    }

    let mut max_gap = 0.0f64;
    let mut worst = ChainCheck {
        step: "cauchy-schwarz",
        lhs: 0.0,
        rhs: 0.0,
        passed: true,
    };
    for (a, b) in gt.data().chunks(inner).zip(gs.data().chunks(inner)) {
        let diff: Vec<f64> = a.iter().zip(b).map(|(t, s)| t - s).collect();
        let gap = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        max_gap = max_gap.max(gap);
        let lhs = dot(&diff).abs();
        let rhs = gap * delta_norm;
        let slack = 1e-12 * rhs.max(1.0);
        if lhs > rhs + slack || (worst.passed && lhs - rhs > worst.lhs - worst.rhs) {
            worst = ChainCheck {
                step: "cauchy-schwarz",
                lhs,
                rhs,
                passed: lhs <= rhs + slack,
            };
        }
        if !worst.passed {
            break;
        }
    }
    checks.push(worst);

    let margin = score_margin(student, teacher, x, y)?;
    let flipped = teacher.score(&end, y)? > student.score(&end, y)?;
    if flipped && margin > 0.0 {
        // ‖δ‖·max_gap ≥ margin, relaxed by the quadrature error of both integrals
        checks.push(ChainCheck {
            step: "ratio bound",
            lhs: delta_norm * max_gap,
            rhs: margin,
            passed: delta_norm * max_gap + 2.0 * tol >= margin,
        });
    }
    Ok(ProofChainReport {
        steps,
        tolerance: tol,
        checks,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Flip {
    pub delta: Tensor,
    pub norm: f64,
}

/// Smallest-norm sampled perturbation inside the ball at which the teacher
/// out-scores the student. Uses a grid of `resolution` points per axis for
/// inputs of dimension at most 3, otherwise `resolution³` random points.
pub fn flip_search(
    student: &dyn LabelScore,
    teacher: &dyn LabelScore,
    ball: &BallSpec,
    y: usize,
    resolution: usize,
) -> Result<Option<Flip>> {
    let points = if ball.dim() <= 3 {
        ball.grid(resolution)?
    } else {
        ball.sample(resolution.pow(3), FLIP_SEARCH_SEED)?
    };
    flip_search_on_points(student, teacher, ball, y, &points)
}

pub fn flip_search_on_points(
    student: &dyn LabelScore,
    teacher: &dyn LabelScore,
    ball: &BallSpec,
    y: usize,
    points: &Tensor,
) -> Result<Option<Flip>> {
    let (fs, _) = student.score_gradients(points, y)?;
    let (ft, _) = teacher.score_gradients(points, y)?;
    let mut best: Option<Flip> = None;
    for (i, (s, t)) in fs.iter().zip(&ft).enumerate() {
        if t <= s {
            continue;
        }
        let delta = points.slice_outer(i)?.sub(&ball.center)?;
        let norm = delta.norm(2.0);
        if best.as_ref().is_none_or(|b| norm < b.norm) {
            best = Some(Flip { delta, norm });
        }
    }
    Ok(best)
}
