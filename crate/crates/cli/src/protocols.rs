//! The evaluation protocols: train the configured networks per seed, then
//! evaluate them under each requested condition.

use std::fs;
use std::path::{Path, PathBuf};

use robust_student::data::{pad_to, Dataset};
use robust_student::nn::Network;
use robust_student::perturb::{Perturbation, PerturbationSpec, SnrScale};
use robust_student::robustness::{radius_bound, BallSpec, BoundEstimate, BoundStatus};
use robust_student::train::{Method, Metrics};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Arm, DatasetSpec, ExperimentConfig, NoiseCondition, Protocol};
use crate::emit::{fmt6, sig6, Format, Results, Row};
use crate::error::{CliError, Result};
use crate::pipeline::{load_raw, ModelStore, Prepared};

const TRAIN_NOISE_STREAM: u64 = 0x7472_6169_6e00;
pub const BOUND_QUANTILES: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: PathBuf,
    pub format: Format,
    /// Checkpoint directory; `out/checkpoints` when unset.
    pub checkpoints: Option<PathBuf>,
    pub verbose: bool,
}

impl RunOptions {
    pub fn new(out: impl Into<PathBuf>) -> RunOptions {
        RunOptions {
            out: out.into(),
            format: Format::Csv,
            checkpoints: None,
            verbose: false,
        }
    }

    fn store(&self) -> ModelStore {
        let root = self.checkpoints.clone().unwrap_or_else(|| self.out.join("checkpoints"));
        ModelStore::new(root).verbose(self.verbose)
    }
}

fn write_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let resolved = ExperimentConfig {
        out: Some(out.to_path_buf()),
        ..cfg.clone()
    };
    let config_path = out.join("config.toml");
    fs::write(&config_path, resolved.to_toml()).map_err(|e| CliError::io(&config_path, e))
}

/// Validates `cfg`, runs its protocol, and writes the materialized config
/// and the results table into `opts.out`.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Results> {
    cfg.validate()?;
    write_config(cfg, &opts.out)?;
    let runner = Runner {
        cfg,
        store: opts.store(),
        hash: cfg.hash(),
    };
    let results = match &cfg.protocol {
        Protocol::SingleTrain => runner.single_train()?,
        Protocol::NoiseSweep { snr, scale, clip } => runner.noise_sweep(snr, *scale, *clip)?,
        Protocol::CrossNoise { train, test, snr, peak } => runner.cross_noise(train, test, *snr, *peak)?,
        Protocol::OcclusionSweep { blocks } => runner.occlusion_sweep(blocks)?,
        Protocol::DomainAdapt { target, bidirectional } => runner.domain_adapt(target, *bidirectional)?,
        Protocol::BoundReport {
            radius,
            p,
            samples,
            examples,
        } => runner.bound_report(*radius, *p, *samples, *examples)?,
    };
    results.write(&opts.out, opts.format)?;
    Ok(results)
}

/// Evaluates a stored network on the config's test set: clean, and under
/// every condition of a noise or occlusion sweep.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path, opts: &RunOptions) -> Result<Results> {
    cfg.validate()?;
    let net = robust_student::nn::checkpoint::load(checkpoint)?;
    let data = Prepared::load(&cfg.dataset, None)?;
    if net.classes() != data.test.classes {
        return Err(CliError::config(format!(
            "{} predicts {} classes, dataset has {}",
            checkpoint.display(),
            net.classes(),
            data.test.classes
        )));
    }
    let method = checkpoint
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("checkpoint")
        .to_string();
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let mut push = |condition: String, p: Option<PerturbationSpec>| -> Result<()> {
            let m = data.evaluate(&net, p.as_ref())?;
            rows.push(Row {
                method: method.clone(),
                seed,
                condition,
                accuracy: m.accuracy,
                mean_score: m.mean_score,
            });
            Ok(())
        };
        push("clean".into(), None)?;
        match &cfg.protocol {
            Protocol::NoiseSweep { snr, scale, clip } => {
                for &s in snr {
                    let kind = Perturbation::GaussianSnr {
                        snr: s,
                        scale: *scale,
                        clip: *clip,
                    };
                    push(format!("snr={}", fmt6(s)), Some(PerturbationSpec::new(kind, seed)))?;
                }
            }
            Protocol::OcclusionSweep { blocks } => {
                for &b in blocks.iter().filter(|&&b| b > 0) {
                    let kind = Perturbation::Occlusion { height: b, width: b };
                    push(format!("block={b}"), Some(PerturbationSpec::new(kind, seed)))?;
                }
            }
            _ => {}
        }
    }
    write_config(cfg, &opts.out)?;
    let extra = json!({ "noise_stage": data.pipeline.noise_stage() });
    let results = Results::new("eval", &cfg.hash(), rows, extra);
    results.write(&opts.out, opts.format)?;
    Ok(results)
}

fn row(arm: Arm, seed: u64, condition: &str, m: &Metrics) -> Row {
    Row {
        method: arm.name().to_string(),
        seed,
        condition: condition.to_string(),
        accuracy: m.accuracy,
        mean_score: m.mean_score,
    }
}

fn rounded(rows: &[Row]) -> serde_json::Value {
    let rows: Vec<Row> = rows
        .iter()
        .map(|r| Row {
            accuracy: sig6(r.accuracy),
            mean_score: sig6(r.mean_score),
            ..r.clone()
        })
        .collect();
    serde_json::to_value(rows).expect("rows serialize")
}

fn noise(condition: NoiseCondition, snr: f64, peak: f64, seed: u64) -> Option<PerturbationSpec> {
    let kind = match condition {
        NoiseCondition::Clean => return None,
        NoiseCondition::Gaussian => Perturbation::GaussianSnr {
            snr,
            scale: SnrScale::Linear,
            clip: false,
        },
        NoiseCondition::Poisson => Perturbation::Poisson { peak },
    };
    Some(PerturbationSpec::new(kind, seed))
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    store: ModelStore,
    hash: String,
}

impl Runner<'_> {
    /// The teacher and every configured arm for one seed and training set.
    fn networks(
        &self,
        dataset: &DatasetSpec,
        condition: &str,
        data: &Dataset,
        seed: u64,
        skip: &[Method],
    ) -> Result<Vec<(Arm, Network)>> {
        let key = self.cfg.model_key(dataset, condition);
        let teacher = self.store.teacher(self.cfg, &key, seed, data)?;
        let mut nets = Vec::new();
        for &arm in &self.cfg.methods {
            match arm {
                Arm::Teacher => nets.push((arm, teacher.clone())),
                Arm::Student(m) if skip.contains(&m) => {}
                Arm::Student(m) => nets.push((arm, self.store.student(self.cfg, &key, seed, m, &teacher, data)?)),
            }
        }
        Ok(nets)
    }

    fn results(&self, rows: Vec<Row>, extra: serde_json::Value) -> Results {
        Results::new(self.cfg.protocol.name(), &self.hash, rows, extra)
    }

    fn single_train(&self) -> Result<Results> {
        let data = Prepared::load(&self.cfg.dataset, None)?;
        let mut rows = Vec::new();
        for &seed in &self.cfg.seeds {
            for (arm, net) in self.networks(&self.cfg.dataset, "clean", &data.train, seed, &[])? {
                rows.push(row(arm, seed, "clean", &data.evaluate(&net, None)?));
            }
        }
        Ok(self.results(rows, serde_json::Value::Null))
    }

    fn noise_sweep(&self, snrs: &[f64], scale: SnrScale, clip: bool) -> Result<Results> {
        let data = Prepared::load(&self.cfg.dataset, None)?;
        let mut rows = Vec::new();
        let mut clean = Vec::new();
        for &seed in &self.cfg.seeds {
            for (arm, net) in self.networks(&self.cfg.dataset, "clean", &data.train, seed, &[])? {
                clean.push(row(arm, seed, "clean", &data.evaluate(&net, None)?));
                for &snr in snrs {
                    let p = PerturbationSpec::new(Perturbation::GaussianSnr { snr, scale, clip }, seed);
                    rows.push(row(arm, seed, &format!("snr={}", fmt6(snr)), &data.evaluate(&net, Some(&p))?));
                }
            }
        }
        let extra = json!({ "clean": rounded(&clean), "noise_stage": data.pipeline.noise_stage() });
        Ok(self.results(rows, extra))
    }

    fn cross_noise(
        &self,
        train_conditions: &[NoiseCondition],
        test_conditions: &[NoiseCondition],
        snr: f64,
        peak: f64,
    ) -> Result<Results> {
        let (train_raw, test_raw) = load_raw(&self.cfg.dataset)?;
        let mut rows = Vec::new();
        let mut stage = "raw";
        for &seed in &self.cfg.seeds {
            for &tc in train_conditions {
                let train_noise = noise(tc, snr, peak, seed ^ TRAIN_NOISE_STREAM);
                let data = Prepared::from_raw(
                    train_raw.clone(),
                    test_raw.clone(),
                    self.cfg.dataset.preprocess(),
                    train_noise.as_ref(),
                )?;
                stage = data.pipeline.noise_stage();
                let skip: &[Method] = if tc == NoiseCondition::Clean { &[] } else { &[Method::Robust] };
                for (arm, net) in self.networks(&self.cfg.dataset, tc.name(), &data.train, seed, skip)? {
                    for &te in test_conditions {
                        let m = data.evaluate(&net, noise(te, snr, peak, seed).as_ref())?;
                        rows.push(row(arm, seed, &format!("{}/{}", tc.name(), te.name()), &m));
                    }
                }
            }
        }
        Ok(self.results(rows, json!({ "snr": snr, "peak": peak, "noise_stage": stage })))
    }

    fn occlusion_sweep(&self, blocks: &[usize]) -> Result<Results> {
        let data = Prepared::load(&self.cfg.dataset, None)?;
        let [_, h, w] = data.test.image_shape();
        if let Some(&b) = blocks.iter().find(|&&b| b > h || b > w) {
            return Err(CliError::config(format!("block {b} does not fit {h}×{w} images")));
        }
        let mut rows = Vec::new();
        for &seed in &self.cfg.seeds {
            for (arm, net) in self.networks(&self.cfg.dataset, "clean", &data.train, seed, &[])? {
                for &b in blocks {
                    let p = (b > 0).then(|| PerturbationSpec::new(Perturbation::Occlusion { height: b, width: b }, seed));
                    rows.push(row(arm, seed, &format!("block={b}"), &data.evaluate(&net, p.as_ref())?));
                }
            }
        }
        let results = self.results(rows, serde_json::Value::Null);
        let trend: Vec<_> = self
            .cfg
            .methods
            .iter()
            .map(|arm| {
                let means: Vec<f64> = blocks
                    .iter()
                    .map(|b| results.cell(arm.name(), &format!("block={b}")).map_or(f64::NAN, |s| s.mean_accuracy))
                    .collect();
                let sizes: Vec<f64> = blocks.iter().map(|&b| b as f64).collect();
                json!({
                    "method": arm.name(),
                    "mean_accuracy": means,
                    "kendall_tau": sig6(kendall_tau(&sizes, &means)),
                    "non_increasing": is_non_increasing(blocks, &means),
                })
            })
            .collect();
        Ok(Results {
            extra: json!({ "trend": trend, "noise_stage": data.pipeline.noise_stage() }),
            ..results
        })
    }

    fn domain_adapt(&self, target: &DatasetSpec, bidirectional: bool) -> Result<Results> {
        let (source_train, source_test) = load_raw(&self.cfg.dataset)?;
        let (target_train, target_test) = load_raw(target)?;
        if source_train.classes != target_train.classes {
            return Err(CliError::config(format!(
                "source has {} classes, target {}",
                source_train.classes, target_train.classes
            )));
        }
        let [sc, sh, sw] = source_train.image_shape();
        let [tc, th, tw] = target_train.image_shape();
        if sc != tc || th > sh || tw > sw {
            return Err(CliError::config(format!(
                "target images {tc}×{th}×{tw} cannot be padded to source {sc}×{sh}×{sw}"
            )));
        }
        let padded = |d: Dataset| -> Result<Dataset> {
            if (th, tw) == (sh, sw) {
                return Ok(d);
            }
            Ok(d.map_images("pad", |x| pad_to(x, sh, sw))?)
        };
        let (target_train, target_test) = (padded(target_train)?, padded(target_test)?);

        let source = Prepared::from_raw(source_train, source_test, self.cfg.dataset.preprocess(), None)?;
        let mut rows = Vec::new();
        for &seed in &self.cfg.seeds {
            for (arm, net) in self.networks(&self.cfg.dataset, "clean", &source.train, seed, &[])? {
                rows.push(row(arm, seed, "source->source", &source.evaluate(&net, None)?));
                rows.push(row(arm, seed, "source->target", &source.evaluate_foreign(&net, &target_test)?));
            }
        }
        if bidirectional {
            let target_data = Prepared::from_raw(target_train, target_test, target.preprocess(), None)?;
            for &seed in &self.cfg.seeds {
                for (arm, net) in self.networks(target, "clean", &target_data.train, seed, &[])? {
                    rows.push(row(arm, seed, "target->target", &target_data.evaluate(&net, None)?));
                    rows.push(row(
                        arm,
                        seed,
                        "target->source",
                        &target_data.evaluate_foreign(&net, &source.raw_test)?,
                    ));
                }
            }
        }
        Ok(self.results(rows, serde_json::Value::Null))
    }

    fn bound_report(&self, radius: f64, p: f64, samples: usize, examples: usize) -> Result<Results> {
        let data = Prepared::load(&self.cfg.dataset, None)?;
        let count = examples.min(data.test.len());
        let mut rows = Vec::new();
        let mut summaries = Vec::new();
        let mut estimates = Vec::new();
        for &seed in &self.cfg.seeds {
            let nets = self.networks(&self.cfg.dataset, "clean", &data.train, seed, &[])?;
            let key = self.cfg.model_key(&self.cfg.dataset, "clean");
            let teacher = self.store.teacher(self.cfg, &key, seed, &data.train)?;
            for (arm, net) in nets {
                rows.push(row(arm, seed, &format!("radius={}", fmt6(radius)), &data.evaluate(&net, None)?));
                let per_example = (0..count)
                    .map(|i| {
                        let ball = BallSpec::new(data.test.image(i)?, radius, p)?;
                        radius_bound(&net, &teacher, &ball, data.test.labels[i], samples, seed ^ i as u64)
                    })
                    .collect::<robust_student::Result<Vec<_>>>()?;
                summaries.push(BoundSummary::new(arm.name(), seed, &per_example));
                estimates.push(json!({
                    "method": arm.name(),
                    "seed": seed,
                    "estimates": per_example,
                }));
            }
        }
        Ok(self.results(
            rows,
            json!({
                "radius": radius,
                "p": p,
                "samples": samples,
                "examples": count,
                "bounds": summaries,
                "estimates": estimates,
            }),
        ))
    }
}

/// Distribution of certified radii for one network and seed. Examples where
/// the student is not more confident than the teacher count as radius 0;
/// `None` stands for an unbounded radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub method: String,
    pub seed: u64,
    pub examples: usize,
    pub undefined: usize,
    pub unbounded: usize,
    pub median: Option<f64>,
    /// Median over examples with a defined, finite bound.
    pub median_defined: Option<f64>,
    /// Radii at [`BOUND_QUANTILES`].
    pub quantiles: Vec<Option<f64>>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then(|| sig6(x))
}

/// Linear-interpolated quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    if lo == hi || sorted[lo] == sorted[hi] {
        return sorted[lo];
    }
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl BoundSummary {
    pub fn new(method: &str, seed: u64, estimates: &[BoundEstimate]) -> BoundSummary {
        let mut radii: Vec<f64> = estimates
            .iter()
            .map(|e| match e.status {
                BoundStatus::Defined => e.bound.unwrap_or(0.0),
                BoundStatus::Undefined => 0.0,
                BoundStatus::Unbounded => f64::INFINITY,
            })
            .collect();
        radii.sort_by(f64::total_cmp);
        let mut defined: Vec<f64> = estimates.iter().filter_map(|e| e.bound).collect();
        defined.sort_by(f64::total_cmp);
        let count = |s: BoundStatus| estimates.iter().filter(|e| e.status == s).count();
        BoundSummary {
            method: method.to_string(),
            seed,
            examples: estimates.len(),
            undefined: count(BoundStatus::Undefined),
            unbounded: count(BoundStatus::Unbounded),
            median: (!radii.is_empty()).then(|| quantile(&radii, 0.5)).and_then(finite),
            median_defined: (!defined.is_empty()).then(|| quantile(&defined, 0.5)).and_then(finite),
            quantiles: BOUND_QUANTILES
                .iter()
                .map(|&q| (!radii.is_empty()).then(|| quantile(&radii, q)).and_then(finite))
                .collect(),
        }
    }

    /// Median radius with `None` read as unbounded.
    pub fn median_radius(&self) -> f64 {
        self.median.unwrap_or(f64::INFINITY)
    }
}

/// Bound summaries stored in a bound-report's results.
pub fn bound_summaries(results: &Results) -> Result<Vec<BoundSummary>> {
    serde_json::from_value(results.extra["bounds"].clone())
        .map_err(|e| CliError::config(format!("results carry no bound summaries: {e}")))
}

/// Kendall rank correlation (tau-a) between two equally long sequences.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += (x[j] - x[i]).signum() * (y[j] - y[i]).signum();
        }
    }
    s / (n * (n - 1) / 2) as f64
}

fn is_non_increasing(blocks: &[usize], means: &[f64]) -> bool {
    let mut order: Vec<usize> = (0..blocks.len()).collect();
    order.sort_by_key(|&i| blocks[i]);
    order.windows(2).all(|w| means[w[1]] <= means[w[0]])
}

/// Where a protocol writes by default when no output directory is given.
pub fn default_out(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out
        .clone()
        .unwrap_or_else(|| Path::new("results").join(format!("{}-{}", cfg.protocol.name(), cfg.hash())))
}
