//! Experiment configuration: one TOML file fully determines a run.

use std::path::{Path, PathBuf};

use robust_student::data::ToyKind;
use robust_student::losses::LossConfig;
use robust_student::nn::NetworkSpec;
use robust_student::perturb::SnrScale;
use robust_student::train::{Method, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// Output directory; not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Which networks to evaluate; `teacher` plus any training method.
    #[serde(default = "default_arms")]
    pub methods: Vec<Arm>,
    pub dataset: DatasetSpec,
    pub teacher: NetSource,
    pub student: NetSource,
    #[serde(default)]
    pub train: TrainSection,
    pub protocol: Protocol,
}

fn default_arms() -> Vec<Arm> {
    vec![Arm::Teacher, Arm::Student(Method::Kd), Arm::Student(Method::Robust)]
}

/// A network under evaluation: the teacher or a student trained one way.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arm {
    Teacher,
    Student(Method),
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Teacher => "teacher",
            Arm::Student(m) => m.name(),
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Arm, String> {
        if s == "teacher" {
            return Ok(Arm::Teacher);
        }
        s.parse::<Method>().map(Arm::Student).map_err(|e| e.to_string())
    }
}

impl Serialize for Arm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Arm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Arm, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preprocess {
    #[default]
    None,
    Gcn,
    GcnZca,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Toy {
        toy: ToyKind,
        train: usize,
        test: usize,
        #[serde(default)]
        seed: u64,
        /// Constant added to every pixel.
        #[serde(default)]
        shift: f64,
        #[serde(default)]
        preprocess: Preprocess,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        preprocess: Preprocess,
        /// Randomly mirror training images left-right once, before
        /// preprocessing.
        #[serde(default)]
        flip: bool,
    },
}

impl DatasetSpec {
    pub fn preprocess(&self) -> Preprocess {
        match self {
            DatasetSpec::Toy { preprocess, .. } | DatasetSpec::Idx { preprocess, .. } => *preprocess,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        match self {
            DatasetSpec::Toy { train, test, shift, .. } => {
                if *train == 0 || *test == 0 {
                    return Err(CliError::config(format!("{what}: toy train and test sizes must be positive")));
                }
                if !shift.is_finite() {
                    return Err(CliError::config(format!("{what}: shift must be finite")));
                }
            }
            DatasetSpec::Idx { .. } => {}
        }
        Ok(())
    }
}

/// A network architecture: a named preset or an inline layer listing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<String>,
}

impl NetSource {
    pub fn preset(name: &str) -> NetSource {
        NetSource {
            preset: Some(name.to_string()),
            spec: None,
        }
    }

    pub fn resolve(&self, classes: usize) -> Result<NetworkSpec> {
        match (&self.preset, &self.spec) {
            (Some(name), None) => NetworkSpec::preset(name, classes)
                .ok_or_else(|| CliError::config(format!("unknown network preset `{name}`"))),
            (None, Some(text)) => text.parse().map_err(|e| CliError::config(format!("network spec: {e}"))),
            _ => Err(CliError::config("a network needs exactly one of `preset` or `spec`")),
        }
    }
}

/// Training settings shared by every seed and method.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr_linear: f64,
    pub lr_conv: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Student epochs.
    pub epochs: usize,
    pub teacher_epochs: usize,
    pub loss: LossConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let toy = TrainConfig::toy();
        TrainSection {
            lr_linear: toy.lr_linear,
            lr_conv: toy.lr_conv,
            momentum: toy.momentum,
            batch_size: toy.batch_size,
            epochs: toy.epochs,
            teacher_epochs: toy.epochs,
            loss: toy.loss,
        }
    }
}

impl TrainSection {
    pub fn student(&self, method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            loss: self.loss,
            lr_linear: self.lr_linear,
            lr_conv: self.lr_conv,
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            method,
        }
    }

    pub fn teacher(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.teacher_epochs,
            ..self.student(Method::Plain, seed)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Protocol {
    SingleTrain,
    NoiseSweep {
        snr: Vec<f64>,
        #[serde(default)]
        scale: SnrScale,
        #[serde(default)]
        clip: bool,
    },
    CrossNoise {
        train: Vec<NoiseCondition>,
        test: Vec<NoiseCondition>,
        snr: f64,
        peak: f64,
    },
    OcclusionSweep {
        blocks: Vec<usize>,
    },
    DomainAdapt {
        target: DatasetSpec,
        #[serde(default)]
        bidirectional: bool,
    },
    BoundReport {
        radius: f64,
        #[serde(default = "default_p")]
        p: f64,
        samples: usize,
        examples: usize,
    },
}

fn default_p() -> f64 {
    2.0
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::SingleTrain => "single-train",
            Protocol::NoiseSweep { .. } => "noise-sweep",
            Protocol::CrossNoise { .. } => "cross-noise",
            Protocol::OcclusionSweep { .. } => "occlusion-sweep",
            Protocol::DomainAdapt { .. } => "domain-adapt",
            Protocol::BoundReport { .. } => "bound-report",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseCondition {
    Clean,
    Gaussian,
    Poisson,
}

impl NoiseCondition {
    pub fn name(self) -> &'static str {
        match self {
            NoiseCondition::Clean => "clean",
            NoiseCondition::Gaussian => "gaussian",
            NoiseCondition::Poisson => "poisson",
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        ExperimentConfig::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The config with every default materialized, as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config fields serialize")
    }

    /// First 16 hex digits of the SHA-256 of the resolved config, excluding
    /// the output directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = None;
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Hash of the parts that determine trained networks for one dataset,
    /// so checkpoints are shared between protocols.
    pub fn model_key(&self, dataset: &DatasetSpec, condition: &str) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            dataset: &'a DatasetSpec,
            teacher: &'a NetSource,
            student: &'a NetSource,
            train: &'a TrainSection,
            condition: &'a str,
        }
        let text = toml::to_string(&Key {
            dataset,
            teacher: &self.teacher,
            student: &self.student,
            train: &self.train,
            condition,
        })
        .expect("key fields serialize");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::config("`seeds` must list at least one seed"));
        }
        if self.methods.is_empty() {
            return Err(CliError::config("`methods` must list at least one network"));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.methods.iter().find(|m| !seen.insert(**m)) {
            return Err(CliError::config(format!("method `{}` listed twice", dup.name())));
        }
        self.dataset.validate("dataset")?;
        for (what, net) in [("teacher", &self.teacher), ("student", &self.student)] {
            net.resolve(2).map_err(|e| CliError::config(format!("{what}: {e}")))?;
        }
        self.train
            .student(Method::Robust, 0)
            .validate()
            .map_err(|e| CliError::config(format!("train: {e}")))?;
        let positive = |v: f64| v > 0.0 && v.is_finite();
        match &self.protocol {
            Protocol::SingleTrain => {}
            Protocol::NoiseSweep { snr, scale, .. } => {
                if snr.is_empty() {
                    return Err(CliError::config("noise-sweep needs at least one SNR"));
                }
                if let Some(bad) = snr
                    .iter()
                    .find(|&&s| !s.is_finite() || (*scale == SnrScale::Linear && s <= 0.0))
                {
                    return Err(CliError::config(format!("invalid SNR {bad}")));
                }
            }
            Protocol::CrossNoise { train, test, snr, peak } => {
                if train.is_empty() || test.is_empty() {
                    return Err(CliError::config("cross-noise needs train and test conditions"));
                }
                if !positive(*snr) || !positive(*peak) {
                    return Err(CliError::config("cross-noise SNR and peak must be positive"));
                }
            }
            Protocol::OcclusionSweep { blocks } => {
                if blocks.is_empty() {
                    return Err(CliError::config("occlusion-sweep needs at least one block size"));
                }
                if let DatasetSpec::Toy { .. } = self.dataset {
                    if let Some(b) = blocks.iter().find(|&&b| b > 8) {
                        return Err(CliError::config(format!("block {b} does not fit 8×8 images")));
                    }
                }
            }
            Protocol::DomainAdapt { target, .. } => target.validate("target")?,
            Protocol::BoundReport {
                radius,
                p,
                samples,
                examples,
            } => {
                if !positive(*radius) {
                    return Err(CliError::config("bound radius must be positive"));
                }
                if p.is_nan() || *p < 1.0 {
                    return Err(CliError::config("bound norm order must be at least 1"));
                }
                if *samples == 0 || *examples == 0 {
                    return Err(CliError::config("bound samples and examples must be positive"));
                }
            }
        }
        Ok(())
    }
}
