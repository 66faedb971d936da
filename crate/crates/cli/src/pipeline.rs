//! Data preparation, checkpoint-backed model training and evaluation under
//! test-time perturbations.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use robust_student::data::{augment_flip, gcn, load_idx, toy_dataset, Dataset, ZcaTransform, GCN_EPSILON, ZCA_EPSILON};
use robust_student::nn::{checkpoint, Network, Role};
use robust_student::perturb::PerturbationSpec;
use robust_student::train::{self, continue_training, Method, Metrics};

use crate::config::{DatasetSpec, ExperimentConfig, Preprocess};
use crate::error::{CliError, Result};

const TEST_STREAM: u64 = 0x7465_7374;
const FLIP_SEED: u64 = 0x666c_6970;

static WRITER: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);

/// Preprocessing fitted on a training set.
#[derive(Clone, Debug)]
pub struct Pipeline {
    gcn: bool,
    zca: Option<ZcaTransform>,
}

impl Pipeline {
    pub fn fit(kind: Preprocess, train_raw: &Dataset) -> Result<Pipeline> {
        Ok(match kind {
            Preprocess::None => Pipeline { gcn: false, zca: None },
            Preprocess::Gcn => Pipeline { gcn: true, zca: None },
            Preprocess::GcnZca => {
                let normalized = gcn(&train_raw.images, GCN_EPSILON)?;
                Pipeline {
                    gcn: true,
                    zca: Some(ZcaTransform::fit(&normalized, ZCA_EPSILON)?),
                }
            }
        })
    }

    pub fn apply(&self, raw: &Dataset) -> Result<Dataset> {
        let mut out = raw.clone();
        if self.gcn {
            out = out.map_images("gcn", |x| gcn(x, GCN_EPSILON))?;
        }
        if let Some(zca) = &self.zca {
            out = out.map_images("zca", |x| zca.apply(x))?;
        }
        Ok(out)
    }

    /// Where test-time and training-time perturbations are applied: on raw
    /// pixels without preprocessing, otherwise on preprocessed images.
    pub fn noise_stage(&self) -> &'static str {
        if self.gcn || self.zca.is_some() {
            "preprocessed"
        } else {
            "raw"
        }
    }
}

/// Raw training and test sets described by `spec`.
pub fn load_raw(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    match spec {
        DatasetSpec::Toy {
            toy,
            train,
            test,
            seed,
            shift,
            ..
        } => {
            let shifted = |d: Dataset| -> Result<Dataset> {
                if *shift == 0.0 {
                    return Ok(d);
                }
                Ok(d.map_images(&format!("shift {shift}"), |x| x.map("shift", |v| v + shift))?)
            };
            let train_set = shifted(toy_dataset(*toy, *train, *seed)?)?;
            let test_set = shifted(toy_dataset(*toy, *test, seed ^ TEST_STREAM)?)?;
            Ok((train_set, test_set))
        }
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            flip,
            ..
        } => {
            let mut train_set = load_idx(train_images, train_labels)?;
            let test_set = load_idx(test_images, test_labels)?;
            if *flip {
                train_set = train_set.map_images("flip", |x| augment_flip(x, FLIP_SEED))?;
            }
            Ok((train_set, test_set))
        }
    }
}

/// A dataset ready for training and evaluation.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub raw_test: Dataset,
    pub pipeline: Pipeline,
}

impl Prepared {
    /// Loads `spec`, fits the preprocessing on the clean training images,
    /// and optionally corrupts the preprocessed training images.
    pub fn load(spec: &DatasetSpec, train_noise: Option<&PerturbationSpec>) -> Result<Prepared> {
        let (train_raw, raw_test) = load_raw(spec)?;
        Prepared::from_raw(train_raw, raw_test, spec.preprocess(), train_noise)
    }

    pub fn from_raw(
        train_raw: Dataset,
        raw_test: Dataset,
        preprocess: Preprocess,
        train_noise: Option<&PerturbationSpec>,
    ) -> Result<Prepared> {
        let pipeline = Pipeline::fit(preprocess, &train_raw)?;
        let mut train = pipeline.apply(&train_raw)?;
        if let Some(p) = train_noise {
            train = train.map_images("train noise", |x| p.apply_batch(x))?;
        }
        Ok(Prepared {
            train,
            test: pipeline.apply(&raw_test)?,
            raw_test,
            pipeline,
        })
    }

    /// Test metrics with `perturbation` applied at the pipeline's noise
    /// stage.
    pub fn evaluate(&self, net: &Network, perturbation: Option<&PerturbationSpec>) -> Result<Metrics> {
        Ok(train::evaluate(net, &self.test, perturbation)?)
    }

    /// Test metrics on another dataset's raw test images, preprocessed with
    /// this dataset's fitted pipeline.
    pub fn evaluate_foreign(&self, net: &Network, raw: &Dataset) -> Result<Metrics> {
        Ok(train::evaluate(net, &self.pipeline.apply(raw)?, None)?)
    }
}

/// Trains networks on demand, reusing checkpoints from earlier runs.
#[derive(Clone, Debug)]
pub struct ModelStore {
    root: PathBuf,
    verbose: bool,
}

impl ModelStore {
    pub fn new(root: impl Into<PathBuf>) -> ModelStore {
        ModelStore {
            root: root.into(),
            verbose: false,
        }
    }

    pub fn verbose(mut self, on: bool) -> Self {
        self.verbose = on;
        self
    }

    fn dir(&self, key: &str, seed: u64) -> PathBuf {
        self.root.join(key).join(format!("seed{seed}"))
    }

    pub fn checkpoint_path(&self, key: &str, seed: u64, name: &str) -> PathBuf {
        self.dir(key, seed).join(format!("{name}.ckpt"))
    }

    fn log(&self, msg: &str) {
        if self.verbose {
            eprintln!("{msg}");
        }
    }

    fn cached(&self, path: &Path) -> Result<Option<Network>> {
        if path.exists() {
            self.log(&format!("reusing {}", path.display()));
            return Ok(Some(checkpoint::load(path)?));
        }
        Ok(None)
    }

    /// Writes the training log and then the checkpoint, each through a
    /// private temporary file renamed into place, so concurrent runs
    /// sharing a store never see partial files.
    fn store(&self, net: &Network, history: &[train::EpochRecord], path: &Path) -> Result<()> {
        let parent = path.parent().expect("checkpoint paths have a parent");
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        let tag = format!(
            "partial-{}-{}",
            std::process::id(),
            WRITER.fetch_add(1, std::sync::atomic::Ordering::Relaxed)
        );

        let log_path = path.with_extension("jsonl");
        let log_tmp = path.with_extension(format!("jsonl.{tag}"));
        let mut log = fs::File::create(&log_tmp).map_err(|e| CliError::io(&log_tmp, e))?;
        for r in history {
            writeln!(log, "{}", r.to_json_line()).map_err(|e| CliError::io(&log_tmp, e))?;
        }
        drop(log);
        fs::rename(&log_tmp, &log_path).map_err(|e| CliError::io(&log_path, e))?;

        let tmp = path.with_extension(format!("ckpt.{tag}"));
        checkpoint::save(net, &tmp)?;
        fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))?;
        Ok(())
    }

    pub fn teacher(&self, cfg: &ExperimentConfig, key: &str, seed: u64, data: &Dataset) -> Result<Network> {
        let path = self.checkpoint_path(key, seed, "teacher");
        if let Some(net) = self.cached(&path)? {
            return Ok(net);
        }
        self.log(&format!("training teacher, seed {seed}"));
        let spec = cfg.teacher.resolve(data.classes)?;
        let mut net = Network::build(spec, seed, Role::Teacher)?;
        let history = continue_training(&mut net, None, data, &cfg.train.teacher(seed))?;
        self.store(&net, &history, &path)?;
        Ok(net)
    }

    pub fn student(
        &self,
        cfg: &ExperimentConfig,
        key: &str,
        seed: u64,
        method: Method,
        teacher: &Network,
        data: &Dataset,
    ) -> Result<Network> {
        let path = self.checkpoint_path(key, seed, method.name());
        if let Some(net) = self.cached(&path)? {
            return Ok(net);
        }
        self.log(&format!("training {} student, seed {seed}", method.name()));
        let spec = cfg.student.resolve(data.classes)?;
        let (net, history) = train::train_student(spec, teacher, data, &cfg.train.student(method, seed))?;
        self.store(&net, &history, &path)?;
        Ok(net)
    }
}
