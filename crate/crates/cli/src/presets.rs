//! Desk-scale experiment presets: toy data, tiny networks, at most ten
//! epochs, five seeds.

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

const COMMON: &str = r#"
seeds = [0, 1, 2, 3, 4]
methods = ["teacher", "kd", "robust"]

[dataset]
kind = "toy"
toy = "blob-digits"
train = 2000
test = 1000
seed = 0

[teacher]
preset = "toy-teacher"

[student]
preset = "toy-student"

[train]
epochs = 10
teacher_epochs = 10
"#;

pub const NAMES: [&str; 6] = [
    "desk-train",
    "desk-noise",
    "desk-cross-noise",
    "desk-occlusion",
    "desk-domain-adapt",
    "desk-bound",
];

fn protocol(name: &str) -> Option<&'static str> {
    Some(match name {
        "desk-train" => "[protocol]\nkind = \"single-train\"\n",
        "desk-noise" => "[protocol]\nkind = \"noise-sweep\"\nsnr = [10.0, 5.0, 2.0, 1.0, 0.5]\n",
        "desk-cross-noise" => {
            "[protocol]\nkind = \"cross-noise\"\ntrain = [\"clean\", \"gaussian\", \"poisson\"]\ntest = [\"clean\", \"gaussian\", \"poisson\"]\nsnr = 2.0\npeak = 4.0\n"
        }
        "desk-occlusion" => "[protocol]\nkind = \"occlusion-sweep\"\nblocks = [0, 2, 4, 6]\n",
        "desk-domain-adapt" => {
            "[protocol]\nkind = \"domain-adapt\"\nbidirectional = true\n\n[protocol.target]\nkind = \"toy\"\ntoy = \"blob-digits\"\ntrain = 2000\ntest = 1000\nseed = 0\nshift = 0.3\n"
        }
        "desk-bound" => "[protocol]\nkind = \"bound-report\"\nradius = 0.5\np = 2.0\nsamples = 256\nexamples = 100\n",
        _ => return None,
    })
}

/// TOML text of a named preset.
pub fn preset_text(name: &str) -> Option<String> {
    protocol(name).map(|p| format!("{COMMON}\n{p}"))
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let text = preset_text(name).ok_or_else(|| {
        CliError::config(format!("unknown preset `{name}` (available: {})", NAMES.join(", ")))
    })?;
    ExperimentConfig::from_toml(&text)
}
