//! The TOML run configuration schema.
//!
//! One config file drives a whole run: where data lives (or how to
//! synthesize it), the coarsening ladder, per-step hyperparameters and
//! training settings, and evaluation options. Hyperparameter keys use the
//! conventional short symbols (`K`, `F`, `D_cut`, `gamma`, `beta`,
//! `factor`), so published settings paste in directly. Loading either
//! fully validates or fails with a field-level message.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::IoError;
use crate::cvae::CvaeHyper;
use crate::pipeline::{LevelSpec, SyntheticSpec};
use crate::train::TrainConfig;

const CONFIG_VERSION: u32 = 1;

/// File locations for a run. Relative paths are resolved against the
/// config file's own directory at load time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Multi-model PDB holding the fine-grained ensemble. May be omitted
    /// when a `[synthetic]` section generates the data instead.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Directory that receives every artifact the run writes.
    pub output_dir: PathBuf,
}

/// Hyperparameters plus training settings for one chain step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepConfig {
    #[serde(default)]
    pub hyper: CvaeHyper,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Evaluation options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    /// Steric clash distance threshold in Angstrom.
    pub clash_threshold: f64,
    /// Seeds for repeated evaluation runs; at least three.
    pub seeds: Vec<u64>,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            clash_threshold: crate::metrics::CLASH_THRESHOLD,
            seeds: vec![1, 2, 3],
        }
    }
}

/// A fully specified run: data source, ladder, per-step settings, and
/// evaluation options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Schema version tag; must be present and supported.
    pub version: u32,
    /// Seed for run-level randomness (synthesis, inference sampling).
    #[serde(default)]
    pub seed: u64,
    pub paths: PathsConfig,
    /// Generate the dataset instead of reading one.
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    /// Coarsening ladder, finest step first.
    #[serde(default)]
    pub ladder: Vec<LevelSpec>,
    /// One entry per ladder level, finest step first.
    #[serde(default)]
    pub steps: Vec<StepConfig>,
    #[serde(default)]
    pub metrics: MetricOptions,
}

impl RunConfig {
    /// Structural validation beyond what serde enforces.
    pub fn validate(&self) -> Result<(), IoError> {
        if self.version != CONFIG_VERSION {
            return Err(IoError::BadConfig(format!(
                "version {} is not the supported {CONFIG_VERSION}",
                self.version
            )));
        }
        if self.paths.dataset.is_none() && self.synthetic.is_none() {
            return Err(IoError::BadConfig(
                "either paths.dataset or a [synthetic] section is required".into(),
            ));
        }
        if !self.steps.is_empty() && self.steps.len() != self.ladder.len() {
            return Err(IoError::BadConfig(format!(
                "{} step sections for {} ladder levels",
                self.steps.len(),
                self.ladder.len()
            )));
        }
        for (i, step) in self.steps.iter().enumerate() {
            step.hyper
                .validate()
                .map_err(|e| IoError::BadConfig(format!("steps[{i}].hyper: {e}")))?;
            step.train
                .validate()
                .map_err(|e| IoError::BadConfig(format!("steps[{i}].train: {e}")))?;
        }
        if self.metrics.seeds.len() < 3 {
            return Err(IoError::BadConfig(format!(
                "metrics.seeds lists {} seeds; evaluation needs at least 3",
                self.metrics.seeds.len()
            )));
        }
        if !(self.metrics.clash_threshold > 0.0) {
            return Err(IoError::BadConfig(
                "metrics.clash_threshold must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Parse and validate a config from TOML text. `path` labels errors.
pub fn parse_run_config_str(text: &str, path: &Path) -> Result<RunConfig, IoError> {
    let config: RunConfig = toml::from_str(text).map_err(|e| {
        // The TOML error Display already carries line/column context.
        IoError::content(path, e.to_string())
    })?;
    config.validate()?;
    Ok(config)
}

/// Load a config file, resolve its relative paths against the file's own
/// directory, and check that every referenced input exists.
pub fn load_run_config(path: &Path) -> Result<RunConfig, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
    let mut config = parse_run_config_str(&text, path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &PathBuf| {
        if p.is_relative() {
            base.join(p)
        } else {
            p.clone()
        }
    };
    if let Some(dataset) = &config.paths.dataset {
        let resolved = resolve(dataset);
        if !resolved.is_file() {
            return Err(IoError::BadConfig(format!(
                "paths.dataset {} does not exist",
                resolved.display()
            )));
        }
        config.paths.dataset = Some(resolved);
    }
    config.paths.output_dir = resolve(&config.paths.output_dir);
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label() -> &'static Path {
        Path::new("run.toml")
    }

    const MINIMAL: &str = r#"
version = 1

[paths]
output_dir = "out"

[synthetic]
n_residues = 12
n_frames = 50
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let config = parse_run_config_str(MINIMAL, label()).unwrap();
        assert_eq!(config.seed, 0);
        assert_eq!(config.metrics.seeds, vec![1, 2, 3]);
        let synthetic = config.synthetic.unwrap();
        assert_eq!(synthetic.n_residues, 12);
        assert_eq!(synthetic.flexibility_deg, 25.0);
        assert!(config.ladder.is_empty());
    }

    #[test]
    fn hyperparameter_symbols_parse_verbatim() {
        let text = r#"
version = 1

[paths]
output_dir = "out"

[synthetic]
n_residues = 48
n_frames = 500

[[ladder]]
kind = "calpha"

[[ladder]]
kind = "learned"
n_beads = 8

[[steps]]
[steps.hyper]
K = 6
gamma = 1.303
encoder_depth = 1
prior_depth = 1
decoder_depth = 4
d_cut = 13.262
D_cut = 31.738
F = 40
latent_dim = 8
beta = 0.002
multi_hop_order = 3
[steps.train]
epochs = 100
batch_size = 2
learning_rate = 0.000078
factor = 0.210

[[steps]]
[steps.hyper]
K = 6
F = 24
"#;
        let config = parse_run_config_str(text, label()).unwrap();
        assert_eq!(config.ladder.len(), 2);
        let h = &config.steps[0].hyper;
        assert_eq!(h.k, 6);
        assert_eq!(h.d_cut_cg, 31.738);
        assert_eq!(h.f, 40);
        assert_eq!(h.multi_hop_order, 3);
        let t = &config.steps[0].train;
        assert_eq!(t.scheduler_factor, 0.210);
        assert_eq!(t.learning_rate, 0.000078);
        // The second step fills everything else from defaults.
        assert_eq!(config.steps[1].hyper.f, 24);
        assert_eq!(config.steps[1].train.epochs, TrainConfig::default().epochs);
    }

    #[test]
    fn validation_is_total_and_names_the_field() {
        let err = parse_run_config_str("version = 1\n", label())
            .unwrap_err()
            .to_string();
        assert!(err.contains("paths"), "{err}");

        let text = MINIMAL.replace("version = 1", "version = 3");
        let err = parse_run_config_str(&text, label()).unwrap_err().to_string();
        assert!(err.contains("version 3"), "{err}");

        let text = format!(
            "{MINIMAL}\n[[ladder]]\nkind = \"calpha\"\n\n[[steps]]\n[steps.hyper]\nK = 0\n"
        );
        let err = parse_run_config_str(&text, label()).unwrap_err().to_string();
        assert!(err.contains("steps[0].hyper"), "{err}");

        let text = format!("{MINIMAL}\n[metrics]\nseeds = [1]\n");
        let err = parse_run_config_str(&text, label()).unwrap_err().to_string();
        assert!(err.contains("seeds"), "{err}");

        // Unknown keys are rejected, with the TOML position in the message.
        // Appended after the last section header, so this lands inside it.
        let text = format!("{MINIMAL}\ntypo_field = 3\n");
        let err = parse_run_config_str(&text, label()).unwrap_err().to_string();
        assert!(err.contains("typo_field"), "{err}");

        // Top-level unknown keys are rejected too.
        let text = MINIMAL.replace("version = 1", "version = 1\nveersion = 2");
        let err = parse_run_config_str(&text, label()).unwrap_err().to_string();
        assert!(err.contains("veersion"), "{err}");

        // A ladder without matching step sections cannot train.
        let text = format!("{MINIMAL}\n[[ladder]]\nkind = \"calpha\"\n[[steps]]\n[[steps]]\n");
        let err = parse_run_config_str(&text, label()).unwrap_err().to_string();
        assert!(err.contains("2 step sections for 1 ladder levels"), "{err}");
    }

    #[test]
    fn loading_resolves_paths_and_requires_inputs_to_exist() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = dir.path().join("run.toml");
        let text = r#"
version = 1

[paths]
dataset = "data.pdb"
output_dir = "out"
"#;
        fs::write(&config_path, text).unwrap();
        let err = load_run_config(&config_path).unwrap_err().to_string();
        assert!(err.contains("does not exist"), "{err}");

        fs::write(dir.path().join("data.pdb"), "END\n").unwrap();
        let config = load_run_config(&config_path).unwrap();
        assert_eq!(
            config.paths.dataset.as_deref(),
            Some(dir.path().join("data.pdb").as_path())
        );
        assert_eq!(config.paths.output_dir, dir.path().join("out"));
    }
}
