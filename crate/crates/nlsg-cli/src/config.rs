//! Experiment configuration: JSON in, strictly validated, content-hashed.
//!
//! Unknown keys are rejected so a typo fails loudly instead of silently
//! running defaults. Every report row carries the config hash, making each
//! emitted number traceable to the exact configuration and seed that
//! produced it.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nlsg_core::grid::MAX_CLASSES;
use nlsg_core::model::{CmMode, ModelArch};
use nlsg_core::sim::AnnotatorProfile;
use nlsg_core::train::TrainConfig;

use crate::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        count: usize,
        test_count: usize,
        width: usize,
        height: usize,
        classes: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        threshold: f64,
        count: usize,
        test_count: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Every annotator labels every image.
    #[default]
    Dense,
    /// Exactly one randomly chosen annotator label per image.
    SingleRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mean,
    #[serde(alias = "mode")]
    #[value(alias = "mode")]
    Majority,
    Staple,
    SpatialStaple,
    Ours,
    OursNoTrace,
    Naive,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mean => "mean",
            Method::Majority => "majority",
            Method::Staple => "staple",
            Method::SpatialStaple => "spatial-staple",
            Method::Ours => "ours",
            Method::OursNoTrace => "ours-no-trace",
            Method::Naive => "naive",
        }
    }

    pub fn is_trained(self) -> bool {
        matches!(self, Method::Ours | Method::OursNoTrace | Method::Naive)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmModeSpec {
    #[default]
    Full,
    LowRank(usize),
}

impl CmModeSpec {
    pub fn to_core(self) -> CmMode {
        match self {
            CmModeSpec::Full => CmMode::Full,
            CmModeSpec::LowRank(l) => CmMode::LowRank(l),
        }
    }
}

fn default_trunk_layers() -> usize {
    2
}

fn default_trunk_channels() -> usize {
    8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    #[serde(default = "default_trunk_layers")]
    pub trunk_layers: usize,
    #[serde(default = "default_trunk_channels")]
    pub trunk_channels: usize,
    #[serde(default)]
    pub cm_mode: CmModeSpec,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            trunk_layers: default_trunk_layers(),
            trunk_channels: default_trunk_channels(),
            cm_mode: CmModeSpec::default(),
        }
    }
}

impl ArchSpec {
    pub fn instantiate(&self, in_channels: usize, classes: usize, annotators: usize) -> ModelArch {
        ModelArch {
            in_channels,
            trunk_layers: self.trunk_layers,
            trunk_channels: self.trunk_channels,
            classes,
            annotators,
            cm_mode: self.cm_mode.to_core(),
        }
    }
}

fn default_fusion_iters() -> usize {
    50
}

fn default_fusion_tol() -> f64 {
    1e-6
}

fn default_fusion_window() -> usize {
    14
}

fn default_fusion_stride() -> usize {
    7
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSettings {
    #[serde(default = "default_fusion_iters")]
    pub max_iters: usize,
    #[serde(default = "default_fusion_tol")]
    pub tol: f64,
    #[serde(default = "default_fusion_window")]
    pub window: usize,
    #[serde(default = "default_fusion_stride")]
    pub stride: usize,
}

impl Default for FusionSettings {
    fn default() -> Self {
        FusionSettings {
            max_iters: default_fusion_iters(),
            tol: default_fusion_tol(),
            window: default_fusion_window(),
            stride: default_fusion_stride(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Annotator panel; omitted means the standard five-profile panel.
    #[serde(default)]
    pub profiles: Option<Vec<AnnotatorProfile>>,
    #[serde(default)]
    pub regime: Regime,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub arch: ArchSpec,
    /// Training settings; the `seed` field inside is ignored and replaced
    /// by each run's seed.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub fusion: FusionSettings,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> CliResult<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.seeds.is_empty() {
            return bad("seeds must list at least one seed".into());
        }
        if self.methods.is_empty() {
            return bad("methods must list at least one method".into());
        }
        match &self.dataset {
            DatasetSpec::Synthetic {
                count,
                test_count,
                width,
                height,
                classes,
            } => {
                if *count == 0 || *test_count == 0 {
                    return bad("dataset counts must be positive".into());
                }
                if *width < 8 || *height < 8 {
                    return bad("synthetic images must be at least 8x8".into());
                }
                if !(2..=MAX_CLASSES).contains(classes) {
                    return bad(format!("classes must lie in 2..={MAX_CLASSES}"));
                }
            }
            DatasetSpec::Idx {
                threshold,
                count,
                test_count,
                ..
            } => {
                if *count == 0 || *test_count == 0 {
                    return bad("dataset counts must be positive".into());
                }
                if !(*threshold > 0.0 && *threshold < 1.0) {
                    return bad("threshold must lie strictly between 0 and 1".into());
                }
            }
        }
        if let Some(profiles) = &self.profiles {
            if profiles.is_empty() {
                return bad("profiles, when given, must be nonempty".into());
            }
        }
        self.train
            .validate()
            .map_err(|e| CliError::Config(format!("train: {e}")))?;
        if self.arch.trunk_layers == 0 || self.arch.trunk_channels == 0 {
            return bad("arch trunk dimensions must be at least 1".into());
        }
        Ok(())
    }

    pub fn resolved_profiles(&self) -> Vec<AnnotatorProfile> {
        self.profiles
            .clone()
            .unwrap_or_else(AnnotatorProfile::default_panel)
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}
