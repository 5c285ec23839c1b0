//! Run configuration files (TOML or JSON).

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::correspondence::Timepoint;
use crate::error::{Error, Result};
use crate::labeling::Connectivity;
use crate::segmenter::{CenterBiasParams, ExternalSegmenter, Segmenter, SyntheticSegmenter};
use crate::voi::{VoiSpec, DEFAULT_MAGNITUDES_MM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmenterConfig {
    Synthetic(CenterBiasParams),
    External { prediction_dir: PathBuf },
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig::Synthetic(CenterBiasParams::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifest_path: PathBuf,
    /// Directory holding the case folders; defaults to the manifest's directory.
    #[serde(default)]
    pub data_root: Option<PathBuf>,
    #[serde(default)]
    pub segmenter: SegmenterConfig,
    #[serde(default)]
    pub voi: VoiSpec,
    #[serde(default)]
    pub connectivity: Connectivity,
    #[serde(default = "default_magnitudes")]
    pub magnitudes_mm: Vec<f64>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Which timepoint's Dice ranks lesions for the sweep; the sweep then
    /// displaces VOIs in that timepoint's scan.
    #[serde(default)]
    pub rank_timepoint: RankTimepoint,
    /// Overrides the synthetic segmenter's own seed.
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads; 0 or unset uses all cores.
    #[serde(default)]
    pub workers: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankTimepoint {
    #[default]
    Baseline,
    Followup,
}

impl From<RankTimepoint> for Timepoint {
    fn from(r: RankTimepoint) -> Timepoint {
        match r {
            RankTimepoint::Baseline => Timepoint::Baseline,
            RankTimepoint::Followup => Timepoint::Followup,
        }
    }
}

fn default_magnitudes() -> Vec<f64> {
    DEFAULT_MAGNITUDES_MM.to_vec()
}

fn default_top_k() -> usize {
    30
}

impl ExperimentConfig {
    pub fn new(manifest_path: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            manifest_path: manifest_path.into(),
            data_root: None,
            segmenter: SegmenterConfig::default(),
            voi: VoiSpec::default(),
            connectivity: Connectivity::default(),
            magnitudes_mm: default_magnitudes(),
            top_k: default_top_k(),
            rank_timepoint: RankTimepoint::default(),
            seed: 0,
            output_dir: output_dir.into(),
            workers: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.voi.validate()?;
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        let m = &self.magnitudes_mm;
        if m.first() != Some(&0.0) {
            return Err(Error::Config("magnitudes_mm must start with 0".into()));
        }
        if m.iter().any(|v| !v.is_finite()) || m.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "magnitudes_mm must be finite and strictly ascending".into(),
            ));
        }
        if let SegmenterConfig::Synthetic(p) = &self.segmenter {
            p.validate()?;
        }
        Ok(())
    }

    pub fn data_root(&self) -> PathBuf {
        match &self.data_root {
            Some(root) => root.clone(),
            None => self
                .manifest_path
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_default(),
        }
    }

    pub fn build_segmenter(&self) -> Result<Box<dyn Segmenter>> {
        Ok(match &self.segmenter {
            SegmenterConfig::Synthetic(p) => Box::new(SyntheticSegmenter::new(CenterBiasParams {
                seed: self.seed,
                ..p.clone()
            })?),
            SegmenterConfig::External { prediction_dir } => {
                Box::new(ExternalSegmenter::new(prediction_dir.clone()))
            }
        })
    }

    /// Hash of every setting that can change results; worker count and
    /// output location are excluded.
    pub fn fingerprint(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("workers");
            map.remove("output_dir");
        }
        let digest = Sha256::digest(value.to_string().as_bytes());
        hex::encode(&digest[..16])
    }

    /// Makes relative paths relative to `base` (normally the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.manifest_path);
        fix(&mut self.output_dir);
        if let Some(root) = self.data_root.as_mut() {
            fix(root);
        }
        if let SegmenterConfig::External { prediction_dir } = &mut self.segmenter {
            fix(prediction_dir);
        }
    }
}

/// Parses a `.json` file as JSON and anything else as TOML.
pub fn load_config_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Loads, path-resolves, and validates an experiment config.
pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = load_config_file(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    cfg.resolve_paths(base);
    cfg.validate()?;
    Ok(cfg)
}
