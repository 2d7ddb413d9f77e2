//! Whole-run configuration, stored as JSON. Missing fields take the desk-scale
//! defaults of [`RunConfig::default`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datagen::SynthSpec;
use crate::detect::{DetectorConfig, DetectorTrainConfig};
use crate::error::{ensure, Error, Result};
use crate::gradsuite::{DEFAULT_EPS, DEFAULT_TOLERANCE};
use crate::harness::TrainConfig;
use crate::preprocess::PipelineConfig;
use crate::recognize::ClassifierConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Dataset manifest.
    pub manifest: PathBuf,
    /// Output root. Unset artifact paths below default to files inside it.
    pub out: PathBuf,
    /// Detector checkpoint.
    pub detector: Option<PathBuf>,
    /// Extracted classifier inputs.
    pub extracted: Option<PathBuf>,
    /// Metrics CSV read by `report`.
    pub metrics: Option<PathBuf>,
    /// Root of a UTiris-layout tree.
    pub utiris: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            manifest: PathBuf::from("data/manifest.json"),
            out: PathBuf::from("out"),
            detector: None,
            extracted: None,
            metrics: None,
            utiris: None,
        }
    }
}

impl Paths {
    pub fn detector(&self) -> PathBuf {
        self.detector.clone().unwrap_or_else(|| self.out.join("detector.ckpt"))
    }

    pub fn extracted(&self) -> PathBuf {
        self.extracted.clone().unwrap_or_else(|| self.out.join("extracted.bin"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.metrics.clone().unwrap_or_else(|| self.out.join("metrics.csv"))
    }
}

/// Where `extract` takes iris regions from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionSource {
    #[default]
    Detector,
    /// The manifest's ground-truth boxes.
    Annotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub seeds: usize,
    pub eps: f32,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { seeds: 20, eps: DEFAULT_EPS, tolerance: DEFAULT_TOLERANCE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthSpec,
    pub detector: DetectorConfig,
    pub detector_train: DetectorTrainConfig,
    pub regions: RegionSource,
    pub pipeline: PipelineConfig,
    pub classifier: ClassifierConfig,
    pub train: TrainConfig,
    /// Fold (1-based) held out by `train-classifier`.
    pub fold: usize,
    pub gradcheck: GradcheckConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    /// 64x64 synthetic images, 32x32 classifier inputs and the 5-fold,
    /// 17-epoch, batch-8 protocol.
    fn default() -> Self {
        let mut cfg = RunConfig {
            seed: 7,
            synth: SynthSpec::default(),
            detector: DetectorConfig::default(),
            detector_train: DetectorTrainConfig::default(),
            regions: RegionSource::Detector,
            pipeline: PipelineConfig { side: 32, classifier_input: 32, center: false },
            classifier: ClassifierConfig { input_size: 32, widths: vec![16, 64, 256], ..Default::default() },
            train: TrainConfig::default(),
            fold: 1,
            gradcheck: GradcheckConfig::default(),
            paths: Paths::default(),
        };
        cfg.set_seed(7);
        cfg
    }
}

impl RunConfig {
    /// Sets the run seed and every component seed derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.detector_train.seed = seed;
        self.train.seed = seed;
    }

    /// Reads a config file. A run manifest (an object with a `config` field)
    /// is accepted too, so any run can be repeated from its manifest.
    ///
    /// Fields absent from the file keep their defaults, with component seeds
    /// following the file's top-level `seed` unless given explicitly.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text)?;
        let file = match value.get("config") {
            Some(c) if value.get("command").is_some() => c.clone(),
            _ => value,
        };
        ensure!(file.is_object(), "RunConfig::load", "{}: expected a JSON object", path.display());
        let mut base = RunConfig::default();
        if let Some(seed) = file.get("seed") {
            base.set_seed(serde_json::from_value(seed.clone())?);
        }
        let mut merged = serde_json::to_value(&base)?;
        merge(&mut merged, file);
        Ok(serde_json::from_value(merged)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.detector.validate()?;
        self.pipeline.validate()?;
        self.train.validate()?;
        self.detector_train.optim.validate()?;
        self.classifier.validate()?;
        ensure!(
            self.fold >= 1 && self.fold <= self.train.k,
            "RunConfig::validate",
            "fold {} outside 1..={}",
            self.fold,
            self.train.k
        );
        ensure!(
            self.pipeline.classifier_input == self.classifier.input_size,
            "RunConfig::validate",
            "pipeline produces {}-pixel inputs but the classifier expects {}",
            self.pipeline.classifier_input,
            self.classifier.input_size
        );
        ensure!(self.gradcheck.seeds > 0, "RunConfig::validate", "gradcheck needs at least one seed");
        Ok(())
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.paths.out.join(name)
    }
}

/// Overlays `top` onto `base`, recursing into objects.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Record of one invocation: the command, its arguments and the fully
/// resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub config: RunConfig,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, r#"{"train": {"epochs": 3}}"#).unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.k, 5);
        assert_eq!(c.classifier, RunConfig::default().classifier);
    }

    #[test]
    fn file_seed_reaches_components() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, r#"{"seed": 11, "train": {"seed": 3}}"#).unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!((c.synth.seed, c.detector_train.seed, c.train.seed), (11, 11, 3));
    }

    #[test]
    fn manifest_is_a_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = RunConfig::default();
        config.set_seed(99);
        let m = RunManifest { command: "crossval".into(), args: vec![], version: "x".into(), config: config.clone(), outputs: vec![] };
        let p = dir.path().join("run.json");
        m.save(&p).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), config);
    }
}
