//! Manifest-level stages: detector training and evaluation, region
//! extraction into normalized classifier inputs, and checkpoints.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::datagen::{load_image, load_mask, DatasetManifest, Eye, LabelLevel, Spectrum};
use crate::detect::{
    detect_best_region, detector_input, iou, train_detector, BBox, DetectorConfig, DetectorParams, DetectorSample,
    DetectorTrainConfig, DetectorTraining, Detection,
};
use crate::error::{ensure, Error, Result};
use crate::harness::ClassifierDataset;
use crate::preprocess::{preprocess_pipeline, PipelineConfig};
use crate::recognize::{ClassifierConfig, ClassifierParams};
use crate::tensor::{ops, Tensor};

fn sample_box(manifest: &DatasetManifest, i: usize) -> Result<BBox> {
    let b = manifest.samples[i].bbox.ok_or_else(|| Error::Manifest {
        index: i,
        detail: "sample has no ground-truth box".into(),
    })?;
    BBox::new(b[0], b[1], b[2], b[3])
}

/// Loads sample `i` at detector input size with its box and mask mapped along.
pub fn detector_sample(manifest: &DatasetManifest, i: usize, cfg: &DetectorConfig) -> Result<DetectorSample> {
    let raw = load_image(&manifest.image_path(i))?;
    let (image, (fx, fy)) = detector_input(&raw, cfg)?;
    let gt = sample_box(manifest, i)?.scaled(1.0 / fx, 1.0 / fy);
    let mask_path = manifest.mask_path(i).ok_or_else(|| Error::Manifest {
        index: i,
        detail: "sample has no mask".into(),
    })?;
    let mut mask = load_mask(&mask_path)?;
    let [th, tw] = cfg.input_size;
    if mask.shape() != [th, tw] {
        let (h, w) = (mask.shape()[0], mask.shape()[1]);
        let m = ops::resize_bilinear(&mask.reshape(&[1, h, w])?, th, tw)?;
        mask = m.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }).into_shape(&[th, tw])?;
    }
    Ok(DetectorSample { image, gt, mask })
}

pub fn detector_samples(manifest: &DatasetManifest, indices: &[usize], cfg: &DetectorConfig) -> Result<Vec<DetectorSample>> {
    indices.par_iter().map(|&i| detector_sample(manifest, i, cfg)).collect()
}

/// Trains on the given manifest indices.
pub fn train_detector_on(
    manifest: &DatasetManifest,
    train: &[usize],
    cfg: &DetectorConfig,
    tcfg: &DetectorTrainConfig,
) -> Result<DetectorTraining> {
    let samples = detector_samples(manifest, train, cfg)?;
    train_detector(&samples, cfg, tcfg)
}

/// Best region of a raw `[C,H,W]` image in raw pixel coordinates.
pub fn detect_raw(raw: &Tensor, params: &DetectorParams, cfg: &DetectorConfig) -> Result<Detection> {
    let (input, factors) = detector_input(raw, cfg)?;
    let mut det = detect_best_region(&input, params, cfg)?;
    det.bbox = crate::detect::to_raw(&det.bbox, factors).clip(raw.shape()[2] as f32, raw.shape()[1] as f32);
    Ok(det)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEval {
    /// IoU per evaluated sample; 0 where nothing was found.
    pub ious: Vec<f32>,
    pub mean_iou: f64,
    /// Fraction of samples with IoU >= 0.5.
    pub success_rate: f64,
    /// Samples where no region cleared the objectness floor.
    pub misses: usize,
}

pub fn evaluate_detector(
    manifest: &DatasetManifest,
    indices: &[usize],
    params: &DetectorParams,
    cfg: &DetectorConfig,
) -> Result<DetectionEval> {
    ensure!(!indices.is_empty(), "evaluate_detector", "no samples to evaluate");
    let found = indices
        .par_iter()
        .map(|&i| {
            let raw = load_image(&manifest.image_path(i))?;
            let gt = sample_box(manifest, i)?;
            match detect_raw(&raw, params, cfg) {
                Ok(d) => Ok(Some(iou(&d.bbox, &gt))),
                Err(Error::NoIrisFound { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let misses = found.iter().filter(|f| f.is_none()).count();
    let ious: Vec<f32> = found.into_iter().map(|f| f.unwrap_or(0.0)).collect();
    let n = ious.len() as f64;
    Ok(DetectionEval {
        mean_iou: ious.iter().map(|&v| v as f64).sum::<f64>() / n,
        success_rate: ious.iter().filter(|&&v| v >= 0.5).count() as f64 / n,
        ious,
        misses,
    })
}

/// Where extraction takes its regions from.
pub enum BoxSource<'a> {
    Detector { params: &'a DetectorParams, cfg: &'a DetectorConfig },
    /// The manifest's ground-truth boxes.
    Annotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedRecord {
    /// Index into the source manifest.
    pub source: usize,
    pub identity: usize,
    pub eye: Eye,
    pub spectrum: Spectrum,
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
    pub objectness: f32,
}

/// Normalized `[3,S,S]` classifier inputs with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedSet {
    pub pipeline: PipelineConfig,
    pub records: Vec<ExtractedRecord>,
    pub images: Vec<Tensor>,
    /// `(manifest index, reason)` of samples that yielded no region.
    pub failures: Vec<(usize, String)>,
}

/// Runs detection (or takes annotations) and the normalization pipeline on every sample.
pub fn extract(manifest: &DatasetManifest, source: &BoxSource<'_>, pcfg: &PipelineConfig) -> Result<ExtractedSet> {
    pcfg.validate()?;
    let out = (0..manifest.len())
        .into_par_iter()
        .map(|i| {
            let raw = load_image(&manifest.image_path(i))?;
            let det = match source {
                BoxSource::Annotation => Detection { bbox: sample_box(manifest, i)?, objectness: 1.0, mask: None },
                BoxSource::Detector { params, cfg } => match detect_raw(&raw, params, cfg) {
                    Ok(d) => d,
                    Err(e @ Error::NoIrisFound { .. }) => return Ok(Err((i, e.to_string()))),
                    Err(e) => return Err(e),
                },
            };
            let image = preprocess_pipeline(&raw, &det, pcfg)?;
            let s = &manifest.samples[i];
            let rec = ExtractedRecord {
                source: i,
                identity: s.identity,
                eye: s.eye,
                spectrum: s.spectrum,
                bbox: det.bbox.to_array(),
                objectness: det.objectness,
            };
            Ok(Ok((rec, image)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut set = ExtractedSet { pipeline: pcfg.clone(), records: Vec::new(), images: Vec::new(), failures: Vec::new() };
    for r in out {
        match r {
            Ok((rec, img)) => {
                set.records.push(rec);
                set.images.push(img);
            }
            Err(f) => set.failures.push(f),
        }
    }
    Ok(set)
}

impl ExtractedSet {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = TensorArchive::new()
            .with_meta("kind", "extracted")
            .with_meta("pipeline", serde_json::to_string(&self.pipeline)?)
            .with_meta("records", serde_json::to_string(&self.records)?)
            .with_meta("failures", serde_json::to_string(&self.failures)?);
        if !self.images.is_empty() {
            a.push("images", Tensor::stack(&self.images)?);
        }
        a.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = TensorArchive::load(path)?;
        ensure!(a.meta("kind") == Some("extracted"), "ExtractedSet::load", "{} is not an extracted set", path.display());
        let field = |k: &str| a.meta(k).ok_or_else(|| Error::Archive(format!("missing `{k}` entry")));
        let records: Vec<ExtractedRecord> = serde_json::from_str(field("records")?)?;
        let images = match a.get("images") {
            Some(t) => (0..t.shape()[0]).map(|i| t.slice_outer(i)).collect(),
            None => Vec::new(),
        };
        ensure!(
            images.len() == records.len(),
            "ExtractedSet::load",
            "{} images for {} records",
            images.len(),
            records.len()
        );
        Ok(ExtractedSet {
            pipeline: serde_json::from_str(field("pipeline")?)?,
            records,
            images,
            failures: serde_json::from_str(field("failures")?)?,
        })
    }

    pub fn spectra(&self) -> Vec<Spectrum> {
        let mut v: Vec<Spectrum> = self.records.iter().map(|r| r.spectrum).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Classifier dataset for one session (or all samples) with dense labels.
    pub fn dataset(&self, session: Option<Spectrum>, level: LabelLevel) -> Result<ClassifierDataset> {
        let keep: Vec<usize> = (0..self.records.len())
            .filter(|&i| session.is_none_or(|s| self.records[i].spectrum == s))
            .collect();
        let raw: Vec<usize> = keep
            .iter()
            .map(|&i| {
                let r = &self.records[i];
                match level {
                    LabelLevel::Identity => r.identity,
                    LabelLevel::Eye => 2 * r.identity + r.eye as usize,
                }
            })
            .collect();
        let mut distinct = raw.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let labels = raw.iter().map(|l| distinct.binary_search(l).expect("present")).collect();
        ClassifierDataset::new(keep.iter().map(|&i| self.images[i].clone()).collect(), labels, distinct.len())
    }
}

pub fn save_detector(path: &Path, params: &DetectorParams, cfg: &DetectorConfig) -> Result<()> {
    TensorArchive::from_params(&params.params)
        .with_meta("kind", "detector")
        .with_meta("config", serde_json::to_string(cfg)?)
        .save(path)
}

pub fn load_detector(path: &Path) -> Result<(DetectorParams, DetectorConfig)> {
    let a = TensorArchive::load(path)?;
    ensure!(a.meta("kind") == Some("detector"), "load_detector", "{} is not a detector checkpoint", path.display());
    let cfg: DetectorConfig = serde_json::from_str(a.meta("config").ok_or_else(|| Error::Archive("missing `config`".into()))?)?;
    let params = DetectorParams { params: a.to_params()? };
    params.check(&cfg)?;
    Ok((params, cfg))
}

pub fn save_classifier(path: &Path, params: &ClassifierParams) -> Result<()> {
    TensorArchive::from_params(&params.params)
        .with_meta("kind", "classifier")
        .with_meta("config", serde_json::to_string(&params.cfg)?)
        .save(path)
}

pub fn load_classifier(path: &Path) -> Result<ClassifierParams> {
    let a = TensorArchive::load(path)?;
    ensure!(a.meta("kind") == Some("classifier"), "load_classifier", "{} is not a classifier checkpoint", path.display());
    let cfg: ClassifierConfig = serde_json::from_str(a.meta("config").ok_or_else(|| Error::Archive("missing `config`".into()))?)?;
    let p = ClassifierParams { cfg, params: a.to_params()? };
    p.check()?;
    Ok(p)
}
