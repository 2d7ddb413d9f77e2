use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::{shuffled, stream};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Eye {
    Left = 0,
    Right = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Spectrum {
    #[serde(rename = "VW")]
    Vw,
    #[serde(rename = "NIR")]
    Nir,
}

impl fmt::Display for Spectrum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Spectrum::Vw => "VW",
            Spectrum::Nir => "NIR",
        })
    }
}

impl std::str::FromStr for Spectrum {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "VW" | "RGB" | "VIS" => Ok(Spectrum::Vw),
            "NIR" | "IR" => Ok(Spectrum::Nir),
            _ => Err(Error::contract("Spectrum", format!("unknown spectrum `{s}`"))),
        }
    }
}

/// One labeled eye image. Paths are relative to the manifest directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrisSample {
    pub path: PathBuf,
    pub identity: usize,
    pub eye: Eye,
    pub spectrum: Spectrum,
    /// `[x_min, y_min, x_max, y_max]` in pixels; absent for unannotated imports.
    #[serde(rename = "box")]
    pub bbox: Option<[f32; 4]>,
    pub mask_path: Option<PathBuf>,
}

/// Which label a classifier is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelLevel {
    #[default]
    Identity,
    Eye,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub samples: Vec<IrisSample>,
    #[serde(skip)]
    pub root: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassReport {
    pub samples: usize,
    pub identities: usize,
    pub eye_classes: usize,
    pub vw: usize,
    pub nir: usize,
}

impl fmt::Display for ClassReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} samples ({} VW, {} NIR): {} identities, {} eye classes",
            self.samples, self.vw, self.nir, self.identities, self.eye_classes
        )
    }
}

impl DatasetManifest {
    pub fn new(root: PathBuf, samples: Vec<IrisSample>) -> Self {
        DatasetManifest { version: MANIFEST_VERSION, samples, root }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.resolve(&self.samples[i].path)
    }

    pub fn mask_path(&self, i: usize) -> Option<PathBuf> {
        self.samples[i].mask_path.as_deref().map(|p| self.resolve(p))
    }

    /// Samples at `indices`, keeping the root.
    pub fn subset(&self, indices: &[usize]) -> DatasetManifest {
        DatasetManifest::new(self.root.clone(), indices.iter().map(|&i| self.samples[i].clone()).collect())
    }

    pub fn session(&self, spectrum: Spectrum) -> DatasetManifest {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.samples[i].spectrum == spectrum).collect();
        self.subset(&idx)
    }

    pub fn spectra(&self) -> Vec<Spectrum> {
        self.samples.iter().map(|s| s.spectrum).collect::<BTreeSet<_>>().into_iter().collect()
    }

    fn raw_label(s: &IrisSample, level: LabelLevel) -> usize {
        match level {
            LabelLevel::Identity => s.identity,
            LabelLevel::Eye => 2 * s.identity + s.eye as usize,
        }
    }

    /// Dense class indices (sorted order of the distinct raw labels) and the class count.
    pub fn labels(&self, level: LabelLevel) -> (Vec<usize>, usize) {
        let distinct: Vec<usize> = self
            .samples
            .iter()
            .map(|s| Self::raw_label(s, level))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let labels = self
            .samples
            .iter()
            .map(|s| distinct.binary_search(&Self::raw_label(s, level)).expect("label present"))
            .collect();
        (labels, distinct.len())
    }

    pub fn class_report(&self) -> ClassReport {
        ClassReport {
            samples: self.len(),
            identities: self.labels(LabelLevel::Identity).1,
            eye_classes: self.labels(LabelLevel::Eye).1,
            vw: self.samples.iter().filter(|s| s.spectrum == Spectrum::Vw).count(),
            nir: self.samples.iter().filter(|s| s.spectrum == Spectrum::Nir).count(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Record-level checks that need no file access.
    pub fn check_records(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Manifest {
                index: 0,
                detail: format!("unsupported version {}", self.version),
            });
        }
        for (index, s) in self.samples.iter().enumerate() {
            let bad = |detail: String| Err(Error::Manifest { index, detail });
            if s.path.as_os_str().is_empty() {
                return bad("empty image path".into());
            }
            if let Some([x0, y0, x1, y1]) = s.bbox {
                if ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) || x0 < 0.0 || y0 < 0.0 || x1 <= x0 || y1 <= y0 {
                    return bad(format!("invalid box {:?}", [x0, y0, x1, y1]));
                }
            }
        }
        Ok(())
    }

    /// Full validation: record checks, referenced files exist and boxes lie in the image.
    pub fn validate(&self) -> Result<()> {
        self.check_records()?;
        for (index, s) in self.samples.iter().enumerate() {
            let img = self.image_path(index);
            if !img.is_file() {
                return Err(Error::MissingFile(img));
            }
            if let Some(m) = self.mask_path(index) {
                if !m.is_file() {
                    return Err(Error::MissingFile(m));
                }
            }
            if let Some(b) = s.bbox {
                let (w, h) = image::image_dimensions(&img).map_err(|e| Error::Image { path: img.clone(), source: e })?;
                if b[2] > w as f32 || b[3] > h as f32 {
                    return Err(Error::Manifest {
                        index,
                        detail: format!("box {:?} exceeds the {}x{} image", b, w, h),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Reads and validates a manifest; relative paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m: DatasetManifest = serde_json::from_str(&text)?;
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    m.validate()?;
    Ok(m)
}

/// Seeded shuffle then split into `(train, test)` sample indices, each sorted.
pub fn detector_split(manifest: &DatasetManifest, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = manifest.len();
    ensure!(
        train_fraction > 0.0 && train_fraction < 1.0,
        "detector_split",
        "train fraction must lie in (0, 1), got {}",
        train_fraction
    );
    let n_train = (n as f64 * train_fraction).round() as usize;
    ensure!(
        n_train > 0 && n_train < n,
        "detector_split",
        "fraction {} of {} samples leaves an empty side",
        train_fraction,
        n
    );
    let order = shuffled(n, &mut stream(seed, &[0x5B17]));
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: usize, eye: Eye) -> IrisSample {
        IrisSample {
            path: format!("{id}.png").into(),
            identity: id,
            eye,
            spectrum: Spectrum::Vw,
            bbox: None,
            mask_path: None,
        }
    }

    #[test]
    fn json_shape() {
        let m = DatasetManifest::new(PathBuf::new(), vec![IrisSample { bbox: Some([1.0, 2.0, 3.0, 4.0]), ..sample(3, Eye::Right) }]);
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["version"], 1);
        assert_eq!(v["samples"][0]["box"], serde_json::json!([1.0, 2.0, 3.0, 4.0]));
        assert_eq!(v["samples"][0]["eye"], "right");
        assert_eq!(v["samples"][0]["spectrum"], "VW");
        assert!(v.get("root").is_none());
    }

    #[test]
    fn dense_labels() {
        let m = DatasetManifest::new(
            PathBuf::new(),
            vec![sample(7, Eye::Left), sample(2, Eye::Right), sample(7, Eye::Right), sample(2, Eye::Right)],
        );
        assert_eq!(m.labels(LabelLevel::Identity), (vec![1, 0, 1, 0], 2));
        assert_eq!(m.labels(LabelLevel::Eye), (vec![1, 0, 2, 0], 3));
    }

    #[test]
    fn split_sizes() {
        let m = DatasetManifest::new(PathBuf::new(), (0..800).map(|i| sample(i % 20, Eye::Left)).collect());
        let (a, b) = detector_split(&m, 0.2, 3).unwrap();
        assert_eq!((a.len(), b.len()), (160, 640));
        let mut all = [a.clone(), b].concat();
        all.sort_unstable();
        assert_eq!(all, (0..800).collect::<Vec<_>>());
        assert_eq!(detector_split(&m, 0.2, 3).unwrap().0, a);
        assert!(detector_split(&m, 1.0, 3).is_err());
        let tiny = DatasetManifest::new(PathBuf::new(), vec![sample(0, Eye::Left); 2]);
        assert!(detector_split(&tiny, 0.1, 0).is_err());
    }

    #[test]
    fn bad_box_names_record() {
        let mut s = sample(0, Eye::Left);
        s.bbox = Some([5.0, 0.0, 2.0, 4.0]);
        let m = DatasetManifest::new(PathBuf::new(), vec![sample(1, Eye::Left), s]);
        assert!(matches!(m.check_records(), Err(Error::Manifest { index: 1, .. })));
    }
}
