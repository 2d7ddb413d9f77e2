use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::manifest::{DatasetManifest, Eye, IrisSample, Spectrum};

const IMAGE_EXTS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(e.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn eye_token(s: &str) -> Option<Eye> {
    match s.to_ascii_lowercase().as_str() {
        "l" | "left" => Some(Eye::Left),
        "r" | "right" => Some(Eye::Right),
        _ => None,
    }
}

fn eye_from_name(stem: &str) -> Option<Eye> {
    stem.split(['_', '-', '.', ' ']).find_map(eye_token)
}

fn is_image(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Imports `<root>/<person>/<VW|NIR>/[<L|R>/]<image>`. Person folders are
/// numbered in sorted order; the eye comes from an `L`/`R` (or `left`/`right`)
/// subfolder or filename token. Imported samples carry no box or mask.
pub fn import_utiris(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let persons: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    let mut samples = Vec::new();
    for (identity, person) in persons.iter().enumerate() {
        for session in sorted_entries(person)?.into_iter().filter(|p| p.is_dir()) {
            let name = session.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let Ok(spectrum) = name.parse::<Spectrum>() else {
                continue;
            };
            let mut files: Vec<(PathBuf, Option<Eye>)> = Vec::new();
            for entry in sorted_entries(&session)? {
                if entry.is_dir() {
                    let sub = entry.file_name().and_then(|n| n.to_str()).and_then(eye_token);
                    for f in sorted_entries(&entry)?.into_iter().filter(|f| is_image(f)) {
                        files.push((f, sub));
                    }
                } else if is_image(&entry) {
                    files.push((entry, None));
                }
            }
            for (f, sub) in files {
                let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                let eye = sub.or_else(|| eye_from_name(stem)).ok_or_else(|| Error::Manifest {
                    index: samples.len(),
                    detail: format!("cannot tell the eye of {}", f.display()),
                })?;
                let rel = f.strip_prefix(root).unwrap_or(&f).to_path_buf();
                samples.push(IrisSample { path: rel, identity, eye, spectrum, bbox: None, mask_path: None });
            }
        }
    }
    Ok(DatasetManifest::new(root.to_path_buf(), samples))
}
