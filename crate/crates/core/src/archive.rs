//! Tensor container used for checkpoints, optimizer state and extracted datasets.
//!
//! Layout: a UTF-8 header of newline-terminated records
//!
//! ```text
//! iriscale-archive 1
//! meta <key> <json string>
//! tensor <name> <d0>x<d1>x...
//! end
//! ```
//!
//! followed by the raw little-endian `f32` values of every tensor, in the order
//! the `tensor` records were declared. Scalars use the shape `1`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::optim::{OptState, ParamSet};
use crate::tensor::Tensor;

const MAGIC: &str = "iriscale-archive 1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        for (k, v) in &self.meta {
            ensure!(valid_token(k), "TensorArchive", "meta key {:?} must be non-empty without whitespace", k);
            header.push_str(&format!("meta {} {}\n", k, serde_json::to_string(v)?));
        }
        for (name, t) in &self.tensors {
            ensure!(valid_token(name), "TensorArchive", "tensor name {:?} must be non-empty without whitespace", name);
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let dims = if dims.is_empty() { "1".to_string() } else { dims.join("x") };
            header.push_str(&format!("tensor {name} {dims}\n"));
        }
        header.push_str("end\n");
        let total: usize = self.tensors.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(header.len() + 4 * total);
        out.extend_from_slice(header.as_bytes());
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Archive(m);
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("unterminated header".into()))?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not UTF-8".into()))
        };
        let first = next_line()?;
        if first != MAGIC {
            return Err(bad(format!("unexpected magic line {first:?}")));
        }
        let mut archive = TensorArchive::new();
        let mut shapes = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("meta"), Some(key), Some(value)) => {
                    let value: String = serde_json::from_str(value)?;
                    archive.meta.insert(key.to_string(), value);
                }
                (Some("tensor"), Some(name), Some(dims)) => {
                    let shape = dims
                        .split('x')
                        .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad extent {d:?} for `{name}`"))))
                        .collect::<Result<Vec<_>>>()?;
                    shapes.push((name.to_string(), shape));
                }
                _ => return Err(bad(format!("unrecognized header line {line:?}"))),
            }
        }
        let mut body = &bytes[pos..];
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            if body.len() < 4 * n {
                return Err(bad(format!("payload truncated in `{name}`")));
            }
            let data = body[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            body = &body[4 * n..];
            archive.tensors.push((name, Tensor::new(shape, data)?));
        }
        if !body.is_empty() {
            return Err(bad(format!("{} trailing bytes after payload", body.len())));
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_params(params: &ParamSet) -> Self {
        TensorArchive {
            meta: BTreeMap::new(),
            tensors: params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn to_params(&self) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for (n, t) in &self.tensors {
            p.insert(n.clone(), t.clone())?;
        }
        Ok(p)
    }

    /// Optimizer moments stored as `m/<name>`, `v/<name>`, `v_hat/<name>` plus a `step` meta entry.
    pub fn from_opt_state(params: &ParamSet, state: &OptState) -> Self {
        let mut a = TensorArchive::new().with_meta("step", state.step);
        for (slot, tensors) in [("m", &state.m), ("v", &state.v), ("v_hat", &state.v_hat)] {
            for (name, t) in params.names().iter().zip(tensors) {
                a.push(format!("{slot}/{name}"), t.clone());
            }
        }
        a
    }

    pub fn to_opt_state(&self, params: &ParamSet) -> Result<OptState> {
        let step = self
            .meta("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Archive("missing `step` entry".into()))?;
        let slot = |prefix: &str| -> Result<Vec<Tensor>> {
            params
                .iter()
                .map(|(name, p)| {
                    let t = self
                        .get(&format!("{prefix}/{name}"))
                        .ok_or_else(|| Error::Archive(format!("missing `{prefix}/{name}`")))?;
                    ensure!(
                        t.shape() == p.shape(),
                        "TensorArchive::to_opt_state",
                        "`{}/{}` has shape {:?}, parameter has {:?}",
                        prefix,
                        name,
                        t.shape(),
                        p.shape()
                    );
                    Ok(t.clone())
                })
                .collect()
        };
        Ok(OptState {
            m: slot("m")?,
            v: slot("v")?,
            v_hat: slot("v_hat")?,
            step,
        })
    }
}
