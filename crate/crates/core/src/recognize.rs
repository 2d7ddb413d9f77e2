//! Compact conv classifier with a stacked adaptive-average-pooling head.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::optim::ParamSet;
use crate::rng::{he_uniform, stream};
use crate::tensor::{ops, GradTape, PadMode, Tensor, Var};

/// One stage of the pooling head. Two-dimensional stages pool the spatial
/// grid; a one-dimensional stage flattens the grid and pools the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PoolStage {
    Pool2d([usize; 2]),
    Pool1d([usize; 1]),
}

pub fn default_pool_stack() -> Vec<PoolStage> {
    vec![PoolStage::Pool2d([3, 3]), PoolStage::Pool2d([2, 2]), PoolStage::Pool1d([1])]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub num_classes: usize,
    pub input_size: usize,
    pub in_channels: usize,
    /// Output channels of each stride-2 conv block.
    pub widths: Vec<usize>,
    pub pool_stack: Vec<PoolStage>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            num_classes: 79,
            input_size: 299,
            in_channels: 3,
            widths: vec![16, 32, 64, 64],
            pool_stack: default_pool_stack(),
        }
    }
}

impl ClassifierConfig {
    /// Spatial side of the backbone output.
    pub fn feature_side(&self) -> usize {
        self.widths.iter().fold(self.input_size, |s, _| s.div_ceil(2))
    }

    pub fn feature_channels(&self) -> usize {
        self.widths.last().copied().unwrap_or(self.in_channels)
    }

    /// Width `F` of the vector fed to the final linear layer.
    pub fn head_width(&self) -> usize {
        let mut per_channel = self.feature_side() * self.feature_side();
        for st in &self.pool_stack {
            per_channel = match st {
                PoolStage::Pool2d([h, w]) => h * w,
                PoolStage::Pool1d([l]) => *l,
            };
        }
        self.feature_channels() * per_channel
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "ClassifierConfig";
        ensure!(self.num_classes >= 2, OP, "num_classes must be at least 2, got {}", self.num_classes);
        ensure!(self.input_size > 0 && self.in_channels > 0, OP, "input size and channels must be positive");
        ensure!(self.widths.iter().all(|&w| w > 0), OP, "block widths must be positive");
        let (mut h, mut w) = (self.feature_side(), self.feature_side());
        let mut flat: Option<usize> = None;
        for st in &self.pool_stack {
            match (*st, flat) {
                (PoolStage::Pool2d([oh, ow]), None) => {
                    ensure!(
                        oh > 0 && ow > 0 && oh <= h && ow <= w,
                        OP,
                        "pool stage {}x{} does not fit a {}x{} grid",
                        oh,
                        ow,
                        h,
                        w
                    );
                    (h, w) = (oh, ow);
                }
                (PoolStage::Pool1d([l]), _) => {
                    let len = flat.unwrap_or(h * w);
                    ensure!(l > 0 && l <= len, OP, "pool1d length {} does not fit {}", l, len);
                    flat = Some(l);
                }
                (PoolStage::Pool2d(_), Some(_)) => {
                    return Err(crate::Error::contract(OP, "2-D pool stage after a 1-D stage"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub cfg: ClassifierConfig,
    pub params: ParamSet,
}

/// He-uniform weights from a per-layer seeded stream, zero biases.
pub fn build_classifier(cfg: &ClassifierConfig, seed: u64) -> Result<ClassifierParams> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    let mut cin = cfg.in_channels;
    for (i, &w) in cfg.widths.iter().enumerate() {
        let mut rng = stream(seed, &[0xC1A5, i as u64]);
        p.insert(format!("backbone.{i}.weight"), he_uniform(&[w, cin, 3, 3], cin * 9, &mut rng))?;
        p.insert(format!("backbone.{i}.bias"), Tensor::zeros(&[w]))?;
        cin = w;
    }
    let f = cfg.head_width();
    let mut rng = stream(seed, &[0xC1A5, 0xFC]);
    p.insert("fc.weight", he_uniform(&[cfg.num_classes, f], f, &mut rng))?;
    p.insert("fc.bias", Tensor::zeros(&[cfg.num_classes]))?;
    Ok(ClassifierParams { cfg: cfg.clone(), params: p })
}

impl ClassifierParams {
    /// Checks loaded tensors against the config.
    pub fn check(&self) -> Result<()> {
        self.cfg.validate()?;
        let want = build_classifier(&self.cfg, 0)?;
        ensure!(
            want.params.names() == self.params.names(),
            "ClassifierParams",
            "parameter names {:?} do not match the config",
            self.params.names()
        );
        for ((name, a), b) in self.params.iter().zip(want.params.tensors()) {
            ensure!(
                a.shape() == b.shape(),
                "ClassifierParams",
                "`{}` has shape {:?}, config needs {:?}",
                name,
                a.shape(),
                b.shape()
            );
        }
        Ok(())
    }
}

/// Pools `[N,C,H,W]` through `stack`, returning `[N, C * L]`.
pub fn pool_head(tape: &mut GradTape, features: Var, stack: &[PoolStage]) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    ensure!(s.len() == 4, "stacked_pool", "expected [N,C,H,W], got {:?}", s);
    let (n, c) = (s[0], s[1]);
    let mut x = features;
    let mut flat = false;
    for st in stack {
        match *st {
            PoolStage::Pool2d([h, w]) => x = tape.adaptive_avg_pool2d(x, h, w)?,
            PoolStage::Pool1d([l]) => {
                if !flat {
                    let sh = tape.shape(x).to_vec();
                    x = tape.reshape(x, &[n, c, sh[2] * sh[3]])?;
                    flat = true;
                }
                x = tape.adaptive_avg_pool1d(x, l)?;
            }
        }
    }
    let len = tape.value(x).len() / n;
    tape.reshape(x, &[n, len])
}

/// 3x3, then 2x2, then a length-1 pool of the flattened 2x2 grid.
pub fn stacked_pool(features: &Tensor) -> Result<Tensor> {
    ensure!(features.rank() == 3, "stacked_pool", "expected [C,H,W], got {:?}", features.shape());
    let s = features.shape();
    ensure!(
        s[1] >= 3 && s[2] >= 3,
        "stacked_pool",
        "spatial extent {}x{} is below 3x3",
        s[1],
        s[2]
    );
    let mut tape = GradTape::new();
    let x = tape.leaf(features.reshape(&[1, s[0], s[1], s[2]])?);
    let y = pool_head(&mut tape, x, &default_pool_stack())?;
    tape.value(y).reshape(&[s[0]])
}

/// Conv blocks, pooling head and linear layer; `[N,C,S,S]` to logits `[N,classes]`.
pub fn classifier_forward(tape: &mut GradTape, batch: Var, params: &ClassifierParams) -> Result<Var> {
    let cfg = &params.cfg;
    let s = tape.shape(batch).to_vec();
    ensure!(
        s.len() == 4 && s[1] == cfg.in_channels && s[2] == cfg.input_size && s[3] == cfg.input_size,
        "classifier_forward",
        "input {:?} does not match [N,{},{},{}]",
        s,
        cfg.in_channels,
        cfg.input_size,
        cfg.input_size
    );
    let p = &params.params;
    let mut x = batch;
    for i in 0..cfg.widths.len() {
        let w = tape.param_named(p, &format!("backbone.{i}.weight"))?;
        let b = tape.param_named(p, &format!("backbone.{i}.bias"))?;
        x = tape.conv2d(x, w, b, 2, PadMode::Same)?;
        x = tape.relu(x);
    }
    let h = pool_head(tape, x, &cfg.pool_stack)?;
    let w = tape.param_named(p, "fc.weight")?;
    let b = tape.param_named(p, "fc.bias")?;
    tape.linear(h, w, b)
}

/// Logits for a batch without recording gradients.
pub fn logits(batch: &Tensor, params: &ClassifierParams) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let x = tape.leaf(batch.clone());
    let y = classifier_forward(&mut tape, x, params)?;
    Ok(tape.value(y).clone())
}

/// Argmax with ties to the lowest index, and its softmax probability.
pub fn argmax_confidence(row: &[f32]) -> (usize, f32) {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    let lse: f64 = row.iter().map(|&v| ((v - row[best]) as f64).exp()).sum();
    (best, (1.0 / lse) as f32)
}

pub fn predict(image: &Tensor, params: &ClassifierParams) -> Result<(usize, f32)> {
    ensure!(image.rank() == 3, "predict", "expected [C,S,S], got {:?}", image.shape());
    let s = image.shape();
    let out = logits(&image.reshape(&[1, s[0], s[1], s[2]])?, params)?;
    Ok(argmax_confidence(out.data()))
}

/// Softmax over each row of `[N,C]` logits.
pub fn probabilities(logits: &Tensor) -> Result<Tensor> {
    ops::softmax(logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ClassifierConfig {
        ClassifierConfig {
            num_classes: 5,
            input_size: 16,
            widths: vec![4, 6],
            ..Default::default()
        }
    }

    #[test]
    fn stacked_pool_chain() {
        let x = Tensor::from_fn(&[1, 4, 4], |i| i as f32 + 1.0);
        assert_eq!(stacked_pool(&x).unwrap().data(), &[8.5]);
    }

    #[test]
    fn stacked_pool_constant_and_extent() {
        let x = Tensor::full(&[3, 7, 5], 2.25);
        assert_eq!(stacked_pool(&x).unwrap().data(), &[2.25; 3]);
        assert!(stacked_pool(&Tensor::zeros(&[1, 2, 5])).is_err());
    }

    #[test]
    fn default_head_shape() {
        let cfg = ClassifierConfig::default();
        assert_eq!(cfg.feature_side(), 19);
        let p = build_classifier(&cfg, 1).unwrap();
        assert_eq!(p.params.get("fc.weight").unwrap().shape(), &[79, 64]);
        assert!(p.params.iter().filter(|(n, _)| n.ends_with(".bias")).all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn build_is_seeded() {
        assert_eq!(build_classifier(&small(), 4).unwrap(), build_classifier(&small(), 4).unwrap());
        assert_ne!(build_classifier(&small(), 4).unwrap(), build_classifier(&small(), 5).unwrap());
        let bad = ClassifierConfig { num_classes: 1, ..small() };
        assert!(build_classifier(&bad, 0).is_err());
    }

    #[test]
    fn forward_rows_are_independent() {
        let p = build_classifier(&small(), 2).unwrap();
        let one = Tensor::from_fn(&[1, 3, 16, 16], |i| ((i * 37) % 11) as f32 / 11.0);
        let two = Tensor::new(vec![2, 3, 16, 16], [one.data(), one.data()].concat()).unwrap();
        let l = logits(&two, &p).unwrap();
        assert_eq!(l.shape(), &[2, 5]);
        assert_eq!(l.data()[..5], l.data()[5..]);
        assert!(logits(&Tensor::zeros(&[1, 3, 8, 8]), &p).is_err());
    }

    #[test]
    fn predict_example() {
        let (c, conf) = argmax_confidence(&[0.1, 2.0, -1.0]);
        assert_eq!(c, 1);
        let z = 0.1f64.exp() + 2.0f64.exp() + (-1.0f64).exp();
        assert!((conf as f64 - 2.0f64.exp() / z).abs() < 1e-6);
        assert_eq!(argmax_confidence(&[1.0, 3.0, 3.0]).0, 1);
    }
}
