use crate::error::{ensure, Result};
use crate::optim::ParamSet;
use crate::rng::{he_uniform, stream};
use crate::tensor::{ops, GradTape, PadMode, Tensor, Var};

use super::geometry::BBox;
use super::DetectorConfig;

/// Learnable detector weights: conv backbone, shared RPN conv, the `2A`-channel
/// score head, the `4A`-channel delta head and the mask branch.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub params: ParamSet,
}

fn conv_param(set: &mut ParamSet, name: &str, cout: usize, cin: usize, k: usize, seed: u64, tag: u64) -> Result<()> {
    let mut rng = stream(seed, &[0xDE7, tag]);
    set.insert(format!("{name}.weight"), he_uniform(&[cout, cin, k, k], cin * k * k, &mut rng))?;
    set.insert(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
    Ok(())
}

impl DetectorParams {
    pub fn init(cfg: &DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let a = cfg.anchors.anchors_per_cell();
        let mut p = ParamSet::new();
        let mut cin = cfg.in_channels;
        let mut tag = 0;
        for (i, &w) in cfg.backbone_widths.iter().enumerate() {
            conv_param(&mut p, &format!("backbone.{i}"), w, cin, 3, seed, tag)?;
            cin = w;
            tag += 1;
        }
        let feat = cin;
        conv_param(&mut p, "rpn.conv", cfg.rpn_channels, feat, 3, seed, 100)?;
        conv_param(&mut p, "rpn.score", 2 * a, cfg.rpn_channels, 1, seed, 101)?;
        conv_param(&mut p, "rpn.delta", 4 * a, cfg.rpn_channels, 1, seed, 102)?;
        conv_param(&mut p, "mask.conv", cfg.mask_channels, feat, 3, seed, 200)?;
        conv_param(&mut p, "mask.out", 1, cfg.mask_channels, 1, seed, 201)?;
        Ok(DetectorParams { params: p })
    }

    /// Verifies the head widths against the anchor count of `cfg`.
    pub fn check(&self, cfg: &DetectorConfig) -> Result<()> {
        let a = cfg.anchors.anchors_per_cell();
        for (name, want) in [("rpn.score.weight", 2 * a), ("rpn.delta.weight", 4 * a)] {
            let t = self
                .params
                .get(name)
                .ok_or_else(|| crate::Error::contract("DetectorParams", format!("missing `{name}`")))?;
            ensure!(
                t.shape()[0] == want,
                "DetectorParams",
                "`{}` has {} output channels, expected {} for {} anchors per cell",
                name,
                t.shape()[0],
                want,
                a
            );
        }
        Ok(())
    }
}

fn conv_block(tape: &mut GradTape, p: &ParamSet, name: &str, x: Var, stride: usize, relu: bool) -> Result<Var> {
    let w = tape.param_named(p, &format!("{name}.weight"))?;
    let b = tape.param_named(p, &format!("{name}.bias"))?;
    let y = tape.conv2d(x, w, b, stride, PadMode::Same)?;
    Ok(if relu { tape.relu(y) } else { y })
}

/// Stride-2 conv + relu blocks; images `[N,C,H,W]` to features `[N,F,H/s,W/s]`.
pub fn backbone_forward(tape: &mut GradTape, images: Var, params: &DetectorParams, cfg: &DetectorConfig) -> Result<Var> {
    let mut x = images;
    for i in 0..cfg.backbone_widths.len() {
        x = conv_block(tape, &params.params, &format!("backbone.{i}"), x, 2, true)?;
    }
    Ok(x)
}

/// Shared 3x3 conv + relu, then parallel 1x1 score (`2A` channels, ordered
/// `bg, fg` per anchor) and delta (`4A` channels, `dx, dy, dw, dh` per anchor) heads.
pub fn rpn_forward(tape: &mut GradTape, features: Var, params: &DetectorParams) -> Result<(Var, Var)> {
    let hidden = conv_block(tape, &params.params, "rpn.conv", features, 1, true)?;
    let scores = conv_block(tape, &params.params, "rpn.score", hidden, 1, false)?;
    let deltas = conv_block(tape, &params.params, "rpn.delta", hidden, 1, false)?;
    ensure!(
        tape.shape(deltas)[1] == 2 * tape.shape(scores)[1],
        "rpn_forward",
        "delta head has {} channels but score head has {}",
        tape.shape(deltas)[1],
        tape.shape(scores)[1]
    );
    Ok((scores, deltas))
}

/// Flat offset of channel `c` at feature cell `(i, j)` of image `n`.
pub(crate) fn feature_offset(shape: &[usize], n: usize, c: usize, i: usize, j: usize) -> usize {
    ((n * shape[1] + c) * shape[2] + i) * shape[3] + j
}

/// Splits an anchor index into `(anchor within cell, row, col)`.
pub(crate) fn anchor_cell(anchor: usize, a: usize, grid_w: usize) -> (usize, usize, usize) {
    let cell = anchor / a;
    (anchor % a, cell / grid_w, cell % grid_w)
}

/// Foreground probability per anchor, softmax over each `(bg, fg)` pair.
/// Returns one vector per image in anchor order.
pub fn objectness(scores: &Tensor) -> Vec<Vec<f32>> {
    let s = scores.shape();
    let (n, a2, h, w) = (s[0], s[1], s[2], s[3]);
    let a = a2 / 2;
    (0..n)
        .map(|img| {
            (0..h * w * a)
                .map(|k| {
                    let (ak, i, j) = anchor_cell(k, a, w);
                    let bg = scores.data()[feature_offset(s, img, 2 * ak, i, j)];
                    let fg = scores.data()[feature_offset(s, img, 2 * ak + 1, i, j)];
                    ops::sigmoid(fg - bg)
                })
                .collect()
        })
        .collect()
}

/// Feature-grid cell range `[y0, y1) x [x0, x1)` covering `roi`, at least one cell.
pub fn roi_cells(roi: &BBox, stride: f32, grid_h: usize, grid_w: usize) -> (usize, usize, usize, usize) {
    let span = |lo: f32, hi: f32, n: usize| {
        let a = ((lo / stride).floor().max(0.0) as usize).min(n - 1);
        let b = ((hi / stride).ceil().max(0.0) as usize).clamp(a + 1, n);
        (a, b)
    };
    let (y0, y1) = span(roi.y_min, roi.y_max, grid_h);
    let (x0, x1) = span(roi.x_min, roi.x_max, grid_w);
    (y0, y1, x0, x1)
}

/// Crops image `n`'s features under `roi` to `[1, F, h, w]`.
pub fn crop_features(tape: &mut GradTape, features: Var, n: usize, roi: &BBox, stride: f32) -> Result<Var> {
    let shape = tape.shape(features).to_vec();
    ensure!(shape.len() == 4 && n < shape[0], "crop_features", "bad feature shape {:?} for image {}", shape, n);
    let (y0, y1, x0, x1) = roi_cells(roi, stride, shape[2], shape[3]);
    let mut idx = Vec::with_capacity(shape[1] * (y1 - y0) * (x1 - x0));
    for c in 0..shape[1] {
        for i in y0..y1 {
            for j in x0..x1 {
                idx.push(feature_offset(&shape, n, c, i, j));
            }
        }
    }
    tape.gather(features, idx, &[1, shape[1], y1 - y0, x1 - x0])
}

/// Mask branch on a feature crop `[1, F, h, w]`: pool to `pool x pool`
/// (crops smaller than that are bilinearly enlarged first), 3x3 conv + relu,
/// 1x1 conv to one channel, bilinear upsample to `mask_size x mask_size` logits.
pub fn mask_head_forward(tape: &mut GradTape, crop: Var, params: &DetectorParams, cfg: &DetectorConfig) -> Result<Var> {
    let shape = tape.shape(crop).to_vec();
    ensure!(
        shape.len() == 4 && shape.iter().all(|&d| d > 0),
        "mask_head_forward",
        "feature crop must be a non-empty [1,F,h,w], got {:?}",
        shape
    );
    let p = cfg.mask_pool;
    let (h, w) = (shape[2], shape[3]);
    let mut x = crop;
    if h < p || w < p {
        x = tape.resize_bilinear(x, h.max(p), w.max(p))?;
    }
    x = tape.adaptive_avg_pool2d(x, p, p)?;
    x = conv_block(tape, &params.params, "mask.conv", x, 1, true)?;
    x = conv_block(tape, &params.params, "mask.out", x, 1, false)?;
    x = tape.resize_bilinear(x, cfg.mask_size, cfg.mask_size)?;
    tape.reshape(x, &[cfg.mask_size, cfg.mask_size])
}
