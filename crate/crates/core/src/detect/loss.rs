use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::{GradTape, Tensor, Var};

use super::geometry::Delta4;
use super::model::{anchor_cell, feature_offset};

/// The three loss terms and their sum; `total == l_cls + l_box + l_mask` in `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f32,
    pub l_box: f32,
    pub l_mask: f32,
    pub total: f32,
}

impl LossBreakdown {
    pub fn from_parts(l_cls: f32, l_box: f32, l_mask: f32) -> Self {
        LossBreakdown {
            l_cls,
            l_box,
            l_mask,
            total: l_cls + l_box + l_mask,
        }
    }
}

/// Training targets for one image of a batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageTargets {
    /// Sampled anchors for the objectness term: `(anchor index, is foreground)`.
    pub sampled: Vec<(usize, bool)>,
    /// Regression targets for the sampled positive anchors.
    pub box_targets: Vec<(usize, Delta4)>,
    /// Binary `M x M` mask target for the positive ROI, if any.
    pub mask_target: Option<Tensor>,
}

/// Tape handles of each loss term.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub cls: Var,
    pub bbox: Var,
    pub mask: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &GradTape) -> LossBreakdown {
        LossBreakdown {
            l_cls: tape.value(self.cls).item(),
            l_box: tape.value(self.bbox).item(),
            l_mask: tape.value(self.mask).item(),
            total: tape.value(self.total).item(),
        }
    }
}

/// `l_cls`: cross entropy over sampled anchors; `l_box`: smooth-L1 over the
/// positive anchors' deltas; `l_mask`: sigmoid BCE over the positive ROI masks.
/// A term with nothing to score is exactly 0.
pub fn multi_task_loss(
    tape: &mut GradTape,
    scores: Var,
    deltas: Var,
    mask_logits: &[Option<Var>],
    targets: &[ImageTargets],
    box_beta: f32,
) -> Result<LossVars> {
    const OP: &str = "multi_task_loss";
    let s_shape = tape.shape(scores).to_vec();
    let d_shape = tape.shape(deltas).to_vec();
    ensure!(s_shape.len() == 4, OP, "scores must be [N,2A,H,W], got {:?}", s_shape);
    let (n, a2, h, w) = (s_shape[0], s_shape[1], s_shape[2], s_shape[3]);
    let a = a2 / 2;
    ensure!(
        d_shape == [n, 4 * a, h, w],
        OP,
        "deltas {:?} misaligned with scores {:?}",
        d_shape,
        s_shape
    );
    ensure!(
        targets.len() == n && mask_logits.len() == n,
        OP,
        "{} images but {} target sets and {} mask predictions",
        n,
        targets.len(),
        mask_logits.len()
    );
    let num_anchors = h * w * a;

    let mut cls_idx = Vec::new();
    let mut cls_labels = Vec::new();
    let mut box_idx = Vec::new();
    let mut box_vals = Vec::new();
    for (img, t) in targets.iter().enumerate() {
        for &(anchor, fg) in &t.sampled {
            ensure!(anchor < num_anchors, OP, "anchor {} out of range for {} anchors", anchor, num_anchors);
            let (ak, i, j) = anchor_cell(anchor, a, w);
            cls_idx.push(feature_offset(&s_shape, img, 2 * ak, i, j));
            cls_idx.push(feature_offset(&s_shape, img, 2 * ak + 1, i, j));
            cls_labels.push(usize::from(fg));
        }
        for &(anchor, d) in &t.box_targets {
            ensure!(anchor < num_anchors, OP, "anchor {} out of range for {} anchors", anchor, num_anchors);
            let (ak, i, j) = anchor_cell(anchor, a, w);
            for k in 0..4 {
                box_idx.push(feature_offset(&d_shape, img, 4 * ak + k, i, j));
            }
            box_vals.extend(d.to_array());
        }
    }

    let cls = if cls_labels.is_empty() {
        tape.leaf(Tensor::scalar(0.0))
    } else {
        let rows = cls_labels.len();
        let logits = tape.gather(scores, cls_idx, &[rows, 2])?;
        tape.cross_entropy(logits, &cls_labels)?
    };

    let bbox = if box_vals.is_empty() {
        tape.leaf(Tensor::scalar(0.0))
    } else {
        let len = box_vals.len();
        let pred = tape.gather(deltas, box_idx, &[len])?;
        tape.smooth_l1(pred, Tensor::new(vec![len], box_vals)?, box_beta)?
    };

    let mut mask_terms = Vec::new();
    for (img, (logits, t)) in mask_logits.iter().zip(targets).enumerate() {
        match (logits, &t.mask_target) {
            (Some(l), Some(target)) => {
                ensure!(
                    tape.shape(*l) == target.shape(),
                    OP,
                    "image {}: mask logits {:?} vs target {:?}",
                    img,
                    tape.shape(*l),
                    target.shape()
                );
                mask_terms.push(tape.bce_with_logits(*l, target.clone())?);
            }
            (None, None) => {}
            _ => {
                return Err(crate::Error::contract(
                    OP,
                    format!("image {img}: mask prediction and target must be both present or both absent"),
                ))
            }
        }
    }
    // Every ROI mask has the same size, so the mean of per-ROI means is the overall mean.
    let mask = match mask_terms.split_first() {
        None => tape.leaf(Tensor::scalar(0.0)),
        Some((&first, rest)) => {
            let mut acc = first;
            for &m in rest {
                acc = tape.add(acc, m)?;
            }
            if mask_terms.len() == 1 {
                acc
            } else {
                tape.scale(acc, 1.0 / mask_terms.len() as f32)
            }
        }
    };

    let partial = tape.add(cls, bbox)?;
    let total = tape.add(partial, mask)?;
    Ok(LossVars { cls, bbox, mask, total })
}
