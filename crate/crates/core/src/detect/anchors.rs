use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng::shuffled;

use super::geometry::{iou, BBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorGridConfig {
    /// Pixels per feature cell.
    pub stride: f32,
    pub scales: Vec<f32>,
    /// Width / height.
    pub ratios: Vec<f32>,
    pub base_size: f32,
}

impl Default for AnchorGridConfig {
    fn default() -> Self {
        AnchorGridConfig {
            stride: 4.0,
            scales: vec![1.0, 2.0, 4.0],
            ratios: vec![0.5, 1.0, 2.0],
            base_size: 4.0,
        }
    }
}

impl AnchorGridConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "AnchorGridConfig";
        ensure!(self.stride > 0.0, OP, "stride must be positive, got {}", self.stride);
        ensure!(self.base_size > 0.0, OP, "base_size must be positive, got {}", self.base_size);
        ensure!(
            !self.scales.is_empty() && self.scales.iter().all(|&s| s > 0.0),
            OP,
            "scales must be a non-empty list of positive values, got {:?}",
            self.scales
        );
        ensure!(
            !self.ratios.is_empty() && self.ratios.iter().all(|&r| r > 0.0),
            OP,
            "ratios must be a non-empty list of positive values, got {:?}",
            self.ratios
        );
        Ok(())
    }
}

/// Anchors for a `grid_h x grid_w` feature map, ordered by cell (row-major),
/// then scale, then ratio. Anchor `(i, j, s, r)` has index
/// `((i * grid_w + j) * |scales| + s) * |ratios| + r`.
pub fn generate_anchors(grid_h: usize, grid_w: usize, cfg: &AnchorGridConfig) -> Result<Vec<BBox>> {
    cfg.validate()?;
    ensure!(
        grid_h > 0 && grid_w > 0,
        "generate_anchors",
        "grid extents must be positive, got {}x{}",
        grid_h,
        grid_w
    );
    let shapes: Vec<(f32, f32)> = cfg
        .scales
        .iter()
        .flat_map(|&s| {
            cfg.ratios.iter().map(move |&r| {
                let side = cfg.base_size * s;
                (side * r.sqrt(), side / r.sqrt())
            })
        })
        .collect();
    let mut anchors = Vec::with_capacity(grid_h * grid_w * shapes.len());
    for i in 0..grid_h {
        let cy = (i as f32 + 0.5) * cfg.stride;
        for j in 0..grid_w {
            let cx = (j as f32 + 0.5) * cfg.stride;
            anchors.extend(shapes.iter().map(|&(w, h)| BBox::from_center(cx, cy, w, h)));
        }
    }
    Ok(anchors)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorLabels {
    pub labels: Vec<AnchorLabel>,
    /// Matched ground-truth index; `Some` exactly for positives.
    pub matched: Vec<Option<usize>>,
}

impl AnchorLabels {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices(AnchorLabel::Positive)
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices(AnchorLabel::Negative)
    }

    fn indices(&self, which: AnchorLabel) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(move |(_, &l)| l == which)
            .map(|(i, _)| i)
    }
}

/// Max-IoU anchor labeling with a forced match: every ground truth's best
/// anchor (all ties included) becomes positive regardless of thresholds.
pub fn label_anchors(anchors: &[BBox], gt_boxes: &[BBox], pos_thresh: f32, neg_thresh: f32) -> Result<AnchorLabels> {
    ensure!(!anchors.is_empty(), "label_anchors", "empty anchor list");
    ensure!(
        (0.0..=1.0).contains(&neg_thresh) && neg_thresh <= pos_thresh && pos_thresh <= 1.0,
        "label_anchors",
        "thresholds must satisfy 0 <= neg ({}) <= pos ({}) <= 1",
        neg_thresh,
        pos_thresh
    );
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    let mut matched = vec![None; anchors.len()];
    if gt_boxes.is_empty() {
        return Ok(AnchorLabels { labels, matched });
    }
    let ious: Vec<Vec<f32>> = anchors
        .iter()
        .map(|a| gt_boxes.iter().map(|g| iou(a, g)).collect())
        .collect();
    for (k, row) in ious.iter().enumerate() {
        let (best_gt, best) = row
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |acc, (g, &v)| if v > acc.1 { (g, v) } else { acc });
        if best >= pos_thresh {
            labels[k] = AnchorLabel::Positive;
            matched[k] = Some(best_gt);
        } else if best >= neg_thresh {
            labels[k] = AnchorLabel::Ignore;
        }
    }
    // An anchor claimed by an earlier ground truth's forced match keeps it.
    let mut forced = vec![false; anchors.len()];
    for g in 0..gt_boxes.len() {
        let best = ious.iter().map(|row| row[g]).fold(f32::NEG_INFINITY, f32::max);
        for (k, row) in ious.iter().enumerate() {
            if row[g] == best && !forced[k] {
                labels[k] = AnchorLabel::Positive;
                matched[k] = Some(g);
                forced[k] = true;
            }
        }
    }
    Ok(AnchorLabels { labels, matched })
}

/// Draws up to `cap / 2` positives and fills the remainder of `cap` with negatives.
pub fn sample_anchors(labels: &AnchorLabels, cap: usize, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let pos: Vec<usize> = labels.positives().collect();
    let neg: Vec<usize> = labels.negatives().collect();
    let n_pos = pos.len().min(cap / 2);
    let n_neg = neg.len().min(cap - n_pos);
    let mut take = |v: &[usize], n: usize| -> Vec<usize> {
        let mut picked: Vec<usize> = shuffled(v.len(), rng).into_iter().take(n).map(|i| v[i]).collect();
        picked.sort_unstable();
        picked
    };
    let p = take(&pos, n_pos);
    let n = take(&neg, n_neg);
    (p, n)
}
