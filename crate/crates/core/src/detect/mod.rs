//! Anchor-based iris region detector.
//!
//! A small convolutional backbone feeds a region-proposal head that scores and
//! regresses `A` anchors per feature cell, plus a mask branch evaluated on the
//! best region. [`train_detector`] fits all three heads jointly on
//! `l_cls + l_box + l_mask`; [`detect_best_region`] returns the single most
//! confident iris region of an image.

mod anchors;
mod geometry;
mod infer;
mod loss;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub use anchors::{generate_anchors, label_anchors, sample_anchors, AnchorGridConfig, AnchorLabel, AnchorLabels};
pub use geometry::{decode_deltas, encode_deltas, iou, nms, BBox, Delta4, Detection, DELTA_LOG_CLIP};
pub use infer::{detect_best_region, detect_regions, detector_input, to_raw};
pub use loss::{multi_task_loss, ImageTargets, LossBreakdown, LossVars};
pub use model::{
    backbone_forward, crop_features, mask_head_forward, objectness, roi_cells, rpn_forward, DetectorParams,
};
pub use train::{build_targets, mask_target, train_detector, DetectorSample, DetectorTrainConfig, DetectorTraining};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub in_channels: usize,
    /// Detector input `[height, width]`; other image sizes are resampled to it.
    pub input_size: [usize; 2],
    /// Output channels of each stride-2 conv block.
    pub backbone_widths: Vec<usize>,
    pub rpn_channels: usize,
    pub anchors: AnchorGridConfig,
    pub pos_thresh: f32,
    pub neg_thresh: f32,
    pub nms_iou: f32,
    /// Anchors sampled per image for the objectness term, at most half positive.
    pub anchors_per_image: usize,
    /// Minimum objectness for a region to count as a detection.
    pub score_floor: f32,
    pub mask_pool: usize,
    pub mask_size: usize,
    pub mask_channels: usize,
    pub box_beta: f32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            in_channels: 3,
            input_size: [64, 64],
            backbone_widths: vec![16, 32],
            rpn_channels: 32,
            anchors: AnchorGridConfig::default(),
            pos_thresh: 0.7,
            neg_thresh: 0.3,
            nms_iou: 0.5,
            anchors_per_image: 32,
            score_floor: 0.05,
            mask_pool: 7,
            mask_size: 14,
            mask_channels: 16,
            box_beta: 1.0,
        }
    }
}

impl DetectorConfig {
    /// Total downsampling of the backbone.
    pub fn feature_stride(&self) -> usize {
        1 << self.backbone_widths.len()
    }

    /// Feature-map extents for the configured input size.
    pub fn grid(&self) -> (usize, usize) {
        let s = self.feature_stride();
        (self.input_size[0].div_ceil(s), self.input_size[1].div_ceil(s))
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "DetectorConfig";
        self.anchors.validate()?;
        ensure!(self.in_channels > 0, OP, "in_channels must be positive");
        ensure!(
            self.input_size.iter().all(|&d| d >= self.feature_stride()),
            OP,
            "input size {:?} smaller than feature stride {}",
            self.input_size,
            self.feature_stride()
        );
        ensure!(
            self.anchors.stride == self.feature_stride() as f32,
            OP,
            "anchor stride {} must equal backbone stride {}",
            self.anchors.stride,
            self.feature_stride()
        );
        ensure!(
            self.backbone_widths.iter().all(|&w| w > 0) && self.rpn_channels > 0 && self.mask_channels > 0,
            OP,
            "channel widths must be positive"
        );
        ensure!(
            0.0 <= self.neg_thresh && self.neg_thresh <= self.pos_thresh && self.pos_thresh <= 1.0,
            OP,
            "thresholds must satisfy 0 <= neg <= pos <= 1"
        );
        ensure!(self.anchors_per_image >= 2, OP, "anchors_per_image must be at least 2");
        ensure!(self.mask_pool > 0 && self.mask_size > 0, OP, "mask extents must be positive");
        ensure!(self.box_beta > 0.0, OP, "box_beta must be positive");
        Ok(())
    }
}
