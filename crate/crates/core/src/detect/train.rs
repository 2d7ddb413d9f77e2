use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::optim::{amsgrad_step, clip_grad_norm, OptState, OptimHyper};
use crate::rng::{shuffled, stream};
use crate::tensor::{ops, GradTape, Tensor};

use super::anchors::{generate_anchors, label_anchors, sample_anchors};
use super::geometry::{encode_deltas, BBox};
use super::loss::{multi_task_loss, ImageTargets, LossBreakdown};
use super::model::{backbone_forward, crop_features, mask_head_forward, roi_cells, rpn_forward, DetectorParams};
use super::DetectorConfig;

/// One annotated training image at detector input size.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorSample {
    /// `[C, H, W]`, intensities in `[0, 1]`.
    pub image: Tensor,
    pub gt: BBox,
    /// `[H, W]` binary iris mask.
    pub mask: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimHyper,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f32>,
    /// Fraction of the manifest used for training; the rest is held out.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        DetectorTrainConfig {
            epochs: 40,
            batch_size: 4,
            optim: OptimHyper { lr: 2e-3, ..OptimHyper::default() },
            clip_norm: Some(10.0),
            train_fraction: 0.2,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DetectorTraining {
    /// Parameters from the epoch with the lowest mean total loss.
    pub params: DetectorParams,
    pub trace: Vec<LossBreakdown>,
    pub best_epoch: usize,
    pub opt_state: OptState,
}

/// Binary `M x M` target for the feature-aligned region around `roi`.
pub fn mask_target(mask: &Tensor, roi: &BBox, cfg: &DetectorConfig) -> Result<Tensor> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let (gh, gw) = cfg.grid();
    let s = cfg.feature_stride();
    let (y0, y1, x0, x1) = roi_cells(roi, s as f32, gh, gw);
    let (py0, py1) = (y0 * s, (y1 * s).min(h));
    let (px0, px1) = (x0 * s, (x1 * s).min(w));
    let crop = Tensor::from_fn(&[py1 - py0, px1 - px0], |k| {
        let (r, c) = (k / (px1 - px0), k % (px1 - px0));
        mask.data()[(py0 + r) * w + px0 + c]
    });
    let m = ops::resize_bilinear(&crop, cfg.mask_size, cfg.mask_size)?;
    Ok(m.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

/// Labels the anchors of one image against its ground truth and samples the
/// objectness/regression targets. Deterministic in `rng`.
pub fn build_targets(
    sample: &DetectorSample,
    anchors: &[BBox],
    cfg: &DetectorConfig,
    rng: &mut impl rand::Rng,
) -> Result<ImageTargets> {
    let labels = label_anchors(anchors, &[sample.gt], cfg.pos_thresh, cfg.neg_thresh)?;
    let (pos, neg) = sample_anchors(&labels, cfg.anchors_per_image, rng);
    let mut sampled: Vec<(usize, bool)> = pos.iter().map(|&p| (p, true)).chain(neg.iter().map(|&n| (n, false))).collect();
    sampled.sort_unstable();
    let box_targets = pos
        .iter()
        .map(|&p| Ok((p, encode_deltas(&anchors[p], &sample.gt)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageTargets {
        sampled,
        box_targets,
        mask_target: Some(mask_target(&sample.mask, &sample.gt, cfg)?),
    })
}

/// Mini-batch AMSGrad on the multi-task loss. The returned parameters are the
/// ones from the epoch with the lowest mean total loss.
pub fn train_detector(
    samples: &[DetectorSample],
    cfg: &DetectorConfig,
    tcfg: &DetectorTrainConfig,
) -> Result<DetectorTraining> {
    const OP: &str = "train_detector";
    ensure!(!samples.is_empty(), OP, "empty training split");
    ensure!(tcfg.epochs > 0 && tcfg.batch_size > 0, OP, "epochs and batch_size must be positive");
    cfg.validate()?;
    for (i, s) in samples.iter().enumerate() {
        ensure!(
            s.image.shape() == [cfg.in_channels, cfg.input_size[0], cfg.input_size[1]],
            OP,
            "sample {} has shape {:?}, detector expects [{}, {}, {}]",
            i,
            s.image.shape(),
            cfg.in_channels,
            cfg.input_size[0],
            cfg.input_size[1]
        );
    }
    let (gh, gw) = cfg.grid();
    let anchors = generate_anchors(gh, gw, &cfg.anchors)?;
    let stride = cfg.feature_stride() as f32;

    let mut params = DetectorParams::init(cfg, tcfg.seed)?;
    let mut state = OptState::new(&params.params);
    let mut best: Option<(f32, usize, DetectorParams)> = None;
    let mut trace = Vec::with_capacity(tcfg.epochs);

    for epoch in 0..tcfg.epochs {
        let order = shuffled(samples.len(), &mut stream(tcfg.seed, &[0xE90C, epoch as u64]));
        let mut sums = [0.0f64; 3];
        let mut batches = 0usize;
        for batch in order.chunks(tcfg.batch_size) {
            let images = Tensor::stack(&batch.iter().map(|&i| samples[i].image.clone()).collect::<Vec<_>>())?;
            let targets = batch
                .iter()
                .map(|&i| {
                    let mut rng = stream(tcfg.seed, &[0x5A3, epoch as u64, i as u64]);
                    build_targets(&samples[i], &anchors, cfg, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;

            let mut tape = GradTape::new();
            let x = tape.leaf(images);
            let feats = backbone_forward(&mut tape, x, &params, cfg)?;
            let (scores, deltas) = rpn_forward(&mut tape, feats, &params)?;
            let mut masks = Vec::with_capacity(batch.len());
            for (n, &i) in batch.iter().enumerate() {
                let crop = crop_features(&mut tape, feats, n, &samples[i].gt, stride)?;
                masks.push(Some(mask_head_forward(&mut tape, crop, &params, cfg)?));
            }
            let loss = multi_task_loss(&mut tape, scores, deltas, &masks, &targets, cfg.box_beta)?;
            let b = loss.breakdown(&tape);
            sums[0] += b.l_cls as f64;
            sums[1] += b.l_box as f64;
            sums[2] += b.l_mask as f64;
            batches += 1;

            let grads = tape.backward(loss.total)?;
            let mut g = grads.for_params(&params.params);
            if let Some(max) = tcfg.clip_norm {
                clip_grad_norm(&mut g, max);
            }
            amsgrad_step(&mut params.params, &g, &mut state, &tcfg.optim)?;
        }
        let k = batches as f64;
        let rec = LossBreakdown::from_parts((sums[0] / k) as f32, (sums[1] / k) as f32, (sums[2] / k) as f32);
        trace.push(rec);
        if best.as_ref().is_none_or(|(t, _, _)| rec.total < *t) {
            best = Some((rec.total, epoch, params.clone()));
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(DetectorTraining {
        params: best_params,
        trace,
        best_epoch,
        opt_state: state,
    })
}
