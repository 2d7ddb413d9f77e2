use crate::error::{ensure, Error, Result};
use crate::preprocess::{grey_to_3ch, pixel_normalize};
use crate::tensor::{ops, GradTape, Tensor};

use super::anchors::generate_anchors;
use super::geometry::{decode_deltas, nms, BBox, Delta4, Detection};
use super::model::{
    anchor_cell, backbone_forward, crop_features, feature_offset, mask_head_forward, objectness, rpn_forward,
    DetectorParams,
};
use super::DetectorConfig;

/// Converts a raw `[C, H, W]` image with values in `[0, 255]` to detector input:
/// grey images are stacked to three channels, intensities scaled to `[0, 1]`
/// and the image resampled to the configured input size. Returns the input and
/// the `(x, y)` factors mapping input coordinates back to the raw image.
pub fn detector_input(raw: &Tensor, cfg: &DetectorConfig) -> Result<(Tensor, (f32, f32))> {
    ensure!(raw.rank() == 3, "detector_input", "expected [C,H,W], got {:?}", raw.shape());
    let img = if raw.shape()[0] == 1 && cfg.in_channels == 3 {
        grey_to_3ch(raw)?
    } else {
        raw.clone()
    };
    let img = pixel_normalize(&img)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let [th, tw] = cfg.input_size;
    let img = if (h, w) == (th, tw) {
        img
    } else {
        ops::resize_bilinear(&img, th, tw)?
    };
    Ok((img, (w as f32 / tw as f32, h as f32 / th as f32)))
}

/// All regions above the objectness floor after decoding, clipping and NMS,
/// in descending objectness. Masks are not computed here.
pub fn detect_regions(image: &Tensor, params: &DetectorParams, cfg: &DetectorConfig) -> Result<(Vec<Detection>, f32)> {
    let (dets, best, _) = run(image, params, cfg)?;
    Ok((dets, best))
}

fn run(image: &Tensor, params: &DetectorParams, cfg: &DetectorConfig) -> Result<(Vec<Detection>, f32, (GradTape, crate::tensor::Var))> {
    const OP: &str = "detect_best_region";
    ensure!(
        image.shape() == [cfg.in_channels, cfg.input_size[0], cfg.input_size[1]],
        OP,
        "image shape {:?} does not match detector input [{}, {}, {}]",
        image.shape(),
        cfg.in_channels,
        cfg.input_size[0],
        cfg.input_size[1]
    );
    params.check(cfg)?;
    let (h, w) = (cfg.input_size[0] as f32, cfg.input_size[1] as f32);
    let mut tape = GradTape::new();
    let x = tape.leaf(image.reshape(&[1, image.shape()[0], image.shape()[1], image.shape()[2]])?);
    let feats = backbone_forward(&mut tape, x, params, cfg)?;
    let (scores, deltas) = rpn_forward(&mut tape, feats, params)?;
    let (gh, gw) = (tape.shape(scores)[2], tape.shape(scores)[3]);
    let anchors = generate_anchors(gh, gw, &cfg.anchors)?;
    let probs = objectness(tape.value(scores)).remove(0);
    let a = cfg.anchors.anchors_per_cell();
    let dv = tape.value(deltas);
    let mut best = 0.0f32;
    let mut candidates = Vec::new();
    for (k, anchor) in anchors.iter().enumerate() {
        let p = probs[k];
        best = best.max(p);
        if p <= cfg.score_floor {
            continue;
        }
        let (ak, i, j) = anchor_cell(k, a, gw);
        let at = |c: usize| dv.data()[feature_offset(dv.shape(), 0, 4 * ak + c, i, j)];
        let d = Delta4 { dx: at(0), dy: at(1), dw: at(2), dh: at(3) };
        let bbox = decode_deltas(anchor, &d)?.clip(w, h);
        if bbox.area() <= 0.0 || !bbox.area().is_finite() {
            continue;
        }
        candidates.push(Detection { bbox, objectness: p, mask: None });
    }
    Ok((nms(&candidates, cfg.nms_iou), best, (tape, feats)))
}

/// The single most confident iris region, with its mask probabilities.
/// Fails with [`Error::NoIrisFound`] when no anchor exceeds the floor.
pub fn detect_best_region(image: &Tensor, params: &DetectorParams, cfg: &DetectorConfig) -> Result<Detection> {
    let (dets, best, (mut tape, feats)) = run(image, params, cfg)?;
    let Some(mut top) = dets.into_iter().next() else {
        return Err(Error::NoIrisFound { best, floor: cfg.score_floor });
    };
    let crop = crop_features(&mut tape, feats, 0, &top.bbox, cfg.feature_stride() as f32)?;
    let logits = mask_head_forward(&mut tape, crop, params, cfg)?;
    top.mask = Some(tape.value(logits).map(ops::sigmoid));
    Ok(top)
}

/// Maps a box found on detector input back to raw image coordinates.
pub fn to_raw(b: &BBox, factors: (f32, f32)) -> BBox {
    b.scaled(factors.0, factors.1)
}
