//! Independent reference implementations used by several test files.
#![allow(dead_code)]

use iriscale::detect::{iou, BBox, Detection, ImageTargets};
use iriscale::Tensor;
use rand::Rng;

/// IoU of two integer boxes by counting covered pixels.
pub fn pixel_iou(a: [u32; 4], b: [u32; 4]) -> f64 {
    let side = a.iter().chain(&b).copied().max().unwrap_or(0);
    let inside = |r: [u32; 4], x: u32, y: u32| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (mut inter, mut union) = (0u32, 0u32);
    for y in 0..side {
        for x in 0..side {
            let (p, q) = (inside(a, x, y), inside(b, x, y));
            inter += u32::from(p && q);
            union += u32::from(p || q);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn int_box(rng: &mut impl Rng, max: u32) -> [u32; 4] {
    let x0 = rng.gen_range(0..max - 1);
    let y0 = rng.gen_range(0..max - 1);
    [x0, y0, rng.gen_range(x0 + 1..=max), rng.gen_range(y0 + 1..=max)]
}

pub fn to_bbox(b: [u32; 4]) -> BBox {
    BBox::new(b[0] as f32, b[1] as f32, b[2] as f32, b[3] as f32).unwrap()
}

/// Greedy suppression characterized by subsets: the kept set K is the one
/// where a box belongs to K exactly when no higher-scoring member of K
/// overlaps it above the threshold. Scores must be distinct. Returns input
/// indices in descending score order.
pub fn brute_force_nms(dets: &[Detection], thresh: f32) -> Vec<usize> {
    let n = dets.len();
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let member = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|b| {
            let unsuppressed = (0..n).all(|k| {
                !(member(k) && dets[k].objectness > dets[b].objectness && iou(&dets[k].bbox, &dets[b].bbox) > thresh)
            });
            member(b) == unsuppressed
        });
        if consistent {
            found.push(mask);
        }
    }
    assert_eq!(found.len(), 1, "exactly one consistent keep set");
    let mut kept: Vec<usize> = (0..n).filter(|&i| found[0] & (1 << i) != 0).collect();
    kept.sort_by(|&a, &b| dets[b].objectness.total_cmp(&dets[a].objectness));
    kept
}

fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Scalar recomputation of the detector loss in f64. `scores` is
/// `[N,2A,H,W]`, `deltas` `[N,4A,H,W]`; anchor `k` lives at cell
/// `k / A` (row-major) with slot `k % A`.
pub fn scalar_multi_task_loss(
    scores: &Tensor,
    deltas: &Tensor,
    masks: &[Option<Tensor>],
    targets: &[ImageTargets],
    beta: f64,
) -> (f64, f64, f64) {
    let s = scores.shape();
    let (a, w) = (s[1] / 2, s[3]);
    let cell = |k: usize| (k % a, (k / a) / w, (k / a) % w);

    let mut ce = Vec::new();
    let mut sl1 = Vec::new();
    for (n, t) in targets.iter().enumerate() {
        for &(k, fg) in &t.sampled {
            let (slot, i, j) = cell(k);
            let bg_logit = scores.at(&[n, 2 * slot, i, j]) as f64;
            let fg_logit = scores.at(&[n, 2 * slot + 1, i, j]) as f64;
            let m = bg_logit.max(fg_logit);
            let lse = m + ((bg_logit - m).exp() + (fg_logit - m).exp()).ln();
            ce.push(lse - if fg { fg_logit } else { bg_logit });
        }
        for &(k, d) in &t.box_targets {
            let (slot, i, j) = cell(k);
            for (c, target) in d.to_array().into_iter().enumerate() {
                let diff = (deltas.at(&[n, 4 * slot + c, i, j]) as f64 - target as f64).abs();
                sl1.push(if diff < beta { 0.5 * diff * diff / beta } else { diff - 0.5 * beta });
            }
        }
    }
    let mut per_roi = Vec::new();
    for (logits, t) in masks.iter().zip(targets) {
        if let (Some(l), Some(y)) = (logits, &t.mask_target) {
            let terms: Vec<f64> = l
                .data()
                .iter()
                .zip(y.data())
                .map(|(&x, &y)| {
                    let (x, y) = (x as f64, y as f64);
                    log1p_exp(x) - x * y
                })
                .collect();
            per_roi.push(mean(&terms));
        }
    }
    (mean(&ce), mean(&sl1), mean(&per_roi))
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng, lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// One randomized crop through the full normalization pipeline. Checks the
/// output shape, that every padded cell is exactly zero and that the content
/// rectangle equals the standalone crop-and-resize bit for bit.
pub fn check_normalization(seed: u64) -> Result<(), String> {
    use iriscale::preprocess::{crop_box, pixel_normalize, preprocess_pipeline, resize_to_width, PipelineConfig};
    let mut rng = iriscale::rng::stream(seed, &[0x9AD]);
    let channels = if rng.gen_bool(0.5) { 1 } else { 3 };
    let (h, w) = (rng.gen_range(8..80), rng.gen_range(8..80));
    let raw = Tensor::from_fn(&[channels, h, w], |_| rng.gen_range(1..=255) as f32);
    let x0 = rng.gen_range(-5.0..w as f32 - 2.0);
    let y0 = rng.gen_range(-5.0..h as f32 - 2.0);
    let x1 = x0.max(0.0) + rng.gen_range(1.5..w as f32);
    let y1 = y0.max(0.0) + rng.gen_range(1.5..h as f32);
    let bbox = BBox::new(x0, y0, x1, y1).unwrap();
    let side = rng.gen_range(8..48);
    let cfg = PipelineConfig { side, classifier_input: side, center: false };
    let out = preprocess_pipeline(&raw, &Detection { bbox, objectness: 1.0, mask: None }, &cfg).map_err(|e| e.to_string())?;
    if out.shape() != [3, side, side] {
        return Err(format!("shape {:?}", out.shape()));
    }
    let content = pixel_normalize(&resize_to_width(&crop_box(&raw, &bbox).unwrap(), side).unwrap()).unwrap();
    let (ch, cw) = (content.shape()[1], content.shape()[2]);
    for k in 0..3 {
        let src = if channels == 1 { 0 } else { k };
        for y in 0..side {
            for x in 0..side {
                let v = out.at(&[k, y, x]);
                if y < ch && x < cw {
                    if v.to_bits() != content.at(&[src, y, x]).to_bits() {
                        return Err(format!("content differs at ({k},{y},{x})"));
                    }
                } else if v.to_bits() != 0.0f32.to_bits() {
                    return Err(format!("pad cell ({k},{y},{x}) = {v}"));
                }
            }
        }
    }
    Ok(())
}

pub fn scalar_param(v: f32) -> iriscale::optim::ParamSet {
    let mut p = iriscale::optim::ParamSet::new();
    p.insert("theta", Tensor::scalar(v)).unwrap();
    p
}

/// AMSGrad on `f(theta) = theta^2` from `theta = 1` at `lr = 1e-2`: the first
/// step count with `|theta| < 1e-2`, if reached within `max_steps`.
pub fn amsgrad_quadratic_steps(max_steps: usize) -> Option<usize> {
    use iriscale::optim::{amsgrad_step, OptState, OptimHyper};
    let mut p = scalar_param(1.0);
    let mut s = OptState::new(&p);
    let h = OptimHyper { lr: 1e-2, ..OptimHyper::default() };
    for step in 1..=max_steps {
        let g = 2.0 * p.tensors()[0].item();
        amsgrad_step(&mut p, &[Tensor::scalar(g)], &mut s, &h).unwrap();
        if p.tensors()[0].item().abs() < 1e-2 {
            return Some(step);
        }
    }
    None
}

/// Random gradient streams through AMSGrad; returns the number of elementwise
/// decreases of `v_hat` seen over `steps` updates.
pub fn v_hat_decreases(seed: u64, steps: usize) -> usize {
    use iriscale::optim::{amsgrad_step, OptState, OptimHyper, ParamSet};
    let mut rng = iriscale::rng::stream(seed, &[0x7A]);
    let mut p = ParamSet::new();
    p.insert("a", Tensor::zeros(&[4])).unwrap();
    p.insert("b", Tensor::zeros(&[2, 3])).unwrap();
    let mut s = OptState::new(&p);
    let h = OptimHyper { lr: 1e-3, ..OptimHyper::default() };
    let mut bad = 0;
    for _ in 0..steps {
        let scale = 10f32.powf(rng.gen_range(-3.0..2.0));
        let g: Vec<Tensor> = p.tensors().iter().map(|t| random_tensor(t.shape(), &mut rng, -scale, scale)).collect();
        let before = s.v_hat.clone();
        amsgrad_step(&mut p, &g, &mut s, &h).unwrap();
        for (a, b) in before.iter().zip(&s.v_hat) {
            bad += a.data().iter().zip(b.data()).filter(|(x, y)| y < x).count();
        }
    }
    bad
}

/// Writes a UTiris-layout tree: 79 people, both eyes, VW images in `L`/`R`
/// folders and NIR images named with an eye token; 1540 images in total.
pub fn fabricate_utiris(root: &std::path::Path) {
    use iriscale::datagen::save_image;
    let pixel = Tensor::full(&[3, 4, 4], 128.0);
    let grey = Tensor::full(&[1, 4, 4], 128.0);
    let mut eye_class = 0;
    for person in 0..79 {
        for tag in ["L", "R"] {
            let count = if eye_class < 118 { 10 } else { 9 };
            eye_class += 1;
            let dir = root.join(format!("{:03}", person + 1));
            for i in 0..count {
                let (path, img) = if i % 2 == 0 {
                    (dir.join("VW").join(tag).join(format!("{:03}_{i}.png", person + 1)), &pixel)
                } else {
                    (dir.join("NIR").join(format!("img_{tag}_{i}.bmp")), &grey)
                };
                std::fs::create_dir_all(path.parent().unwrap()).unwrap();
                save_image(&path, img).unwrap();
            }
        }
    }
}
