//! Finite-difference checks of every differentiable operation and of the
//! detector and classifier losses, on seeded random inputs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::detect::{
    backbone_forward, build_targets, crop_features, generate_anchors, mask_head_forward, multi_task_loss, rpn_forward,
    AnchorGridConfig, BBox, DetectorConfig, DetectorParams, DetectorSample,
};
use crate::error::Result;
use crate::recognize::{build_classifier, classifier_forward, pool_head, default_pool_stack, ClassifierConfig};
use crate::rng::stream;
use crate::tensor::{finite_difference_check, finite_difference_check_params, GradCheckReport, GradTape, PadMode, Tensor, Var};

pub const DEFAULT_EPS: f32 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub case: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

type Case = fn(u64, f32, f64) -> Result<GradCheckReport>;

pub const CASES: &[(&str, Case)] = &[
    ("conv2d_valid_stride1", conv_valid),
    ("conv2d_same_stride2", conv_same),
    ("adaptive_avg_pool2d", pool2d),
    ("adaptive_avg_pool1d", pool1d),
    ("stacked_pool", stacked),
    ("linear", linear),
    ("relu", relu),
    ("log_softmax", log_softmax),
    ("cross_entropy", cross_entropy),
    ("smooth_l1", smooth_l1),
    ("bce_with_logits", bce),
    ("resize_bilinear", resize),
    ("gather_reshape_add", gather),
    ("detector_multi_task_loss", detector_loss),
    ("classifier_cross_entropy", classifier_loss),
];

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, so relu kinks stay outside the difference step.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f32 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) { v } else { -v }
    })
}

/// Reduces `y` to a scalar through fixed random weights.
fn project(tape: &mut GradTape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = stream(seed, &[0x9E01]);
    let w = uniform(tape.shape(y), &mut rng, -1.0, 1.0);
    tape.dot(y, w)
}

fn rng(seed: u64, case: u64) -> ChaCha8Rng {
    stream(seed, &[0x6C, case])
}

fn conv_valid(seed: u64, eps: f32, tol: f64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 1);
    let inputs = [
        uniform(&[2, 2, 5, 6], &mut r, -1.0, 1.0),
        uniform(&[3, 2, 3, 3], &mut r, -1.0, 1.0),
        uniform(&[3], &mut r, -1.0, 1.0),
    ];
    finite_difference_check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1, PadMode::Valid)?;
            project(t, y, seed)
        },
        &inputs,
        eps,
        tol,
    )
}

fn conv_same(seed: u64, eps: f32, tol: f64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 2);
    let inputs = [
        uniform(&[1, 2, 7, 6], &mut r, -1.0, 1.0),
        uniform(&[2, 2, 3, 3], &mut r, -1.0, 1.0),
        uniform(&[2], &mut r, -1.0, 1.0),
    ];
    finite_difference_check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2, PadMode::Same)?;
            project(t, y, seed)
        },
        &inputs,
        eps,
        tol,
    )
}

fn pool2d(seed: u64, eps: f32, tol: f64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 3);
    let x = uniform(&[2, 2, 7, 5], &mut r, -1.0, 1.0);
    finite_difference_check(
        |t, v| {
            let y = t.adaptive_avg_pool2d(v[0], 3, 2)?;
            project(t, y, seed)
        },
        &[x],
        eps,
        tol,
    )
}

fn pool1d(seed: u64, eps: f32, tol: f64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 4);
    let x = uniform(&[2, 3, 7], &mut r, -1.0, 1.0);
    finite_difference_check(
        |t, v| {
            let y = t.adaptive_avg_pool1d(v[0], 3)?;
            project(t, y, seed)
        },
        &[x],
        eps,
        tol,
    )
}

fn stacked(seed: u64, eps: f32, tol: f64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 5);
    let (h, w) = (r.gen_range(3..9), r.gen_range(3..9));
    let x = uniform(&[2, 3, h, w], &mut r, -1.0, 1.0);
    finite_difference_check(
        |t, v| {
            let y = pool_head(t, v[0], &default_pool_stack())?;
            project(t, y, seed)
        },
        &[x],
        eps,
        tol,
    )
}

fn linear(seed: u64, eps: f32, tol: f64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 6);
    let inputs = [
        uniform(&[3, 4], &mut r, -1.0, 1.0),
        uniform(&[5, 4], &mut r, -1.0, 1.0),
        uniform(&[5], &mut r, -1.0, 1.0),
    ];
    finite_difference_check(
        |t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            project(t, y, seed)
        },
        &inputs,
        eps,
        tol,
    )
}

fn relu(seed: u64, eps: f32, tol: f64) -> Result<GradCheckReport> {
    let x = off_zero(&[4, 6], &mut rng(seed, 7));
    finite_difference_check(
        |t, v| {
            let y = t.relu(v[0]);
            project(t, y, seed)
        },
        &[x],
        eps,
        tol,
    )
}

fn log_softmax(seed: u64, eps: f32, tol: f64) -> Result<GradCheckReport> {
    let x = uniform(&[3, 5], &mut rng(seed, 8), -2.0, 2.0);
    finite_difference_check(
        |t, v| {
            let y = t.log_softmax(v[0])?;
            project(t, y, seed)
        },
        &[x],
        eps,
        tol,
    )
}

fn cross_entropy(seed: u64, eps: f32, tol: f64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 9);
    let x = uniform(&[4, 5], &mut r, -2.0, 2.0);
    let targets: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
    finite_difference_check(|t, v| t.cross_entropy(v[0], &targets), &[x], eps, tol)
}

fn smooth_l1(seed: u64, eps: f32, tol: f64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 10);
    let target = uniform(&[12], &mut r, -1.0, 1.0);
    // Differences stay clear of 0 and of the beta = 1 knee.
    let pred = Tensor::from_fn(&[12], |i| {
        let d: f32 = match i % 3 {
            0 => r.gen_range(0.05..0.9),
            1 => r.gen_range(1.1..2.5),
            _ => -r.gen_range(0.05..0.9),
        };
        target.data()[i] + d
    });
    finite_difference_check(|t, v| t.smooth_l1(v[0], target.clone(), 1.0), &[pred], eps, tol)
}

fn bce(seed: u64, eps: f32, tol: f64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 11);
    let x = uniform(&[3, 4], &mut r, -3.0, 3.0);
    let y = Tensor::from_fn(&[3, 4], |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 });
    finite_difference_check(|t, v| t.bce_with_logits(v[0], y.clone()), &[x], eps, tol)
}

fn resize(seed: u64, eps: f32, tol: f64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 12);
    let x = uniform(&[1, 2, 4, 5], &mut r, -1.0, 1.0);
    finite_difference_check(
        |t, v| {
            let up = t.resize_bilinear(v[0], 7, 9)?;
            let down = t.resize_bilinear(up, 3, 4)?;
            let a = project(t, up, seed)?;
            let b = project(t, down, seed ^ 1)?;
            t.add(a, b)
        },
        &[x],
        eps,
        tol,
    )
}

fn gather(seed: u64, eps: f32, tol: f64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 13);
    let x = uniform(&[2, 3, 4], &mut r, -1.0, 1.0);
    let idx: Vec<usize> = (0..10).map(|_| r.gen_range(0..24)).collect();
    finite_difference_check(
        |t, v| {
            let g = t.gather(v[0], idx.clone(), &[5, 2])?;
            let flat = t.reshape(v[0], &[24])?;
            let a = project(t, g, seed)?;
            let b = project(t, flat, seed ^ 2)?;
            let s = t.scale(b, 0.5);
            t.add(a, s)
        },
        &[x],
        eps,
        tol,
    )
}

fn small_detector() -> DetectorConfig {
    DetectorConfig {
        input_size: [32, 32],
        backbone_widths: vec![4, 8],
        rpn_channels: 8,
        anchors: AnchorGridConfig { stride: 4.0, scales: vec![2.0, 4.0], ratios: vec![0.5, 1.0, 2.0], base_size: 4.0 },
        mask_channels: 4,
        anchors_per_image: 16,
        ..DetectorConfig::default()
    }
}

fn detector_loss(seed: u64, eps: f32, tol: f64) -> Result<GradCheckReport> {
    let cfg = small_detector();
    let mut r = rng(seed, 14);
    let params = DetectorParams::init(&cfg, seed)?;
    let image = uniform(&[1, 3, 32, 32], &mut r, 0.0, 1.0);
    let (cx, cy, s) = (r.gen_range(10.0..22.0), r.gen_range(10.0..22.0), r.gen_range(8.0..14.0));
    let gt = BBox::from_center(cx, cy, s, s * r.gen_range(0.7..1.0));
    let mask = Tensor::from_fn(&[32, 32], |k| {
        let (y, x) = ((k / 32) as f32 + 0.5, (k % 32) as f32 + 0.5);
        f32::from(x > gt.x_min && x < gt.x_max && y > gt.y_min && y < gt.y_max)
    });
    let sample = DetectorSample { image: image.reshape(&[3, 32, 32])?, gt, mask };
    let (gh, gw) = cfg.grid();
    let anchors = generate_anchors(gh, gw, &cfg.anchors)?;
    let targets = vec![build_targets(&sample, &anchors, &cfg, &mut stream(seed, &[0x7A]))?];
    finite_difference_check_params(
        |t, p| {
            let dp = DetectorParams { params: p.clone() };
            let x = t.leaf(image.clone());
            let feats = backbone_forward(t, x, &dp, &cfg)?;
            let (scores, deltas) = rpn_forward(t, feats, &dp)?;
            let crop = crop_features(t, feats, 0, &gt, cfg.feature_stride() as f32)?;
            let m = mask_head_forward(t, crop, &dp, &cfg)?;
            Ok(multi_task_loss(t, scores, deltas, &[Some(m)], &targets, cfg.box_beta)?.total)
        },
        &params.params,
        eps,
        tol,
    )
}

fn classifier_loss(seed: u64, eps: f32, tol: f64) -> Result<GradCheckReport> {
    let cfg = ClassifierConfig { num_classes: 5, input_size: 32, in_channels: 3, widths: vec![4, 8, 8], ..Default::default() };
    let params = build_classifier(&cfg, seed)?;
    let mut r = rng(seed, 15);
    let x = uniform(&[2, 3, 32, 32], &mut r, 0.0, 1.0);
    let targets = vec![r.gen_range(0..5), r.gen_range(0..5)];
    finite_difference_check_params(
        |t, p| {
            let cp = crate::recognize::ClassifierParams { cfg: cfg.clone(), params: p.clone() };
            let xv = t.leaf(x.clone());
            let logits = classifier_forward(t, xv, &cp)?;
            t.cross_entropy(logits, &targets)
        },
        &params.params,
        eps,
        tol,
    )
}

/// Runs every case for every seed.
pub fn run_suite(seeds: &[u64], eps: f32, tolerance: f64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::with_capacity(seeds.len() * CASES.len());
    for &(case, f) in CASES {
        for &seed in seeds {
            out.push(SuiteEntry { case, seed, report: f(seed, eps, tolerance)? });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_two_seeds() {
        let entries = run_suite(&[1, 2], DEFAULT_EPS, DEFAULT_TOLERANCE).unwrap();
        assert_eq!(entries.len(), 2 * CASES.len());
        for e in &entries {
            assert!(e.report.passed(), "{} seed {}: {:?}", e.case, e.seed, e.report);
        }
    }
}
