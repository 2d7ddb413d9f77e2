//! Procedural eye images with ground-truth iris boxes and masks, plus dataset
//! manifests and directory importers.

mod imaging;
mod manifest;
mod utiris;

use std::f32::consts::TAU;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::BBox;
use crate::error::{ensure, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

pub use imaging::{load_image, load_mask, save_image, save_mask};
pub use manifest::{
    detector_split, load_manifest, ClassReport, DatasetManifest, Eye, IrisSample, LabelLevel, Spectrum,
    MANIFEST_VERSION,
};
pub use utiris::import_utiris;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_identities: usize,
    pub images_per_identity: usize,
    /// Side of the square image in pixels.
    pub image_size: usize,
    pub spectrum: Spectrum,
    pub eyelid: bool,
    pub specular: bool,
    /// Lets some eyes sit partly outside the frame.
    pub partial_capture: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_identities: 20,
            images_per_identity: 40,
            image_size: 64,
            spectrum: Spectrum::Vw,
            eyelid: true,
            specular: true,
            partial_capture: false,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.num_identities > 0 && self.images_per_identity > 0,
            "SynthSpec",
            "identity and image counts must be positive"
        );
        ensure!(self.image_size >= 16, "SynthSpec", "image_size must be at least 16, got {}", self.image_size);
        Ok(())
    }

    pub fn channels(&self) -> usize {
        match self.spectrum {
            Spectrum::Vw => 3,
            Spectrum::Nir => 1,
        }
    }
}

/// Per-image nuisance parameters. Lengths are in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub cx: f32,
    pub cy: f32,
    pub iris_radius: f32,
    /// Pupil radius as a fraction of the iris radius.
    pub pupil_ratio: f32,
    pub rotation: f32,
    /// Distance of the upper eyelid apex above the iris center, `None` when open.
    pub eyelid: Option<f32>,
    pub eye: Eye,
    pub noise_seed: u64,
}

impl Pose {
    /// Draws the pose of image `index` of `identity`.
    pub fn sample(spec: &SynthSpec, identity: usize, index: usize) -> Pose {
        let mut rng = stream(spec.seed, &[0x905E, identity as u64, index as u64]);
        let s = spec.image_size as f32;
        let r = s * rng.gen_range(0.17..0.23);
        let jitter = if spec.partial_capture && rng.gen_bool(0.15) { 0.45 } else { 0.12 };
        let cx = s * 0.5 + s * rng.gen_range(-jitter..jitter);
        let cy = s * 0.5 + s * rng.gen_range(-jitter..jitter);
        let pupil_ratio = rng.gen_range(0.32..0.45);
        let rotation = rng.gen_range(0.0..TAU);
        let lid = rng.gen_range(0.55..1.3);
        Pose {
            cx,
            cy,
            iris_radius: r,
            pupil_ratio,
            rotation,
            eyelid: spec.eyelid.then_some(r * lid),
            eye: if index % 2 == 0 { Eye::Left } else { Eye::Right },
            noise_seed: rng.gen(),
        }
    }
}

/// Identity-specific iris appearance.
#[derive(Debug, Clone)]
struct IrisTexture {
    hue: f32,
    saturation: f32,
    value: f32,
    bands: Vec<(f32, f32, f32, f32)>,
    noise: Vec<f32>,
}

const NOISE_R: usize = 6;
const NOISE_A: usize = 24;

impl IrisTexture {
    fn new(spec_seed: u64, identity: usize, eye: Eye) -> Self {
        let mut rng = stream(spec_seed, &[0x7E87, identity as u64]);
        let hue = (identity as f32 * 0.618_034 + rng.gen_range(0.0..0.08)).fract();
        let saturation = rng.gen_range(0.55..0.9);
        let value = rng.gen_range(0.45..0.8);
        let mut rng = stream(spec_seed, &[0x7E87, identity as u64, eye as u64]);
        let bands = (0..5)
            .map(|_| {
                (
                    rng.gen_range(1.0..4.0f32),
                    rng.gen_range(0..9) as f32,
                    rng.gen_range(0.0..TAU),
                    rng.gen_range(0.3..1.0f32),
                )
            })
            .collect();
        let noise = (0..NOISE_R * NOISE_A).map(|_| rng.gen_range(-1.0..1.0)).collect();
        IrisTexture { hue, saturation, value, bands, noise }
    }

    /// Brightness in `[0, 1]` at normalized radius `rho` and angle `theta`.
    fn brightness(&self, rho: f32, theta: f32) -> f32 {
        let norm: f32 = self.bands.iter().map(|b| b.3).sum();
        let wave: f32 = self
            .bands
            .iter()
            .map(|&(kr, ka, ph, amp)| amp * (TAU * kr * rho + ka * theta + ph).sin())
            .sum::<f32>()
            / norm;
        let ri = ((rho * NOISE_R as f32) as usize).min(NOISE_R - 1);
        let ai = ((theta.rem_euclid(TAU) / TAU * NOISE_A as f32) as usize).min(NOISE_A - 1);
        let n = self.noise[ri * NOISE_A + ai];
        (self.value * (1.0 + 0.45 * wave + 0.2 * n)).clamp(0.0, 1.0)
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn luma(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// A rendered eye: image `[C,S,S]` with integer values in `[0, 255]`, the
/// tight iris box (exclusive max) and the binary iris mask `[S,S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedEye {
    pub image: Tensor,
    pub bbox: BBox,
    pub mask: Tensor,
}

/// Tight box of the nonzero cells of `mask`, `None` when empty.
pub fn mask_bbox(mask: &Tensor) -> Option<BBox> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask.data()[y * w + x] != 0.0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x1 > x0).then(|| BBox { x_min: x0 as f32, y_min: y0 as f32, x_max: x1 as f32, y_max: y1 as f32 })
}

pub fn render_eye(identity: usize, pose: &Pose, spec: &SynthSpec) -> Result<RenderedEye> {
    spec.validate()?;
    let s = spec.image_size;
    let tex = IrisTexture::new(spec.seed, identity, pose.eye);
    let mut rng = stream(pose.noise_seed, &[0xA015E]);
    let r = pose.iris_radius;
    let pr = r * pose.pupil_ratio;
    let skin = [0.80, 0.62, 0.52];
    let sclera = [0.93, 0.91, 0.88];
    let pupil = [0.07, 0.06, 0.06];
    let iris_rgb = |rho: f32, th: f32| hsv(tex.hue, tex.saturation, tex.brightness(rho, th));
    let (hx, hy) = (pose.cx + 0.4 * pr, pose.cy - 0.4 * pr);
    let hr = (0.3 * pr).max(1.0);
    let lid_curve = 0.9 / (2.2 * r);

    let mut rgb = vec![[0.0f32; 3]; s * s];
    let mut mask = Tensor::zeros(&[s, s]);
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let (dx, dy) = (px - pose.cx, py - pose.cy);
            let d = (dx * dx + dy * dy).sqrt();
            let shade = 1.0 - 0.15 * (py / s as f32);
            let mut c = skin.map(|v| v * shade);
            let in_sclera = (dx / (2.1 * r)).powi(2) + (dy / (1.2 * r)).powi(2) <= 1.0;
            let occluded = pose.eyelid.is_some_and(|lid| py < pose.cy - lid + lid_curve * dx * dx);
            if in_sclera || d < r {
                c = sclera;
            }
            if d < r && !occluded {
                if d < pr {
                    c = pupil;
                } else {
                    let rho = (d - pr) / (r - pr);
                    c = iris_rgb(rho, dy.atan2(dx) - pose.rotation);
                    mask.data_mut()[y * s + x] = 1.0;
                }
            }
            if occluded && (in_sclera || d < r) {
                c = skin.map(|v| v * 0.9);
                let edge = pose.cy - pose.eyelid.unwrap_or(0.0) + lid_curve * dx * dx - py;
                if edge < 1.5 {
                    c = [0.25, 0.18, 0.15];
                }
            }
            if spec.specular && ((px - hx).powi(2) + (py - hy).powi(2)).sqrt() < hr && d < pr && !occluded {
                c = [0.98, 0.98, 0.98];
            }
            rgb[y * s + x] = c;
        }
    }

    let channels = spec.channels();
    let mut data = vec![0.0f32; channels * s * s];
    for (i, c) in rgb.iter().enumerate() {
        let vals: [f32; 3] = match spec.spectrum {
            Spectrum::Vw => *c,
            Spectrum::Nir => [luma(*c), 0.0, 0.0],
        };
        for (k, v) in vals.iter().take(channels).enumerate() {
            let noisy = v * 255.0 + rng.gen_range(-3.0..3.0);
            data[k * s * s + i] = noisy.round().clamp(0.0, 255.0);
        }
    }
    let bbox = mask_bbox(&mask).ok_or_else(|| {
        crate::Error::contract("render_eye", format!("pose {pose:?} leaves no visible iris"))
    })?;
    Ok(RenderedEye { image: Tensor::new(vec![channels, s, s], data)?, bbox, mask })
}

fn sample_name(identity: usize, index: usize) -> String {
    format!("id{identity:04}_{index:03}")
}

/// Renders the whole dataset under `out`, writing `images/*.png`,
/// `masks/*.pbm` and `manifest.json`.
pub fn synth_dataset(spec: &SynthSpec, out: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    for sub in ["images", "masks"] {
        let dir = out.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| crate::Error::io(&dir, e))?;
    }
    let jobs: Vec<(usize, usize)> = (0..spec.num_identities)
        .flat_map(|id| (0..spec.images_per_identity).map(move |k| (id, k)))
        .collect();
    let samples = jobs
        .par_iter()
        .map(|&(id, k)| {
            let pose = Pose::sample(spec, id, k);
            let eye = render_eye(id, &pose, spec)?;
            let name = sample_name(id, k);
            let img_rel = format!("images/{name}.png");
            let mask_rel = format!("masks/{name}.pbm");
            save_image(&out.join(&img_rel), &eye.image)?;
            save_mask(&out.join(&mask_rel), &eye.mask)?;
            Ok(IrisSample {
                path: img_rel.into(),
                identity: id,
                eye: pose.eye,
                spectrum: spec.spectrum,
                bbox: Some(eye.bbox.to_array()),
                mask_path: Some(mask_rel.into()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::new(out.to_path_buf(), samples);
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}
