//! Scale-variant normalization: a detected iris region is cropped, resized to
//! a fixed width with its aspect ratio kept, and placed on a zero-filled
//! square canvas. Crops of different heights therefore keep their relative
//! scale instead of being stretched.

use serde::{Deserialize, Serialize};

use crate::detect::{BBox, Detection};
use crate::error::{ensure, Result};
use crate::tensor::{ops, Tensor};

/// Value of every padded cell. Not configurable.
pub const PAD_VALUE: f32 = 0.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Side of the padded square.
    pub side: usize,
    /// Final classifier input side; the padded square is resampled to it when different.
    pub classifier_input: usize,
    /// Center the content in the canvas instead of placing it top-left.
    pub center: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            side: 299,
            classifier_input: 299,
            center: false,
        }
    }
}

impl PipelineConfig {
    pub fn pad_value(&self) -> f32 {
        PAD_VALUE
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.side > 0, "PipelineConfig", "side must be positive");
        ensure!(self.classifier_input > 0, "PipelineConfig", "classifier_input must be positive");
        Ok(())
    }
}

fn chw(image: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    ensure!(image.rank() == 3, op, "expected [C,H,W], got {:?}", image.shape());
    let s = image.shape();
    Ok((s[0], s[1], s[2]))
}

/// Pixel rectangle `(y0, y1, x0, x1)` covered by `bbox` after clamping:
/// minimum corner floored, maximum corner ceiled.
pub fn crop_rect(bbox: &BBox, height: usize, width: usize) -> Result<(usize, usize, usize, usize)> {
    let c = bbox.clip(width as f32, height as f32);
    let x0 = c.x_min.floor() as usize;
    let y0 = c.y_min.floor() as usize;
    let x1 = (c.x_max.ceil() as usize).min(width);
    let y1 = (c.y_max.ceil() as usize).min(height);
    ensure!(
        x1 > x0 && y1 > y0,
        "crop_box",
        "box {:?} has no area inside the {}x{} image",
        bbox,
        height,
        width
    );
    Ok((y0, y1, x0, x1))
}

pub fn crop_box(image: &Tensor, bbox: &BBox) -> Result<Tensor> {
    let (c, h, w) = chw(image, "crop_box")?;
    let (y0, y1, x0, x1) = crop_rect(bbox, h, w)?;
    let (ch, cw) = (y1 - y0, x1 - x0);
    let mut out = Vec::with_capacity(c * ch * cw);
    for k in 0..c {
        for y in y0..y1 {
            let row = (k * h + y) * w;
            out.extend_from_slice(&image.data()[row + x0..row + x1]);
        }
    }
    Tensor::new(vec![c, ch, cw], out)
}

/// Target `(height, width)` of [`resize_to_width`].
pub fn resized_extent(h: usize, w: usize, side: usize) -> (usize, usize) {
    let h2 = (h as f64 * side as f64 / w as f64).round() as usize;
    if h2 <= side {
        (h2.max(1), side)
    } else {
        let w2 = (w as f64 * side as f64 / h as f64).round() as usize;
        (side, w2.max(1))
    }
}

/// Bilinear resize to width `side` keeping the aspect ratio. Crops that would
/// end up taller than `side` are instead scaled to height `side`.
pub fn resize_to_width(image: &Tensor, side: usize) -> Result<Tensor> {
    let (_, h, w) = chw(image, "resize_to_width")?;
    ensure!(h > 0 && w > 0, "resize_to_width", "empty image {:?}", image.shape());
    ensure!(side > 0, "resize_to_width", "target side must be positive");
    let (th, tw) = resized_extent(h, w, side);
    if (th, tw) == (h, w) {
        return Ok(image.clone());
    }
    ops::resize_bilinear(image, th, tw)
}

/// Offset `(top, left)` of the content inside the padded square.
pub fn placement(h: usize, w: usize, side: usize, center: bool) -> (usize, usize) {
    if center {
        ((side - h) / 2, (side - w) / 2)
    } else {
        (0, 0)
    }
}

/// Places `image` on a `side x side` canvas of [`PAD_VALUE`], top-left.
pub fn zero_pad_square(image: &Tensor, side: usize) -> Result<Tensor> {
    pad_square(image, side, false)
}

fn pad_square(image: &Tensor, side: usize, center: bool) -> Result<Tensor> {
    let (c, h, w) = chw(image, "zero_pad_square")?;
    ensure!(
        h <= side && w <= side,
        "zero_pad_square",
        "image {}x{} does not fit in a {}x{} square",
        h,
        w,
        side,
        side
    );
    if h == side && w == side {
        return Ok(image.clone());
    }
    let (top, left) = placement(h, w, side, center);
    let mut out = Tensor::full(&[c, side, side], PAD_VALUE);
    for k in 0..c {
        for y in 0..h {
            let src = (k * h + y) * w;
            let dst = (k * side + top + y) * side + left;
            out.data_mut()[dst..dst + w].copy_from_slice(&image.data()[src..src + w]);
        }
    }
    Ok(out)
}

pub fn grey_to_3ch(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(image, "grey_to_3ch")?;
    ensure!(c == 1, "grey_to_3ch", "expected a single channel, got {}", c);
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(image.data());
    }
    Tensor::new(vec![3, h, w], data)
}

/// Maps intensities in `[0, 255]` to `[0, 1]`.
pub fn pixel_normalize(image: &Tensor) -> Result<Tensor> {
    if let Some(v) = image.data().iter().find(|v| !(0.0..=255.0).contains(*v)) {
        return Err(crate::Error::contract(
            "pixel_normalize",
            format!("value {v} outside [0, 255]"),
        ));
    }
    Ok(image.map(|v| v / 255.0))
}

/// Crop, width-normalize, zero-pad, expand grey to three channels, scale to
/// `[0, 1]` and, if configured, resample to the classifier input size.
pub fn preprocess_pipeline(raw: &Tensor, detection: &Detection, cfg: &PipelineConfig) -> Result<Tensor> {
    cfg.validate()?;
    let crop = crop_box(raw, &detection.bbox)?;
    let resized = resize_to_width(&crop, cfg.side)?;
    let padded = pad_square(&resized, cfg.side, cfg.center)?;
    let rgb = match padded.shape()[0] {
        1 => grey_to_3ch(&padded)?,
        3 => padded,
        c => {
            return Err(crate::Error::contract(
                "preprocess_pipeline",
                format!("expected 1 or 3 channels, got {c}"),
            ))
        }
    };
    let out = pixel_normalize(&rgb)?;
    if cfg.classifier_input == cfg.side {
        Ok(out)
    } else {
        ops::resize_bilinear(&out, cfg.classifier_input, cfg.classifier_input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[c, h, w], |i| (i % 251) as f32)
    }

    #[test]
    fn crop_examples() {
        let im = img(1, 100, 100);
        let full = BBox::new(0.0, 0.0, 100.0, 100.0).unwrap();
        assert_eq!(crop_box(&im, &full).unwrap(), im);
        let c = crop_box(&im, &BBox::new(10.0, 20.0, 50.0, 60.0).unwrap()).unwrap();
        assert_eq!(c.shape(), &[1, 40, 40]);
        assert_eq!(c.at(&[0, 0, 0]), im.at(&[0, 20, 10]));
        let c = crop_box(&im, &BBox::new(70.0, 0.0, 110.0, 40.0).unwrap()).unwrap();
        assert_eq!(c.shape(), &[1, 40, 30]);
        assert!(crop_box(&im, &BBox::new(120.0, 0.0, 130.0, 10.0).unwrap()).is_err());
    }

    #[test]
    fn crop_floors_min_and_ceils_max() {
        let im = img(1, 20, 20);
        let c = crop_box(&im, &BBox::new(2.5, 3.2, 7.1, 9.9).unwrap()).unwrap();
        assert_eq!(c.shape(), &[1, 7, 6]);
    }

    #[test]
    fn resize_examples() {
        assert_eq!(resize_to_width(&img(1, 398, 598), 299).unwrap().shape(), &[1, 199, 299]);
        let same = img(3, 120, 299);
        assert_eq!(resize_to_width(&same, 299).unwrap(), same);
        assert_eq!(resize_to_width(&img(1, 400, 100), 299).unwrap().shape(), &[1, 299, 75]);
    }

    #[test]
    fn pad_examples() {
        let im = img(1, 180, 299);
        let p = zero_pad_square(&im, 299).unwrap();
        assert_eq!(p.shape(), &[1, 299, 299]);
        assert_eq!(&p.data()[..180 * 299], im.data());
        assert!(p.data()[180 * 299..].iter().all(|&v| v == 0.0));
        assert_eq!(p.sum(), im.sum());
        let sq = img(3, 299, 299);
        assert_eq!(zero_pad_square(&sq, 299).unwrap(), sq);
        assert!(zero_pad_square(&img(1, 300, 10), 299).is_err());
    }

    #[test]
    fn grey_expansion() {
        let g = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = grey_to_3ch(&g).unwrap();
        assert_eq!(c.shape(), &[3, 2, 2]);
        for k in 0..3 {
            assert_eq!(c.slice_outer(k).data(), g.data());
        }
        assert!(grey_to_3ch(&c).is_err());
    }

    #[test]
    fn normalize_examples() {
        let t = Tensor::new(vec![3], vec![0.0, 127.5, 255.0]).unwrap();
        assert_eq!(pixel_normalize(&t).unwrap().data(), &[0.0, 0.5, 1.0]);
        assert!(pixel_normalize(&Tensor::scalar(256.0)).is_err());
        assert!(pixel_normalize(&Tensor::scalar(-1.0)).is_err());
    }

    #[test]
    fn pipeline_skips_expansion_for_colour() {
        let raw = img(3, 64, 64);
        let det = Detection {
            bbox: BBox::new(8.0, 16.0, 48.0, 40.0).unwrap(),
            objectness: 0.9,
            mask: None,
        };
        let cfg = PipelineConfig { side: 32, classifier_input: 32, center: false };
        let out = preprocess_pipeline(&raw, &det, &cfg).unwrap();
        assert_eq!(out.shape(), &[3, 32, 32]);
        // Channels stay distinct for colour input.
        assert_ne!(out.slice_outer(0), out.slice_outer(1));
    }
}
