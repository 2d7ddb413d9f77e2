use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, DynamicImage, ExtendedColorType, ImageEncoder};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image { path: path.to_path_buf(), source }
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|e| image_err(path, e))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Decodes an image to `[C,H,W]` with values in `[0, 255]`: one channel for
/// grey sources, three otherwise (alpha is dropped).
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let grey = matches!(
        img.color(),
        ColorType::L8 | ColorType::L16 | ColorType::La8 | ColorType::La16
    );
    if grey {
        let data = img.to_luma8().into_raw().into_iter().map(f32::from).collect();
        return Tensor::new(vec![1, h, w], data);
    }
    let raw = img.to_rgb8().into_raw();
    // Palette BMPs (common for NIR captures) decode as RGB with equal channels.
    if raw.chunks_exact(3).all(|px| px[0] == px[1] && px[1] == px[2]) {
        let data = raw.chunks_exact(3).map(|px| f32::from(px[0])).collect();
        return Tensor::new(vec![1, h, w], data);
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for k in 0..3 {
            data[k * h * w + i] = f32::from(px[k]);
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes a `[1|3,H,W]` tensor as PNG, rounding and clamping to `u8`.
pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    ensure!(
        image.rank() == 3 && matches!(image.shape()[0], 1 | 3),
        "save_image",
        "expected [1|3,H,W], got {:?}",
        image.shape()
    );
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut buf = vec![0u8; c * h * w];
    for i in 0..h * w {
        for k in 0..c {
            buf[i * c + k] = image.data()[k * h * w + i].round().clamp(0.0, 255.0) as u8;
        }
    }
    let color = if c == 1 { ExtendedColorType::L8 } else { ExtendedColorType::Rgb8 };
    create_parent(path)?;
    image::save_buffer(path, &buf, w as u32, h as u32, color).map_err(|e| image_err(path, e))
}

/// Reads a binary raster to `[H,W]` with values 0 and 1 (any bright pixel is 1).
pub fn load_mask(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|v| if v > 127 { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![h, w], data)
}

/// Writes a `[H,W]` mask as a binary portable bitmap; nonzero cells are set.
pub fn save_mask(path: &Path, mask: &Tensor) -> Result<()> {
    ensure!(mask.rank() == 2, "save_mask", "expected [H,W], got {:?}", mask.shape());
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let bits: Vec<u8> = mask.data().iter().map(|&v| u8::from(v != 0.0)).collect();
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(PnmSubtype::Bitmap(SampleEncoding::Binary))
        .write_image(&bits, w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| image_err(path, e))?;
    create_parent(path)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
