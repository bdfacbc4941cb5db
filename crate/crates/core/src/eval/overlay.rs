//! Heatmap / mask visualisation and 16-bit trace images.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::heatmap::{BinaryMask, Heatmap, ImageHeatmap};

/// Base colour when no image is supplied.
pub const BLANK_GRAY: u8 = 128;
const RED: [f64; 3] = [255.0, 0.0, 0.0];
const GREEN: Rgb<u8> = Rgb([0, 255, 0]);

fn on_contour(mask: &BinaryMask, x: usize, y: usize) -> bool {
    if !mask.get(x, y) {
        return false;
    }
    let (h, w) = mask.dims();
    x == 0
        || y == 0
        || x + 1 == w
        || y + 1 == h
        || !mask.get(x - 1, y)
        || !mask.get(x + 1, y)
        || !mask.get(x, y - 1)
        || !mask.get(x, y + 1)
}

/// Blends red over `base` with alpha = heat, then paints the mask outline green.
pub fn compose_overlay(
    base: Option<&RgbImage>,
    heat: &ImageHeatmap,
    mask: &BinaryMask,
) -> Result<RgbImage> {
    let (h, w) = heat.dims();
    if mask.dims() != (h, w) {
        return Err(Error::Shape(format!("mask {:?} vs heat {:?}", mask.dims(), (h, w))));
    }
    if let Some(b) = base {
        if (b.height() as usize, b.width() as usize) != (h, w) {
            return Err(Error::Shape(format!(
                "base image {}x{} vs heat {w}x{h}",
                b.width(),
                b.height()
            )));
        }
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = if on_contour(mask, x, y) {
                GREEN
            } else {
                let under = base.map_or([BLANK_GRAY; 3], |b| b.get_pixel(x as u32, y as u32).0);
                let a = heat.get(y, x).clamp(0.0, 1.0);
                let mut c = [0u8; 3];
                for k in 0..3 {
                    c[k] = ((1.0 - a) * under[k] as f64 + a * RED[k]).round() as u8;
                }
                Rgb(c)
            };
            out.put_pixel(x as u32, y as u32, px);
        }
    }
    Ok(out)
}

pub fn load_base(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn render_overlay(
    base: Option<&RgbImage>,
    heat: &ImageHeatmap,
    mask: &BinaryMask,
    out_path: &Path,
) -> Result<()> {
    compose_overlay(base, heat, mask)?.save(out_path)?;
    Ok(())
}

/// Writes values in [0, 1] as 16-bit grayscale (clamped).
pub fn save_unit_map_png(map: &Heatmap, path: &Path) -> Result<()> {
    let (h, w) = map.dims();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(map.get(y as usize, x as usize).clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    img.save(path)?;
    Ok(())
}

/// Min-max normalises before quantising; a flat map becomes all zeros.
pub fn save_normalized_png(map: &Heatmap, path: &Path) -> Result<()> {
    let (lo, hi) = (map.min(), map.max());
    let span = hi - lo;
    let norm = map.map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 });
    save_unit_map_png(&norm, path)
}

pub fn save_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let values = mask.bits().iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
    save_unit_map_png(&Heatmap::new(mask.height(), mask.width(), values)?, path)
}
