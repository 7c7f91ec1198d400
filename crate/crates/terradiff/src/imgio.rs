//! Conversions between 8-bit RGB images and model-space tensors.

use crate::error::Result;
use crate::nd::Tensor;
use image::RgbImage;
use std::path::Path;

/// RGB image -> [1, 3, H, W] tensor in [-1, 1].
pub fn to_model(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut t = Tensor::zeros(&[1, 3, h, w]);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t.data[c * h * w + y as usize * w + x as usize] = p.0[c] as f64 / 127.5 - 1.0;
        }
    }
    t
}

/// [1, 3, H, W] tensor in [-1, 1] -> clamped 8-bit RGB image.
pub fn from_model(t: &Tensor) -> RgbImage {
    let (_, c, h, w) = t.dims4();
    assert_eq!(c, 3, "expected 3-channel tensor");
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let v = (t.data[ch * h * w + y * w + x] + 1.0) * 127.5;
                px[ch] = v.round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Crop a window out of an image; panics if out of bounds.
pub fn crop(img: &RgbImage, x0: usize, y0: usize, w: usize, h: usize) -> RgbImage {
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(x as u32, y as u32, *img.get_pixel((x0 + x) as u32, (y0 + y) as u32));
        }
    }
    out
}
