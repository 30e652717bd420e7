use std::path::Path;

use crate::error::{Error, Result};

/// RGB image stored planar (`[3][height][width]`) with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "{} values for a 3x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let hw = height * width;
        let mut data = Vec::with_capacity(3 * hw);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, hw));
        }
        Self { height, width, data }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn from_rgb8(img: &::image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                data[c * h * w + i] = f32::from(px[c]) / 255.0;
            }
        }
        Self { height: h, width: w, data }
    }

    pub fn to_rgb8(&self) -> ::image::RgbImage {
        let hw = self.height * self.width;
        ::image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            let px = |c: usize| (self.data[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            ::image::Rgb([px(0), px(1), px(2)])
        })
    }
}

/// Decodes any supported image file into RGB.
pub fn load_image(path: &Path) -> Result<Image> {
    let decoded = ::image::open(path).map_err(|e| Error::Validation(format!("cannot decode {}: {e}", path.display())))?;
    Ok(Image::from_rgb8(&decoded.to_rgb8()))
}
