//! Planar RGB images with values in `[0, 1]`.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image {0}x{1}: dimensions must be positive")]
    Empty(usize, usize),
    #[error("buffer of {got} values does not fit a 3x{height}x{width} image")]
    BufferSize { width: usize, height: usize, got: usize },
    #[error("png codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Channel-major (`[3, H, W]`) float image. Pixel `(x, y)` covers the unit
/// square `[x, x+1) × [y, y+1)`; its center is at `(x + 0.5, y + 0.5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Empty(width, height));
        }
        if data.len() != 3 * width * height {
            return Err(ImageError::BufferSize { width, height, got: data.len() });
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self, ImageError> {
        let plane = width * height;
        let data = (0..3 * plane).map(|i| rgb[i / plane.max(1)]).collect();
        Image::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Bilinear value of channel `c` at continuous image coordinates,
    /// clamped to the border pixel centers.
    pub fn sample(&self, c: usize, x: f64, y: f64) -> f64 {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
        let v = |xx, yy| self.get(c, xx, yy) as f64;
        (1.0 - ay) * ((1.0 - ax) * v(x0, y0) + ax * v(x1, y0)) + ay * ((1.0 - ax) * v(x0, y1) + ax * v(x1, y1))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0f32; 3 * w * h];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
            }
        }
        Image { width: w, height: h, data }
    }

    /// Quantizes to 8 bits, rounding to nearest.
    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let q = |c| (self.get(c, x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([q(0), q(1), q(2)])
        })
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, ImageError> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn load_png(path: &Path) -> Result<Self, ImageError> {
        Image::decode_png(&std::fs::read(path)?)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }
}
