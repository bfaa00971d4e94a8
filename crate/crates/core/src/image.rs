//! The image carrier type and PNG/JPEG/BMP file IO.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::uniform_tensor;
use crate::tensor::Tensor;

/// An `[h, w, c]` floating-point image. Pixel data produced by the data
/// pipeline and the generator output live in `[0, 1]`; intermediate
/// residual features may leave that range. Channel count is 3 for RGB
/// carriers, 6 after conditioning concatenation, 1 for maps. Batches
/// are slices of images.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Tensor,
}

impl ImageTensor {
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.shape().len() != 3 {
            return Err(Error::Geometry(format!(
                "image tensor must be [h, w, c], got {:?}",
                t.shape()
            )));
        }
        if t.shape().contains(&0) {
            return Err(Error::Geometry(format!("empty image {:?}", t.shape())));
        }
        Ok(ImageTensor { data: t })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        ImageTensor {
            data: Tensor::zeros(&[h, w, c]),
        }
    }

    pub fn constant(h: usize, w: usize, c: usize, value: f64) -> Self {
        ImageTensor {
            data: Tensor::full(&[h, w, c], value),
        }
    }

    pub fn from_fn(h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut t = Tensor::zeros(&[h, w, c]);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    t.data_mut()[(y * w + x) * c + ch] = f(y, x, ch);
                }
            }
        }
        ImageTensor { data: t }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data.data()[(y * self.width() + x) * self.channels() + ch]
    }

    pub fn is_unit_range(&self) -> bool {
        self.data.data().iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    pub fn clamp01(&self) -> ImageTensor {
        ImageTensor {
            data: self.data.map(|v| v.clamp(0.0, 1.0)),
        }
    }

    /// Axis-aligned crop; panics if the window exceeds the image.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> ImageTensor {
        assert!(y0 + h <= self.height() && x0 + w <= self.width(), "crop out of range");
        let c = self.channels();
        ImageTensor::from_fn(h, w, c, |y, x, ch| self.pixel(y0 + y, x0 + x, ch))
    }
}

/// Uniform random image in [0, 1]; test and self-test fodder.
pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ImageTensor {
    ImageTensor {
        data: uniform_tensor(rng, &[h, w, c], 0.0, 1.0),
    }
}

/// Decode an image file into an RGB float image in [0, 1]. 8-bit and
/// 16-bit inputs are normalized exactly (x/255 and x/65535).
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {}", path.display(), e)))?;
    let rgb = img.to_rgb16();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut t = Tensor::zeros(&[h, w, 3]);
    for (i, px) in rgb.pixels().enumerate() {
        for ch in 0..3 {
            t.data_mut()[i * 3 + ch] = px.0[ch] as f64 / 65535.0;
        }
    }
    ImageTensor::from_tensor(t)
}

/// Write an image as an 8-bit PNG. 3-channel images become RGB, single
/// channel becomes grayscale. Values are clamped to [0, 1] first.
pub fn save_png(img: &ImageTensor, path: &Path) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match img.channels() {
        3 => {
            let mut out = image::RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    out.put_pixel(
                        x as u32,
                        y as u32,
                        image::Rgb([
                            quant(img.pixel(y, x, 0)),
                            quant(img.pixel(y, x, 1)),
                            quant(img.pixel(y, x, 2)),
                        ]),
                    );
                }
            }
            out.save(path)
                .map_err(|e| Error::Data(format!("cannot write {}: {}", path.display(), e)))
        }
        1 => {
            let mut out = image::GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    out.put_pixel(x as u32, y as u32, image::Luma([quant(img.pixel(y, x, 0))]));
                }
            }
            out.save(path)
                .map_err(|e| Error::Data(format!("cannot write {}: {}", path.display(), e)))
        }
        c => Err(Error::Geometry(format!("cannot encode {}-channel image as PNG", c))),
    }
}
