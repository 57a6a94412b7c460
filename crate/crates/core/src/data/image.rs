use std::path::Path;

use crate::numerics::Tensor;
use crate::{Error, Result};

/// 8-bit RGB image, interleaved row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::shape(
                "image",
                format!("{width}x{height} RGB needs {} bytes, got {}", width * height * 3, data.len()),
            ));
        }
        Ok(ImageU8 {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        ImageU8 {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_size(&self, other: &ImageU8) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<ImageU8> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        ImageU8::new(w, h, data)
    }

    pub fn load_png(path: &Path) -> Result<ImageU8> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        ImageU8::new(w as usize, h as usize, rgb.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Binary per-pixel cloud mask; 1 marks cloud.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CloudMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl CloudMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height || width == 0 || height == 0 {
            return Err(Error::shape(
                "cloud mask",
                format!("{width}x{height} needs {} values, got {}", width * height, data.len()),
            ));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("cloud mask must be binary".into()));
        }
        Ok(CloudMask {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        CloudMask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Fraction of pixels marked as cloud.
    pub fn coverage(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<CloudMask> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::InvalidArgument("mask crop out of bounds".into()));
        }
        let data = (y0..y0 + h)
            .flat_map(|y| self.data[y * self.width + x0..y * self.width + x0 + w].iter().copied())
            .collect();
        CloudMask::new(w, h, data)
    }

    /// `(1, H, W)` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[1, self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("mask dimensions are non-zero")
    }

    /// Grey PNG: any channel value >= 128 counts as cloud.
    pub fn load_png(path: &Path) -> Result<CloudMask> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let grey = img.to_luma8();
        let (w, h) = grey.dimensions();
        let data = grey.into_raw().into_iter().map(|v| u8::from(v >= 128)).collect();
        CloudMask::new(w as usize, h as usize, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| v * 255).collect();
        image::save_buffer_with_format(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ColorType::L8,
            image::ImageFormat::Png,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// `(3, H, W)` tensor with values `v / 255`.
pub fn to_tensor(image: &ImageU8) -> Tensor {
    let (w, h) = (image.width, image.height);
    let mut data = vec![0.0; 3 * w * h];
    for (i, px) in image.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("image dimensions are non-zero")
}

/// Clamp to `[0, 1]`, scale by 255 and round half up.
pub fn from_tensor(t: &Tensor) -> Result<ImageU8> {
    let (c, h, w) = t.chw()?;
    if c != 3 {
        return Err(Error::shape("from_tensor", format!("expected 3 channels, got {c}")));
    }
    let mut data = vec![0u8; 3 * w * h];
    for ch in 0..3 {
        for (i, &v) in t.channel(ch).iter().enumerate() {
            data[i * 3 + ch] = quantize_unit(v);
        }
    }
    ImageU8::new(w, h, data)
}

/// `round_half_up(255 * clamp(v, 0, 1))`; NaN maps to 0.
pub fn quantize_unit(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}
