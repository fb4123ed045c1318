//! RGB images in `[0, 1]`, stored row-major with interleaved channels.
//!
//! 8-bit files are decoded by dividing by 255 (no gamma transform) and encoded
//! by rounding `255·v` after clamping.

use std::path::Path;

use candle_core::{Device, Tensor};
use image::{imageops::FilterType, DynamicImage, ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    /// `height × width × 3`
    pub data: Vec<f32>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::validation(format!(
                "image buffer has {} values, expected {}×{}×3",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, color: [f32; 3]) -> Self {
        Self {
            width,
            height,
            data: color.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn pixel(&self, col: usize, row: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, col: usize, row: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for row in 0..self.height {
            for col in 0..self.width {
                out.set_pixel(self.width - 1 - col, row, self.pixel(col, row));
            }
        }
        out
    }

    /// `[1, 3, H, W]`
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let hwc = Tensor::from_vec(self.data.clone(), (self.height, self.width, 3), device)?;
        Ok(hwc.permute((2, 0, 1))?.unsqueeze(0)?.contiguous()?)
    }

    /// Accepts `[3, H, W]` or `[1, 3, H, W]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::validation(format!("expected 3 channels, got {c}")));
        }
        let data = t.permute((1, 2, 0))?.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?;
        Self::new(w, h, data)
    }

    pub fn clamped(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone()).expect("sized buffer");
        let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        Self {
            width,
            height,
            data: out.into_raw(),
        }
    }

    /// Scales so the shorter side equals `shorter`, keeping the aspect ratio.
    pub fn resize_shorter_side(&self, shorter: usize) -> Self {
        let (w, h) = (self.width as f64, self.height as f64);
        let scale = shorter as f64 / w.min(h);
        let nw = ((w * scale).round() as usize).max(shorter);
        let nh = ((h * scale).round() as usize).max(shorter);
        self.resize(nw, nh)
    }

    pub fn crop(&self, col: usize, row: usize, width: usize, height: usize) -> Result<Self> {
        if col + width > self.width || row + height > self.height {
            return Err(Error::validation(format!(
                "crop {width}×{height} at ({col}, {row}) exceeds {}×{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for r in row..row + height {
            let start = (r * self.width + col) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Self::new(width, height, data)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("sized buffer")
    }

    /// The values an 8-bit round trip through [`ImageRgb::to_rgb8`] would give back.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.to_rgb8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::format("<png>", e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.encode_png()?).map_err(|e| Error::io(path, e))
    }

    pub fn mean_abs_error(&self, other: &Self) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "image sizes differ");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn mse(&self, other: &Self) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "image sizes differ");
        self.data.iter().zip(&other.data).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / self.data.len() as f64
    }
}

/// A decoded image plus its alpha channel, when the file had one.
#[derive(Clone, Debug)]
pub struct DecodedImage {
    /// Straight (non-premultiplied) color.
    pub rgb: ImageRgb,
    pub alpha: Option<Vec<f32>>,
}

impl DecodedImage {
    /// Color composited over `background` using the alpha channel (if any).
    pub fn composited(&self, background: [f32; 3]) -> ImageRgb {
        let Some(alpha) = &self.alpha else {
            return self.rgb.clone();
        };
        let mut out = self.rgb.clone();
        for (px, a) in out.data.chunks_mut(3).zip(alpha) {
            for (v, bg) in px.iter_mut().zip(background) {
                *v = *v * a + bg * (1.0 - a);
            }
        }
        out
    }
}

pub fn load_image(path: &Path) -> Result<DecodedImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let has_alpha = img.color().has_alpha();
    let rgba = match img {
        DynamicImage::ImageRgba8(buf) => buf,
        other => other.to_rgba8(),
    };
    let mut rgb = Vec::with_capacity(width * height * 3);
    let mut alpha = Vec::with_capacity(width * height);
    for px in rgba.pixels() {
        rgb.extend(px.0[..3].iter().map(|v| *v as f32 / 255.0));
        alpha.push(px.0[3] as f32 / 255.0);
    }
    Ok(DecodedImage {
        rgb: ImageRgb::new(width, height, rgb)?,
        alpha: has_alpha.then_some(alpha),
    })
}

/// Writes an RGBA PNG (straight alpha).
pub fn save_rgba_png(path: &Path, rgb: &ImageRgb, alpha: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(rgb.width * rgb.height * 4);
    for (px, a) in rgb.data.chunks(3).zip(alpha) {
        bytes.extend(px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        bytes.push((a.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let buf = image::RgbaImage::from_raw(rgb.width as u32, rgb.height as u32, bytes).expect("sized buffer");
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}
