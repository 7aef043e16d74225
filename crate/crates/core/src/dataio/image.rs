use std::path::Path;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grayscale intensity grid with every pixel in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

/// Axis-aligned half-open rectangle `[x_min, x_max) × [y_min, y_max)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BoundingBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn width(&self) -> u32 {
        self.x_max.saturating_sub(self.x_min)
    }

    pub fn height(&self) -> u32 {
        self.y_max.saturating_sub(self.y_min)
    }

    pub fn max_side(&self) -> u32 {
        self.width().max(self.height())
    }

    pub fn is_valid_for(&self, width: usize, height: usize) -> bool {
        self.x_min < self.x_max
            && self.y_min < self.y_max
            && self.x_max as usize <= width
            && self.y_max as usize <= height
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x_min <= other.x_min && self.y_min <= other.y_min && self.x_max >= other.x_max && self.y_max >= other.y_max
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> u64 {
        let w = self.x_max.min(other.x_max).saturating_sub(self.x_min.max(other.x_min));
        let h = self.y_max.min(other.y_max).saturating_sub(self.y_min.max(other.y_min));
        w as u64 * h as u64
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) as f64 / 2.0, (self.y_min + self.y_max) as f64 / 2.0)
    }
}

impl Image {
    /// Validated constructor: dimensions ≥ 1, every pixel finite and in `[0, 1]`.
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Data(format!("image dimensions must be positive, got {}x{}", width, height)));
        }
        if pixels.len() != width * height {
            return Err(Error::Data(format!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width * height,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {} outside [0, 1]", bad)));
        }
        Ok(Self { width, height, pixels })
    }

    /// Builds an image from `f(x, y)`, clamping results into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                pixels.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) as f32 });
            }
        }
        Self { width, height, pixels }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self::from_fn(width, height, |_, _| value as f64)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn crop(&self, rect: &BoundingBox) -> Result<Image> {
        if !rect.is_valid_for(self.width, self.height) {
            return Err(Error::Data(format!(
                "crop {:?} outside {}x{} image",
                rect, self.width, self.height
            )));
        }
        let (w, h) = (rect.width() as usize, rect.height() as usize);
        let mut pixels = Vec::with_capacity(w * h);
        for y in rect.y_min as usize..rect.y_max as usize {
            pixels.extend_from_slice(&self.pixels[y * self.width + rect.x_min as usize..y * self.width + rect.x_max as usize]);
        }
        Ok(Image { width: w, height: h, pixels })
    }

    /// Bilinear sample at continuous pixel-center coordinates, edge-clamped.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let p = |xx, yy| self.get(xx, yy) as f64;
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Bilinear resize using half-pixel-center alignment.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Image::from_fn(width, height, |x, y| {
            self.sample_bilinear((x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5)
        })
    }

    /// Aspect-preserving resize into `width × height`, centred, zero padded.
    pub fn letterbox(&self, width: usize, height: usize) -> Image {
        let scale = (width as f64 / self.width as f64).min(height as f64 / self.height as f64);
        let nw = ((self.width as f64 * scale).round() as usize).clamp(1, width);
        let nh = ((self.height as f64 * scale).round() as usize).clamp(1, height);
        let inner = self.resize(nw, nh);
        let ox = (width - nw) / 2;
        let oy = (height - nh) / 2;
        Image::from_fn(width, height, |x, y| {
            if x >= ox && x < ox + nw && y >= oy && y < oy + nh {
                inner.get(x - ox, y - oy) as f64
            } else {
                0.0
            }
        })
    }

    /// Copy with `patch` written at `rect` (sizes must agree).
    pub fn with_region(&self, rect: &BoundingBox, patch: &Image) -> Result<Image> {
        if !rect.is_valid_for(self.width, self.height) {
            return Err(Error::Data(format!("region {:?} outside {}x{} image", rect, self.width, self.height)));
        }
        if patch.width != rect.width() as usize || patch.height != rect.height() as usize {
            return Err(Error::Data(format!(
                "patch {}x{} does not fit region {:?}",
                patch.width, patch.height, rect
            )));
        }
        let mut out = self.clone();
        for y in 0..patch.height {
            let row = (rect.y_min as usize + y) * self.width + rect.x_min as usize;
            out.pixels[row..row + patch.width].copy_from_slice(&patch.pixels[y * patch.width..(y + 1) * patch.width]);
        }
        Ok(out)
    }

    /// Horizontal concatenation with a `gap`-pixel black separator; heights are
    /// matched by letterboxing into the tallest input.
    pub fn hconcat(parts: &[Image], gap: usize) -> Image {
        let h = parts.iter().map(|p| p.height).max().unwrap_or(1);
        let boxed: Vec<Image> = parts
            .iter()
            .map(|p| if p.height == h { p.clone() } else { p.letterbox(p.width * h / p.height.max(1), h) })
            .collect();
        let w = boxed.iter().map(|p| p.width).sum::<usize>() + gap * boxed.len().saturating_sub(1);
        let mut out = Image::filled(w.max(1), h, 0.0);
        let mut x0 = 0;
        for p in &boxed {
            for y in 0..p.height {
                for x in 0..p.width {
                    out.pixels[y * out.width + x0 + x] = p.get(x, y);
                }
            }
            x0 += p.width + gap;
        }
        out
    }
}

/// Loads a grayscale PNG (8- or 16-bit), mapping stored values linearly to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")));
    }
    let decoded = image::open(path).map_err(|e| Error::Decode { path: path.to_path_buf(), msg: e.to_string() })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let pixels: Vec<f32> = match decoded {
        image::DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        image::DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        other => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                msg: format!("expected 8- or 16-bit grayscale, found {:?}", other.color()),
            })
        }
    };
    Image::new(w, h, pixels)
}

/// Writes a 16-bit grayscale PNG.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let raw: Vec<u16> = img.pixels.iter().map(|&v| (v as f64 * 65535.0).round() as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, raw).expect("buffer size matches dimensions");
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("cannot encode {}: {}", path.display(), other)),
    })
}

/// Quantizes through the 16-bit storage format without touching the disk.
pub fn quantize16(img: &Image) -> Image {
    Image::from_fn(img.width, img.height, |x, y| (img.get(x, y) as f64 * 65535.0).round() / 65535.0)
}
