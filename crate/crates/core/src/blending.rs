//! Cosine alpha blending of translated patches back into full images.
//!
//! The mask is `α(i, j) = cos(|i|^n · π/2) · cos(|j|^n · π/2)` where `i`, `j`
//! are pixel-centre coordinates mapped linearly onto `[-1, 1]`, the outermost
//! rows and columns landing exactly on ±1.

use std::f64::consts::FRAC_PI_2;

use crate::dataio::{BoundingBox, Image};
use crate::error::{Error, Result};
use crate::patching::Patch;

#[derive(Clone, Debug, PartialEq)]
pub struct BlendMask {
    width: usize,
    height: usize,
    alpha: Vec<f64>,
    pub exponent: f64,
}

impl BlendMask {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.alpha[y * self.width + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha
    }

    /// Constant mask, mostly useful for tests.
    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, alpha: vec![value.clamp(0.0, 1.0); width * height], exponent: f64::NAN }
    }

    pub fn to_image(&self) -> Image {
        Image::from_fn(self.width, self.height, |x, y| self.get(x, y))
    }
}

/// |normalized coordinate| of pixel `k` among `len` pixels; mirror pixels get
/// bit-identical values.
fn normalized(k: usize, len: usize) -> f64 {
    (2 * k).abs_diff(len - 1) as f64 / (len - 1) as f64
}

fn falloff(u: f64, n: f64) -> f64 {
    let u = u.abs();
    if u >= 1.0 {
        0.0
    } else {
        (u.powf(n) * FRAC_PI_2).cos()
    }
}

/// Cosine value at a single normalized coordinate pair.
pub fn alpha_at(i: f64, j: f64, n: f64) -> f64 {
    falloff(i, n) * falloff(j, n)
}

pub fn alpha_mask(height: usize, width: usize, n: f64) -> Result<BlendMask> {
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Config(format!("mask exponent must be positive, got {}", n)));
    }
    if height < 2 || width < 2 {
        return Err(Error::Config(format!("mask needs at least 2x2 pixels, got {}x{}", width, height)));
    }
    let rows: Vec<f64> = (0..height).map(|r| falloff(normalized(r, height), n)).collect();
    let cols: Vec<f64> = (0..width).map(|c| falloff(normalized(c, width), n)).collect();
    let alpha = rows.iter().flat_map(|&a| cols.iter().map(move |&b| a * b)).collect();
    Ok(BlendMask { width, height, alpha, exponent: n })
}

/// Per-pixel `α·translated + (1-α)·original`.
pub fn blend(original: &Patch, translated: &Patch, mask: &BlendMask) -> Result<Patch> {
    let (o, t) = (&original.pixels, &translated.pixels);
    if o.width() != t.width() || o.height() != t.height() || o.width() != mask.width || o.height() != mask.height {
        return Err(Error::Data(format!(
            "blend shape mismatch: original {}x{}, translated {}x{}, mask {}x{}",
            o.width(),
            o.height(),
            t.width(),
            t.height(),
            mask.width,
            mask.height
        )));
    }
    let pixels = Image::from_fn(o.width(), o.height(), |x, y| {
        let a = mask.get(x, y);
        a * t.get(x, y) as f64 + (1.0 - a) * o.get(x, y) as f64
    });
    Ok(Patch { pixels, ..original.clone() })
}

/// Copy of `full` with `blended.crop_rect` overwritten by the blended pixels.
pub fn paste_back(full: &Image, blended: &Patch) -> Result<Image> {
    let rect: &BoundingBox = &blended.crop_rect;
    if !rect.is_valid_for(full.width(), full.height()) {
        return Err(Error::Data(format!(
            "crop rect {:?} outside {}x{} image",
            rect,
            full.width(),
            full.height()
        )));
    }
    full.with_region(rect, &blended.pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Domain;
    use crate::patching::Clamp;

    fn patch(img: Image, rect: BoundingBox) -> Patch {
        Patch {
            pixels: img,
            source_image_id: "s".into(),
            crop_rect: rect,
            domain: Domain::NonLesion,
            scale_factor: 1,
            clamp: Clamp::None,
        }
    }

    #[test]
    fn centre_corners_and_quarter_point() {
        let m = alpha_mask(9, 9, 2.0).unwrap();
        assert_eq!(m.get(4, 4), 1.0);
        for &(x, y) in &[(0, 0), (8, 0), (0, 8), (8, 8)] {
            assert_eq!(m.get(x, y), 0.0);
        }
        assert!((alpha_at(0.5, 0.0, 1.0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        // Row 2 of 9 sits at i = -0.5.
        let m1 = alpha_mask(9, 9, 1.0).unwrap();
        assert!((m1.get(4, 2) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn border_is_exactly_zero_and_symmetric() {
        let m = alpha_mask(7, 11, 1.7).unwrap();
        for x in 0..11 {
            assert_eq!(m.get(x, 0), 0.0);
            assert_eq!(m.get(x, 6), 0.0);
        }
        for y in 0..7 {
            assert_eq!(m.get(0, y), 0.0);
            assert_eq!(m.get(10, y), 0.0);
            for x in 0..11 {
                assert_eq!(m.get(x, y), m.get(10 - x, 6 - y));
            }
        }
        let sq = alpha_mask(10, 10, 3.0).unwrap();
        for y in 0..10 {
            for x in 0..10 {
                assert_eq!(sq.get(x, y), sq.get(y, x));
            }
        }
    }

    #[test]
    fn invalid_exponent_rejected() {
        assert!(alpha_mask(5, 5, 0.0).is_err());
        assert!(alpha_mask(5, 5, -1.0).is_err());
        assert!(alpha_mask(1, 5, 1.0).is_err());
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let r = BoundingBox::new(0, 0, 3, 3);
        let o = patch(Image::filled(3, 3, 0.2), r);
        let t = patch(Image::filled(3, 3, 0.6), r);
        assert_eq!(blend(&o, &t, &BlendMask::constant(3, 3, 1.0)).unwrap().pixels, t.pixels);
        assert_eq!(blend(&o, &t, &BlendMask::constant(3, 3, 0.0)).unwrap().pixels, o.pixels);
        let half = blend(&o, &t, &BlendMask::constant(3, 3, 0.5)).unwrap();
        assert!(half.pixels.pixels().iter().all(|&v| (v - 0.4).abs() < 1e-6));
        assert!(blend(&o, &t, &BlendMask::constant(4, 3, 0.5)).is_err());
    }

    #[test]
    fn paste_back_only_touches_rect() {
        let full = Image::from_fn(20, 30, |x, y| ((x * 3 + y * 5) % 11) as f64 / 11.0);
        let rect = BoundingBox::new(5, 7, 13, 15);
        let same = patch(full.crop(&rect).unwrap(), rect);
        assert_eq!(paste_back(&full, &same).unwrap(), full);
        let other = patch(Image::filled(8, 8, 1.0), rect);
        let out = paste_back(&full, &other).unwrap();
        for y in 0..30 {
            for x in 0..20 {
                let inside = (5..13).contains(&x) && (7..15).contains(&y);
                if inside {
                    assert_eq!(out.get(x, y), 1.0);
                } else {
                    assert_eq!(out.get(x, y), full.get(x, y));
                }
            }
        }
        let bad = patch(Image::filled(8, 8, 1.0), BoundingBox::new(15, 7, 23, 15));
        assert!(paste_back(&full, &bad).is_err());
    }
}
