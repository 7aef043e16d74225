use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Image;

/// Random linear transforms applied to training images only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip: bool,
    /// Rotation drawn uniformly from `±max_rotation_deg`.
    pub max_rotation_deg: f64,
    /// Translation drawn uniformly from `±max_shift_frac` of each side.
    pub max_shift_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { hflip: true, max_rotation_deg: 5.0, max_shift_frac: 0.05 }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { hflip: false, max_rotation_deg: 0.0, max_shift_frac: 0.0 }
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && self.max_rotation_deg == 0.0 && self.max_shift_frac == 0.0
    }
}

/// Flip, rotate about the centre and shift, filling uncovered pixels with 0.
pub fn augment_image<R: Rng + ?Sized>(img: &Image, cfg: &AugmentConfig, rng: &mut R) -> Image {
    if cfg.is_identity() {
        return img.clone();
    }
    let flip = cfg.hflip && rng.random::<bool>();
    let sym = |r: &mut R, m: f64| if m > 0.0 { r.random_range(-m..=m) } else { 0.0 };
    let theta = sym(rng, cfg.max_rotation_deg).to_radians();
    let (w, h) = (img.width() as f64, img.height() as f64);
    let dx = sym(rng, cfg.max_shift_frac) * w;
    let dy = sym(rng, cfg.max_shift_frac) * h;
    let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();
    Image::from_fn(img.width(), img.height(), |x, y| {
        // Inverse map: undo the shift, then the rotation, then the flip.
        let ux = x as f64 - dx - cx;
        let uy = y as f64 - dy - cy;
        let mut sx = cos * ux + sin * uy + cx;
        let sy = -sin * ux + cos * uy + cy;
        if flip {
            sx = w - 1.0 - sx;
        }
        if sx < -0.5 || sy < -0.5 || sx > w - 0.5 || sy > h - 0.5 {
            0.0
        } else {
            img.sample_bilinear(sx, sy)
        }
    })
}
