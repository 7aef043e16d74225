//! Procedural stand-in for radiographs: an elongated "bone" band with a
//! projected-cylinder intensity profile, optionally carrying one bright,
//! soft-edged elliptical "lesion".

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::image::{save_image, BoundingBox, Image};
use super::manifest::{DatasetManifest, DatasetRecord, Label, Provenance, Split};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed};

/// Anatomy analogue. Families differ in how much the bone's orientation,
/// width and position vary from image to image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Humerus,
    Tibia,
    Femur,
}

struct FamilyParams {
    orientation_sd_deg: f64,
    width_frac: (f64, f64),
    offset_sd_frac: f64,
    bow: f64,
}

impl ShapeFamily {
    pub fn tag(self) -> &'static str {
        match self {
            ShapeFamily::Humerus => "humerus",
            ShapeFamily::Tibia => "tibia",
            ShapeFamily::Femur => "femur",
        }
    }

    fn params(self) -> FamilyParams {
        match self {
            ShapeFamily::Humerus => {
                FamilyParams { orientation_sd_deg: 3.0, width_frac: (0.30, 0.36), offset_sd_frac: 0.03, bow: 0.0 }
            }
            ShapeFamily::Tibia => {
                FamilyParams { orientation_sd_deg: 9.0, width_frac: (0.22, 0.38), offset_sd_frac: 0.08, bow: 0.04 }
            }
            ShapeFamily::Femur => {
                FamilyParams { orientation_sd_deg: 15.0, width_frac: (0.26, 0.44), offset_sd_frac: 0.10, bow: 0.12 }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSize {
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train: SplitSize,
    pub val: SplitSize,
    pub test: SplitSize,
    /// Non-lesion images reserved for synthesizing augmentations.
    #[serde(default)]
    pub source: usize,
    /// Inclusive image height range in pixels.
    pub height_range: [u32; 2],
    /// Inclusive width / height ratio range.
    pub aspect_range: [f64; 2],
    pub family: ShapeFamily,
    /// Lesion semi-axis range in pixels.
    pub lesion_radius_range: [f64; 2],
    /// Additive lesion intensity range.
    pub lesion_contrast_range: [f64; 2],
    pub bone_intensity_range: [f64; 2],
    pub background: f64,
    pub noise_sigma: f64,
    /// Relative amplitude of the periodic texture along the bone.
    #[serde(default = "default_texture")]
    pub texture: f64,
    pub seed: u64,
}

fn default_texture() -> f64 {
    0.08
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train: SplitSize { n_pos: 30, n_neg: 1000 },
            val: SplitSize { n_pos: 20, n_neg: 200 },
            test: SplitSize { n_pos: 60, n_neg: 300 },
            source: 300,
            height_range: [80, 96],
            aspect_range: [0.45, 0.55],
            family: ShapeFamily::Humerus,
            lesion_radius_range: [3.0, 5.0],
            lesion_contrast_range: [0.10, 0.20],
            bone_intensity_range: [0.45, 0.65],
            background: 0.06,
            noise_sigma: 0.03,
            texture: default_texture(),
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite()) || r[0] > r[1] || r[0] < lo || r[1] > hi {
        return Err(Error::Config(format!("{} range {:?} must satisfy {} <= lo <= hi <= {}", name, r, lo, hi)));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height_range[0] < 8 || self.height_range[0] > self.height_range[1] {
            return Err(Error::Config(format!("height range {:?} must satisfy 8 <= lo <= hi", self.height_range)));
        }
        check_range("aspect", self.aspect_range, 0.1, 10.0)?;
        check_range("lesion radius", self.lesion_radius_range, 1.0, f64::MAX)?;
        check_range("lesion contrast", self.lesion_contrast_range, 0.0, 1.0)?;
        check_range("bone intensity", self.bone_intensity_range, 0.0, 1.0)?;
        if !(0.0..=1.0).contains(&self.background) || !(0.0..=1.0).contains(&self.noise_sigma) {
            return Err(Error::Config("background and noise_sigma must lie in [0, 1]".into()));
        }
        let min_side = (self.height_range[0] as f64 * self.aspect_range[0]).min(self.height_range[0] as f64);
        let max_bone_half = 0.5 * min_side * self.family.params().width_frac.0;
        if 2.0 * self.lesion_radius_range[1] + 2.0 >= min_side || self.lesion_radius_range[1] > 2.0 * max_bone_half {
            return Err(Error::Config(format!(
                "lesion radius up to {} does not fit inside the smallest image side {:.1}",
                self.lesion_radius_range[1], min_side
            )));
        }
        Ok(())
    }

    /// `(split, label, count)` in generation order.
    fn plan(&self) -> Vec<(Split, Label, usize)> {
        vec![
            (Split::Train, Label::Lesion, self.train.n_pos),
            (Split::Train, Label::NonLesion, self.train.n_neg),
            (Split::Val, Label::Lesion, self.val.n_pos),
            (Split::Val, Label::NonLesion, self.val.n_neg),
            (Split::Test, Label::Lesion, self.test.n_pos),
            (Split::Test, Label::NonLesion, self.test.n_neg),
            (Split::Source, Label::NonLesion, self.source),
        ]
    }
}

pub fn image_id(split: Split, label: Label, index: usize) -> String {
    let tag = match label {
        Label::Lesion => "pos",
        Label::NonLesion => "neg",
    };
    format!("{}-{}-{:05}", split.as_str(), tag, index)
}

fn uniform<R: Rng>(rng: &mut R, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..=r.1)
    } else {
        r.0
    }
}

/// Renders one image; the per-image stream is keyed by `image_id`, so the
/// result does not depend on generation order.
pub fn render_synthetic_image(config: &SynthConfig, image_id: &str, label: Label) -> (Image, Option<BoundingBox>) {
    let fam = config.family.params();
    let mut rng = rng_from_seed(derive_seed(config.seed, image_id));
    let height = rng.random_range(config.height_range[0]..=config.height_range[1]) as usize;
    let aspect = uniform(&mut rng, (config.aspect_range[0], config.aspect_range[1]));
    let width = ((height as f64 * aspect).round() as usize).max(8);
    let (w, h) = (width as f64, height as f64);

    let theta = (fam.orientation_sd_deg * rng.sample::<f64, _>(StandardNormal)).to_radians();
    let half_width = 0.5 * w * uniform(&mut rng, fam.width_frac);
    let offset = fam.offset_sd_frac * w * rng.sample::<f64, _>(StandardNormal);
    let bow = fam.bow * w * rng.random_range(-1.0..=1.0);
    let bone_int = uniform(&mut rng, (config.bone_intensity_range[0], config.bone_intensity_range[1]));
    let tex_phase = rng.random_range(0.0..2.0 * PI);
    let tex_period = rng.random_range(0.35..0.6) * h;
    let (sin_t, cos_t) = theta.sin_cos();
    let (cx, cy) = (0.5 * w + offset, 0.5 * h);
    // Axis-aligned frame: `along` runs down the bone, `across` perpendicular.
    let frame = move |x: f64, y: f64| {
        let dx = x - cx;
        let dy = y - cy;
        let along = dx * sin_t + dy * cos_t;
        let t = along / (0.5 * h);
        let across = dx * cos_t - dy * sin_t - bow * (1.0 - t * t);
        (along, across)
    };

    let lesion = if label == Label::Lesion {
        let r = uniform(&mut rng, (config.lesion_radius_range[0], config.lesion_radius_range[1]));
        let ecc = rng.random_range(0.7..=1.0);
        let (rx, ry) = (r, r * ecc);
        let phi = rng.random_range(0.0..PI);
        let contrast = uniform(&mut rng, (config.lesion_contrast_range[0], config.lesion_contrast_range[1]));
        let ex = (rx * rx * phi.cos().powi(2) + ry * ry * phi.sin().powi(2)).sqrt();
        let ey = (rx * rx * phi.sin().powi(2) + ry * ry * phi.cos().powi(2)).sqrt();
        // Place on the bone, fully inside the image.
        let mut centre = (cx, cy);
        for _ in 0..200 {
            let along = rng.random_range(-0.35..=0.35) * h;
            let across = rng.random_range(-0.4..=0.4) * half_width;
            let t = along / (0.5 * h);
            let acr = across + bow * (1.0 - t * t);
            let x = cx + along * sin_t + acr * cos_t;
            let y = cy + along * cos_t - acr * sin_t;
            if x - ex >= 1.0 && x + ex <= w - 1.0 && y - ey >= 1.0 && y + ey <= h - 1.0 {
                centre = (x, y);
                break;
            }
        }
        Some((centre, rx, ry, phi, contrast))
    } else {
        None
    };

    let lesion_rho = |x: f64, y: f64| -> Option<f64> {
        let ((lx, ly), rx, ry, phi, _) = lesion?;
        let (s, c) = phi.sin_cos();
        let dx = x - lx;
        let dy = y - ly;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        Some(((u / rx).powi(2) + (v / ry).powi(2)).sqrt())
    };

    let mut noise = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        noise.push(config.noise_sigma * rng.sample::<f64, _>(StandardNormal));
    }
    let img = Image::from_fn(width, height, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let (along, across) = frame(px, py);
        let q = across / half_width;
        let thickness = (1.0 - q * q).max(0.0).sqrt();
        let texture = 1.0 + config.texture * (2.0 * PI * along / tex_period + tex_phase).sin();
        let mut v = config.background + bone_int * thickness * texture;
        if let (Some(rho), Some((_, _, _, _, contrast))) = (lesion_rho(px, py), lesion) {
            v += contrast * soft_disc(rho);
        }
        v + noise[y * width + x]
    });

    let bbox = lesion.map(|_| {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
        for y in 0..height {
            for x in 0..width {
                if lesion_rho(x as f64 + 0.5, y as f64 + 0.5).is_some_and(|r| r < 1.0) {
                    x0 = x0.min(x as u32);
                    y0 = y0.min(y as u32);
                    x1 = x1.max(x as u32 + 1);
                    y1 = y1.max(y as u32 + 1);
                }
            }
        }
        BoundingBox::new(x0, y0, x1, y1)
    });
    (img, bbox)
}

/// 1 inside 60% of the radius, cosine roll-off to 0 at the rim.
fn soft_disc(rho: f64) -> f64 {
    if rho <= 0.6 {
        1.0
    } else if rho >= 1.0 {
        0.0
    } else {
        0.5 * (1.0 + (PI * (rho - 0.6) / 0.4).cos())
    }
}

/// Renders every image of `config` into `out_dir/images/` and returns the
/// manifest (root `.`, relative to `out_dir`).
pub fn generate_synthetic_dataset(config: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    std::fs::create_dir_all(out_dir.join("images")).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::new();
    for (split, label, count) in config.plan() {
        for i in 0..count {
            let id = image_id(split, label, i);
            let (img, bbox) = render_synthetic_image(config, &id, label);
            let rel = PathBuf::from("images").join(format!("{id}.png"));
            save_image(&img, &out_dir.join(&rel))?;
            records.push(DatasetRecord {
                image_id: id,
                path: rel,
                label,
                boxes: bbox.into_iter().collect(),
                split,
                body_part: config.family.tag().to_string(),
                provenance: Provenance::Empirical,
                width: img.width() as u32,
                height: img.height() as u32,
                origin: None,
            });
        }
    }
    let manifest = DatasetManifest::new(config.seed, ".", records);
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            train: SplitSize { n_pos: 3, n_neg: 4 },
            val: SplitSize { n_pos: 1, n_neg: 2 },
            test: SplitSize { n_pos: 1, n_neg: 1 },
            source: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn degenerate_radius_rejected() {
        let cfg = SynthConfig { lesion_radius_range: [3.0, 60.0], ..small() };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("does not fit"));
        let cfg = SynthConfig { lesion_radius_range: [5.0, 3.0], ..small() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn lesion_brightens_bone_inside_box() {
        let cfg = SynthConfig { noise_sigma: 0.0, lesion_contrast_range: [0.3, 0.3], ..small() };
        let (img, bbox) = render_synthetic_image(&cfg, "train-pos-00000", Label::Lesion);
        let bbox = bbox.unwrap();
        assert!(bbox.is_valid_for(img.width(), img.height()));
        let (cx, cy) = bbox.center();
        let (neg, none) = render_synthetic_image(&cfg, "train-pos-00000", Label::NonLesion);
        assert!(none.is_none());
        // Same id => same bone; the lesion adds intensity at its centre.
        let (x, y) = (cx as usize, cy as usize);
        assert!(img.get(x, y) > neg.get(x, y) + 0.1 || img.get(x, y) >= 0.999);
    }

    #[test]
    fn rendering_is_deterministic() {
        let cfg = small();
        let a = render_synthetic_image(&cfg, "test-pos-00000", Label::Lesion);
        let b = render_synthetic_image(&cfg, "test-pos-00000", Label::Lesion);
        assert_eq!(a, b);
    }

    #[test]
    fn families_differ_in_tag() {
        assert_eq!(ShapeFamily::Tibia.tag(), "tibia");
        let cfg: SynthConfig = toml::from_str(&toml::to_string(&small()).unwrap()).unwrap();
        assert_eq!(cfg, small());
    }
}
