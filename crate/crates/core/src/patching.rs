//! Square patch extraction around annotated lesions and matched cropping of
//! non-lesion images.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{BoundingBox, DatasetRecord, Domain, Image};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    /// Patch side = `s` × the longer bounding-box side. Must be 1 or 2.
    pub s: u32,
    /// Non-lesion images matched to every lesion image.
    pub n: usize,
    #[serde(default = "default_intensity_threshold")]
    pub intensity_threshold: f64,
    #[serde(default = "default_model_input_side")]
    pub model_input_side: usize,
    /// Random crops taken around each lesion box.
    #[serde(default = "default_patches_per_box")]
    pub patches_per_box: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_intensity_threshold() -> f64 {
    0.15
}

fn default_model_input_side() -> usize {
    32
}

fn default_patches_per_box() -> usize {
    1
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            s: 2,
            n: 10,
            intensity_threshold: default_intensity_threshold(),
            model_input_side: default_model_input_side(),
            patches_per_box: default_patches_per_box(),
            seed: 0,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.s) {
            return Err(Error::Config(format!("patch scale factor s must be 1 or 2, got {}", self.s)));
        }
        if self.n == 0 || self.patches_per_box == 0 {
            return Err(Error::Config("n and patches_per_box must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.intensity_threshold) {
            return Err(Error::Config(format!(
                "intensity threshold {} outside [0, 1]",
                self.intensity_threshold
            )));
        }
        if self.model_input_side < 8 {
            return Err(Error::Config("model input side must be at least 8".into()));
        }
        Ok(())
    }
}

/// How a requested patch side had to be adjusted to the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clamp {
    /// Side is exactly `s × max(box side)`.
    None,
    /// Side reduced to the shorter image side; the box is still contained.
    Side,
    /// The box is larger than the shorter image side; the patch is the largest
    /// inscribed square maximizing overlap with the box.
    Overlap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub pixels: Image,
    pub source_image_id: String,
    pub crop_rect: BoundingBox,
    pub domain: Domain,
    pub scale_factor: u32,
    pub clamp: Clamp,
}

/// Chooses a square window `(rect, clamp)` for `target` inside a `width × height` image.
pub fn place_square<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    target: &BoundingBox,
    side: u32,
    rng: &mut R,
) -> (BoundingBox, Clamp) {
    let short = width.min(height) as u32;
    let m = target.max_side();
    let (side, clamp) = if side <= short {
        (side, Clamp::None)
    } else if m <= short {
        (short, Clamp::Side)
    } else {
        (short, Clamp::Overlap)
    };
    // Offsets maximizing 1-D overlap of [o, o + side) with [lo, hi), restricted to the image.
    let axis = |lo: u32, hi: u32, len: u32, rng: &mut R| -> u32 {
        let a = lo.min(hi.saturating_sub(side));
        let b = lo.max(hi.saturating_sub(side));
        let max_off = len - side;
        let (a, b) = (a.min(max_off), b.min(max_off));
        if a == b {
            a
        } else {
            rng.random_range(a..=b)
        }
    };
    let x0 = axis(target.x_min, target.x_max, width as u32, rng);
    let y0 = axis(target.y_min, target.y_max, height as u32, rng);
    (BoundingBox::new(x0, y0, x0 + side, y0 + side), clamp)
}

fn check_box(image: &Image, b: &BoundingBox) -> Result<()> {
    if !b.is_valid_for(image.width(), image.height()) {
        return Err(Error::Data(format!(
            "bounding box {:?} invalid for {}x{} image",
            b,
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

/// Random square crop of side `s × max(box side)` containing `bbox`.
pub fn crop_lesion_patch<R: Rng + ?Sized>(
    image: &Image,
    image_id: &str,
    bbox: &BoundingBox,
    s: u32,
    rng: &mut R,
) -> Result<Patch> {
    check_box(image, bbox)?;
    let (rect, clamp) = place_square(image.width(), image.height(), bbox, s * bbox.max_side(), rng);
    Ok(Patch {
        pixels: image.crop(&rect)?,
        source_image_id: image_id.to_string(),
        crop_rect: rect,
        domain: Domain::Lesion,
        scale_factor: s,
        clamp,
    })
}

/// Proportional mapping of a box between image sizes, keeping the box's own
/// dimensions and shifting it inside the destination where needed.
pub fn rescale_box(bbox: &BoundingBox, from: (usize, usize), to: (usize, usize)) -> BoundingBox {
    let (fw, fh) = (from.0 as f64, from.1 as f64);
    let (tw, th) = (to.0 as u32, to.1 as u32);
    let (cx, cy) = bbox.center();
    let (ncx, ncy) = (cx / fw * to.0 as f64, cy / fh * to.1 as f64);
    let bw = bbox.width().min(tw);
    let bh = bbox.height().min(th);
    let x0 = ((ncx - bw as f64 / 2.0).round().max(0.0) as u32).min(tw - bw);
    let y0 = ((ncy - bh as f64 / 2.0).round().max(0.0) as u32).min(th - bh);
    BoundingBox::new(x0, y0, x0 + bw, y0 + bh)
}

/// Crop of a non-lesion image guided by a lesion image's annotation. Returns
/// the patch and the box (in `neg_image` coordinates) the crop was placed around.
pub fn crop_matched_patch<R: Rng + ?Sized>(
    neg_image: &Image,
    neg_image_id: &str,
    lesion_box: &BoundingBox,
    lesion_image_size: (usize, usize),
    s: u32,
    rng: &mut R,
) -> Result<(Patch, BoundingBox)> {
    let guide = rescale_box(lesion_box, lesion_image_size, (neg_image.width(), neg_image.height()));
    let (rect, clamp) = place_square(neg_image.width(), neg_image.height(), &guide, s * lesion_box.max_side(), rng);
    Ok((
        Patch {
            pixels: neg_image.crop(&rect)?,
            source_image_id: neg_image_id.to_string(),
            crop_rect: rect,
            domain: Domain::NonLesion,
            scale_factor: s,
            clamp,
        },
        guide,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Indices into the candidate slice, most similar first.
    pub chosen: Vec<usize>,
    pub warning: Option<String>,
}

/// Picks `n` distinct candidates most similar in geometry to `lesion`:
/// smallest |aspect-ratio difference|, then smallest |area difference|, with
/// ties broken by a seeded shuffle.
pub fn match_nonlesion_images<R: Rng + ?Sized>(
    lesion: &DatasetRecord,
    candidates: &[&DatasetRecord],
    n: usize,
    rng: &mut R,
) -> MatchResult {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.shuffle(rng);
    let key = |i: usize| {
        let c = candidates[i];
        ((c.aspect_ratio() - lesion.aspect_ratio()).abs(), (c.area() - lesion.area()).abs())
    };
    order.sort_by(|&a, &b| key(a).partial_cmp(&key(b)).expect("finite geometry"));
    let warning = (candidates.len() < n).then(|| {
        let msg = format!(
            "{}: only {} non-lesion candidates for n = {}; using all",
            lesion.image_id,
            candidates.len(),
            n
        );
        log::warn!("{msg}");
        msg
    });
    order.truncate(n);
    MatchResult { chosen: order, warning }
}

/// Keep iff mean intensity ≥ `threshold`; strictly darker patches are dropped.
pub fn intensity_filter(patch: &Patch, threshold: f64) -> bool {
    patch.pixels.mean() >= threshold
}

/// Bilinear resample to `side × side`; provenance (including `crop_rect`) is kept.
pub fn resample_to_model_size(patch: &Patch, side: usize) -> Result<Patch> {
    if side < 8 {
        return Err(Error::Config(format!("model input side {} below 8", side)));
    }
    Ok(Patch { pixels: patch.pixels.resize(side, side), ..patch.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{Label, Provenance, Split};
    use crate::seed::rng_from_seed;

    fn blank(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y| ((x + y) % 7) as f64 / 7.0)
    }

    #[test]
    fn wide_box_doubles_to_200() {
        let img = blank(400, 300);
        let b = BoundingBox::new(120, 100, 220, 150);
        let mut rng = rng_from_seed(1);
        let p = crop_lesion_patch(&img, "x", &b, 2, &mut rng).unwrap();
        assert_eq!(p.crop_rect.width(), 200);
        assert_eq!(p.crop_rect.height(), 200);
        assert!(p.crop_rect.contains(&b));
        assert_eq!(p.clamp, Clamp::None);
        assert_eq!((p.pixels.width(), p.pixels.height()), (200, 200));
    }

    #[test]
    fn square_box_with_unit_scale_is_the_box() {
        let img = blank(256, 256);
        let b = BoundingBox::new(30, 40, 94, 104);
        let mut rng = rng_from_seed(2);
        let p = crop_lesion_patch(&img, "x", &b, 1, &mut rng).unwrap();
        assert_eq!(p.crop_rect, b);
    }

    #[test]
    fn corner_box_clamps_to_short_side() {
        let img = blank(256, 256);
        let b = BoundingBox::new(0, 0, 180, 180);
        for seed in 0..50 {
            let mut rng = rng_from_seed(seed);
            let p = crop_lesion_patch(&img, "x", &b, 2, &mut rng).unwrap();
            assert_eq!(p.crop_rect.width(), 256);
            assert!(p.crop_rect.contains(&b));
            assert_eq!(p.clamp, Clamp::Side);
        }
    }

    #[test]
    fn oversized_box_maximizes_overlap() {
        let img = blank(100, 300);
        let b = BoundingBox::new(0, 50, 100, 250);
        let b_big = BoundingBox::new(0, 50, 100, 170);
        let mut rng = rng_from_seed(3);
        let p = crop_lesion_patch(&img, "x", &b, 1, &mut rng).unwrap();
        assert_eq!(p.clamp, Clamp::Overlap);
        assert_eq!(p.crop_rect.width(), 100);
        assert_eq!(p.crop_rect.intersection_area(&b), 100 * 100);
        // 100x120 box in a 100-wide image: still impossible to contain.
        let p = crop_lesion_patch(&img, "x", &b_big, 1, &mut rng).unwrap();
        assert_eq!(p.clamp, Clamp::Overlap);
        assert_eq!(p.crop_rect.intersection_area(&b_big), 100 * 100);
    }

    #[test]
    fn invalid_box_rejected() {
        let img = blank(50, 50);
        let mut rng = rng_from_seed(4);
        assert!(crop_lesion_patch(&img, "x", &BoundingBox::new(10, 10, 10, 20), 1, &mut rng).is_err());
        assert!(crop_lesion_patch(&img, "x", &BoundingBox::new(10, 10, 60, 20), 1, &mut rng).is_err());
    }

    #[test]
    fn matched_crop_follows_rescaled_box() {
        let neg = blank(400, 300);
        let b = BoundingBox::new(150, 125, 250, 175);
        let mut rng = rng_from_seed(5);
        let (p, guide) = crop_matched_patch(&neg, "n", &b, (400, 300), 1, &mut rng).unwrap();
        assert_eq!(guide, b);
        assert_eq!(p.crop_rect.width(), 100);
        assert!(p.crop_rect.contains(&b));
        assert_eq!(p.domain, Domain::NonLesion);
    }

    #[test]
    fn matched_crop_of_patch_sized_image_is_whole_image() {
        let neg = blank(100, 100);
        let b = BoundingBox::new(10, 20, 60, 70);
        let mut rng = rng_from_seed(6);
        let (p, _) = crop_matched_patch(&neg, "n", &b, (200, 200), 2, &mut rng).unwrap();
        assert_eq!(p.crop_rect, BoundingBox::new(0, 0, 100, 100));
    }

    #[test]
    fn rescale_keeps_relative_centre() {
        let b = BoundingBox::new(40, 90, 60, 110);
        for &(w, h) in &[(100, 200), (50, 80), (300, 90)] {
            let r = rescale_box(&b, (100, 200), (w, h));
            let (cx, cy) = r.center();
            assert!((cx / w as f64 - 0.5).abs() <= 0.5 / w as f64 + 1e-12);
            assert!((cy / h as f64 - 0.5).abs() <= 0.5 / h as f64 + 1e-12);
        }
    }

    fn rec(id: &str, w: u32, h: u32) -> DatasetRecord {
        DatasetRecord {
            image_id: id.into(),
            path: format!("{id}.png").into(),
            label: Label::NonLesion,
            boxes: vec![],
            split: Split::Train,
            body_part: "humerus".into(),
            provenance: Provenance::Empirical,
            width: w,
            height: h,
            origin: None,
        }
    }

    #[test]
    fn matching_by_aspect_then_area() {
        let mut lesion = rec("l", 100, 205);
        lesion.label = Label::Lesion;
        lesion.boxes = vec![BoundingBox::new(0, 0, 5, 5)];
        let a = rec("a", 100, 100);
        let b = rec("b", 100, 200);
        let c = rec("c", 100, 210);
        let cands = vec![&a, &b, &c];
        let mut rng = rng_from_seed(7);
        let m = match_nonlesion_images(&lesion, &cands, 2, &mut rng);
        let mut ids: Vec<&str> = m.chosen.iter().map(|&i| cands[i].image_id.as_str()).collect();
        ids.sort();
        assert_eq!(ids, vec!["b", "c"]);
        assert!(m.warning.is_none());

        let m = match_nonlesion_images(&lesion, &cands[..1], 1, &mut rng);
        assert_eq!(m.chosen, vec![0]);
        let m = match_nonlesion_images(&lesion, &cands, 5, &mut rng);
        assert_eq!(m.chosen.len(), 3);
        assert!(m.warning.is_some());
    }

    #[test]
    fn intensity_filter_boundaries() {
        let mk = |v: f32| Patch {
            pixels: Image::filled(4, 4, v),
            source_image_id: "x".into(),
            crop_rect: BoundingBox::new(0, 0, 4, 4),
            domain: Domain::NonLesion,
            scale_factor: 1,
            clamp: Clamp::None,
        };
        assert!(!intensity_filter(&mk(0.0), 0.15));
        assert!(intensity_filter(&mk(1.0), 0.15));
        assert!(intensity_filter(&mk(0.15), 0.15));
        assert!(!intensity_filter(&mk(0.1499), 0.15));
    }

    #[test]
    fn resample_identity_constant_and_round_trip() {
        let grad = Image::from_fn(64, 64, |x, y| (x as f64 + 0.5 * y as f64) / 96.0);
        let p = Patch {
            pixels: grad.clone(),
            source_image_id: "g".into(),
            crop_rect: BoundingBox::new(3, 4, 67, 68),
            domain: Domain::NonLesion,
            scale_factor: 1,
            clamp: Clamp::None,
        };
        assert_eq!(resample_to_model_size(&p, 64).unwrap().pixels, grad);
        let c = Patch { pixels: Image::filled(20, 20, 0.37), ..p.clone() };
        let r = resample_to_model_size(&c, 33).unwrap();
        assert!(r.pixels.pixels().iter().all(|&v| (v - 0.37).abs() < 1e-6));
        let down = resample_to_model_size(&p, 32).unwrap();
        let up = resample_to_model_size(&down, 64).unwrap();
        assert_eq!(up.crop_rect, p.crop_rect);
        let mae: f64 = up.pixels.pixels().iter().zip(grad.pixels()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>()
            / grad.pixels().len() as f64;
        assert!(mae < 0.02, "mae {mae}");
        assert!(resample_to_model_size(&p, 4).is_err());
    }
}
