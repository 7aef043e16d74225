//! Individual pipeline stages. Each reads and writes inside a [`RunLayout`]
//! so the CLI verbs and the full pipeline share one on-disk contract.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::blending::{alpha_mask, blend, paste_back};
use crate::classifier::Classifier;
use crate::dataio::{
    generate_synthetic_dataset, load_image, save_image, BoundingBox, DatasetManifest, DatasetRecord, Domain, Image,
    Label, PatchOrigin, Provenance, Split, SynthConfig,
};
use crate::error::{Error, Result};
use crate::metrics::ScoredSet;
use crate::patching::{
    crop_lesion_patch, crop_matched_patch, intensity_filter, match_nonlesion_images, resample_to_model_size, Clamp,
    Patch, PatchConfig,
};
use crate::seed::{derive_seed, rng_from_seed, sha256_hex};
use crate::translation::{train_translator, Translator, TranslatorCheckpoint, TranslatorTrainConfig};

use super::layout::{RunLayout, DATA_ROOT};

pub const DATASET: &str = "dataset";
pub const TRANSLATOR_PATCHES: &str = "patches";
pub const SOURCE_PATCHES: &str = "source_patches";
pub const TRANSLATED: &str = "translated";
pub const GENERATED: &str = "generated";

pub fn save_manifest(layout: &RunLayout, name: &str, manifest: &DatasetManifest) -> Result<PathBuf> {
    let path = layout.manifest(name);
    manifest.save(&path)?;
    Ok(path)
}

pub fn load_manifest(layout: &RunLayout, name: &str) -> Result<DatasetManifest> {
    DatasetManifest::load(&layout.manifest(name))
}

/// SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn load_record(layout: &RunLayout, manifest: &DatasetManifest, rec: &DatasetRecord) -> Result<Image> {
    load_image(&manifest.resolve(&layout.manifests(), rec))
}

fn write_record_image(layout: &RunLayout, rel: &Path, img: &Image) -> Result<()> {
    save_image(img, &layout.data().join(rel))
}

/// Renders the synthetic dataset into `data/images` and writes `manifests/dataset.jsonl`.
pub fn synth_stage(cfg: &SynthConfig, layout: &RunLayout) -> Result<DatasetManifest> {
    layout.create()?;
    let mut manifest = generate_synthetic_dataset(cfg, &layout.data())?;
    manifest.root = DATA_ROOT.into();
    save_manifest(layout, DATASET, &manifest)?;
    Ok(manifest)
}

/// Patches for translator training and for generation.
#[derive(Clone, Debug)]
pub struct PatchSets {
    /// Lesion patches and matched train non-lesion patches.
    pub translator: DatasetManifest,
    /// Non-lesion source crops to be translated, guided by train lesion boxes.
    pub source: DatasetManifest,
    pub warnings: Vec<String>,
}

fn origin_of(patch: &Patch, domain: Domain, guide: Option<BoundingBox>, matched_to: Option<&str>) -> PatchOrigin {
    PatchOrigin {
        source_image_id: patch.source_image_id.clone(),
        crop_rect: patch.crop_rect,
        domain,
        scale_factor: patch.scale_factor,
        clamped: patch.clamp != Clamp::None,
        guide_box: guide,
        matched_to: matched_to.map(str::to_string),
    }
}

/// `b` mapped from image coordinates into a `side × side` resample of `rect`.
fn box_in_patch(b: &BoundingBox, rect: &BoundingBox, side: usize) -> BoundingBox {
    let sx = side as f64 / rect.width() as f64;
    let sy = side as f64 / rect.height() as f64;
    let map = |v: u32, lo: u32, s: f64| ((v.saturating_sub(lo)) as f64 * s).round().clamp(0.0, side as f64) as u32;
    let (x0, x1) = (map(b.x_min, rect.x_min, sx), map(b.x_max, rect.x_min, sx));
    let (y0, y1) = (map(b.y_min, rect.y_min, sy), map(b.y_max, rect.y_min, sy));
    if x1 > x0 && y1 > y0 {
        BoundingBox::new(x0, y0, x1, y1)
    } else {
        BoundingBox::new(0, 0, side as u32, side as u32)
    }
}

#[allow(clippy::too_many_arguments)]
fn patch_record(
    id: String,
    rel: PathBuf,
    patch: &Patch,
    label: Label,
    boxes: Vec<BoundingBox>,
    split: Split,
    provenance: Provenance,
    body_part: &str,
    origin: PatchOrigin,
) -> DatasetRecord {
    DatasetRecord {
        image_id: id,
        path: rel,
        label,
        boxes,
        split,
        body_part: body_part.to_string(),
        provenance,
        width: patch.pixels.width() as u32,
        height: patch.pixels.height() as u32,
        origin: Some(origin),
    }
}

/// Matched, intensity-filtered and resampled crops of `candidates` for every
/// train lesion image, written under `data/patches/<dir>`.
#[allow(clippy::too_many_arguments)]
fn matched_patches(
    dataset: &DatasetManifest,
    layout: &RunLayout,
    cfg: &PatchConfig,
    s: u32,
    candidates: &[&DatasetRecord],
    dir: &str,
    split: Split,
    body_part: &str,
    warnings: &mut Vec<String>,
) -> Result<Vec<DatasetRecord>> {
    let side = cfg.model_input_side;
    let mut cache: HashMap<String, Image> = HashMap::new();
    let mut out = Vec::new();
    let mut dropped = 0usize;
    for les in dataset.split(Split::Train).filter(|r| r.label == Label::Lesion) {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, &format!("{dir}-{}", les.image_id)));
        let m = match_nonlesion_images(les, candidates, cfg.n, &mut rng);
        warnings.extend(m.warning);
        for (k, &ci) in m.chosen.iter().enumerate() {
            let cand = candidates[ci];
            if !cache.contains_key(&cand.image_id) {
                cache.insert(cand.image_id.clone(), load_record(layout, dataset, cand)?);
            }
            let img = &cache[&cand.image_id];
            let lesion_box = les.boxes[0];
            let (patch, guide) =
                crop_matched_patch(img, &cand.image_id, &lesion_box, (les.width as usize, les.height as usize), s, &mut rng)?;
            if !intensity_filter(&patch, cfg.intensity_threshold) {
                dropped += 1;
                continue;
            }
            let patch = resample_to_model_size(&patch, side)?;
            let id = format!("{dir}-{}-{k:02}", les.image_id);
            let rel = PathBuf::from("patches").join(dir).join(format!("{id}.png"));
            write_record_image(layout, &rel, &patch.pixels)?;
            let origin = origin_of(&patch, Domain::NonLesion, Some(guide), Some(&les.image_id));
            out.push(patch_record(id, rel, &patch, Label::NonLesion, vec![], split, Provenance::Empirical, body_part, origin));
        }
    }
    if dropped > 0 {
        log::info!("intensity filter dropped {dropped} {dir} patches");
    }
    Ok(out)
}

fn lesion_patches(dataset: &DatasetManifest, layout: &RunLayout, cfg: &PatchConfig, s: u32, body_part: &str) -> Result<Vec<DatasetRecord>> {
    let side = cfg.model_input_side;
    let mut out = Vec::new();
    for les in dataset.split(Split::Train).filter(|r| r.label == Label::Lesion) {
        let img = load_record(layout, dataset, les)?;
        for (bi, b) in les.boxes.iter().enumerate() {
            for p in 0..cfg.patches_per_box {
                let id = format!("lesion-{}-{bi}-{p}", les.image_id);
                let mut rng = rng_from_seed(derive_seed(cfg.seed, &id));
                let patch = crop_lesion_patch(&img, &les.image_id, b, s, &mut rng)?;
                let inside = box_in_patch(b, &patch.crop_rect, side);
                let patch = resample_to_model_size(&patch, side)?;
                let rel = PathBuf::from("patches").join("lesion").join(format!("{id}.png"));
                write_record_image(layout, &rel, &patch.pixels)?;
                let origin = origin_of(&patch, Domain::Lesion, None, None);
                out.push(patch_record(id, rel, &patch, Label::Lesion, vec![inside], Split::Train, Provenance::Empirical, body_part, origin));
            }
        }
    }
    Ok(out)
}

/// Lesion crops plus matched train negatives for translator training.
pub fn translator_patches_stage(dataset: &DatasetManifest, layout: &RunLayout, cfg: &PatchConfig, s: u32) -> Result<PatchSets> {
    cfg.validate()?;
    let body_part = body_part_of(dataset);
    let mut warnings = Vec::new();
    let mut records = lesion_patches(dataset, layout, cfg, s, &body_part)?;
    let negs: Vec<&DatasetRecord> = dataset.split(Split::Train).filter(|r| r.label == Label::NonLesion).collect();
    records.extend(matched_patches(dataset, layout, cfg, s, &negs, "nonlesion", Split::Train, &body_part, &mut warnings)?);
    let translator = DatasetManifest::new(dataset.seed, DATA_ROOT, records);
    save_manifest(layout, TRANSLATOR_PATCHES, &translator)?;
    Ok(PatchSets { translator, source: DatasetManifest::new(dataset.seed, DATA_ROOT, vec![]), warnings })
}

/// Source non-lesion crops to translate, guided by the train lesion boxes.
/// Images of the `source` split are used; without one, train negatives are.
pub fn source_patches_stage(dataset: &DatasetManifest, layout: &RunLayout, cfg: &PatchConfig, s: u32) -> Result<DatasetManifest> {
    cfg.validate()?;
    let body_part = body_part_of(dataset);
    let mut pool: Vec<&DatasetRecord> = dataset.split(Split::Source).filter(|r| r.label == Label::NonLesion).collect();
    if pool.is_empty() {
        log::warn!("no source split; drawing generation crops from train non-lesion images");
        pool = dataset.split(Split::Train).filter(|r| r.label == Label::NonLesion).collect();
    }
    let mut warnings = Vec::new();
    let records = matched_patches(dataset, layout, cfg, s, &pool, "source", Split::Source, &body_part, &mut warnings)?;
    let m = DatasetManifest::new(dataset.seed, DATA_ROOT, records);
    save_manifest(layout, SOURCE_PATCHES, &m)?;
    Ok(m)
}

/// Both patch manifests.
pub fn patchify_stage(dataset: &DatasetManifest, layout: &RunLayout, cfg: &PatchConfig, s: u32) -> Result<PatchSets> {
    let mut sets = translator_patches_stage(dataset, layout, cfg, s)?;
    sets.source = source_patches_stage(dataset, layout, cfg, s)?;
    Ok(sets)
}

fn body_part_of(dataset: &DatasetManifest) -> String {
    dataset.records.first().map(|r| r.body_part.clone()).unwrap_or_default()
}

pub fn load_images(layout: &RunLayout, manifest: &DatasetManifest, filter: impl Fn(&DatasetRecord) -> bool) -> Result<Vec<Image>> {
    manifest.records.iter().filter(|r| filter(r)).map(|r| load_record(layout, manifest, r)).collect()
}

/// Trains the translator on a patch manifest and writes its checkpoint and loss curve.
pub fn train_translator_stage(
    patches: &DatasetManifest,
    layout: &RunLayout,
    cfg: &TranslatorTrainConfig,
    s: u32,
) -> Result<(Translator<f32>, PathBuf)> {
    let lesion = load_images(layout, patches, |r| r.label == Label::Lesion)?;
    let nonlesion = load_images(layout, patches, |r| r.label == Label::NonLesion)?;
    let trained = train_translator(&lesion, &nonlesion, cfg)?;
    let path = layout.checkpoint("translator");
    trained.translator.to_checkpoint(cfg.loss_weights, Some(s as f64)).save(&path)?;
    trained.curve.save(&layout.reports().join("translator_loss.csv"))?;
    Ok((trained.translator, path))
}

pub fn load_translator(path: &Path) -> Result<(Translator<f32>, TranslatorCheckpoint)> {
    let ck = TranslatorCheckpoint::load(path)?;
    Ok((Translator::from_checkpoint(&ck)?, ck))
}

/// Non-lesion → lesion translation of every source patch.
pub fn translate_stage(translator: &Translator<f32>, source: &DatasetManifest, layout: &RunLayout) -> Result<DatasetManifest> {
    let images = load_images(layout, source, |_| true)?;
    let translated = translator.translate_images(&images, Domain::NonLesion, Domain::Lesion)?;
    let mut records = Vec::with_capacity(translated.len());
    for (rec, img) in source.records.iter().zip(&translated) {
        let origin = rec.origin.clone().ok_or_else(|| Error::Data(format!("{} has no patch origin", rec.image_id)))?;
        let guide = origin.guide_box.unwrap_or(origin.crop_rect);
        let side = img.width();
        let id = format!("translated-{}", rec.image_id.trim_start_matches("source-"));
        let rel = PathBuf::from("translated").join(format!("{id}.png"));
        write_record_image(layout, &rel, img)?;
        records.push(DatasetRecord {
            image_id: id,
            path: rel,
            label: Label::Lesion,
            boxes: vec![box_in_patch(&guide, &origin.crop_rect, side)],
            split: Split::Train,
            body_part: rec.body_part.clone(),
            provenance: Provenance::Generated,
            width: img.width() as u32,
            height: img.height() as u32,
            origin: Some(PatchOrigin { domain: Domain::Generated, ..origin }),
        });
    }
    let m = DatasetManifest::new(source.seed, DATA_ROOT, records);
    save_manifest(layout, TRANSLATED, &m)?;
    Ok(m)
}

/// Resizes each translated patch back to its crop, alpha-blends it over the
/// original crop and pastes the result into a copy of the source image.
pub fn blend_stage(dataset: &DatasetManifest, translated: &DatasetManifest, layout: &RunLayout, n: f64) -> Result<DatasetManifest> {
    let by_id: HashMap<&str, &DatasetRecord> = dataset.records.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut cache: HashMap<String, Image> = HashMap::new();
    let mut records = Vec::with_capacity(translated.records.len());
    for rec in &translated.records {
        let origin = rec.origin.clone().ok_or_else(|| Error::Data(format!("{} has no patch origin", rec.image_id)))?;
        let src = by_id
            .get(origin.source_image_id.as_str())
            .ok_or_else(|| Error::Data(format!("source image {} not in dataset", origin.source_image_id)))?;
        if !cache.contains_key(&src.image_id) {
            cache.insert(src.image_id.clone(), load_record(layout, dataset, src)?);
        }
        let full = &cache[&src.image_id];
        let rect = origin.crop_rect;
        let original = Patch {
            pixels: full.crop(&rect)?,
            source_image_id: src.image_id.clone(),
            crop_rect: rect,
            domain: Domain::NonLesion,
            scale_factor: origin.scale_factor,
            clamp: Clamp::None,
        };
        let small = load_record(layout, translated, rec)?;
        let trans = Patch {
            pixels: small.resize(rect.width() as usize, rect.height() as usize),
            domain: Domain::Generated,
            ..original.clone()
        };
        let mask = alpha_mask(rect.height() as usize, rect.width() as usize, n)?;
        let blended = blend(&original, &trans, &mask)?;
        let out = paste_back(full, &blended)?;
        let id = format!("generated-{}", rec.image_id.trim_start_matches("translated-"));
        let rel = PathBuf::from("generated").join(format!("{id}.png"));
        write_record_image(layout, &rel, &out)?;
        let guide = origin.guide_box.unwrap_or(rect);
        records.push(DatasetRecord {
            image_id: id,
            path: rel,
            label: Label::Lesion,
            boxes: vec![guide],
            split: Split::Train,
            body_part: src.body_part.clone(),
            provenance: Provenance::Generated,
            width: out.width() as u32,
            height: out.height() as u32,
            origin: Some(origin),
        });
    }
    let m = DatasetManifest::new(translated.seed, DATA_ROOT, records);
    m.validate()?;
    save_manifest(layout, GENERATED, &m)?;
    Ok(m)
}

/// Scores every record of `manifest` (optionally one split only).
pub fn score_stage(clf: &Classifier, manifest: &DatasetManifest, layout: &RunLayout, split: Option<Split>) -> Result<ScoredSet> {
    let recs: Vec<&DatasetRecord> = manifest.records.iter().filter(|r| split.is_none_or(|s| r.split == s)).collect();
    let scores = clf.score_records(manifest, &layout.manifests(), &recs)?;
    ScoredSet::new(
        split.unwrap_or(Split::Train),
        recs.iter().map(|r| r.image_id.clone()).collect(),
        recs.iter().map(|r| r.label == Label::Lesion).collect(),
        scores,
    )
}

/// `image_id,label,score` with label 1 for lesion.
pub fn write_scores_csv(path: &Path, set: &ScoredSet) -> Result<()> {
    let mut out = String::from("image_id,label,score\n");
    for ((id, &l), s) in set.image_ids.iter().zip(&set.labels).zip(&set.scores) {
        let _ = writeln!(out, "{},{},{}", id, l as u8, s);
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_scores_csv(path: &Path, split: Split) -> Result<ScoredSet> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (mut ids, mut labels, mut scores) = (Vec::new(), Vec::new(), Vec::new());
    for row in reader.records() {
        let row = row.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let bad = || Error::Data(format!("{}: malformed row {:?}", path.display(), row));
        ids.push(row.get(0).ok_or_else(bad)?.to_string());
        labels.push(match row.get(1).ok_or_else(bad)? {
            "1" => true,
            "0" => false,
            _ => return Err(bad()),
        });
        scores.push(row.get(2).and_then(|s| s.parse::<f64>().ok()).ok_or_else(bad)?);
    }
    ScoredSet::new(split, ids, labels, scores)
}
