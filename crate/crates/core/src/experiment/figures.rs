//! Static figures of a finished run: patch triptychs, the blending mask, ROC
//! curves and the threshold ablation. Every plot also gets a CSV of its data.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::blending::alpha_mask;
use crate::dataio::{load_image, save_image, DatasetManifest, Image, Split};
use crate::error::{Error, Result};
use crate::metrics::ScoredSet;

use super::config::ExperimentConfig;
use super::layout::RunLayout;
use super::report::{Report, RowRole};
use super::stages::{read_scores_csv, DATASET, GENERATED, TRANSLATED};

const TILE: usize = 96;
const PLOT: usize = 240;
const MARGIN: usize = 8;

/// Writes every figure whose inputs exist and returns a notice for each one
/// that had to be skipped.
pub fn emit_figures(run_dir: &Path) -> Result<Vec<String>> {
    let layout = RunLayout::new(run_dir);
    let dir = layout.figures();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let cfg: Option<ExperimentConfig> = crate::dataio::read_json(&layout.config()).ok();
    let mut notices = Vec::new();

    let n = cfg.as_ref().map_or(2.0, |c| c.blend.n);
    save_image(&mask_heatmap(n)?, &dir.join("mask_heatmap.png"))?;

    let wanted = cfg.as_ref().map_or(8, |c| c.figures.triptychs);
    match triptychs(&layout, wanted) {
        Ok(0) => notices.push("no generated images; triptychs skipped".to_string()),
        Ok(_) => {}
        Err(e) => notices.push(format!("triptychs skipped: {e}")),
    }

    match Report::load(&layout.reports()) {
        Ok(report) => {
            if let Err(e) = roc_figure(&layout, &report) {
                notices.push(format!("ROC figure skipped: {e}"));
            }
            if report.rows.iter().any(|r| r.role == RowRole::Candidate) {
                ablation_figure(&layout, &report)?;
            } else {
                notices.push("no threshold candidates; ablation chart skipped".to_string());
            }
        }
        Err(e) => notices.push(format!("no report found, ROC and ablation figures skipped: {e}")),
    }
    Ok(notices)
}

pub fn mask_heatmap(n: f64) -> Result<Image> {
    Ok(alpha_mask(TILE, TILE, n)?.to_image())
}

/// Original crop, translated patch and blended crop side by side for `count`
/// generated records spread evenly over the id order. Returns how many were written.
pub fn triptychs(layout: &RunLayout, count: usize) -> Result<usize> {
    let gen_path = layout.manifest(GENERATED);
    if !gen_path.exists() {
        return Ok(0);
    }
    let generated = DatasetManifest::load(&gen_path)?;
    let translated = DatasetManifest::load(&layout.manifest(TRANSLATED))?;
    let dataset = DatasetManifest::load(&layout.manifest(DATASET))?;
    let by_id = |m: &DatasetManifest| -> HashMap<String, usize> {
        m.records.iter().enumerate().map(|(i, r)| (r.image_id.clone(), i)).collect()
    };
    let (tr_idx, ds_idx) = (by_id(&translated), by_id(&dataset));
    let mut records: Vec<_> = generated.records.iter().collect();
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let mdir = layout.manifests();
    let mut written = 0;
    // Evenly spaced picks so the sample covers many source lesions.
    let picks: Vec<_> = if records.len() <= count {
        records
    } else {
        (0..count).map(|k| records[k * records.len() / count]).collect()
    };
    for rec in picks {
        let origin = rec.origin.as_ref().ok_or_else(|| Error::Data(format!("{} has no origin", rec.image_id)))?;
        let key = rec.image_id.replacen("generated-", "translated-", 1);
        let tr = tr_idx.get(&key).map(|&i| &translated.records[i]).ok_or_else(|| Error::Data(format!("{key} missing")))?;
        let src = ds_idx
            .get(&origin.source_image_id)
            .map(|&i| &dataset.records[i])
            .ok_or_else(|| Error::Data(format!("{} missing", origin.source_image_id)))?;
        let rect = origin.crop_rect;
        let original = load_image(&dataset.resolve(&mdir, src))?.crop(&rect)?;
        let trans = load_image(&translated.resolve(&mdir, tr))?;
        let blended = load_image(&generated.resolve(&mdir, rec))?.crop(&rect)?;
        let tiles: Vec<Image> = [original, trans, blended].iter().map(|i| i.resize(TILE, TILE)).collect();
        save_image(&Image::hconcat(&tiles, 4), &layout.figures().join(format!("triptych-{}.png", rec.image_id)))?;
        written += 1;
    }
    Ok(written)
}

/// ROC vertices `(fpr, tpr)` from `(0,0)` to `(1,1)`, tied scores merged.
pub fn roc_points(set: &ScoredSet) -> Vec<(f64, f64)> {
    let (p, n) = (set.n_pos().max(1) as f64, set.n_neg().max(1) as f64);
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &i) in order.iter().enumerate() {
        if set.labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = order.get(k + 1).is_none_or(|&j| set.scores[j] != set.scores[i]);
        if last_of_tie {
            pts.push((fp as f64 / n, tp as f64 / p));
        }
    }
    pts
}

struct Canvas {
    img: Image,
}

impl Canvas {
    fn new() -> Self {
        let side = PLOT + 2 * MARGIN;
        let mut c = Canvas { img: Image::filled(side, side, 1.0) };
        c.line((0.0, 0.0), (1.0, 0.0), 0.0, 1);
        c.line((0.0, 0.0), (0.0, 1.0), 0.0, 1);
        c
    }

    fn to_px(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (MARGIN as f64 + x * PLOT as f64, MARGIN as f64 + (1.0 - y) * PLOT as f64)
    }

    /// Straight line in unit coordinates; `dash` > 1 leaves gaps.
    fn line(&mut self, a: (f64, f64), b: (f64, f64), shade: f32, dash: usize) {
        let (pa, pb) = (self.to_px(a), self.to_px(b));
        let steps = ((pb.0 - pa.0).abs().max((pb.1 - pa.1).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            if dash > 1 && (s / 3) % dash != 0 {
                continue;
            }
            let f = s as f64 / steps as f64;
            let (x, y) = (pa.0 + f * (pb.0 - pa.0), pa.1 + f * (pb.1 - pa.1));
            self.dot(x.round() as usize, y.round() as usize, shade);
        }
    }

    fn dot(&mut self, x: usize, y: usize, shade: f32) {
        if x < self.img.width() && y < self.img.height() {
            self.img.set(x, y, shade);
        }
    }

    fn fill(&mut self, x0: f64, x1: f64, y_top: f64, shade: f32) {
        let (a, b) = (self.to_px((x0, y_top)), self.to_px((x1, 0.0)));
        for y in a.1.round() as usize..=b.1.round() as usize {
            for x in a.0.round() as usize..=b.0.round() as usize {
                self.dot(x, y, shade);
            }
        }
    }
}

fn selected_score_file(row_type: &str, t: f64) -> String {
    format!("{}_t{:03}_test", row_type.to_lowercase().replace(" + ", "_").replace(' ', "_"), (t * 100.0).round() as u32)
}

/// Test ROC curves of the baseline (solid black) and every selected model
/// (lighter, dashed).
pub fn roc_figure(layout: &RunLayout, report: &Report) -> Result<()> {
    let mut curves = vec![("Baseline".to_string(), read_scores_csv(&layout.score_file("baseline_test"), Split::Test)?)];
    for r in report.rows.iter().filter(|r| r.role == RowRole::Selected) {
        let set = read_scores_csv(&layout.score_file(&selected_score_file(&r.row_type, r.t)), Split::Test)?;
        curves.push((format!("{} t={}", r.row_type, r.t), set));
    }
    let mut canvas = Canvas::new();
    canvas.line((0.0, 0.0), (1.0, 1.0), 0.8, 2);
    let mut csv = String::from("model,fpr,tpr\n");
    for (k, (name, set)) in curves.iter().enumerate() {
        let pts = roc_points(set);
        let shade = (k as f32 * 0.3).min(0.6);
        for w in pts.windows(2) {
            canvas.line(w[0], w[1], shade, if k == 0 { 1 } else { 1 + k });
        }
        for (x, y) in pts {
            let _ = writeln!(csv, "{name},{x},{y}");
        }
    }
    let dir = layout.figures();
    save_image(&canvas.img, &dir.join("roc_test.png"))?;
    std::fs::write(dir.join("roc_test.csv"), csv).map_err(|e| Error::io(dir.join("roc_test.csv"), e))
}

/// Test AUC of each threshold candidate as bars, one gray level per row type,
/// with the baseline AUC as a dashed horizontal line.
pub fn ablation_figure(layout: &RunLayout, report: &Report) -> Result<()> {
    let candidates: Vec<_> = report.rows.iter().filter(|r| r.role == RowRole::Candidate).collect();
    let mut types: Vec<&str> = Vec::new();
    for r in &candidates {
        if !types.contains(&r.row_type.as_str()) {
            types.push(&r.row_type);
        }
    }
    let mut canvas = Canvas::new();
    let slot = 1.0 / candidates.len() as f64;
    let mut csv = String::from("type,t,augmented_samples,auc\n");
    for (i, r) in candidates.iter().enumerate() {
        let shade = 0.2 + 0.4 * types.iter().position(|t| *t == r.row_type).unwrap_or(0) as f32 / types.len() as f32;
        canvas.fill(i as f64 * slot + 0.15 * slot, (i + 1) as f64 * slot - 0.15 * slot, r.auc.clamp(0.0, 1.0), shade);
        let _ = writeln!(csv, "{},{},{},{}", r.row_type, r.t, r.augmented_samples, r.auc);
    }
    if let Some(b) = report.baseline() {
        canvas.line((0.0, b.auc), (1.0, b.auc), 0.0, 2);
        let _ = writeln!(csv, "Baseline,0,0,{}", b.auc);
    }
    let dir = layout.figures();
    save_image(&canvas.img, &dir.join("t_ablation.png"))?;
    std::fs::write(dir.join("t_ablation.csv"), csv).map_err(|e| Error::io(dir.join("t_ablation.csv"), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_center_bright_corners_dark() {
        let img = mask_heatmap(2.0).unwrap();
        let max = img.pixels().iter().cloned().fold(f32::MIN, f32::max);
        let min = img.pixels().iter().cloned().fold(f32::MAX, f32::min);
        assert_eq!(img.get(TILE / 2, TILE / 2), max);
        for (x, y) in [(0, 0), (TILE - 1, 0), (0, TILE - 1), (TILE - 1, TILE - 1)] {
            assert_eq!(img.get(x, y), min);
        }
    }

    #[test]
    fn roc_points_run_corner_to_corner() {
        let set = ScoredSet::new(Split::Test, (0..4).map(|i| i.to_string()).collect(), vec![true, false, true, false], vec![0.9, 0.8, 0.8, 0.1]).unwrap();
        let pts = roc_points(&set);
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 0.5), (0.5, 1.0), (1.0, 1.0)]);
    }

    #[test]
    fn empty_run_dir_gives_partial_output() {
        let dir = tempfile::tempdir().unwrap();
        let notices = emit_figures(dir.path()).unwrap();
        assert!(dir.path().join("figures/mask_heatmap.png").exists());
        assert!(notices.iter().any(|n| n.contains("triptychs skipped")));
        assert!(notices.iter().any(|n| n.contains("no report")));
    }
}
