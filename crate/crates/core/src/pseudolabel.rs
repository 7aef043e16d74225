//! Hard-positive mining over generated images and assembly of the augmented
//! training set.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::dataio::{DatasetManifest, DatasetRecord, Label, Provenance, Split};
use crate::error::{Error, Result};

/// Threshold grid used when none is configured.
pub const DEFAULT_T_GRID: [f64; 4] = [0.70, 0.85, 0.90, 0.95];

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredRecord {
    pub record: DatasetRecord,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiningResult {
    /// Records scoring at least `threshold`, in input order.
    pub kept: Vec<ScoredRecord>,
    pub rejected: Vec<ScoredRecord>,
    pub threshold: f64,
    pub scorer_id: String,
}

impl MiningResult {
    pub fn kept_records(&self) -> Vec<DatasetRecord> {
        self.kept.iter().map(|s| s.record.clone()).collect()
    }

    /// `image_id,score,kept` rows in input order.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(&ScoredRecord, bool)> =
            self.kept.iter().map(|s| (s, true)).chain(self.rejected.iter().map(|s| (s, false))).collect();
        rows.sort_by_key(|(s, _)| s.record.image_id.as_str());
        let mut out = String::from("image_id,score,kept\n");
        for (s, kept) in rows {
            let _ = writeln!(out, "{},{},{}", s.record.image_id, s.score, kept);
        }
        out
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("threshold t must lie in [0, 1], got {}", t)));
    }
    Ok(())
}

/// Splits scored records at `t`; a score equal to `t` is kept.
pub fn partition_by_score(records: &[DatasetRecord], scores: &[f64], t: f64, scorer_id: &str) -> Result<MiningResult> {
    check_threshold(t)?;
    if records.len() != scores.len() {
        return Err(Error::Data(format!("{} records but {} scores", records.len(), scores.len())));
    }
    let (kept, rejected) = records
        .iter()
        .zip(scores)
        .map(|(r, &score)| ScoredRecord { record: r.clone(), score })
        .partition(|s| s.score >= t);
    Ok(MiningResult { kept, rejected, threshold: t, scorer_id: scorer_id.to_string() })
}

/// Scores every generated image with `scorer` and keeps those at or above `t`.
pub fn mine_hard_positives(
    generated: &DatasetManifest,
    manifest_dir: &Path,
    scorer: &Classifier,
    scorer_id: &str,
    t: f64,
) -> Result<MiningResult> {
    check_threshold(t)?;
    if generated.records.is_empty() {
        log::warn!("no generated images to mine");
        return partition_by_score(&[], &[], t, scorer_id);
    }
    let refs: Vec<&DatasetRecord> = generated.records.iter().collect();
    let scores = scorer.score_records(generated, manifest_dir, &refs)?;
    partition_by_score(&generated.records, &scores, t, scorer_id)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTrial {
    pub t: f64,
    pub val_auc: f64,
}

/// Highest validation AUC; ties go to the larger threshold.
pub fn pick_threshold(trials: &[ThresholdTrial]) -> Result<f64> {
    trials
        .iter()
        .copied()
        .reduce(|best, c| if c.val_auc > best.val_auc || (c.val_auc == best.val_auc && c.t > best.t) { c } else { best })
        .map(|b| b.t)
        .ok_or_else(|| Error::Config("threshold grid is empty".into()))
}

/// Evaluates every candidate with `evaluate` (validation AUC of a classifier
/// trained on that candidate's augmented set) and picks the best.
pub fn select_threshold(
    candidates: &[f64],
    mut evaluate: impl FnMut(f64) -> Result<f64>,
) -> Result<(f64, Vec<ThresholdTrial>)> {
    if candidates.is_empty() {
        return Err(Error::Config("threshold grid is empty".into()));
    }
    let mut trials = Vec::with_capacity(candidates.len());
    for &t in candidates {
        check_threshold(t)?;
        trials.push(ThresholdTrial { t, val_auc: evaluate(t)? });
    }
    Ok((pick_threshold(&trials)?, trials))
}

/// Base manifest plus the kept generated records as lesion training images.
/// Paths of `kept` must already be relative to `base.root`.
pub fn build_augmented_manifest(base: &DatasetManifest, kept: &[DatasetRecord]) -> Result<DatasetManifest> {
    let mut out = base.clone();
    for r in kept {
        if r.provenance != Provenance::Generated {
            return Err(Error::Data(format!("{} is not a generated record", r.image_id)));
        }
        if r.split != Split::Train {
            return Err(Error::Data(format!(
                "generated record {} targets split {}; augmentations may only enter train",
                r.image_id,
                r.split.as_str()
            )));
        }
        let mut r = r.clone();
        r.label = Label::Lesion;
        out.records.push(r);
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::BoundingBox;
    use proptest::prelude::*;

    fn generated(i: usize) -> DatasetRecord {
        DatasetRecord {
            image_id: format!("gen-{i:05}"),
            path: format!("generated/gen-{i:05}.png").into(),
            label: Label::Lesion,
            boxes: vec![BoundingBox::new(2, 2, 6, 6)],
            split: Split::Train,
            body_part: "humerus".into(),
            provenance: Provenance::Generated,
            width: 20,
            height: 40,
            origin: None,
        }
    }

    fn empirical(i: usize, split: Split, label: Label) -> DatasetRecord {
        DatasetRecord {
            image_id: format!("{}-{i}", split.as_str()),
            provenance: Provenance::Empirical,
            split,
            label,
            boxes: if label == Label::Lesion { vec![BoundingBox::new(1, 1, 4, 4)] } else { vec![] },
            ..generated(i)
        }
    }

    #[test]
    fn threshold_applies_with_inclusive_boundary() {
        let recs = vec![generated(0), generated(1), generated(2)];
        let r = partition_by_score(&recs, &[0.95, 0.85, 0.9], 0.9, "baseline").unwrap();
        let kept: Vec<f64> = r.kept.iter().map(|s| s.score).collect();
        assert_eq!(kept, vec![0.95, 0.9]);
        assert_eq!(r.rejected.len(), 1);
        let all = partition_by_score(&recs, &[0.0, 0.3, 1.0], 0.0, "baseline").unwrap();
        assert_eq!(all.kept.len(), 3);
        assert!(partition_by_score(&recs, &[0.1, 0.2], 0.5, "x").is_err());
        assert!(partition_by_score(&recs, &[0.1, 0.2, 0.3], 1.5, "x").is_err());
    }

    #[test]
    fn threshold_selection_rules() {
        assert_eq!(select_threshold(&[0.8], |_| Ok(0.6)).unwrap().0, 0.8);
        let (t, trials) = select_threshold(&[0.7, 0.9, 0.85], |t| Ok(if t > 0.8 { 0.75 } else { 0.7 })).unwrap();
        assert_eq!(t, 0.9);
        assert_eq!(trials.len(), 3);
        assert!(select_threshold(&[], |_| Ok(0.5)).is_err());
    }

    #[test]
    fn augmented_manifest_only_touches_train() {
        let base = DatasetManifest::new(
            1,
            ".",
            vec![
                empirical(0, Split::Train, Label::Lesion),
                empirical(1, Split::Train, Label::NonLesion),
                empirical(2, Split::Val, Label::Lesion),
                empirical(3, Split::Test, Label::NonLesion),
            ],
        );
        assert_eq!(build_augmented_manifest(&base, &[]).unwrap(), base);
        let kept: Vec<DatasetRecord> = (0..5).map(generated).collect();
        let aug = build_augmented_manifest(&base, &kept).unwrap();
        let pos = aug.split(Split::Train).filter(|r| r.label == Label::Lesion).count();
        assert_eq!(pos, 1 + 5);
        for s in [Split::Val, Split::Test] {
            assert_eq!(aug.subset(s), base.subset(s));
        }
        let mut bad = generated(9);
        bad.split = Split::Val;
        assert!(build_augmented_manifest(&base, &[bad]).is_err());
        assert!(build_augmented_manifest(&base, &[empirical(7, Split::Train, Label::Lesion)]).is_err());
    }

    proptest! {
        #[test]
        fn partition_and_monotonicity(scores in proptest::collection::vec(0.0f64..=1.0, 0..40),
                                      t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let recs: Vec<DatasetRecord> = (0..scores.len()).map(generated).collect();
            let a = partition_by_score(&recs, &scores, lo, "s").unwrap();
            let b = partition_by_score(&recs, &scores, hi, "s").unwrap();
            prop_assert_eq!(a.kept.len() + a.rejected.len(), recs.len());
            prop_assert!(a.kept.iter().all(|s| s.score >= lo));
            prop_assert!(a.rejected.iter().all(|s| s.score < lo));
            let ids_a: std::collections::HashSet<_> = a.kept.iter().map(|s| s.record.image_id.clone()).collect();
            let rej_a: std::collections::HashSet<_> = a.rejected.iter().map(|s| s.record.image_id.clone()).collect();
            prop_assert!(ids_a.is_disjoint(&rej_a));
            prop_assert!(b.kept.iter().all(|s| ids_a.contains(&s.record.image_id)));
            let counts: Vec<usize> = DEFAULT_T_GRID.iter().map(|&t| partition_by_score(&recs, &scores, t, "s").unwrap().kept.len()).collect();
            prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn pick_matches_table_scan(aucs in proptest::collection::vec(0u8..5, 1..6)) {
            let trials: Vec<ThresholdTrial> = aucs.iter().enumerate()
                .map(|(i, &a)| ThresholdTrial { t: 0.5 + 0.1 * i as f64, val_auc: a as f64 / 4.0 }).collect();
            let best = trials.iter().map(|c| c.val_auc).fold(f64::MIN, f64::max);
            let expected = trials.iter().filter(|c| c.val_auc == best).map(|c| c.t).fold(f64::MIN, f64::max);
            prop_assert_eq!(pick_threshold(&trials).unwrap(), expected);
        }
    }
}
