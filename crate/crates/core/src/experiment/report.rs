//! Evaluation report: one row per trained classifier, with AUC intervals and significance against the baseline.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{read_json, write_json};
use crate::error::{Error, Result};
use crate::metrics::{bootstrap_auc_ci_with, operating_point, paired_difference_with, roc_auc, sens_spec, BootstrapIndices, ScoredSet};

pub const REPORT_FORMAT: &str = "lesionforge-report";

/// Whether a row is the reference model, one grid candidate, or the candidate
/// picked on validation AUC.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowRole {
    Baseline,
    Candidate,
    Selected,
}

impl RowRole {
    pub fn as_str(self) -> &'static str {
        match self {
            RowRole::Baseline => "baseline",
            RowRole::Candidate => "candidate",
            RowRole::Selected => "selected",
        }
    }
}

/// Content hashes tying a row to the artifacts that produced it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RowProvenance {
    pub classifier_sha256: String,
    pub train_manifest_sha256: String,
    pub translator_sha256: Option<String>,
    pub scorer_id: Option<String>,
    pub scorer_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    #[serde(rename = "type")]
    pub row_type: String,
    pub role: RowRole,
    pub t: f64,
    pub augmented_samples: usize,
    pub val_auc: f64,
    pub auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Paired bootstrap interval of `AUC(row) − AUC(baseline)`.
    pub diff_ci_low: f64,
    pub diff_ci_high: f64,
    pub significant_vs_baseline: bool,
    pub op_threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub provenance: RowProvenance,
}

/// A model to be reported: its scores on val and test plus bookkeeping.
#[derive(Clone, Debug)]
pub struct RowInput {
    pub row_type: String,
    pub role: RowRole,
    pub t: f64,
    pub augmented_samples: usize,
    pub val: ScoredSet,
    pub test: ScoredSet,
    pub provenance: RowProvenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format: String,
    pub mode: String,
    pub seed: u64,
    pub body_part: String,
    pub source_body_part: Option<String>,
    pub config_sha256: String,
    pub dataset_manifest_sha256: String,
    pub bootstrap_b: usize,
    pub bootstrap_seed: u64,
    pub ci_method: String,
    pub test_positives: usize,
    pub test_negatives: usize,
    pub notes: Vec<String>,
    pub rows: Vec<ReportRow>,
}

/// Evaluates every row on one shared set of bootstrap resamples of the test
/// set. The first input must be the baseline.
pub fn evaluate_rows(inputs: &[RowInput], b: usize, seed: u64) -> Result<Vec<ReportRow>> {
    let baseline = inputs
        .first()
        .filter(|r| r.role == RowRole::Baseline)
        .ok_or_else(|| Error::Data("report rows must start with the baseline".into()))?;
    let indices = BootstrapIndices::draw(&baseline.test.labels, b, seed)?;
    inputs
        .iter()
        .map(|r| {
            let auc = roc_auc(&r.test)?;
            let ci = bootstrap_auc_ci_with(&r.test, &indices);
            let diff = paired_difference_with(&r.test, &baseline.test, &indices)?;
            let op = operating_point(&r.val)?;
            let (sensitivity, specificity) = sens_spec(&r.test, op.threshold);
            Ok(ReportRow {
                row_type: r.row_type.clone(),
                role: r.role,
                t: r.t,
                augmented_samples: r.augmented_samples,
                val_auc: roc_auc(&r.val)?,
                auc,
                ci_low: ci.low,
                ci_high: ci.high,
                diff_ci_low: diff.diff_ci.low,
                diff_ci_high: diff.diff_ci.high,
                significant_vs_baseline: r.role != RowRole::Baseline && diff.significant,
                op_threshold: op.threshold,
                sensitivity,
                specificity,
                provenance: r.provenance.clone(),
            })
        })
        .collect()
}

impl Report {
    pub fn baseline(&self) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.role == RowRole::Baseline)
    }

    pub fn selected(&self, row_type: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.role == RowRole::Selected && r.row_type == row_type)
    }

    pub fn candidates<'a>(&'a self, row_type: &'a str) -> impl Iterator<Item = &'a ReportRow> {
        self.rows.iter().filter(move |r| r.role == RowRole::Candidate && r.row_type == row_type)
    }

    /// Table rows `Type,t,Augmented Samples,AUC (CI),Sens,Spec,OP` with a
    /// trailing significance marker and the row role.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("Type,t,Augmented Samples,AUC (CI),Sens,Spec,OP,Significant,Role\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},\"{:.3} ({:.3}-{:.3})\",{:.3},{:.3},{:.3},{},{}",
                r.row_type,
                fmt_t(r.t),
                r.augmented_samples,
                r.auc,
                r.ci_low,
                r.ci_high,
                r.sensitivity,
                r.specificity,
                r.op_threshold,
                if r.significant_vs_baseline { "*" } else { "" },
                r.role.as_str()
            );
        }
        out
    }

    /// Plain-text rendering for terminals and the markdown summary.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# Results: {} ({}, seed {})\n", self.body_part, self.mode, self.seed);
        let _ = writeln!(out, "| Type | t | Augmented Samples | AUC (CI) | Sens | Spec | OP | Role |");
        let _ = writeln!(out, "|---|---|---|---|---|---|---|---|");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {:.3}{} ({:.3}-{:.3}) | {:.3} | {:.3} | {:.3} | {} |",
                r.row_type,
                fmt_t(r.t),
                r.augmented_samples,
                r.auc,
                if r.significant_vs_baseline { "*" } else { "" },
                r.ci_low,
                r.ci_high,
                r.sensitivity,
                r.specificity,
                r.op_threshold,
                r.role.as_str()
            );
        }
        out.push('\n');
        for n in &self.notes {
            let _ = writeln!(out, "- {n}");
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("report.json"), self)?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let md = dir.join("report.md");
        std::fs::write(&md, self.to_markdown()).map_err(|e| Error::io(&md, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join("report.json"))
    }
}

fn fmt_t(t: f64) -> String {
    if t == 0.0 {
        "0".into()
    } else {
        format!("{t:.2}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Split;

    fn set(split: Split, scores: &[f64]) -> ScoredSet {
        let n = scores.len();
        ScoredSet::new(
            split,
            (0..n).map(|i| format!("img-{i}")).collect(),
            (0..n).map(|i| i % 2 == 0).collect(),
            scores.to_vec(),
        )
        .unwrap()
    }

    fn input(role: RowRole, t: f64, scores: &[f64]) -> RowInput {
        RowInput {
            row_type: if role == RowRole::Baseline { "Baseline".into() } else { "Augmented".into() },
            role,
            t,
            augmented_samples: 0,
            val: set(Split::Val, scores),
            test: set(Split::Test, scores),
            provenance: RowProvenance::default(),
        }
    }

    #[test]
    fn baseline_row_compares_against_itself() {
        let s = [0.9, 0.1, 0.8, 0.3, 0.6, 0.4, 0.7, 0.5];
        let rows = evaluate_rows(&[input(RowRole::Baseline, 0.0, &s)], 200, 1).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].diff_ci_low, rows[0].diff_ci_high), (0.0, 0.0));
        assert!(!rows[0].significant_vs_baseline);
        assert!(rows[0].ci_low <= rows[0].ci_high);
    }

    #[test]
    fn rows_must_start_with_baseline() {
        let s = [0.9, 0.1, 0.8, 0.3];
        assert!(evaluate_rows(&[input(RowRole::Candidate, 0.7, &s)], 200, 1).is_err());
    }

    #[test]
    fn csv_has_table_columns() {
        let s = [0.9, 0.1, 0.8, 0.3, 0.6, 0.4];
        let rows = evaluate_rows(&[input(RowRole::Baseline, 0.0, &s), input(RowRole::Selected, 0.9, &s)], 200, 3).unwrap();
        let report = Report {
            format: REPORT_FORMAT.into(),
            mode: "augmented".into(),
            seed: 3,
            body_part: "humerus".into(),
            source_body_part: None,
            config_sha256: String::new(),
            dataset_manifest_sha256: String::new(),
            bootstrap_b: 200,
            bootstrap_seed: 3,
            ci_method: "percentile".into(),
            test_positives: 3,
            test_negatives: 3,
            notes: vec![],
            rows,
        };
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "Type,t,Augmented Samples,AUC (CI),Sens,Spec,OP,Significant,Role");
        assert!(lines.next().unwrap().starts_with("Baseline,0,0,"));
        assert!(lines.next().unwrap().starts_with("Augmented,0.90,0,"));
        assert!(report.selected("Augmented").is_some());
    }
}
