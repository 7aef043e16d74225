//! ROC AUC, percentile bootstrap intervals on shared resamples, the paired
//! AUC-difference test, operating-point selection and sensitivity/specificity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Split;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed};

/// Scores of one model on one labelled image set, aligned by index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub split: Split,
    pub image_ids: Vec<String>,
    pub labels: Vec<bool>,
    pub scores: Vec<f64>,
}

impl ScoredSet {
    pub fn new(split: Split, image_ids: Vec<String>, labels: Vec<bool>, scores: Vec<f64>) -> Result<Self> {
        if image_ids.len() != labels.len() || labels.len() != scores.len() {
            return Err(Error::Data(format!(
                "scored set lengths differ: {} ids, {} labels, {} scores",
                image_ids.len(),
                labels.len(),
                scores.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Numerical(format!("non-finite score {}", s)));
        }
        Ok(Self { split, image_ids, labels, scores })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn n_neg(&self) -> usize {
        self.len() - self.n_pos()
    }

    fn require_both_classes(&self) -> Result<()> {
        if self.n_pos() == 0 || self.n_neg() == 0 {
            return Err(Error::Data(format!(
                "need both classes, have {} positives and {} negatives",
                self.n_pos(),
                self.n_neg()
            )));
        }
        Ok(())
    }
}

/// Mann–Whitney AUC over the subset `idx` (indices may repeat).
fn auc_of(scores: &[f64], labels: &[bool], idx: &[usize]) -> Option<f64> {
    let mut order: Vec<usize> = idx.to_vec();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut rank_sum, mut n_pos) = (0.0f64, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Mid-rank of the tie group (1-based ranks i+1 ..= j+1).
        let mid = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum += mid;
                n_pos += 1;
            }
        }
        i = j + 1;
    }
    let n_neg = order.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Probability a random positive outscores a random negative, ties counting ½.
pub fn roc_auc(set: &ScoredSet) -> Result<f64> {
    set.require_both_classes()?;
    let idx: Vec<usize> = (0..set.len()).collect();
    Ok(auc_of(&set.scores, &set.labels, &idx).expect("both classes present"))
}

/// `B` index resamples shared by every model evaluated on the same set.
/// Replicate `r` draws from its own stream `derive_seed(seed, "replicate-r")`;
/// a resample missing a class is redrawn from the same stream.
#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapIndices {
    pub seed: u64,
    pub replicates: Vec<Vec<usize>>,
}

impl BootstrapIndices {
    pub fn draw(labels: &[bool], b: usize, seed: u64) -> Result<Self> {
        if b < 100 {
            return Err(Error::Config(format!("bootstrap needs at least 100 replicates, got {}", b)));
        }
        let n = labels.len();
        if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
            return Err(Error::Data("bootstrap needs both classes in the evaluated set".into()));
        }
        let replicates = (0..b)
            .map(|r| {
                let mut rng = rng_from_seed(derive_seed(seed, &format!("replicate-{r}")));
                loop {
                    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                    let pos = idx.iter().filter(|&&i| labels[i]).count();
                    if pos > 0 && pos < n {
                        break idx;
                    }
                }
            })
            .collect();
        Ok(Self { seed, replicates })
    }

    pub fn len(&self) -> usize {
        self.replicates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replicates.is_empty()
    }

    pub fn aucs(&self, set: &ScoredSet) -> Vec<f64> {
        self.replicates
            .iter()
            .map(|idx| auc_of(&set.scores, &set.labels, idx).expect("resamples hold both classes"))
            .collect()
    }
}

/// Linear-interpolated percentile, `q ∈ [0, 1]`, of an unsorted sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn ci95(values: &[f64]) -> (f64, f64) {
    (percentile(values, 0.025), percentile(values, 0.975))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.low <= v && v <= self.high
    }

    pub fn width(&self) -> f64 {
        self.high - self.low
    }
}

pub fn bootstrap_auc_ci(set: &ScoredSet, b: usize, seed: u64) -> Result<Interval> {
    set.require_both_classes()?;
    let idx = BootstrapIndices::draw(&set.labels, b, seed)?;
    Ok(bootstrap_auc_ci_with(set, &idx))
}

pub fn bootstrap_auc_ci_with(set: &ScoredSet, indices: &BootstrapIndices) -> Interval {
    let (low, high) = ci95(&indices.aucs(set));
    Interval { low, high }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedTest {
    pub diff_ci: Interval,
    /// 0 lies outside the 95% interval of replicate differences.
    pub significant: bool,
    pub diffs: Vec<f64>,
}

fn check_paired(a: &ScoredSet, b: &ScoredSet) -> Result<()> {
    if a.image_ids != b.image_ids || a.labels != b.labels {
        return Err(Error::Data("paired comparison needs identical image ids and labels".into()));
    }
    Ok(())
}

/// Replicate-wise `AUC_A − AUC_B` on one set of shared resamples.
pub fn paired_difference_test(a: &ScoredSet, b: &ScoredSet, reps: usize, seed: u64) -> Result<PairedTest> {
    check_paired(a, b)?;
    let idx = BootstrapIndices::draw(&a.labels, reps, seed)?;
    paired_difference_with(a, b, &idx)
}

pub fn paired_difference_with(a: &ScoredSet, b: &ScoredSet, indices: &BootstrapIndices) -> Result<PairedTest> {
    check_paired(a, b)?;
    let diffs: Vec<f64> = indices.aucs(a).iter().zip(indices.aucs(b)).map(|(x, y)| x - y).collect();
    let (low, high) = ci95(&diffs);
    let diff_ci = Interval { low, high };
    Ok(PairedTest { significant: !diff_ci.contains(0.0), diff_ci, diffs })
}

fn rates_at(set: &ScoredSet, threshold: f64) -> (usize, usize, usize, usize) {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&l, &s) in set.labels.iter().zip(&set.scores) {
        match (l, s >= threshold) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    (tp, fp, tn, fn_)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    /// `(1 − TPR)² + FPR²`.
    pub criterion: f64,
}

/// Threshold on the validation ROC minimizing `(1 − TPR)² + FPR²`.
/// Candidates are the distinct scores; ties go to the lower FPR, then the
/// higher threshold. Only validation sets are accepted.
pub fn operating_point(val: &ScoredSet) -> Result<OperatingPoint> {
    if val.split != Split::Val {
        return Err(Error::Data(format!(
            "operating point must be chosen on the validation split, got {}",
            val.split.as_str()
        )));
    }
    val.require_both_classes()?;
    let (p, n) = (val.n_pos() as f64, val.n_neg() as f64);
    // Sweep thresholds from high to low, updating counts incrementally.
    let mut order: Vec<usize> = (0..val.len()).collect();
    order.sort_by(|&a, &b| val.scores[b].total_cmp(&val.scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best: Option<OperatingPoint> = None;
    let mut i = 0;
    while i < order.len() {
        let thr = val.scores[order[i]];
        while i < order.len() && val.scores[order[i]] == thr {
            if val.labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / p;
        let fpr = fp as f64 / n;
        let criterion = (1.0 - tpr).powi(2) + fpr.powi(2);
        let better = match &best {
            None => true,
            Some(b) => criterion < b.criterion || (criterion == b.criterion && fpr < b.fpr),
        };
        if better {
            best = Some(OperatingPoint { threshold: thr, tpr, fpr, criterion });
        }
    }
    Ok(best.expect("non-empty set"))
}

/// `(sensitivity, specificity)` with `score ≥ threshold` predicted positive.
/// A class absent from `set` yields NaN for its rate.
pub fn sens_spec(set: &ScoredSet, threshold: f64) -> (f64, f64) {
    let (tp, fp, tn, fn_) = rates_at(set, threshold);
    let ratio = |a: usize, b: usize| if a + b == 0 { f64::NAN } else { a as f64 / (a + b) as f64 };
    (ratio(tp, fn_), ratio(tn, fp))
}
