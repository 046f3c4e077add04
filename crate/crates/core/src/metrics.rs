//! Agreement and ranking statistics: ROC AUC, quadratic weighted Cohen's
//! kappa, Fleiss kappa, fold confidence intervals, and the frame-label
//! consistency helpers (min-adjustment, majority consensus).

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qcfilter::FilterStats;

/// On-disk report format version.
pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Square contingency table; rows are truth, columns are prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument("confusion matrix needs >= 2 classes".into()));
        }
        Ok(Self { counts: vec![vec![0; num_classes]; num_classes] })
    }

    pub fn from_pairs(num_classes: usize, truth: &[u8], pred: &[u8]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::InvalidArgument("truth/prediction length mismatch".into()));
        }
        let mut cm = Self::new(num_classes)?;
        for (&t, &p) in truth.iter().zip(pred) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: u8, pred: u8) -> Result<()> {
        let m = self.num_classes();
        if truth as usize >= m || pred as usize >= m {
            return Err(Error::InvalidArgument(format!(
                "label ({truth},{pred}) outside 0..{m}"
            )));
        }
        self.counts[truth as usize][pred as usize] += 1;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let diag: u64 = (0..self.num_classes()).map(|i| self.counts[i][i]).sum();
        diag as f64 / self.total() as f64
    }
}

/// Complete item-by-rater table of ordinal ratings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingTable {
    num_categories: usize,
    rows: Vec<Vec<u8>>,
}

impl RatingTable {
    /// Every item must carry a rating from every rater (complete table).
    pub fn new(num_categories: usize, rows: Vec<Vec<u8>>) -> Result<Self> {
        if num_categories < 2 {
            return Err(Error::InvalidArgument("need >= 2 rating categories".into()));
        }
        if rows.is_empty() {
            return Err(Error::EmptyInput("rating table"));
        }
        let raters = rows[0].len();
        if raters < 2 {
            return Err(Error::InvalidArgument("need >= 2 raters".into()));
        }
        if rows.iter().any(|r| r.len() != raters) {
            return Err(Error::InvalidArgument("incomplete rating table".into()));
        }
        if rows.iter().flatten().any(|&r| r as usize >= num_categories) {
            return Err(Error::InvalidArgument("rating outside category range".into()));
        }
        Ok(Self { num_categories, rows })
    }

    pub fn num_items(&self) -> usize {
        self.rows.len()
    }

    pub fn num_raters(&self) -> usize {
        self.rows[0].len()
    }
}

/// Mann-Whitney ROC AUC with midrank tie handling: the probability that a
/// random positive outscores a random negative, ties counted half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument("scores/labels length mismatch".into()));
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput("scores"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidArgument("labels must be binary".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("ROC AUC needs both classes"));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based midrank shared by the tie group [i, j].
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let n_pos = n_pos as f64;
    Ok((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg as f64))
}

/// Cohen's kappa with quadratic weights w_ij = (i-j)^2/(M-1)^2.
///
/// Diagonal matrices give exactly 1. When expected disagreement is zero the
/// statistic is 1 if observed disagreement is also zero and undefined
/// otherwise.
pub fn cohen_kappa_quadratic(cm: &ConfusionMatrix) -> Result<f64> {
    let m = cm.num_classes();
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyInput("confusion matrix"));
    }
    let row_sums: Vec<u64> = cm.rows().iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<u64> =
        (0..m).map(|j| cm.rows().iter().map(|r| r[j]).sum()).collect();

    let denom_sq = ((m - 1) * (m - 1)) as f64;
    let weight = |i: usize, j: usize| {
        let d = i as f64 - j as f64;
        d * d / denom_sq
    };
    let mut observed = 0.0;
    let mut expected = 0.0;
    for i in 0..m {
        for j in 0..m {
            observed += weight(i, j) * cm.count(i, j) as f64;
            expected += weight(i, j) * (row_sums[i] as f64 * col_sums[j] as f64) / total as f64;
        }
    }
    if expected == 0.0 {
        return if observed == 0.0 {
            Ok(1.0)
        } else {
            Err(Error::UndefinedMetric("zero expected disagreement with nonzero observed"))
        };
    }
    Ok(1.0 - observed / expected)
}

/// Unweighted Fleiss kappa over a complete rating table.
pub fn fleiss_kappa(table: &RatingTable) -> Result<f64> {
    let n = table.num_items() as f64;
    let r = table.num_raters() as f64;
    let mut category_totals = vec![0.0f64; table.num_categories];
    let mut agreement_sum = 0.0;
    for row in &table.rows {
        let mut counts = vec![0.0f64; table.num_categories];
        for &rating in row {
            counts[rating as usize] += 1.0;
        }
        for (tot, c) in category_totals.iter_mut().zip(&counts) {
            *tot += c;
        }
        let sq: f64 = counts.iter().map(|c| c * c).sum();
        agreement_sum += (sq - r) / (r * (r - 1.0));
    }
    let p_bar = agreement_sum / n;
    let p_e: f64 = category_totals.iter().map(|t| (t / (n * r)).powi(2)).sum();
    if p_e == 1.0 {
        // Every rating fell in one category; agreement is total.
        return Ok(1.0);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Confidence interval bounds for a set of per-fold metric values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiBounds {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

fn z_for_level(level: f64) -> Result<f64> {
    for (l, z) in [(0.90, 1.645), (0.95, 1.96), (0.99, 2.576)] {
        if (level - l).abs() < 1e-9 {
            return Ok(z);
        }
    }
    Err(Error::InvalidArgument(format!("unsupported confidence level {level}")))
}

/// Normal-approximation interval over fold values: mean +/- z * sd / sqrt(n)
/// with the sample standard deviation. Supported levels: 0.90, 0.95, 0.99.
pub fn fold_ci(values: &[f64], level: f64) -> Result<CiBounds> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument("confidence interval needs >= 2 values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("values must be finite".into()));
    }
    let z = z_for_level(level)?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let half = z * var.sqrt() / n.sqrt();
    Ok(CiBounds { mean, lower: mean - half, upper: mean + half })
}

/// Reconciles a frame label with its video label by taking the minimum: a
/// frame can never be graded above its video.
pub fn adjust_frame_label(frame_label: u8, video_label: u8) -> u8 {
    frame_label.min(video_label)
}

/// Modal rating; ties resolve toward the lower (less severe) class.
pub fn majority_consensus(ratings: &[u8]) -> Result<u8> {
    if ratings.is_empty() {
        return Err(Error::EmptyInput("ratings"));
    }
    let mut counts = BTreeMap::new();
    for &r in ratings {
        *counts.entry(r).or_insert(0usize) += 1;
    }
    // BTreeMap iterates lowest label first, so > keeps the lower on ties.
    let mut best = (ratings[0], 0usize);
    for (&label, &count) in &counts {
        if count > best.1 {
            best = (label, count);
        }
    }
    Ok(best.0)
}

/// Per-fold metric values, keyed by metric name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub metrics: BTreeMap<String, f64>,
}

/// Versioned evaluation report covering per-fold and pooled statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub mode: String,
    pub seed: u64,
    /// Verbatim run configuration, for provenance.
    pub config_echo: String,
    pub folds: Vec<FoldReport>,
    /// Confidence intervals over the per-fold values, keyed by metric name.
    pub fold_cis: BTreeMap<String, CiBounds>,
    /// Metrics computed over all out-of-fold predictions pooled together.
    pub pooled: BTreeMap<String, f64>,
    /// Pooled confusion matrices, keyed by method name.
    pub confusions: BTreeMap<String, ConfusionMatrix>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub filter_stats: Option<FilterStats>,
}

impl MetricsReport {
    pub fn new(mode: &str, seed: u64, config_echo: String) -> Self {
        Self {
            version: REPORT_FORMAT_VERSION,
            mode: mode.to_string(),
            seed,
            config_echo,
            folds: Vec::new(),
            fold_cis: BTreeMap::new(),
            pooled: BTreeMap::new(),
            confusions: BTreeMap::new(),
            filter_stats: None,
        }
    }
}

/// Writes a report as pretty JSON; floats round-trip exactly.
pub fn save_report(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", serde_json::to_string_pretty(report).expect("report serializes"))?;
    out.flush()?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path)?;
    let report: MetricsReport =
        serde_json::from_str(&text).map_err(|e| Error::ModelFormat(e.to_string()))?;
    if report.version != REPORT_FORMAT_VERSION {
        return Err(Error::ModelFormat(format!("unsupported report version {}", report.version)));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn auc_matches_pairwise_counting() {
        // Pairs: (0.1,0.35) ok, (0.1,0.8) ok, (0.4,0.35) wrong, (0.4,0.8) ok.
        let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert_eq!(auc, 0.75);
    }

    #[test]
    fn auc_extremes_and_ties() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5, 0.5, 0.5, 0.5], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(roc_auc(&[0.1], &[0, 1]).is_err());
    }

    #[test]
    fn auc_is_rank_invariant() {
        let scores = [0.1, 0.4, 0.35, 0.8, 0.2, 0.55];
        let labels = [0, 1, 0, 1, 0, 1];
        let base = roc_auc(&scores, &labels).unwrap();
        let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
        let scaled: Vec<f64> = scores.iter().map(|s| 10.0 * s + 3.0).collect();
        assert_eq!(roc_auc(&cubed, &labels).unwrap(), base);
        assert_eq!(roc_auc(&scaled, &labels).unwrap(), base);
    }

    #[test]
    fn kappa_perfect_agreement() {
        let cm = ConfusionMatrix::from_pairs(4, &[0, 1, 2, 3, 2], &[0, 1, 2, 3, 2]).unwrap();
        assert_eq!(cohen_kappa_quadratic(&cm).unwrap(), 1.0);
    }

    #[test]
    fn kappa_total_disagreement_is_minus_one() {
        // By hand: sum(wO) = 4 (four pairs at distance 3, weight 1), marginals
        // give sum(wE) = 2, so kappa = 1 - 4/2 = -1.
        let cm = ConfusionMatrix::from_pairs(4, &[0, 0, 3, 3], &[3, 3, 0, 0]).unwrap();
        assert_eq!(cohen_kappa_quadratic(&cm).unwrap(), -1.0);
    }

    #[test]
    fn kappa_partial_agreement_hand_value() {
        // sum(wO) = 3/9 = 1/3; sum(wE) = (6/9 + 6/9 + 2*14/9)/4 = 10/9;
        // kappa = 1 - (1/3)/(10/9) = 0.7.
        let cm = ConfusionMatrix::from_pairs(4, &[0, 1, 2, 3], &[1, 2, 3, 3]).unwrap();
        let k = cohen_kappa_quadratic(&cm).unwrap();
        assert!((k - 0.7).abs() < 1e-12, "kappa {k}");
    }

    #[test]
    fn kappa_reversal_invariance() {
        let truth = [0u8, 1, 2, 3, 3, 2, 0, 1, 1];
        let pred = [1u8, 2, 3, 3, 2, 2, 0, 0, 1];
        let rev_t: Vec<u8> = truth.iter().map(|t| 3 - t).collect();
        let rev_p: Vec<u8> = pred.iter().map(|p| 3 - p).collect();
        let a = cohen_kappa_quadratic(&ConfusionMatrix::from_pairs(4, &truth, &pred).unwrap())
            .unwrap();
        let b = cohen_kappa_quadratic(&ConfusionMatrix::from_pairs(4, &rev_t, &rev_p).unwrap())
            .unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn kappa_degenerate_cases() {
        let cm = ConfusionMatrix::from_pairs(4, &[2, 2, 2], &[2, 2, 2]).unwrap();
        assert_eq!(cohen_kappa_quadratic(&cm).unwrap(), 1.0);
        assert!(cohen_kappa_quadratic(&ConfusionMatrix::new(4).unwrap()).is_err());
    }

    #[test]
    fn fleiss_unanimous_and_opposed() {
        let unanimous = RatingTable::new(4, vec![vec![2, 2, 2], vec![0, 0, 0]]).unwrap();
        assert_eq!(fleiss_kappa(&unanimous).unwrap(), 1.0);

        let constant = RatingTable::new(4, vec![vec![1, 1], vec![1, 1]]).unwrap();
        assert_eq!(fleiss_kappa(&constant).unwrap(), 1.0);

        // By hand: P_bar = 0, P_e = 0.5, kappa = -1.
        let opposed = RatingTable::new(2, vec![vec![0, 1], vec![1, 0]]).unwrap();
        assert_eq!(fleiss_kappa(&opposed).unwrap(), -1.0);
    }

    #[test]
    fn fleiss_permutation_invariance() {
        let rows = vec![vec![0, 1, 1], vec![2, 2, 2], vec![3, 1, 0], vec![2, 2, 3]];
        let mut reversed = rows.clone();
        reversed.reverse();
        let a = fleiss_kappa(&RatingTable::new(4, rows).unwrap()).unwrap();
        let b = fleiss_kappa(&RatingTable::new(4, reversed).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fleiss_independent_ratings_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let rows: Vec<Vec<u8>> =
            (0..10_000).map(|_| (0..4).map(|_| rng.random_range(0..4u8)).collect()).collect();
        let k = fleiss_kappa(&RatingTable::new(4, rows).unwrap()).unwrap();
        assert!(k.abs() < 0.05, "kappa {k}");
    }

    #[test]
    fn rating_table_validation() {
        assert!(RatingTable::new(4, vec![vec![0, 1], vec![1]]).is_err());
        assert!(RatingTable::new(4, vec![vec![0], vec![1]]).is_err());
        assert!(RatingTable::new(2, vec![vec![0, 2]]).is_err());
        assert!(RatingTable::new(4, vec![]).is_err());
    }

    #[test]
    fn ci_matches_hand_computation() {
        let ci = fold_ci(&[0.64, 0.66, 0.67, 0.70, 0.72], 0.95).unwrap();
        assert!((ci.mean - 0.678).abs() < 1e-12);
        // Half width 1.96 * sd/sqrt(5) with sd = sqrt(0.00408/4).
        let half = ci.upper - ci.mean;
        assert!((half - 0.027994499).abs() < 1e-6, "half width {half}");
        assert!(ci.lower <= ci.mean && ci.mean <= ci.upper);
    }

    #[test]
    fn ci_edge_cases() {
        let ci = fold_ci(&[0.5, 0.5, 0.5], 0.95).unwrap();
        assert_eq!((ci.mean, ci.lower, ci.upper), (0.5, 0.5, 0.5));
        let ci = fold_ci(&[0.4, 0.4, 0.4], 0.95).unwrap();
        assert!((ci.upper - ci.lower).abs() < 1e-12);

        let ci = fold_ci(&[0.0, 1.0], 0.95).unwrap();
        assert_eq!(ci.mean, 0.5);
        assert!((ci.upper - ci.mean - (ci.mean - ci.lower)).abs() < 1e-15);

        assert!(fold_ci(&[0.5], 0.95).is_err());
        assert!(fold_ci(&[0.5, 0.6], 0.80).is_err());
    }

    #[test]
    fn ci_width_ordering() {
        let values = [0.3, 0.5, 0.6, 0.8];
        let w90 = fold_ci(&values, 0.90).unwrap();
        let w95 = fold_ci(&values, 0.95).unwrap();
        let w99 = fold_ci(&values, 0.99).unwrap();
        assert!(w90.upper - w90.lower < w95.upper - w95.lower);
        assert!(w95.upper - w95.lower < w99.upper - w99.lower);
    }

    #[test]
    fn ci_narrows_with_more_folds() {
        let few = [0.6, 0.62, 0.64, 0.66, 0.68];
        let many: Vec<f64> = few.iter().cycle().take(20).copied().collect();
        let a = fold_ci(&few, 0.95).unwrap();
        let b = fold_ci(&many, 0.95).unwrap();
        assert!(b.upper - b.lower < a.upper - a.lower);
    }

    #[test]
    fn frame_label_adjustment() {
        assert_eq!(adjust_frame_label(3, 2), 2);
        assert_eq!(adjust_frame_label(1, 3), 1);
        assert_eq!(adjust_frame_label(0, 2), 0);
        for f in 0..=3u8 {
            for v in 0..=3u8 {
                let adj = adjust_frame_label(f, v);
                assert!(adj <= f && adj <= v);
                assert_eq!(adjust_frame_label(adj, v), adj);
            }
        }
    }

    #[test]
    fn consensus_rules() {
        assert_eq!(majority_consensus(&[2, 2, 3, 1]).unwrap(), 2);
        assert_eq!(majority_consensus(&[1, 1, 2, 2]).unwrap(), 1);
        assert_eq!(majority_consensus(&[3]).unwrap(), 3);
        assert_eq!(majority_consensus(&[0, 3, 3, 0]).unwrap(), 0);
        assert!(majority_consensus(&[]).is_err());
    }

    #[test]
    fn report_round_trip() {
        let mut report = MetricsReport::new("ensemble", 9, "config text".into());
        report.folds.push(FoldReport {
            fold: 0,
            metrics: BTreeMap::from([("auc_gt0".to_string(), 0.97)]),
        });
        report.fold_cis.insert(
            "video_kappa_sum".into(),
            CiBounds { mean: 0.8, lower: 0.75, upper: 0.85 },
        );
        report.pooled.insert("video_kappa_sum".into(), 0.81);
        report
            .confusions
            .insert("sum".into(), ConfusionMatrix::from_pairs(4, &[0, 1], &[0, 1]).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        save_report(&report, &path).unwrap();
        assert_eq!(load_report(&path).unwrap(), report);
    }

    #[test]
    fn confusion_matrix_basics() {
        let mut cm = ConfusionMatrix::new(4).unwrap();
        cm.record(0, 3).unwrap();
        cm.record(3, 3).unwrap();
        assert_eq!(cm.total(), 2);
        assert_eq!(cm.count(0, 3), 1);
        assert_eq!(cm.accuracy(), 0.5);
        assert!(cm.record(4, 0).is_err());
        assert!(ConfusionMatrix::from_pairs(4, &[0], &[0, 1]).is_err());
    }
}
