//! The ordinal layer on top of binary MIL: the ranked three-member ensemble,
//! the Convert/Threshold/Sum aggregation rules, ordinal binning of continuous
//! scores, video-level lifting, and exhaustive threshold grid searches.

use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::dataset::{relabel_binary, VideoBag};
use crate::error::{Error, Result};
use crate::metrics::{cohen_kappa_quadratic, ConfusionMatrix};
use crate::mil::{score_bag, train_binary_mil, TrainConfig, TrainOutcome};
use crate::scorer::{clip_score, HeadKind, ScorerModel};

/// The three ranked binary scorers "grade > m" for m in {0,1,2}, with the
/// top-K values each was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    members: [ScorerModel; 3],
    ks: [usize; 3],
}

impl EnsembleModel {
    pub fn new(members: [ScorerModel; 3], ks: [usize; 3]) -> Result<Self> {
        let dim = members[0].input_dim();
        for m in &members {
            if m.head() != HeadKind::Sigmoid {
                return Err(Error::InvalidArgument("ensemble members need sigmoid heads".into()));
            }
            if m.input_dim() != dim {
                return Err(Error::DimMismatch { expected: dim, actual: m.input_dim() });
            }
        }
        if ks.iter().any(|&k| k == 0) {
            return Err(Error::InvalidArgument("ensemble K values must be >= 1".into()));
        }
        Ok(Self { members, ks })
    }

    /// Member m scores the task "grade > m".
    pub fn member(&self, m: usize) -> &ScorerModel {
        &self.members[m]
    }

    pub fn ks(&self) -> [usize; 3] {
        self.ks
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }
}

/// One frame's ensemble probabilities (p_gt0, p_gt1, p_gt2).
///
/// Monotonicity p_gt0 >= p_gt1 >= p_gt2 is NOT required: independently
/// trained members can disagree, and the aggregation rules must cope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTriple")]
pub struct FrameTriple {
    p_gt0: f64,
    p_gt1: f64,
    p_gt2: f64,
}

#[derive(Deserialize)]
struct RawTriple {
    p_gt0: f64,
    p_gt1: f64,
    p_gt2: f64,
}

impl TryFrom<RawTriple> for FrameTriple {
    type Error = Error;

    fn try_from(raw: RawTriple) -> Result<Self> {
        FrameTriple::new(raw.p_gt0, raw.p_gt1, raw.p_gt2)
    }
}

impl FrameTriple {
    pub fn new(p_gt0: f64, p_gt1: f64, p_gt2: f64) -> Result<Self> {
        for p in [p_gt0, p_gt1, p_gt2] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("probability {p} outside [0,1]")));
            }
        }
        Ok(Self { p_gt0, p_gt1, p_gt2 })
    }

    pub fn p(&self, m: usize) -> f64 {
        [self.p_gt0, self.p_gt1, self.p_gt2][m]
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.p_gt0, self.p_gt1, self.p_gt2]
    }
}

/// Per-classifier decision thresholds for the Threshold aggregation.
/// No ordering is required between them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBinaryThresholds")]
pub struct BinaryThresholds {
    t1: f64,
    t2: f64,
    t3: f64,
}

#[derive(Deserialize)]
struct RawBinaryThresholds {
    t1: f64,
    t2: f64,
    t3: f64,
}

impl TryFrom<RawBinaryThresholds> for BinaryThresholds {
    type Error = Error;

    fn try_from(raw: RawBinaryThresholds) -> Result<Self> {
        BinaryThresholds::new(raw.t1, raw.t2, raw.t3)
    }
}

impl BinaryThresholds {
    pub fn new(t1: f64, t2: f64, t3: f64) -> Result<Self> {
        for t in [t1, t2, t3] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidArgument(format!("threshold {t} outside [0,1]")));
            }
        }
        Ok(Self { t1, t2, t3 })
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.t1, self.t2, self.t3]
    }
}

/// Ordered bin edges 0 < t0 < t1 < t2 < 3 for ordinal binning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawOrdinalThresholds")]
pub struct OrdinalThresholds {
    t0: f64,
    t1: f64,
    t2: f64,
}

#[derive(Deserialize)]
struct RawOrdinalThresholds {
    t0: f64,
    t1: f64,
    t2: f64,
}

impl TryFrom<RawOrdinalThresholds> for OrdinalThresholds {
    type Error = Error;

    fn try_from(raw: RawOrdinalThresholds) -> Result<Self> {
        OrdinalThresholds::new(raw.t0, raw.t1, raw.t2)
    }
}

impl OrdinalThresholds {
    pub fn new(t0: f64, t1: f64, t2: f64) -> Result<Self> {
        if !(0.0 < t0 && t0 < t1 && t1 < t2 && t2 < 3.0) {
            return Err(Error::InvalidArgument(format!(
                "ordinal thresholds must satisfy 0 < {t0} < {t1} < {t2} < 3"
            )));
        }
        Ok(Self { t0, t1, t2 })
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.t0, self.t1, self.t2]
    }
}

/// Training diagnostics of the three ensemble members.
#[derive(Debug, Clone)]
pub struct EnsembleTrainOutcome {
    pub ensemble: EnsembleModel,
    pub member_outcomes: [TrainOutcome; 3],
}

/// Trains the ranked ensemble: member m learns "grade > m" on bags relabeled
/// accordingly. Members are independent; with the `parallel` feature they
/// train concurrently, with identical results either way.
pub fn train_ensemble(bags: &[&VideoBag], configs: &[TrainConfig; 3]) -> Result<EnsembleTrainOutcome> {
    let train_member = |m: usize| -> Result<TrainOutcome> {
        let labeled = relabel_binary(bags, m as u8)?;
        train_binary_mil(&labeled, &configs[m])
    };
    #[cfg(feature = "parallel")]
    let outcomes: Vec<Result<TrainOutcome>> = (0..3).into_par_iter().map(train_member).collect();
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<Result<TrainOutcome>> = (0..3).map(train_member).collect();

    let mut iter = outcomes.into_iter();
    let o0 = iter.next().unwrap()?;
    let o1 = iter.next().unwrap()?;
    let o2 = iter.next().unwrap()?;
    let ensemble = EnsembleModel::new(
        [o0.model.clone(), o1.model.clone(), o2.model.clone()],
        [configs[0].k_negative, configs[1].k_negative, configs[2].k_negative],
    )?;
    Ok(EnsembleTrainOutcome { ensemble, member_outcomes: [o0, o1, o2] })
}

/// Scores one bag with all three members, yielding a triple per frame.
pub fn ensemble_frame_triples(ensemble: &EnsembleModel, bag: &VideoBag) -> Result<Vec<FrameTriple>> {
    let s0 = score_bag(ensemble.member(0), bag)?;
    let s1 = score_bag(ensemble.member(1), bag)?;
    let s2 = score_bag(ensemble.member(2), bag)?;
    s0.iter()
        .zip(&s1)
        .zip(&s2)
        .map(|((&a, &b), &c)| FrameTriple::new(a, b, c))
        .collect()
}

/// Difference-to-multiclass aggregation: p0 = 1-p_gt0, p1 = p_gt0-p_gt1,
/// p2 = p_gt1-p_gt2, p3 = p_gt2; the class is the argmax (lowest index on
/// ties). The four values always sum to 1, but entries can be negative when
/// the triple is non-monotone; they are reported as-is.
pub fn aggregate_convert(triple: &FrameTriple) -> (u8, [f64; 4]) {
    let [p0, p1, p2] = triple.as_array();
    let probs = [1.0 - p0, p0 - p1, p1 - p2, p2];
    let mut class = 0usize;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[class] {
            class = i;
        }
    }
    (class as u8, probs)
}

/// Per-classifier thresholding: each member votes 1 iff its probability
/// reaches its threshold; the class is the number of votes.
pub fn aggregate_threshold(triple: &FrameTriple, bt: &BinaryThresholds) -> u8 {
    triple
        .as_array()
        .iter()
        .zip(bt.as_array())
        .map(|(&p, t)| u8::from(p >= t))
        .sum()
}

/// Probability-sum aggregation: q = p_gt0 + p_gt1 + p_gt2 in [0,3].
pub fn aggregate_sum(triple: &FrameTriple) -> f64 {
    let [p0, p1, p2] = triple.as_array();
    p0 + p1 + p2
}

/// Bins a score in [0,3] by the ordered thresholds: class 0 below t0, then
/// left-closed bins [t0,t1), [t1,t2), and [t2,3]. A score exactly at an edge
/// takes the upper bin.
pub fn bin_ordinal(score: f64, ot: &OrdinalThresholds) -> Result<u8> {
    if !score.is_finite() || !(0.0..=3.0).contains(&score) {
        return Err(Error::InvalidArgument(format!("score {score} outside [0,3]")));
    }
    let [t0, t1, t2] = ot.as_array();
    Ok(if score < t0 {
        0
    } else if score < t1 {
        1
    } else if score < t2 {
        2
    } else {
        3
    })
}

/// Lifts frame classes to a video class by taking the maximum.
pub fn video_class(frame_classes: &[u8]) -> Result<u8> {
    if frame_classes.is_empty() {
        return Err(Error::EmptyInput("frame classes"));
    }
    if frame_classes.iter().any(|&c| c > 3) {
        return Err(Error::InvalidArgument("frame class outside 0..=3".into()));
    }
    Ok(*frame_classes.iter().max().unwrap())
}

/// Regression prediction: the video severity is the clipped maximum of the
/// unclipped frame scores, binned by the ordinal thresholds.
pub fn predict_video_regression(
    model: &ScorerModel,
    bag: &VideoBag,
    ot: &OrdinalThresholds,
) -> Result<(f64, u8)> {
    if model.head() != HeadKind::Linear {
        return Err(Error::InvalidArgument("regression prediction needs a linear head".into()));
    }
    let scores = score_bag(model, bag)?;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s_v = clip_score(max)?;
    Ok((s_v, bin_ordinal(s_v, ot)?))
}

/// Result of a threshold grid search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSearchOutcome<T> {
    pub thresholds: T,
    /// Video-level quadratic weighted kappa achieved by the returned triple.
    pub kappa: f64,
}

/// Candidate ordering shared by both searches: higher kappa wins; exact ties
/// fall to the lexicographically smallest index triple, which maps to the
/// lexicographically smallest threshold values. The rule is a total order, so
/// parallel reduction order cannot change the winner.
fn better(a: &(f64, [usize; 3]), b: &(f64, [usize; 3])) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

fn validate_truth_labels<'a>(labels: impl Iterator<Item = &'a u8> + Clone) -> Result<()> {
    let mut labels = labels.peekable();
    let first = *labels.peek().ok_or(Error::EmptyInput("evaluation videos"))?;
    if labels.clone().any(|&l| l > 3) {
        return Err(Error::InvalidArgument("video label outside 0..=3".into()));
    }
    if labels.all(|&l| l == *first) {
        return Err(Error::UndefinedMetric("grid search needs >= 2 distinct video labels"));
    }
    Ok(())
}

fn grid_divisions(range: f64, grid_step: f64) -> Result<usize> {
    if !(grid_step.is_finite() && grid_step > 0.0 && grid_step <= range) {
        return Err(Error::InvalidArgument(format!("bad grid step {grid_step}")));
    }
    let n = (range / grid_step).round();
    if ((n * grid_step) - range).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "grid step {grid_step} does not divide the range {range}"
        )));
    }
    Ok(n as usize)
}

/// Exhaustive search over the 3-d threshold grid {0, step, ..., 1}^3 for the
/// triple maximizing video-level quadratic weighted kappa of the Threshold
/// aggregation. Frames are never rescored: the cached triples are reused for
/// every grid point.
pub fn grid_search_binary_thresholds(
    videos: &[(Vec<FrameTriple>, u8)],
    grid_step: f64,
) -> Result<GridSearchOutcome<BinaryThresholds>> {
    validate_truth_labels(videos.iter().map(|(_, l)| l))?;
    if videos.iter().any(|(triples, _)| triples.is_empty()) {
        return Err(Error::EmptyInput("video with no frame triples"));
    }
    let n = grid_divisions(1.0, grid_step);
    let n = n?;
    let value = move |i: usize| i as f64 / n as f64;

    let best_for_t1 = |i1: usize| -> (f64, [usize; 3]) {
        let t1 = value(i1);
        let mut best = (f64::NEG_INFINITY, [usize::MAX; 3]);
        for i2 in 0..=n {
            let t2 = value(i2);
            for i3 in 0..=n {
                let t3 = value(i3);
                let mut cm = ConfusionMatrix::new(4).expect("4 >= 2");
                for (triples, label) in videos {
                    let mut v = 0u8;
                    for tr in triples {
                        let [p0, p1, p2] = tr.as_array();
                        let c = u8::from(p0 >= t1) + u8::from(p1 >= t2) + u8::from(p2 >= t3);
                        v = v.max(c);
                        if v == 3 {
                            break;
                        }
                    }
                    cm.record(*label, v).expect("labels validated");
                }
                // Truth diversity was validated, so kappa is defined.
                let kappa = cohen_kappa_quadratic(&cm).expect("diverse truth labels");
                let candidate = (kappa, [i1, i2, i3]);
                if better(&candidate, &best) {
                    best = candidate;
                }
            }
        }
        best
    };

    #[cfg(feature = "parallel")]
    let per_slice: Vec<(f64, [usize; 3])> = (0..=n).into_par_iter().map(best_for_t1).collect();
    #[cfg(not(feature = "parallel"))]
    let per_slice: Vec<(f64, [usize; 3])> = (0..=n).map(best_for_t1).collect();

    let best = per_slice
        .into_iter()
        .reduce(|a, b| if better(&b, &a) { b } else { a })
        .expect("grid has at least one point");
    let [i1, i2, i3] = best.1;
    Ok(GridSearchOutcome {
        thresholds: BinaryThresholds::new(value(i1), value(i2), value(i3))?,
        kappa: best.0,
    })
}

/// Exhaustive search over ordered triples 0 < t0 < t1 < t2 < 3 on the step
/// grid for the binning maximizing video-level quadratic weighted kappa of
/// cached per-video scores.
///
/// Because binning is monotone in the score and the video class is the max
/// frame class, the video class equals the bin of the video's maximum score;
/// callers therefore pass one score per video (its clipped maximum).
pub fn grid_search_ordinal_thresholds(
    videos: &[(f64, u8)],
    grid_step: f64,
) -> Result<GridSearchOutcome<OrdinalThresholds>> {
    validate_truth_labels(videos.iter().map(|(_, l)| l))?;
    if videos.iter().any(|(s, _)| !s.is_finite() || !(0.0..=3.0).contains(s)) {
        return Err(Error::InvalidArgument("cached scores must lie in [0,3]".into()));
    }
    let n = grid_divisions(3.0, grid_step)?;
    if n < 4 {
        return Err(Error::InvalidArgument(
            "grid too coarse for three interior ordered thresholds".into(),
        ));
    }
    let value = move |i: usize| 3.0 * i as f64 / n as f64;

    // Per truth class, sorted scores let each confusion row be assembled from
    // three binary searches instead of a pass over the videos.
    let mut by_class: [Vec<f64>; 4] = Default::default();
    for (score, label) in videos {
        by_class[*label as usize].push(*score);
    }
    for scores in &mut by_class {
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }
    let below = |scores: &[f64], t: f64| scores.partition_point(|&s| s < t) as u64;

    let best_for_t0 = |i0: usize| -> (f64, [usize; 3]) {
        let t0 = value(i0);
        let mut best = (f64::NEG_INFINITY, [usize::MAX; 3]);
        for i1 in i0 + 1..n - 1 {
            let t1 = value(i1);
            for i2 in i1 + 1..n {
                let t2 = value(i2);
                let mut cm = ConfusionMatrix::new(4).expect("4 >= 2");
                for (truth, scores) in by_class.iter().enumerate() {
                    let b0 = below(scores, t0);
                    let b1 = below(scores, t1);
                    let b2 = below(scores, t2);
                    let total = scores.len() as u64;
                    for (pred, count) in
                        [b0, b1 - b0, b2 - b1, total - b2].into_iter().enumerate()
                    {
                        for _ in 0..count {
                            cm.record(truth as u8, pred as u8).expect("in range");
                        }
                    }
                }
                let kappa = cohen_kappa_quadratic(&cm).expect("diverse truth labels");
                let candidate = (kappa, [i0, i1, i2]);
                if better(&candidate, &best) {
                    best = candidate;
                }
            }
        }
        best
    };

    #[cfg(feature = "parallel")]
    let per_slice: Vec<(f64, [usize; 3])> = (1..n - 1).into_par_iter().map(best_for_t0).collect();
    #[cfg(not(feature = "parallel"))]
    let per_slice: Vec<(f64, [usize; 3])> = (1..n - 1).map(best_for_t0).collect();

    let best = per_slice
        .into_iter()
        .filter(|c| c.0.is_finite())
        .reduce(|a, b| if better(&b, &a) { b } else { a })
        .ok_or(Error::EmptyInput("threshold grid"))?;
    let [i0, i1, i2] = best.1;
    Ok(GridSearchOutcome {
        thresholds: OrdinalThresholds::new(value(i0), value(i1), value(i2))?,
        kappa: best.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};
    use crate::scorer::LossKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn triple(a: f64, b: f64, c: f64) -> FrameTriple {
        FrameTriple::new(a, b, c).unwrap()
    }

    #[test]
    fn convert_examples() {
        let (class, probs) = aggregate_convert(&triple(0.9, 0.7, 0.2));
        assert_eq!(class, 2);
        for (got, want) in probs.iter().zip([0.1, 0.2, 0.5, 0.2]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        assert_eq!(aggregate_convert(&triple(0.0, 0.0, 0.0)), (0, [1.0, 0.0, 0.0, 0.0]));
        assert_eq!(aggregate_convert(&triple(1.0, 1.0, 1.0)), (3, [0.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn convert_ties_take_lowest_class() {
        // (0.5, 0, 0) gives probs (0.5, 0.5, 0, 0): tie between classes 0 and 1.
        assert_eq!(aggregate_convert(&triple(0.5, 0.0, 0.0)).0, 0);
    }

    #[test]
    fn convert_handles_non_monotone_triples() {
        let (class, probs) = aggregate_convert(&triple(0.1, 0.9, 0.2));
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // p1 = 0.1 - 0.9 = -0.8; the differences are not a proper distribution
        // but they still sum to one and argmax is well defined.
        assert!(probs[1] < 0.0);
        assert_eq!(probs, [0.9, -0.8, 0.7, 0.2]);
        assert_eq!(class, 0);
    }

    #[test]
    fn threshold_examples() {
        let bt = BinaryThresholds::new(0.20, 0.19, 0.22).unwrap();
        assert_eq!(aggregate_threshold(&triple(0.25, 0.21, 0.10), &bt), 2);
        assert_eq!(aggregate_threshold(&triple(0.0, 0.0, 0.0), &bt), 0);
        assert_eq!(aggregate_threshold(&triple(1.0, 1.0, 1.0), &bt), 3);
        // A probability exactly at its threshold counts as a positive vote.
        assert_eq!(aggregate_threshold(&triple(0.20, 0.0, 0.0), &bt), 1);
    }

    #[test]
    fn threshold_class_is_monotone_in_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bt = BinaryThresholds::new(0.3, 0.5, 0.7).unwrap();
        for _ in 0..1000 {
            let a = triple(rng.random(), rng.random(), rng.random());
            let mut arr = a.as_array();
            let m = rng.random_range(0..3);
            arr[m] = (arr[m] + rng.random_range(0.0..0.5)).min(1.0);
            let b = triple(arr[0], arr[1], arr[2]);
            assert!(aggregate_threshold(&b, &bt) >= aggregate_threshold(&a, &bt));
        }
    }

    #[test]
    fn sum_examples() {
        assert!((aggregate_sum(&triple(0.9, 0.7, 0.2)) - 1.8).abs() < 1e-12);
        assert_eq!(aggregate_sum(&triple(0.0, 0.0, 0.0)), 0.0);
        assert_eq!(aggregate_sum(&triple(1.0, 1.0, 1.0)), 3.0);

        let ot = OrdinalThresholds::new(0.1, 1.04, 2.02).unwrap();
        assert_eq!(bin_ordinal(1.8, &ot).unwrap(), 2);
    }

    #[test]
    fn bin_ordinal_boundaries() {
        let ot = OrdinalThresholds::new(1.03, 1.97, 2.79).unwrap();
        assert_eq!(bin_ordinal(2.5, &ot).unwrap(), 2);
        assert_eq!(bin_ordinal(0.0, &ot).unwrap(), 0);
        assert_eq!(bin_ordinal(3.0, &ot).unwrap(), 3);
        // Edges take the upper bin.
        assert_eq!(bin_ordinal(1.03, &ot).unwrap(), 1);
        assert_eq!(bin_ordinal(1.97, &ot).unwrap(), 2);
        assert_eq!(bin_ordinal(2.79, &ot).unwrap(), 3);
        assert!(bin_ordinal(3.2, &ot).is_err());
        assert!(bin_ordinal(f64::NAN, &ot).is_err());
    }

    #[test]
    fn threshold_types_validate() {
        assert!(BinaryThresholds::new(-0.1, 0.5, 0.5).is_err());
        assert!(BinaryThresholds::new(0.1, 0.5, 1.1).is_err());
        assert!(OrdinalThresholds::new(0.0, 1.0, 2.0).is_err());
        assert!(OrdinalThresholds::new(1.0, 1.0, 2.0).is_err());
        assert!(OrdinalThresholds::new(1.0, 2.0, 3.0).is_err());
        assert!(OrdinalThresholds::new(2.0, 1.0, 2.5).is_err());
    }

    #[test]
    fn video_class_is_max() {
        assert_eq!(video_class(&[0, 2, 1]).unwrap(), 2);
        assert_eq!(video_class(&[0, 0, 0]).unwrap(), 0);
        assert_eq!(video_class(&[1, 3, 2]).unwrap(), 3);
        assert!(video_class(&[]).is_err());
        assert!(video_class(&[4]).is_err());
    }

    fn identity_linear() -> ScorerModel {
        ScorerModel::from_parts(vec![1, 1], vec![vec![1.0]], vec![vec![0.0]], HeadKind::Linear)
            .unwrap()
    }

    fn scalar_bag(id: &str, scores: &[f64], mes: u8) -> VideoBag {
        let frames =
            scores.iter().map(|&s| crate::dataset::FrameVec::new(vec![s]).unwrap()).collect();
        VideoBag::new(id.into(), format!("subj-{id}"), mes, frames, None).unwrap()
    }

    #[test]
    fn regression_prediction_clips_and_bins() {
        let model = identity_linear();
        let ot = OrdinalThresholds::new(1.03, 1.97, 2.79).unwrap();

        let bag = scalar_bag("a", &[0.5, 2.5, 1.0], 2);
        assert_eq!(predict_video_regression(&model, &bag, &ot).unwrap(), (2.5, 2));

        let high = scalar_bag("b", &[3.4, 0.1], 3);
        assert_eq!(predict_video_regression(&model, &high, &ot).unwrap().0, 3.0);

        let low = scalar_bag("c", &[-0.7, -0.1], 0);
        assert_eq!(predict_video_regression(&model, &low, &ot).unwrap(), (0.0, 0));

        let sigmoid =
            ScorerModel::from_parts(vec![1, 1], vec![vec![1.0]], vec![vec![0.0]], HeadKind::Sigmoid)
                .unwrap();
        assert!(predict_video_regression(&sigmoid, &bag, &ot).is_err());
    }

    fn quick_ensemble_configs(seed: u64) -> [TrainConfig; 3] {
        let base = TrainConfig {
            hidden_dims: vec![8],
            epochs: 15,
            lr: 5e-3,
            weight_decay: 0.0,
            loss: LossKind::Bce,
            k_negative: 3,
            seed,
            shuffle: true,
        };
        [
            TrainConfig { seed: seed + 1, ..base.clone() },
            TrainConfig { seed: seed + 2, ..base.clone() },
            TrainConfig { seed: seed + 3, ..base }
        ]
    }

    #[test]
    fn ensemble_training_is_deterministic() {
        let ds = generate_synthetic(&SyntheticSpec {
            n_videos: 24,
            frames_min: 4,
            frames_max: 8,
            dim: 6,
            class_mix: [1.0; 4],
            frame_severity_decay: 0.5,
            noise_std: 0.1,
            seed: 31,
        })
        .unwrap();
        let bags: Vec<&VideoBag> = ds.bags().iter().collect();
        let a = train_ensemble(&bags, &quick_ensemble_configs(40)).unwrap();
        let b = train_ensemble(&bags, &quick_ensemble_configs(40)).unwrap();
        assert_eq!(a.ensemble, b.ensemble);
        assert_eq!(a.ensemble.ks(), [3, 3, 3]);

        let triples = ensemble_frame_triples(&a.ensemble, bags[0]).unwrap();
        assert_eq!(triples.len(), bags[0].num_frames());
    }

    #[test]
    fn binary_grid_search_finds_perfect_separator() {
        // One frame per video; the clean separator is any t in (0.1, 0.9],
        // and the lexicographically smallest grid triple is (0.25, 0.25, 0.25).
        let videos = vec![
            (vec![triple(0.1, 0.1, 0.1)], 0),
            (vec![triple(0.9, 0.1, 0.1)], 1),
            (vec![triple(0.9, 0.9, 0.1)], 2),
            (vec![triple(0.9, 0.9, 0.9)], 3),
        ];
        let out = grid_search_binary_thresholds(&videos, 0.25).unwrap();
        assert_eq!(out.kappa, 1.0);
        assert_eq!(out.thresholds.as_array(), [0.25, 0.25, 0.25]);
    }

    #[test]
    fn binary_grid_search_beats_default_triple() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let videos: Vec<(Vec<FrameTriple>, u8)> = (0..30)
            .map(|i| {
                let label = (i % 4) as u8;
                let frames = (0..6)
                    .map(|_| {
                        let noise = rng.random_range(-0.2..0.2);
                        let base = f64::from(label) / 3.0;
                        triple(
                            (base + noise).clamp(0.0, 1.0),
                            (base - 0.2 + noise).clamp(0.0, 1.0),
                            (base - 0.4 + noise).clamp(0.0, 1.0),
                        )
                    })
                    .collect();
                (frames, label)
            })
            .collect();
        let out = grid_search_binary_thresholds(&videos, 0.25).unwrap();

        let default = BinaryThresholds::new(0.5, 0.5, 0.5).unwrap();
        let mut cm = ConfusionMatrix::new(4).unwrap();
        for (triples, label) in &videos {
            let classes: Vec<u8> =
                triples.iter().map(|t| aggregate_threshold(t, &default)).collect();
            cm.record(*label, video_class(&classes).unwrap()).unwrap();
        }
        let default_kappa = cohen_kappa_quadratic(&cm).unwrap();
        assert!(out.kappa >= default_kappa);
    }

    #[test]
    fn ordinal_grid_search_finds_separating_bins() {
        let videos = vec![(0.2, 0u8), (0.8, 1), (1.6, 2), (2.4, 3)];
        let out = grid_search_ordinal_thresholds(&videos, 0.25).unwrap();
        assert_eq!(out.kappa, 1.0);
        assert_eq!(out.thresholds.as_array(), [0.25, 1.0, 1.75]);
    }

    #[test]
    fn grid_search_rejects_degenerate_inputs() {
        assert!(grid_search_binary_thresholds(&[], 0.25).is_err());
        let single = vec![(vec![triple(0.5, 0.5, 0.5)], 2u8), (vec![triple(0.1, 0.1, 0.1)], 2)];
        assert!(grid_search_binary_thresholds(&single, 0.25).is_err());
        assert!(grid_search_ordinal_thresholds(&[(0.5, 0), (1.5, 1)], 0.26).is_err());
        assert!(grid_search_ordinal_thresholds(&[(0.5, 0), (3.5, 1)], 0.25).is_err());
    }

    #[test]
    fn grid_searches_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let videos: Vec<(Vec<FrameTriple>, u8)> = (0..20)
            .map(|i| {
                let frames =
                    (0..4).map(|_| triple(rng.random(), rng.random(), rng.random())).collect();
                (frames, (i % 4) as u8)
            })
            .collect();
        let a = grid_search_binary_thresholds(&videos, 0.25).unwrap();
        let b = grid_search_binary_thresholds(&videos, 0.25).unwrap();
        assert_eq!(a, b);

        let scores: Vec<(f64, u8)> =
            (0..40).map(|i| (rng.random_range(0.0..3.0), (i % 4) as u8)).collect();
        let c = grid_search_ordinal_thresholds(&scores, 0.25).unwrap();
        let d = grid_search_ordinal_thresholds(&scores, 0.25).unwrap();
        assert_eq!(c, d);
        let [t0, t1, t2] = c.thresholds.as_array();
        assert!(0.0 < t0 && t0 < t1 && t1 < t2 && t2 < 3.0);
    }
}
