//! Bag/frame data model, synthetic generation with planted per-frame severities,
//! binary relabeling, subject-grouped k-fold splitting, and persistence.
//!
//! A bag is one video: an ordered list of frame feature vectors plus a single
//! bag-level severity grade `mes` in {0,1,2,3}. Synthetic bags carry planted
//! per-frame labels so weak-supervision recovery can be measured against a
//! known ground truth.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Deref;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest severity grade.
pub const MAX_CLASS: u8 = 3;
/// Number of ordinal classes.
pub const NUM_CLASSES: usize = 4;
/// On-disk dataset format version.
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// One frame's feature vector. All entries are finite.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct FrameVec(Vec<f64>);

impl FrameVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("frame vector must be non-empty".into()));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("frame vector entries must be finite".into()));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl Deref for FrameVec {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// One weakly labeled bag: a video's frames plus its bag-level grade.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VideoBag {
    video_id: String,
    subject_id: String,
    mes: u8,
    frames: Vec<FrameVec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    planted_frame_labels: Option<Vec<u8>>,
}

impl VideoBag {
    pub fn new(
        video_id: String,
        subject_id: String,
        mes: u8,
        frames: Vec<FrameVec>,
        planted_frame_labels: Option<Vec<u8>>,
    ) -> Result<Self> {
        let invalid = |message: String| Error::InvalidBag { video_id: video_id.clone(), message };
        if frames.is_empty() {
            return Err(invalid("bag must contain at least one frame".into()));
        }
        if mes > MAX_CLASS {
            return Err(invalid(format!("mes {mes} outside 0..={MAX_CLASS}")));
        }
        let dim = frames[0].dim();
        if frames.iter().any(|f| f.dim() != dim) {
            return Err(invalid("all frames in a bag must share one dimension".into()));
        }
        if let Some(labels) = &planted_frame_labels {
            if labels.len() != frames.len() {
                return Err(invalid(format!(
                    "planted labels length {} != frame count {}",
                    labels.len(),
                    frames.len()
                )));
            }
            if labels.iter().any(|&l| l > MAX_CLASS) {
                return Err(invalid("planted label outside 0..=3".into()));
            }
            let max = labels.iter().copied().max().unwrap_or(0);
            if max != mes {
                return Err(invalid(format!(
                    "max planted label {max} must equal bag mes {mes}"
                )));
            }
        }
        Ok(Self { video_id, subject_id, mes, frames, planted_frame_labels })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn mes(&self) -> u8 {
        self.mes
    }

    pub fn frames(&self) -> &[FrameVec] {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn dim(&self) -> usize {
        self.frames[0].dim()
    }

    pub fn planted_frame_labels(&self) -> Option<&[u8]> {
        self.planted_frame_labels.as_deref()
    }
}

/// A collection of bags sharing one feature dimension, with unique video ids.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dataset {
    dim: usize,
    bags: Vec<VideoBag>,
}

impl Dataset {
    pub fn new(dim: usize, bags: Vec<VideoBag>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dataset dim must be >= 1".into()));
        }
        let mut seen = HashSet::new();
        for bag in &bags {
            if bag.dim() != dim {
                return Err(Error::DimMismatch { expected: dim, actual: bag.dim() });
            }
            if !seen.insert(bag.video_id().to_string()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate video_id `{}`",
                    bag.video_id()
                )));
            }
        }
        Ok(Self { dim, bags })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bags(&self) -> &[VideoBag] {
        &self.bags
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    /// Bag counts per severity class.
    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut hist = [0usize; NUM_CLASSES];
        for bag in &self.bags {
            hist[bag.mes() as usize] += 1;
        }
        hist
    }

    pub fn total_frames(&self) -> usize {
        self.bags.iter().map(VideoBag::num_frames).sum()
    }
}

/// Recipe for a synthetic dataset with planted frame severities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_videos: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub dim: usize,
    /// Relative weights of the four severity classes.
    pub class_mix: [f64; 4],
    /// In (0,1]. Smaller values make high-severity frames rarer within a bag.
    pub frame_severity_decay: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::InvalidSpec(m.into()));
        if self.n_videos == 0 {
            return err("n_videos must be >= 1");
        }
        if self.frames_min < 1 {
            return err("frames_min must be >= 1");
        }
        if self.frames_min > self.frames_max {
            return err("frames_min must be <= frames_max");
        }
        if self.dim == 0 {
            return err("dim must be >= 1");
        }
        if self.class_mix.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return err("class_mix weights must be finite and nonnegative");
        }
        if self.class_mix.iter().sum::<f64>() <= 0.0 {
            return err("class_mix must sum to a positive value");
        }
        if !(self.frame_severity_decay > 0.0 && self.frame_severity_decay <= 1.0) {
            return err("frame_severity_decay must lie in (0, 1]");
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return err("noise_std must be finite and nonnegative");
        }
        Ok(())
    }
}

/// Subject-grouped fold assignment: every bag of a subject lands in one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    k: usize,
    fold_of_subject: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fold_of_subject(&self, subject_id: &str) -> Option<usize> {
        self.fold_of_subject.get(subject_id).copied()
    }

    pub fn fold_of_bag(&self, bag: &VideoBag) -> Result<usize> {
        self.fold_of_subject(bag.subject_id()).ok_or_else(|| {
            Error::InvalidArgument(format!("subject `{}` has no fold", bag.subject_id()))
        })
    }

    /// Splits a dataset into (train, validation) bag lists for one fold.
    pub fn split<'a>(
        &self,
        dataset: &'a Dataset,
        fold: usize,
    ) -> Result<(Vec<&'a VideoBag>, Vec<&'a VideoBag>)> {
        if fold >= self.k {
            return Err(Error::InvalidArgument(format!("fold {fold} outside 0..{}", self.k)));
        }
        let mut train = Vec::new();
        let mut val = Vec::new();
        for bag in dataset.bags() {
            if self.fold_of_bag(bag)? == fold {
                val.push(bag);
            } else {
                train.push(bag);
            }
        }
        Ok((train, val))
    }
}

/// Mean direction of each severity cluster. Class anchors are equally spaced
/// along the normalized all-ones direction, one unit of Euclidean distance apart,
/// so severity is linearly recoverable from features.
pub fn class_anchor(dim: usize, class: u8) -> Vec<f64> {
    let unit = 1.0 / (dim as f64).sqrt();
    vec![class as f64 * unit; dim]
}

/// Mean of the artifact-frame cluster: far off the severity line, alternating
/// signs so it is (near-)orthogonal to the severity direction.
pub fn artifact_anchor(dim: usize) -> Vec<f64> {
    let unit = 4.0 / (dim as f64).sqrt();
    (0..dim).map(|j| if j % 2 == 0 { unit } else { -unit }).collect()
}

/// Largest-remainder apportionment of `n` items to the four class weights.
fn quota_counts(mix: &[f64; 4], n: usize) -> [usize; 4] {
    let total: f64 = mix.iter().sum();
    let exact: Vec<f64> = mix.iter().map(|w| w / total * n as f64).collect();
    let mut counts = [0usize; 4];
    let mut assigned = 0;
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
        assigned += *c;
    }
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &c in order.iter().cycle().take(n - assigned) {
        counts[c] += 1;
    }
    counts
}

fn sample_label_leq(mes: u8, decay: f64, rng: &mut ChaCha8Rng) -> u8 {
    if mes == 0 {
        return 0;
    }
    // weights decay^l for l = 0..=mes
    let weights: Vec<f64> = (0..=mes).map(|l| decay.powi(l as i32)).collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.random_range(0.0..total);
    for (l, w) in weights.iter().enumerate() {
        if draw < *w {
            return l as u8;
        }
        draw -= w;
    }
    mes
}

/// Generates a synthetic dataset. Deterministic for a fixed spec.
///
/// Each bag gets planted per-frame labels no greater than the bag grade, with
/// exactly one frame forced to equal it; frame features are the planted class
/// anchor plus Gaussian noise. Subjects receive 1-4 consecutive videos each.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let counts = quota_counts(&spec.class_mix, spec.n_videos);
    let mut labels: Vec<u8> = Vec::with_capacity(spec.n_videos);
    for (class, &count) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat_n(class as u8, count));
    }
    labels.shuffle(&mut rng);

    let noise = Normal::new(0.0, spec.noise_std)
        .map_err(|e| Error::InvalidSpec(format!("noise_std: {e}")))?;
    let anchors: Vec<Vec<f64>> = (0..NUM_CLASSES).map(|c| class_anchor(spec.dim, c as u8)).collect();

    let mut bags = Vec::with_capacity(spec.n_videos);
    let mut subject_idx = 0usize;
    let mut remaining_in_subject = 0usize;
    for (i, &mes) in labels.iter().enumerate() {
        if remaining_in_subject == 0 {
            subject_idx += 1;
            remaining_in_subject = rng.random_range(1..=4);
        }
        remaining_in_subject -= 1;

        let f = rng.random_range(spec.frames_min..=spec.frames_max);
        let forced = rng.random_range(0..f);
        let mut planted = vec![0u8; f];
        for (j, slot) in planted.iter_mut().enumerate() {
            *slot = if j == forced {
                mes
            } else {
                sample_label_leq(mes, spec.frame_severity_decay, &mut rng)
            };
        }
        let frames: Vec<FrameVec> = planted
            .iter()
            .map(|&l| {
                let values = anchors[l as usize]
                    .iter()
                    .map(|&a| a + noise.sample(&mut rng))
                    .collect();
                FrameVec::new(values)
            })
            .collect::<Result<_>>()?;
        bags.push(VideoBag::new(
            format!("v{:05}", i + 1),
            format!("s{subject_idx:05}"),
            mes,
            frames,
            Some(planted),
        )?);
    }
    Dataset::new(spec.dim, bags)
}

/// Relabels bags for the ranked binary task "grade greater than m".
pub fn relabel_binary<B>(bags: &[B], m: u8) -> Result<Vec<(&VideoBag, u8)>>
where
    B: std::borrow::Borrow<VideoBag>,
{
    if m > 2 {
        return Err(Error::InvalidArgument(format!(
            "ranked binary cut m={m} must lie in 0..=2"
        )));
    }
    Ok(bags
        .iter()
        .map(|b| {
            let bag = b.borrow();
            (bag, u8::from(bag.mes() > m))
        })
        .collect())
}

/// Subject-grouped k-fold assignment with greedy class balancing.
///
/// Subjects are shuffled (seeded), ordered by descending bag count, and each
/// is assigned to the fold holding the fewest bags of the subject's modal
/// class; ties fall to the fold with the fewest total bags, then lowest index.
pub fn grouped_kfold(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidArgument("k must be >= 2".into()));
    }
    let mut by_subject: BTreeMap<&str, Vec<&VideoBag>> = BTreeMap::new();
    for bag in dataset.bags() {
        by_subject.entry(bag.subject_id()).or_default().push(bag);
    }
    if by_subject.len() < k {
        return Err(Error::InvalidArgument(format!(
            "need at least {k} distinct subjects, found {}",
            by_subject.len()
        )));
    }

    let mut subjects: Vec<(&str, Vec<&VideoBag>)> = by_subject.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    subjects.sort_by_key(|(_, bags)| std::cmp::Reverse(bags.len()));

    let mut class_counts = vec![[0usize; NUM_CLASSES]; k];
    let mut totals = vec![0usize; k];
    let mut fold_of_subject = BTreeMap::new();
    for (subject, bags) in subjects {
        let mut hist = [0usize; NUM_CLASSES];
        for bag in &bags {
            hist[bag.mes() as usize] += 1;
        }
        let modal = hist
            .iter()
            .enumerate()
            .max_by(|(ca, na), (cb, nb)| na.cmp(nb).then(cb.cmp(ca)))
            .map(|(c, _)| c)
            .unwrap_or(0);
        let fold = (0..k)
            .min_by_key(|&f| (class_counts[f][modal], totals[f], f))
            .expect("k >= 2");
        for bag in &bags {
            class_counts[fold][bag.mes() as usize] += 1;
        }
        totals[fold] += bags.len();
        fold_of_subject.insert(subject.to_string(), fold);
    }
    Ok(FoldAssignment { k, fold_of_subject })
}

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    version: u32,
    dim: usize,
}

#[derive(Deserialize)]
struct BagRecord {
    video_id: String,
    subject_id: String,
    mes: u8,
    frames: Vec<Vec<f64>>,
    #[serde(default)]
    planted_frame_labels: Option<Vec<u8>>,
}

/// Writes a dataset as line-delimited JSON: one header record, then one bag
/// per line. Floats round-trip exactly.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    let header = HeaderRecord { version: DATASET_FORMAT_VERSION, dim: dataset.dim() };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for bag in dataset.bags() {
        writeln!(out, "{}", serde_json::to_string(bag).expect("bag serializes"))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`], validating every invariant.
/// Malformed records are rejected with their 1-based line number.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines().enumerate();

    let (_, first) = lines
        .next()
        .ok_or(Error::DatasetParse { line: 1, message: "missing header record".into() })?;
    let header: HeaderRecord = serde_json::from_str(&first?)
        .map_err(|e| Error::DatasetParse { line: 1, message: format!("bad header: {e}") })?;
    if header.version != DATASET_FORMAT_VERSION {
        return Err(Error::DatasetParse {
            line: 1,
            message: format!("unsupported format version {}", header.version),
        });
    }

    let mut bags = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let parse = |message: String| Error::DatasetParse { line: line_no, message };
        let record: BagRecord =
            serde_json::from_str(&text).map_err(|e| parse(format!("bad record: {e}")))?;
        let frames = record
            .frames
            .into_iter()
            .map(FrameVec::new)
            .collect::<Result<Vec<_>>>()
            .map_err(|e| parse(e.to_string()))?;
        if frames.iter().any(|f| f.dim() != header.dim) {
            return Err(parse(format!("frame dimension differs from header dim {}", header.dim)));
        }
        if !seen.insert(record.video_id.clone()) {
            return Err(parse(format!("duplicate video_id `{}`", record.video_id)));
        }
        let bag = VideoBag::new(
            record.video_id,
            record.subject_id,
            record.mes,
            frames,
            record.planted_frame_labels,
        )
        .map_err(|e| parse(e.to_string()))?;
        bags.push(bag);
    }
    Dataset::new(header.dim, bags)
}

/// A dataset with inserted artifact frames plus the ground-truth mask
/// (`true` = artifact), aligned with the dataset's bag and frame order.
#[derive(Debug, Clone)]
pub struct PlantedArtifacts {
    pub dataset: Dataset,
    pub artifact_mask: Vec<Vec<bool>>,
}

/// Inserts artifact frames (drawn from the artifact cluster) into each bag so
/// they make up roughly `rate` of the resulting frames. Artifact frames carry
/// planted label 0, which leaves every bag invariant intact.
pub fn plant_artifacts(
    dataset: &Dataset,
    rate: f64,
    noise_std: f64,
    seed: u64,
) -> Result<PlantedArtifacts> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument("artifact rate must lie in [0, 1)".into()));
    }
    if !noise_std.is_finite() || noise_std < 0.0 {
        return Err(Error::InvalidArgument("noise_std must be finite and nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std)
        .map_err(|e| Error::InvalidArgument(format!("noise_std: {e}")))?;
    let anchor = artifact_anchor(dataset.dim());

    let mut bags = Vec::with_capacity(dataset.len());
    let mut mask = Vec::with_capacity(dataset.len());
    for bag in dataset.bags() {
        let f = bag.num_frames();
        let n_art = (f as f64 * rate / (1.0 - rate)).round() as usize;
        let mut frames: Vec<FrameVec> = bag.frames().to_vec();
        let mut planted = bag.planted_frame_labels().map(<[u8]>::to_vec);
        let mut bag_mask = vec![false; f];
        for _ in 0..n_art {
            let pos = rng.random_range(0..=frames.len());
            let values: Vec<f64> = anchor.iter().map(|&a| a + noise.sample(&mut rng)).collect();
            frames.insert(pos, FrameVec::new(values)?);
            if let Some(p) = planted.as_mut() {
                p.insert(pos, 0);
            }
            bag_mask.insert(pos, true);
        }
        bags.push(VideoBag::new(
            bag.video_id().to_string(),
            bag.subject_id().to_string(),
            bag.mes(),
            frames,
            planted,
        )?);
        mask.push(bag_mask);
    }
    Ok(PlantedArtifacts { dataset: Dataset::new(dataset.dim(), bags)?, artifact_mask: mask })
}
