//! Artifact quality control: a linear max-margin classifier over frame
//! features, trained with a seeded pegasos-style subgradient loop, plus the
//! dataset filtering pass that removes flagged frames before MIL training.

use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FrameVec, PlantedArtifacts, VideoBag};
use crate::error::{Error, Result};

/// On-disk SVM format version.
pub const SVM_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    /// L2 regularization strength.
    pub lambda: f64,
    /// Passes over the data; each pass draws n random samples with replacement.
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self { lambda: 1e-3, epochs: 20, seed: 0 }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::InvalidSpec("lambda must be positive".into()));
        }
        if self.epochs < 1 {
            return Err(Error::InvalidSpec("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Linear decision function w·x + b. Positive side = artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    w: Vec<f64>,
    b: f64,
    lambda: f64,
}

impl LinearSvm {
    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn bias(&self) -> f64 {
        self.b
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }
}

/// Trained model plus hinge objectives before and after training.
#[derive(Debug, Clone)]
pub struct SvmTrainOutcome {
    pub model: LinearSvm,
    pub initial_objective: f64,
    pub final_objective: f64,
}

/// Regularized hinge objective: lambda/2 ||w||^2 + mean_i max(0, 1 - y_i f(x_i)).
/// The bias is not regularized.
pub fn svm_objective(model: &LinearSvm, features: &[FrameVec], labels: &[i8]) -> Result<f64> {
    check_training_set(model.dim(), features, labels)?;
    let norm2: f64 = model.w.iter().map(|x| x * x).sum();
    let hinge: f64 = features
        .iter()
        .zip(labels)
        .map(|(x, &y)| (1.0 - f64::from(y) * raw_score(model, x)).max(0.0))
        .sum();
    Ok(0.5 * model.lambda * norm2 + hinge / features.len() as f64)
}

fn raw_score(model: &LinearSvm, frame: &FrameVec) -> f64 {
    model.w.iter().zip(frame.values()).map(|(w, x)| w * x).sum::<f64>() + model.b
}

fn check_training_set(dim: usize, features: &[FrameVec], labels: &[i8]) -> Result<()> {
    if features.is_empty() {
        return Err(Error::EmptyInput("features"));
    }
    if features.len() != labels.len() {
        return Err(Error::InvalidArgument("features/labels length mismatch".into()));
    }
    if labels.iter().any(|&y| y != 1 && y != -1) {
        return Err(Error::InvalidArgument("labels must be -1 or +1".into()));
    }
    if let Some(f) = features.iter().find(|f| f.dim() != dim) {
        return Err(Error::DimMismatch { expected: dim, actual: f.dim() });
    }
    Ok(())
}

/// Trains a linear SVM by seeded stochastic subgradient descent on the primal
/// hinge objective with step size 1/(lambda * t), projecting w onto the ball
/// of radius 1/sqrt(lambda) after each step. The bias is unregularized and
/// follows a 1/t schedule: without shrinkage to damp it, the 1/(lambda*t)
/// rate would give it enormous early kicks. Deterministic for fixed data and
/// seed.
pub fn train_svm(features: &[FrameVec], labels: &[i8], config: &SvmConfig) -> Result<SvmTrainOutcome> {
    config.validate()?;
    if features.is_empty() {
        return Err(Error::EmptyInput("features"));
    }
    let dim = features[0].dim();
    check_training_set(dim, features, labels)?;
    if !labels.contains(&1) || !labels.contains(&-1) {
        return Err(Error::InvalidArgument("training set needs both classes".into()));
    }

    let mut model = LinearSvm { w: vec![0.0; dim], b: 0.0, lambda: config.lambda };
    let initial_objective = svm_objective(&model, features, labels)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = features.len();
    let radius = 1.0 / config.lambda.sqrt();
    let mut t = 0u64;
    for _ in 0..config.epochs {
        for _ in 0..n {
            t += 1;
            let i = rng.random_range(0..n);
            let eta = 1.0 / (config.lambda * t as f64);
            let y = f64::from(labels[i]);
            let margin = y * raw_score(&model, &features[i]);
            let shrink = 1.0 - eta * config.lambda;
            for w in &mut model.w {
                *w *= shrink;
            }
            if margin < 1.0 {
                for (w, x) in model.w.iter_mut().zip(features[i].values()) {
                    *w += eta * y * x;
                }
                model.b += y / t as f64;
            }
            let norm = model.w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > radius {
                let scale = radius / norm;
                for w in &mut model.w {
                    *w *= scale;
                }
            }
        }
    }
    let final_objective = svm_objective(&model, features, labels)?;
    Ok(SvmTrainOutcome { model, initial_objective, final_objective })
}

/// Signed distance proxy w·x + b.
pub fn svm_score(model: &LinearSvm, frame: &FrameVec) -> Result<f64> {
    if frame.dim() != model.dim() {
        return Err(Error::DimMismatch { expected: model.dim(), actual: frame.dim() });
    }
    Ok(raw_score(model, frame))
}

/// Sign of the score; exact zero maps to +1 (artifact) so borderline frames
/// are removed rather than kept.
pub fn svm_predict(model: &LinearSvm, frame: &FrameVec) -> Result<i8> {
    Ok(if svm_score(model, frame)? >= 0.0 { 1 } else { -1 })
}

/// Outcome counters of one filtering pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub bags_before: usize,
    pub bags_dropped: usize,
    pub frames_before: usize,
    pub frames_removed: usize,
    /// Mean over all input bags of the per-bag percentage of frames removed
    /// (dropped bags count as 100).
    pub mean_frame_decrease_pct: f64,
    /// Bags whose planted frame labels were discarded because filtering
    /// removed every frame carrying the bag's grade.
    pub planted_labels_dropped: usize,
}

/// Removes frames the model flags as artifacts. Surviving frames keep their
/// order and labels; bags left without frames are dropped and counted.
pub fn filter_dataset(dataset: &Dataset, model: &LinearSvm) -> Result<(Dataset, FilterStats)> {
    if model.dim() != dataset.dim() {
        return Err(Error::DimMismatch { expected: dataset.dim(), actual: model.dim() });
    }
    let mut bags = Vec::with_capacity(dataset.len());
    let mut stats = FilterStats {
        bags_before: dataset.len(),
        bags_dropped: 0,
        frames_before: dataset.total_frames(),
        frames_removed: 0,
        mean_frame_decrease_pct: 0.0,
        planted_labels_dropped: 0,
    };
    let mut pct_sum = 0.0;
    for bag in dataset.bags() {
        let keep: Vec<bool> =
            bag.frames().iter().map(|f| svm_predict(model, f).map(|p| p == -1)).collect::<Result<_>>()?;
        let kept = keep.iter().filter(|&&k| k).count();
        let removed = bag.num_frames() - kept;
        stats.frames_removed += removed;
        pct_sum += 100.0 * removed as f64 / bag.num_frames() as f64;
        if kept == 0 {
            stats.bags_dropped += 1;
            continue;
        }
        let frames: Vec<FrameVec> = bag
            .frames()
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(f, _)| f.clone())
            .collect();
        let planted = bag.planted_frame_labels().map(|labels| {
            labels.iter().zip(&keep).filter(|(_, &k)| k).map(|(&l, _)| l).collect::<Vec<u8>>()
        });
        // Filtering can remove every frame that carried the bag grade; the
        // remaining labels then violate max(planted) == mes and are dropped.
        let planted = match planted {
            Some(p) if p.iter().copied().max() != Some(bag.mes()) => {
                stats.planted_labels_dropped += 1;
                None
            }
            other => other,
        };
        bags.push(VideoBag::new(
            bag.video_id().to_string(),
            bag.subject_id().to_string(),
            bag.mes(),
            frames,
            planted,
        )?);
    }
    stats.mean_frame_decrease_pct = pct_sum / stats.bags_before.max(1) as f64;
    Ok((Dataset::new(dataset.dim(), bags)?, stats))
}

/// Flattens a planted-artifact dataset into SVM training data: artifact
/// frames are labeled +1, clean frames -1.
pub fn labeled_frames(planted: &PlantedArtifacts) -> (Vec<FrameVec>, Vec<i8>) {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (bag, mask) in planted.dataset.bags().iter().zip(&planted.artifact_mask) {
        for (frame, &is_artifact) in bag.frames().iter().zip(mask) {
            features.push(frame.clone());
            labels.push(if is_artifact { 1 } else { -1 });
        }
    }
    (features, labels)
}

#[derive(Serialize, Deserialize)]
struct SvmRecord {
    version: u32,
    lambda: f64,
    w: Vec<f64>,
    b: f64,
}

/// Writes the SVM as versioned JSON; floats round-trip exactly.
pub fn save_svm(model: &LinearSvm, path: &Path) -> Result<()> {
    let record = SvmRecord {
        version: SVM_FORMAT_VERSION,
        lambda: model.lambda,
        w: model.w.clone(),
        b: model.b,
    };
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", serde_json::to_string_pretty(&record).expect("svm serializes"))?;
    out.flush()?;
    Ok(())
}

pub fn load_svm(path: &Path) -> Result<LinearSvm> {
    let text = std::fs::read_to_string(path)?;
    let record: SvmRecord =
        serde_json::from_str(&text).map_err(|e| Error::ModelFormat(e.to_string()))?;
    if record.version != SVM_FORMAT_VERSION {
        return Err(Error::ModelFormat(format!("unsupported svm version {}", record.version)));
    }
    if record.w.is_empty() || !record.w.iter().all(|v| v.is_finite()) || !record.b.is_finite() {
        return Err(Error::ModelFormat("bad svm parameters".into()));
    }
    if !(record.lambda.is_finite() && record.lambda > 0.0) {
        return Err(Error::ModelFormat("bad lambda".into()));
    }
    Ok(LinearSvm { w: record.w, b: record.b, lambda: record.lambda })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, plant_artifacts, SyntheticSpec};

    fn artifact_set(seed: u64) -> PlantedArtifacts {
        let spec = SyntheticSpec {
            n_videos: 60,
            frames_min: 10,
            frames_max: 20,
            dim: 8,
            class_mix: [1.0; 4],
            frame_severity_decay: 0.5,
            noise_std: 0.15,
            seed,
        };
        let ds = generate_synthetic(&spec).unwrap();
        plant_artifacts(&ds, 0.3, 0.15, seed.wrapping_add(1)).unwrap()
    }

    #[test]
    fn svm_separates_planted_artifacts() {
        let train = artifact_set(1);
        let test = artifact_set(2);
        let (xs, ys) = labeled_frames(&train);
        let out = train_svm(&xs, &ys, &SvmConfig::default()).unwrap();
        assert!(out.final_objective <= out.initial_objective);

        let (xt, yt) = labeled_frames(&test);
        let correct = xt
            .iter()
            .zip(&yt)
            .filter(|(x, &y)| svm_predict(&out.model, x).unwrap() == y)
            .count();
        let acc = correct as f64 / yt.len() as f64;
        assert!(acc >= 0.9, "held-out accuracy {acc}");
    }

    #[test]
    fn flipped_labels_flip_the_boundary() {
        let train = artifact_set(3);
        let (xs, ys) = labeled_frames(&train);
        let flipped: Vec<i8> = ys.iter().map(|y| -y).collect();
        let a = train_svm(&xs, &ys, &SvmConfig::default()).unwrap().model;
        let b = train_svm(&xs, &flipped, &SvmConfig::default()).unwrap().model;
        for (wa, wb) in a.w.iter().zip(&b.w) {
            assert!((wa + wb).abs() < 1e-9);
        }
        assert!((a.b + b.b).abs() < 1e-9);
    }

    #[test]
    fn training_is_deterministic() {
        let train = artifact_set(4);
        let (xs, ys) = labeled_frames(&train);
        let config = SvmConfig { epochs: 5, ..Default::default() };
        let a = train_svm(&xs, &ys, &config).unwrap().model;
        let b = train_svm(&xs, &ys, &config).unwrap().model;
        assert_eq!(a, b);
    }

    #[test]
    fn single_class_is_rejected() {
        let train = artifact_set(5);
        let (xs, _) = labeled_frames(&train);
        let ys = vec![1i8; xs.len()];
        assert!(train_svm(&xs, &ys, &SvmConfig::default()).is_err());
    }

    #[test]
    fn zero_model_flags_everything() {
        let planted = artifact_set(6);
        let model = LinearSvm { w: vec![0.0; 8], b: 0.0, lambda: 1e-3 };
        let (filtered, stats) = filter_dataset(&planted.dataset, &model).unwrap();
        assert!(filtered.is_empty());
        assert_eq!(stats.bags_dropped, stats.bags_before);
        assert_eq!(stats.frames_removed, stats.frames_before);
        assert!((stats.mean_frame_decrease_pct - 100.0).abs() < 1e-12);
    }

    #[test]
    fn permissive_model_changes_nothing() {
        let planted = artifact_set(7);
        let model = LinearSvm { w: vec![0.0; 8], b: -1.0, lambda: 1e-3 };
        let (filtered, stats) = filter_dataset(&planted.dataset, &model).unwrap();
        assert_eq!(filtered, planted.dataset);
        assert_eq!(stats.frames_removed, 0);
        assert_eq!(stats.mean_frame_decrease_pct, 0.0);
    }

    #[test]
    fn removal_tracks_planted_rate_and_is_idempotent() {
        let train = artifact_set(8);
        let apply = artifact_set(9);
        let (xs, ys) = labeled_frames(&train);
        let model = train_svm(&xs, &ys, &SvmConfig::default()).unwrap().model;

        let planted_rate = 100.0
            * apply.artifact_mask.iter().flatten().filter(|&&a| a).count() as f64
            / apply.dataset.total_frames() as f64;
        let (filtered, stats) = filter_dataset(&apply.dataset, &model).unwrap();
        let removed_pct = 100.0 * stats.frames_removed as f64 / stats.frames_before as f64;
        assert!(
            (removed_pct - planted_rate).abs() <= 5.0,
            "removed {removed_pct:.1}% vs planted {planted_rate:.1}%"
        );

        let (again, second) = filter_dataset(&filtered, &model).unwrap();
        assert_eq!(again, filtered);
        assert_eq!(second.frames_removed, 0);
        assert_eq!(second.bags_dropped, 0);
    }

    #[test]
    fn filtering_preserves_frame_order_and_labels() {
        let planted = artifact_set(10);
        let (xs, ys) = labeled_frames(&planted);
        let model = train_svm(&xs, &ys, &SvmConfig::default()).unwrap().model;
        let (filtered, _) = filter_dataset(&planted.dataset, &model).unwrap();
        for bag in filtered.bags() {
            let original = planted
                .dataset
                .bags()
                .iter()
                .find(|b| b.video_id() == bag.video_id())
                .unwrap();
            assert_eq!(bag.mes(), original.mes());
            // Surviving frames appear in the original order: match as a subsequence.
            let mut cursor = 0;
            for f in bag.frames() {
                let pos = original.frames()[cursor..]
                    .iter()
                    .position(|of| of == f)
                    .expect("filtered frame must come from the original bag");
                cursor += pos + 1;
            }
        }
    }

    #[test]
    fn svm_io_round_trip() {
        let train = artifact_set(11);
        let (xs, ys) = labeled_frames(&train);
        let model = train_svm(&xs, &ys, &SvmConfig { epochs: 3, ..Default::default() })
            .unwrap()
            .model;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("svm.json");
        save_svm(&model, &path).unwrap();
        assert_eq!(load_svm(&path).unwrap(), model);
    }

    #[test]
    fn predict_zero_score_is_artifact() {
        let model = LinearSvm { w: vec![1.0, -1.0], b: 0.0, lambda: 1e-3 };
        let frame = FrameVec::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(svm_score(&model, &frame).unwrap(), 0.0);
        assert_eq!(svm_predict(&model, &frame).unwrap(), 1);
        assert!(svm_score(&model, &FrameVec::new(vec![1.0]).unwrap()).is_err());
    }
}
