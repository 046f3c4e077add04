//! Multi-instance training loops: representative selection under the MIL
//! assumption, binary and regression training with per-bag optimizer steps,
//! and bag-level prediction by max aggregation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{FrameVec, VideoBag};
use crate::error::{Error, Result};
use crate::scorer::{
    adam_step, bce_loss_from_logit, loss_and_grad, AdamState, ForwardTrace, HeadKind, LossKind,
    ParamGrads, ScorerModel, KINK_MARGIN, SMOOTH_L1_BETA,
};

/// Hyperparameters of one MIL training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Hidden layer widths; the input and single-unit output are implied.
    pub hidden_dims: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub loss: LossKind,
    /// Number of top-scoring frames regressed to 0 per class-0 bag.
    pub k_negative: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::InvalidSpec(m.into()));
        if self.epochs < 1 {
            return err("epochs must be >= 1");
        }
        if self.k_negative < 1 {
            return err("k_negative must be >= 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return err("lr must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return err("weight_decay must be nonnegative");
        }
        if self.hidden_dims.iter().any(|&d| d == 0) {
            return err("hidden layer sizes must be >= 1");
        }
        Ok(())
    }

    fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(1);
        dims
    }
}

/// Trained model plus per-epoch diagnostics.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ScorerModel,
    /// Mean per-bag loss for each epoch (each bag's loss is averaged over its
    /// selected representatives before the mean).
    pub epoch_losses: Vec<f64>,
    /// Wall-clock seconds per epoch (0.0 on targets without a monotonic clock).
    pub epoch_seconds: Vec<f64>,
    /// Representatives used per bag in each epoch, indexed by the caller's
    /// bag order.
    pub rep_counts: Vec<Vec<usize>>,
}

#[cfg(not(target_arch = "wasm32"))]
struct Stopwatch(std::time::Instant);
#[cfg(not(target_arch = "wasm32"))]
impl Stopwatch {
    fn start() -> Self {
        Self(std::time::Instant::now())
    }

    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

#[cfg(target_arch = "wasm32")]
struct Stopwatch;
#[cfg(target_arch = "wasm32")]
impl Stopwatch {
    fn start() -> Self {
        Self
    }

    fn seconds(&self) -> f64 {
        0.0
    }
}

/// Scores every frame of a bag with the current model.
pub fn score_bag(model: &ScorerModel, bag: &VideoBag) -> Result<Vec<f64>> {
    bag.frames().iter().map(|f| model.forward(f)).collect()
}

/// Index of the maximal score, lowest index on ties.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Chooses the frames that receive gradient for one bag.
///
/// Positive bags contribute their single argmax frame with target 1.0;
/// negative bags contribute their min(K, F) highest-scoring frames with
/// target 0.0. Ties fall to the lower frame index.
pub fn select_representatives(
    scores: &[f64],
    binary_label: u8,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("scores"));
    }
    if binary_label > 1 {
        return Err(Error::InvalidArgument(format!("binary label {binary_label} not in {{0,1}}")));
    }
    if k < 1 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    if binary_label == 1 {
        return Ok(vec![(argmax(scores), 1.0)]);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.truncate(k.min(scores.len()));
    Ok(order.into_iter().map(|i| (i, 0.0)).collect())
}

fn rep_loss_and_grads(
    model: &ScorerModel,
    trace: &ForwardTrace,
    loss: LossKind,
    target: f64,
) -> Result<(f64, ParamGrads)> {
    match loss {
        // Cross-entropy goes through the logit so saturated sigmoids still
        // produce finite, exact gradients.
        LossKind::Bce => {
            let (l, dz) = bce_loss_from_logit(trace.head_input(), target)?;
            Ok((l, model.backward_from_logit(trace, dz)))
        }
        _ => {
            let (l, dp) = loss_and_grad(loss, trace.score(), target)?;
            Ok((l, model.backward(trace, dp)))
        }
    }
}

/// Shared training loop; `targets_of` turns (bag, scores) into representatives.
fn train_mil<F>(
    bags: &[&VideoBag],
    config: &TrainConfig,
    head: HeadKind,
    mut targets_of: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&VideoBag, &[f64]) -> Result<Vec<(usize, f64)>>,
{
    config.validate()?;
    if bags.is_empty() {
        return Err(Error::EmptyInput("bags"));
    }
    let dim = bags[0].dim();
    for bag in bags {
        if bag.dim() != dim {
            return Err(Error::DimMismatch { expected: dim, actual: bag.dim() });
        }
    }

    let mut model = ScorerModel::init(&config.layer_dims(dim), head, config.seed)?;
    let mut adam = AdamState::new(&model, config.lr, config.weight_decay)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut epoch_seconds = Vec::with_capacity(config.epochs);
    let mut rep_counts = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..bags.len()).collect();

    for _ in 0..config.epochs {
        let watch = Stopwatch::start();
        if config.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let mut counts = vec![0usize; bags.len()];
        let mut loss_sum = 0.0;
        for &bi in &order {
            let bag = bags[bi];
            let scores = score_bag(&model, bag)?;
            let reps = targets_of(bag, &scores)?;
            counts[bi] = reps.len();
            let weight = 1.0 / reps.len() as f64;
            let mut grads = ParamGrads::zeros_like(&model);
            let mut bag_loss = 0.0;
            for (fi, target) in reps {
                let trace = model.forward_trace(&bag.frames()[fi])?;
                let (l, g) = rep_loss_and_grads(&model, &trace, config.loss, target)?;
                bag_loss += weight * l;
                grads.add_scaled(&g, weight);
            }
            adam_step(&mut model, &grads, &mut adam)?;
            loss_sum += bag_loss;
        }
        epoch_losses.push(loss_sum / bags.len() as f64);
        epoch_seconds.push(watch.seconds());
        rep_counts.push(counts);
    }
    Ok(TrainOutcome { model, epoch_losses, epoch_seconds, rep_counts })
}

/// Trains a sigmoid-head scorer on binary bag labels.
///
/// Each epoch rescans the bags (shuffled when configured); every bag is scored
/// with the current model, representatives are selected, and one Adam step is
/// taken on the mean representative loss. Gradient flows only through the
/// selected frames.
pub fn train_binary_mil(bags: &[(&VideoBag, u8)], config: &TrainConfig) -> Result<TrainOutcome> {
    if config.loss != LossKind::Bce {
        return Err(Error::InvalidSpec("binary MIL trains with the BCE loss".into()));
    }
    if bags.iter().any(|(_, l)| *l > 1) {
        return Err(Error::InvalidArgument("labels must be binary".into()));
    }
    let labels: std::collections::HashMap<&str, u8> =
        bags.iter().map(|(b, l)| (b.video_id(), *l)).collect();
    let refs: Vec<&VideoBag> = bags.iter().map(|(b, _)| *b).collect();
    let k = config.k_negative;
    train_mil(&refs, config, HeadKind::Sigmoid, move |bag, scores| {
        select_representatives(scores, labels[bag.video_id()], k)
    })
}

/// Trains a linear-head scorer to regress bag severity.
///
/// Grade-0 bags use top-K selection toward target 0.0; all other bags regress
/// their single argmax frame toward the grade as a real number. Losses are
/// taken on the unclipped output so gradients never vanish outside [0,3].
pub fn train_regression_mil(bags: &[&VideoBag], config: &TrainConfig) -> Result<TrainOutcome> {
    if config.loss == LossKind::Bce {
        return Err(Error::InvalidSpec("regression MIL requires a regression loss, not BCE".into()));
    }
    let k = config.k_negative;
    train_mil(bags, config, HeadKind::Linear, move |bag, scores| {
        let reps = select_representatives(scores, u8::from(bag.mes() > 0), k)?;
        Ok(reps.into_iter().map(|(i, _)| (i, f64::from(bag.mes()))).collect())
    })
}

/// Max-aggregated bag prediction: the bag probability is the maximum frame
/// score, attributed to the lowest-index argmax frame; the class is 1 iff the
/// probability reaches the threshold.
pub fn predict_video_binary(
    model: &ScorerModel,
    bag: &VideoBag,
    threshold: f64,
) -> Result<(f64, usize, u8)> {
    if model.head() != HeadKind::Sigmoid {
        return Err(Error::InvalidArgument("binary prediction needs a sigmoid head".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside [0,1]")));
    }
    let scores = score_bag(model, bag)?;
    let v = argmax(&scores);
    let p_v = scores[v];
    Ok((p_v, v, u8::from(p_v >= threshold)))
}

/// Finite-difference check of the full bag-level gradient path: loss is taken
/// on the maximum frame score, so perturbations rescore every frame and re-take
/// the max. Returns the worst relative error over all parameters.
///
/// Rejected with [`Error::NonDifferentiable`] when the argmax could flip under
/// perturbation (top-two gap below [`KINK_MARGIN`]) or when the argmax frame's
/// path sits on a kink, mirroring [`crate::scorer::gradient_check`].
pub fn max_path_gradient_check(
    model: &ScorerModel,
    frames: &[FrameVec],
    kind: LossKind,
    target: f64,
) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("frames"));
    }
    if model.num_params() >= 10_000 {
        return Err(Error::InvalidArgument("gradient check needs < 10^4 parameters".into()));
    }
    let scores: Vec<f64> = frames.iter().map(|f| model.forward(f)).collect::<Result<_>>()?;
    let v = argmax(&scores);
    if scores.len() > 1 {
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if sorted[0] - sorted[1] < KINK_MARGIN {
            return Err(Error::NonDifferentiable("argmax not stable under perturbation"));
        }
    }
    let trace = model.forward_trace(&frames[v])?;
    if trace.hidden_preactivations().any(|z| z.abs() < KINK_MARGIN) {
        return Err(Error::NonDifferentiable("hidden preactivation at rectifier kink"));
    }
    let pred = trace.score();
    match kind {
        LossKind::Mae if (pred - target).abs() < KINK_MARGIN => {
            return Err(Error::NonDifferentiable("MAE at zero residual"));
        }
        LossKind::SmoothL1 if ((pred - target).abs() - SMOOTH_L1_BETA).abs() < KINK_MARGIN => {
            return Err(Error::NonDifferentiable("smooth-L1 regime boundary"));
        }
        _ => {}
    }
    let (_, dloss) = loss_and_grad(kind, pred, target)?;
    let analytic = model.backward(&trace, dloss);
    crate::scorer::fd_compare_max_path(model, frames, kind, target, &analytic)
}
