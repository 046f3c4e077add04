//! WebAssembly bindings for the interactive playground page. Every export
//! takes plain numbers and returns a JSON string, so the same functions run
//! natively under `cargo test` and in the browser via wasm-bindgen.

use ordmil_core::dataset::{generate_synthetic, SyntheticSpec};
use ordmil_core::metrics::{cohen_kappa_quadratic, roc_auc, ConfusionMatrix};
use ordmil_core::mil::{predict_video_binary, TrainConfig};
use ordmil_core::ordinal::{
    aggregate_convert, aggregate_sum, aggregate_threshold, bin_ordinal, ensemble_frame_triples,
    grid_search_ordinal_thresholds, train_ensemble, BinaryThresholds, FrameTriple,
    OrdinalThresholds,
};
use ordmil_core::scorer::{clip_score, LossKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::wasm_bindgen;

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).unwrap_or_else(|e| error_json(&e.to_string()))
}

fn error_json(message: &str) -> String {
    #[derive(Serialize)]
    struct ErrorOut<'a> {
        error: &'a str,
    }
    serde_json::to_string(&ErrorOut { error: message }).unwrap()
}

#[derive(Serialize)]
struct AggregateOut {
    convert_probs: [f64; 4],
    convert_class: u8,
    threshold_votes: [bool; 3],
    threshold_class: u8,
    sum_q: f64,
    sum_class: u8,
}

/// One frame triple through all three aggregation methods: the Convert
/// distribution and its argmax, the Threshold votes at (t1, t2, t3), and the
/// summed score binned at the ordinal edges (e0, e1, e2).
#[wasm_bindgen]
pub fn aggregate_demo(
    p_gt0: f64,
    p_gt1: f64,
    p_gt2: f64,
    t1: f64,
    t2: f64,
    t3: f64,
    e0: f64,
    e1: f64,
    e2: f64,
) -> String {
    let triple = match FrameTriple::new(p_gt0, p_gt1, p_gt2) {
        Ok(t) => t,
        Err(e) => return error_json(&e.to_string()),
    };
    let bt = match BinaryThresholds::new(t1, t2, t3) {
        Ok(t) => t,
        Err(e) => return error_json(&e.to_string()),
    };
    let ot = match OrdinalThresholds::new(e0, e1, e2) {
        Ok(t) => t,
        Err(e) => return error_json(&e.to_string()),
    };
    let (convert_class, convert_probs) = aggregate_convert(&triple);
    let q = aggregate_sum(&triple);
    let sum_class = match bin_ordinal(q, &ot) {
        Ok(c) => c,
        Err(e) => return error_json(&e.to_string()),
    };
    to_json(&AggregateOut {
        convert_probs,
        convert_class,
        threshold_votes: [p_gt0 >= t1, p_gt1 >= t2, p_gt2 >= t3],
        threshold_class: aggregate_threshold(&triple, &bt),
        sum_q: q,
        sum_class,
    })
}

fn demo_spec(seed: u64, n_videos: usize, noise_std: f64) -> SyntheticSpec {
    SyntheticSpec {
        n_videos,
        frames_min: 10,
        frames_max: 30,
        dim: 8,
        class_mix: [167.0, 220.0, 492.0, 1002.0],
        frame_severity_decay: 1.0,
        noise_std,
        seed,
    }
}

#[derive(Serialize)]
struct TrainOut {
    n_videos: usize,
    total_frames: usize,
    /// Per-epoch mean loss, one curve per ensemble member.
    losses: [Vec<f64>; 3],
    /// In-sample video-level AUC of each member against its own relabeling.
    aucs: [f64; 3],
    /// Mean (p>0, p>1, p>2) over frames, grouped by planted frame label.
    class_mean_triples: [[f64; 3]; 4],
}

/// Trains the three-member ensemble on a small seeded synthetic set and
/// reports loss curves, in-sample AUCs, and per-class mean frame triples.
#[wasm_bindgen]
pub fn train_demo(
    seed: u32,
    n_videos: u32,
    epochs: u32,
    hidden: u32,
    k_negative: u32,
    lr: f64,
) -> String {
    let n_videos = n_videos.clamp(8, 200) as usize;
    let epochs = epochs.clamp(1, 150) as usize;
    let hidden = hidden.min(64) as usize;
    let k_negative = k_negative.clamp(1, 50) as usize;
    if !(lr.is_finite() && (1e-5..=0.1).contains(&lr)) {
        return error_json("learning rate must lie in [1e-5, 0.1]");
    }

    let dataset = match generate_synthetic(&demo_spec(u64::from(seed), n_videos, 0.25)) {
        Ok(d) => d,
        Err(e) => return error_json(&e.to_string()),
    };
    let bags: Vec<_> = dataset.bags().iter().collect();
    let member = |m: u64| TrainConfig {
        hidden_dims: if hidden == 0 { vec![] } else { vec![hidden] },
        epochs,
        lr,
        weight_decay: 1e-2,
        loss: LossKind::Bce,
        k_negative,
        seed: u64::from(seed).wrapping_mul(31).wrapping_add(m),
        shuffle: true,
    };
    let outcome = match train_ensemble(&bags, &[member(4), member(5), member(8)]) {
        Ok(o) => o,
        Err(e) => return error_json(&e.to_string()),
    };

    let mut aucs = [0.0; 3];
    for m in 0..3 {
        let model = outcome.ensemble.member(m);
        let mut scores = Vec::with_capacity(bags.len());
        let mut labels = Vec::with_capacity(bags.len());
        for bag in &bags {
            let (p, _, _) = match predict_video_binary(model, bag, 0.5) {
                Ok(r) => r,
                Err(e) => return error_json(&e.to_string()),
            };
            scores.push(p);
            labels.push(u8::from(bag.mes() > m as u8));
        }
        aucs[m] = match roc_auc(&scores, &labels) {
            Ok(a) => a,
            Err(e) => return error_json(&e.to_string()),
        };
    }

    let mut sums = [[0.0f64; 3]; 4];
    let mut counts = [0usize; 4];
    for bag in &bags {
        let triples = match ensemble_frame_triples(&outcome.ensemble, bag) {
            Ok(t) => t,
            Err(e) => return error_json(&e.to_string()),
        };
        let planted = bag.planted_frame_labels().expect("synthetic bags carry labels");
        for (triple, &label) in triples.iter().zip(planted) {
            let [a, b, c] = triple.as_array();
            let cell = &mut sums[label as usize];
            cell[0] += a;
            cell[1] += b;
            cell[2] += c;
            counts[label as usize] += 1;
        }
    }
    let mut class_mean_triples = [[0.0; 3]; 4];
    for (mean, (sum, &count)) in class_mean_triples.iter_mut().zip(sums.iter().zip(&counts)) {
        if count > 0 {
            for (m, s) in mean.iter_mut().zip(sum) {
                *m = s / count as f64;
            }
        }
    }

    to_json(&TrainOut {
        n_videos: dataset.len(),
        total_frames: dataset.total_frames(),
        losses: [
            outcome.member_outcomes[0].epoch_losses.clone(),
            outcome.member_outcomes[1].epoch_losses.clone(),
            outcome.member_outcomes[2].epoch_losses.clone(),
        ],
        aucs,
        class_mean_triples,
    })
}

#[derive(Serialize)]
struct RebinOut {
    /// Per-video summed scores (clipped max q), grouped by true grade.
    scores_by_class: [Vec<f64>; 4],
    /// Quadratic weighted kappa at the requested edges.
    kappa: f64,
    confusion: [[u64; 4]; 4],
    /// Best edges found by the 0.05-step grid search, for reference.
    best_edges: [f64; 3],
    best_kappa: f64,
}

/// Synthesizes noisy ensemble outputs for a seeded dataset, then bins each
/// video's summed score at the requested ordinal edges: the confusion matrix
/// and kappa respond live as the edges move.
#[wasm_bindgen]
pub fn rebin_demo(seed: u32, n_videos: u32, noise: f64, t0: f64, t1: f64, t2: f64) -> String {
    let n_videos = n_videos.clamp(8, 400) as usize;
    if !(noise.is_finite() && (0.0..=0.5).contains(&noise)) {
        return error_json("noise must lie in [0, 0.5]");
    }
    let ot = match OrdinalThresholds::new(t0, t1, t2) {
        Ok(t) => t,
        Err(e) => return error_json(&e.to_string()),
    };
    let dataset = match generate_synthetic(&demo_spec(u64::from(seed), n_videos, 0.25)) {
        Ok(d) => d,
        Err(e) => return error_json(&e.to_string()),
    };

    // Pseudo-predictions: correct-side member probabilities plus uniform
    // noise, so the score clusters blur as the noise slider rises.
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed).wrapping_add(1));
    let mut scored: Vec<(f64, u8)> = Vec::with_capacity(dataset.len());
    for bag in dataset.bags() {
        let q_max = bag
            .planted_frame_labels()
            .expect("synthetic bags carry labels")
            .iter()
            .map(|&l| {
                let mut member = |hit: bool| -> f64 {
                    let base: f64 = if hit { 0.9 } else { 0.1 };
                    (base + rng.random_range(-1.0..1.0) * noise).clamp(0.0, 1.0)
                };
                member(l > 0) + member(l > 1) + member(l > 2)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        match clip_score(q_max) {
            Ok(s) => scored.push((s, bag.mes())),
            Err(e) => return error_json(&e.to_string()),
        }
    }

    let mut scores_by_class: [Vec<f64>; 4] = Default::default();
    let mut cm = ConfusionMatrix::new(4).expect("4 classes");
    for &(score, mes) in &scored {
        scores_by_class[mes as usize].push(score);
        let class = match bin_ordinal(score, &ot) {
            Ok(c) => c,
            Err(e) => return error_json(&e.to_string()),
        };
        if let Err(e) = cm.record(mes, class) {
            return error_json(&e.to_string());
        }
    }
    let kappa = match cohen_kappa_quadratic(&cm) {
        Ok(k) => k,
        Err(e) => return error_json(&e.to_string()),
    };
    let best = match grid_search_ordinal_thresholds(&scored, 0.05) {
        Ok(b) => b,
        Err(e) => return error_json(&e.to_string()),
    };

    let mut confusion = [[0u64; 4]; 4];
    for (t, row) in confusion.iter_mut().enumerate() {
        for (p, cell) in row.iter_mut().enumerate() {
            *cell = cm.count(t, p);
        }
    }
    to_json(&RebinOut {
        scores_by_class,
        kappa,
        confusion,
        best_edges: best.thresholds.as_array(),
        best_kappa: best.kappa,
    })
}
