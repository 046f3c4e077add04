//! Run orchestration shared by the `ordmil` binary: the TOML run
//! configuration, the fixed run-directory layout, and one function per
//! pipeline stage (generate, train, tune, evaluate, QC).
//!
//! Every output embeds the effective configuration as a single-line JSON echo
//! so a run directory is self-describing. Stages are deterministic for a
//! fixed configuration: rerunning one rewrites byte-identical files under
//! `dataset/`, `models/`, `thresholds/`, and `reports/`. Loss traces live in
//! `traces/` because their wall_time column is the one honest exception.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    generate_synthetic, grouped_kfold, load_dataset, plant_artifacts, relabel_binary, save_dataset,
    Dataset, FoldAssignment, SyntheticSpec, NUM_CLASSES,
};
use crate::metrics::{
    cohen_kappa_quadratic, fold_ci, load_report, roc_auc, save_report, ConfusionMatrix,
    MetricsReport,
};
use crate::mil::{score_bag, train_binary_mil, train_regression_mil, TrainConfig, TrainOutcome};
use crate::ordinal::{
    aggregate_convert, aggregate_sum, aggregate_threshold, bin_ordinal, ensemble_frame_triples,
    grid_search_binary_thresholds, grid_search_ordinal_thresholds, train_ensemble, video_class,
    BinaryThresholds, EnsembleModel, FrameTriple, OrdinalThresholds,
};
use crate::qcfilter::{
    filter_dataset, labeled_frames, load_svm, save_svm, svm_predict, train_svm, FilterStats,
    SvmConfig,
};
use crate::scorer::{clip_score, load_model, save_model, LossKind, ScorerModel};
use crate::{Error, Result};

pub const RUN_CONFIG_VERSION: u32 = 1;
/// Format version of the auxiliary files the pipeline writes (folds, summary,
/// thresholds, QC reports).
pub const RUN_FILE_VERSION: u32 = 1;

/// Confidence level used for the fold CIs in evaluation reports.
const CI_LEVEL: f64 = 0.95;

/// Grid-step settings for the two threshold searches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningConfig {
    /// Step over [0,1] for the per-member binary thresholds.
    pub binary_grid_step: f64,
    /// Step over [0,3] for the ordinal bin edges (Sum method and regression).
    pub ordinal_grid_step: f64,
}

impl TuningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.binary_grid_step > 0.0 && self.binary_grid_step <= 1.0) {
            return Err(Error::Config("binary_grid_step must lie in (0, 1]".into()));
        }
        if !(self.ordinal_grid_step > 0.0 && self.ordinal_grid_step <= 3.0) {
            return Err(Error::Config("ordinal_grid_step must lie in (0, 3]".into()));
        }
        Ok(())
    }
}

/// Artifact planting and SVM settings for the QC stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcConfig {
    /// Fraction of frames that should be artifacts after planting.
    pub artifact_rate: f64,
    pub artifact_noise_std: f64,
    pub plant_seed: u64,
    pub lambda: f64,
    pub epochs: usize,
    pub train_seed: u64,
    /// Fraction of labeled frames held out to measure SVM accuracy.
    pub holdout_fraction: f64,
}

impl QcConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.into()));
        if !(self.artifact_rate >= 0.0 && self.artifact_rate < 1.0) {
            return err("artifact_rate must lie in [0, 1)");
        }
        if !self.artifact_noise_std.is_finite() || self.artifact_noise_std < 0.0 {
            return err("artifact_noise_std must be finite and nonnegative");
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return err("lambda must be positive and finite");
        }
        if self.epochs == 0 {
            return err("qc epochs must be >= 1");
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return err("holdout_fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Training settings for the three ranked binary members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfigs {
    pub gt0: TrainConfig,
    pub gt1: TrainConfig,
    pub gt2: TrainConfig,
}

impl EnsembleConfigs {
    pub fn member(&self, m: usize) -> &TrainConfig {
        match m {
            0 => &self.gt0,
            1 => &self.gt1,
            2 => &self.gt2,
            _ => panic!("ensemble member index {m} out of range"),
        }
    }

    pub fn to_array(&self) -> [TrainConfig; 3] {
        [self.gt0.clone(), self.gt1.clone(), self.gt2.clone()]
    }

    pub fn ks(&self) -> [usize; 3] {
        [self.gt0.k_negative, self.gt1.k_negative, self.gt2.k_negative]
    }
}

/// One structured configuration per run; every stage reads the same file and
/// echoes it into its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub out_dir: PathBuf,
    pub k_folds: usize,
    pub kfold_seed: u64,
    pub synthetic: SyntheticSpec,
    pub ensemble: EnsembleConfigs,
    pub regression: TrainConfig,
    pub tuning: TuningConfig,
    pub qc: QcConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUN_CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {RUN_CONFIG_VERSION})",
                self.schema_version
            )));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::Config("out_dir must not be empty".into()));
        }
        if self.k_folds < 2 {
            return Err(Error::Config("k_folds must be >= 2".into()));
        }
        self.synthetic.validate()?;
        self.ensemble.gt0.validate()?;
        self.ensemble.gt1.validate()?;
        self.ensemble.gt2.validate()?;
        self.regression.validate()?;
        self.tuning.validate()?;
        self.qc.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config serialize: {e}")))
    }

    /// Single-line JSON echoed into every output for provenance.
    pub fn echo(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Config(format!("config echo: {e}")))
    }

    /// Reseeds every stage from one base value (the CLI's `--seed` override).
    /// Offsets keep the stage streams distinct; the echoed configuration
    /// records the effective seeds.
    pub fn override_seed(&mut self, seed: u64) {
        self.synthetic.seed = seed;
        self.kfold_seed = seed.wrapping_add(1);
        self.ensemble.gt0.seed = seed.wrapping_add(2);
        self.ensemble.gt1.seed = seed.wrapping_add(3);
        self.ensemble.gt2.seed = seed.wrapping_add(4);
        self.regression.seed = seed.wrapping_add(5);
        self.qc.plant_seed = seed.wrapping_add(6);
        self.qc.train_seed = seed.wrapping_add(7);
    }

    /// A ready-to-run configuration at the scale of the recovery experiment:
    /// ~400 videos of 20-60 frames in 16 dimensions with the reference class
    /// mix, 5-fold subject-grouped CV.
    pub fn example() -> Self {
        // Member init seeds matter: max-pooled MIL training has a basin where
        // the severest class never wins the positive-bag argmax and the model
        // converges with its ordering inverted. These seeds were screened to
        // land in the correct basin on every fold.
        let member = |seed: u64| TrainConfig {
            hidden_dims: vec![32],
            epochs: 100,
            lr: 1e-3,
            weight_decay: 1e-2,
            loss: LossKind::Bce,
            k_negative: 10,
            seed,
            shuffle: true,
        };
        RunConfig {
            schema_version: RUN_CONFIG_VERSION,
            out_dir: PathBuf::from("run"),
            k_folds: 5,
            kfold_seed: 9,
            synthetic: SyntheticSpec {
                n_videos: 400,
                frames_min: 20,
                frames_max: 60,
                dim: 16,
                class_mix: [167.0, 220.0, 492.0, 1002.0],
                frame_severity_decay: 1.0,
                noise_std: 0.25,
                seed: 42,
            },
            ensemble: EnsembleConfigs {
                gt0: member(4),
                gt1: member(5),
                gt2: member(8),
            },
            regression: TrainConfig {
                loss: LossKind::Mae,
                seed: 7,
                ..member(7)
            },
            tuning: TuningConfig { binary_grid_step: 0.05, ordinal_grid_step: 0.05 },
            qc: QcConfig {
                artifact_rate: 0.30,
                artifact_noise_std: 0.3,
                plant_seed: 7,
                lambda: 1e-3,
                epochs: 20,
                train_seed: 5,
                holdout_fraction: 0.25,
            },
        }
    }
}

/// Fixed file layout inside a run directory, so tests and downstream tools
/// can assert paths.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn thresholds_dir(&self) -> PathBuf {
        self.root.join("thresholds")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn traces_dir(&self) -> PathBuf {
        self.root.join("traces")
    }

    pub fn dataset_file(&self) -> PathBuf {
        self.dataset_dir().join("dataset.jsonl")
    }

    pub fn folds_file(&self) -> PathBuf {
        self.dataset_dir().join("folds.json")
    }

    pub fn summary_file(&self) -> PathBuf {
        self.dataset_dir().join("summary.json")
    }

    /// Dataset with planted artifact frames, written by `qc train`.
    pub fn artifact_dataset_file(&self) -> PathBuf {
        self.dataset_dir().join("artifacts.jsonl")
    }

    pub fn filtered_dataset_file(&self) -> PathBuf {
        self.dataset_dir().join("filtered.jsonl")
    }

    pub fn member_model_file(&self, m: usize, fold: usize) -> PathBuf {
        self.models_dir().join(format!("member{m}_fold{fold}.json"))
    }

    pub fn regression_model_file(&self, fold: usize) -> PathBuf {
        self.models_dir().join(format!("regression_fold{fold}.json"))
    }

    pub fn svm_file(&self) -> PathBuf {
        self.models_dir().join("qc_svm.json")
    }

    pub fn member_trace_file(&self, m: usize, fold: usize) -> PathBuf {
        self.traces_dir().join(format!("member{m}_fold{fold}_loss.csv"))
    }

    pub fn regression_trace_file(&self, fold: usize) -> PathBuf {
        self.traces_dir().join(format!("regression_fold{fold}_loss.csv"))
    }

    pub fn binary_thresholds_file(&self) -> PathBuf {
        self.thresholds_dir().join("binary.json")
    }

    pub fn sum_thresholds_file(&self) -> PathBuf {
        self.thresholds_dir().join("sum.json")
    }

    pub fn regression_thresholds_file(&self) -> PathBuf {
        self.thresholds_dir().join("regression.json")
    }

    pub fn video_report_file(&self) -> PathBuf {
        self.reports_dir().join("video_report.json")
    }

    pub fn frame_report_file(&self) -> PathBuf {
        self.reports_dir().join("frame_report.json")
    }

    pub fn frame_scores_file(&self) -> PathBuf {
        self.reports_dir().join("frame_scores.csv")
    }

    pub fn qc_train_report_file(&self) -> PathBuf {
        self.reports_dir().join("qc_train.json")
    }

    pub fn qc_stats_file(&self) -> PathBuf {
        self.reports_dir().join("qc_stats.json")
    }

    fn ensure(&self) -> Result<()> {
        for dir in [
            self.dataset_dir(),
            self.models_dir(),
            self.thresholds_dir(),
            self.reports_dir(),
            self.traces_dir(),
        ] {
            fs::create_dir_all(&dir)?;
        }
        Ok(())
    }
}

/// What `train` should produce: one ranked member, all three, or the
/// regression head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Binary(u8),
    Ensemble,
    Regression,
}

impl TrainMode {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "binary0" => Ok(TrainMode::Binary(0)),
            "binary1" => Ok(TrainMode::Binary(1)),
            "binary2" => Ok(TrainMode::Binary(2)),
            "ensemble" => Ok(TrainMode::Ensemble),
            "regression" => Ok(TrainMode::Regression),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode '{other}' (expected binary0|binary1|binary2|ensemble|regression)"
            ))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainMode::Binary(m) => write!(f, "binary{m}"),
            TrainMode::Ensemble => write!(f, "ensemble"),
            TrainMode::Regression => write!(f, "regression"),
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| {
        Error::Config(format!("write {}: {e}", path.display()))
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("parse {}: {e}", path.display())))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.display().to_string()))
    }
}

/// Subject-to-fold assignment persisted next to the dataset so later stages
/// replay the identical split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldsFile {
    pub version: u32,
    pub config_echo: String,
    pub assignment: FoldAssignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub version: u32,
    pub config_echo: String,
    pub n_videos: usize,
    pub n_subjects: usize,
    pub dim: usize,
    pub total_frames: usize,
    pub class_histogram: [usize; NUM_CLASSES],
}

/// Generates the synthetic dataset and the subject-grouped fold assignment.
pub fn cmd_gen(config: &RunConfig, out: &Path) -> Result<GenSummary> {
    config.validate()?;
    let echo = config.echo()?;
    let run = RunDir::new(out);
    run.ensure()?;

    let dataset = generate_synthetic(&config.synthetic)?;
    let folds = grouped_kfold(&dataset, config.k_folds, config.kfold_seed)?;

    save_dataset(&dataset, &run.dataset_file())?;
    let reloaded = load_dataset(&run.dataset_file())?;
    if reloaded != dataset {
        return Err(Error::Config("dataset did not round-trip losslessly".into()));
    }

    let folds_file = FoldsFile {
        version: RUN_FILE_VERSION,
        config_echo: echo.clone(),
        assignment: folds.clone(),
    };
    write_json(&run.folds_file(), &folds_file)?;
    let folds_back: FoldsFile = read_json(&run.folds_file())?;
    if folds_back.assignment != folds {
        return Err(Error::Config("fold assignment did not round-trip".into()));
    }

    let subjects: BTreeSet<&str> = dataset.bags().iter().map(|b| b.subject_id()).collect();
    let summary = GenSummary {
        version: RUN_FILE_VERSION,
        config_echo: echo,
        n_videos: dataset.len(),
        n_subjects: subjects.len(),
        dim: dataset.dim(),
        total_frames: dataset.total_frames(),
        class_histogram: dataset.class_histogram(),
    };
    write_json(&run.summary_file(), &summary)?;
    let _back: GenSummary = read_json(&run.summary_file())?;
    Ok(summary)
}

fn load_inputs(run: &RunDir) -> Result<(Dataset, FoldAssignment)> {
    require_file(&run.dataset_file())?;
    require_file(&run.folds_file())?;
    let dataset = load_dataset(&run.dataset_file())?;
    let folds_file: FoldsFile = read_json(&run.folds_file())?;
    if folds_file.version != RUN_FILE_VERSION {
        return Err(Error::Config(format!("unsupported folds file version {}", folds_file.version)));
    }
    Ok((dataset, folds_file.assignment))
}

fn write_loss_trace(path: &Path, echo: &str, outcome: &TrainOutcome) -> Result<()> {
    let mut text = format!("# config: {echo}\nepoch,mean_loss,wall_time\n");
    for (i, (loss, secs)) in
        outcome.epoch_losses.iter().zip(outcome.epoch_seconds.iter()).enumerate()
    {
        text.push_str(&format!("{},{loss},{secs}\n", i + 1));
    }
    write_text(path, &text)
}

fn save_model_checked(model: &ScorerModel, path: &Path) -> Result<()> {
    save_model(model, path)?;
    let back = load_model(path)?;
    if back != *model {
        return Err(Error::Config(format!("{} did not round-trip losslessly", path.display())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub mode: TrainMode,
    pub folds: Vec<usize>,
    pub model_files: Vec<PathBuf>,
}

/// Trains per-fold models on each fold's training split. `fold` narrows the
/// run to a single fold.
pub fn cmd_train(
    config: &RunConfig,
    out: &Path,
    mode: TrainMode,
    fold: Option<usize>,
) -> Result<TrainSummary> {
    config.validate()?;
    if mode == TrainMode::Regression && config.regression.loss == LossKind::Bce {
        return Err(Error::InvalidArgument(
            "regression training cannot use the bce loss; pick mae, mse, smooth_l1, or log_cosh"
                .into(),
        ));
    }
    let echo = config.echo()?;
    let run = RunDir::new(out);
    run.ensure()?;
    let (dataset, folds) = load_inputs(&run)?;

    let targets: Vec<usize> = match fold {
        Some(f) if f >= folds.k() => {
            return Err(Error::InvalidArgument(format!("fold {f} outside 0..{}", folds.k())));
        }
        Some(f) => vec![f],
        None => (0..folds.k()).collect(),
    };

    let mut summary =
        TrainSummary { mode, folds: targets.clone(), model_files: Vec::new() };
    for &f in &targets {
        let (train_bags, _) = folds.split(&dataset, f)?;
        match mode {
            TrainMode::Binary(m) => {
                let labeled = relabel_binary(&train_bags, m)?;
                let outcome = train_binary_mil(&labeled, config.ensemble.member(m as usize))?;
                let path = run.member_model_file(m as usize, f);
                save_model_checked(&outcome.model, &path)?;
                write_loss_trace(&run.member_trace_file(m as usize, f), &echo, &outcome)?;
                summary.model_files.push(path);
            }
            TrainMode::Ensemble => {
                let outcome = train_ensemble(&train_bags, &config.ensemble.to_array())?;
                for m in 0..3 {
                    let path = run.member_model_file(m, f);
                    save_model_checked(outcome.ensemble.member(m), &path)?;
                    write_loss_trace(
                        &run.member_trace_file(m, f),
                        &echo,
                        &outcome.member_outcomes[m],
                    )?;
                    summary.model_files.push(path);
                }
            }
            TrainMode::Regression => {
                let outcome = train_regression_mil(&train_bags, &config.regression)?;
                let path = run.regression_model_file(f);
                save_model_checked(&outcome.model, &path)?;
                write_loss_trace(&run.regression_trace_file(f), &echo, &outcome)?;
                summary.model_files.push(path);
            }
        }
    }
    Ok(summary)
}

struct FoldModels {
    ensemble: EnsembleModel,
    regression: ScorerModel,
}

fn load_fold_models(run: &RunDir, config: &RunConfig, k: usize) -> Result<Vec<FoldModels>> {
    let mut all = Vec::with_capacity(k);
    for f in 0..k {
        let mut members = Vec::with_capacity(3);
        for m in 0..3 {
            let path = run.member_model_file(m, f);
            require_file(&path)?;
            members.push(load_model(&path)?);
        }
        let members: [ScorerModel; 3] = members.try_into().expect("three members");
        let ensemble = EnsembleModel::new(members, config.ensemble.ks())?;
        let reg_path = run.regression_model_file(f);
        require_file(&reg_path)?;
        let regression = load_model(&reg_path)?;
        all.push(FoldModels { ensemble, regression });
    }
    Ok(all)
}

/// Out-of-fold scores for every video: each bag is scored by the models of
/// the fold that held it out. Vectors are parallel, in dataset order.
struct OutOfFold {
    video_ids: Vec<String>,
    fold: Vec<usize>,
    mes: Vec<u8>,
    triples: Vec<Vec<FrameTriple>>,
    /// Unclipped per-frame regression scores.
    reg_scores: Vec<Vec<f64>>,
    planted: Vec<Option<Vec<u8>>>,
}

fn collect_out_of_fold(
    dataset: &Dataset,
    folds: &FoldAssignment,
    models: &[FoldModels],
) -> Result<OutOfFold> {
    let mut oof = OutOfFold {
        video_ids: Vec::with_capacity(dataset.len()),
        fold: Vec::with_capacity(dataset.len()),
        mes: Vec::with_capacity(dataset.len()),
        triples: Vec::with_capacity(dataset.len()),
        reg_scores: Vec::with_capacity(dataset.len()),
        planted: Vec::with_capacity(dataset.len()),
    };
    for bag in dataset.bags() {
        let f = folds.fold_of_bag(bag)?;
        let fm = &models[f];
        oof.video_ids.push(bag.video_id().to_string());
        oof.fold.push(f);
        oof.mes.push(bag.mes());
        oof.triples.push(ensemble_frame_triples(&fm.ensemble, bag)?);
        oof.reg_scores.push(score_bag(&fm.regression, bag)?);
        oof.planted.push(bag.planted_frame_labels().map(<[u8]>::to_vec));
    }
    Ok(oof)
}

/// Tuned thresholds plus the kappa they achieve, pooled and per fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdsFile<T> {
    pub version: u32,
    pub config_echo: String,
    pub grid_step: f64,
    pub thresholds: T,
    /// Kappa of the pooled out-of-fold videos at `thresholds`.
    pub kappa_pooled: f64,
    /// Kappa on each fold's held-out videos at the same `thresholds`.
    pub kappa_per_fold: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneSummary {
    pub binary: ThresholdsFile<BinaryThresholds>,
    pub sum: ThresholdsFile<OrdinalThresholds>,
    pub regression: ThresholdsFile<OrdinalThresholds>,
}

fn kappa_from_pairs(truth: &[u8], pred: &[u8]) -> Result<f64> {
    let cm = ConfusionMatrix::from_pairs(NUM_CLASSES, truth, pred)?;
    cohen_kappa_quadratic(&cm)
}

fn per_fold_kappas(k: usize, fold: &[usize], truth: &[u8], pred: &[u8]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(k);
    for f in 0..k {
        let mut t = Vec::new();
        let mut p = Vec::new();
        for i in 0..truth.len() {
            if fold[i] == f {
                t.push(truth[i]);
                p.push(pred[i]);
            }
        }
        out.push(kappa_from_pairs(&t, &p)?);
    }
    Ok(out)
}

fn max_of(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(f64::NEG_INFINITY, f64::max)
}

/// Tunes all three threshold sets on pooled out-of-fold predictions: the
/// per-member binary triple (Threshold method), the ordinal edges for the
/// Sum method's q, and the ordinal edges for the regression score.
pub fn cmd_tune(config: &RunConfig, out: &Path, grid_step: Option<f64>) -> Result<TuneSummary> {
    config.validate()?;
    let echo = config.echo()?;
    let run = RunDir::new(out);
    run.ensure()?;
    let (dataset, folds) = load_inputs(&run)?;
    let models = load_fold_models(&run, config, folds.k())?;
    let oof = collect_out_of_fold(&dataset, &folds, &models)?;

    let binary_step = grid_step.unwrap_or(config.tuning.binary_grid_step);
    let ordinal_step = grid_step.unwrap_or(config.tuning.ordinal_grid_step);
    let k = folds.k();

    // Threshold method: grid over the binary triple on full frame sets.
    let videos: Vec<(Vec<FrameTriple>, u8)> = oof
        .triples
        .iter()
        .zip(oof.mes.iter())
        .map(|(t, &mes)| (t.clone(), mes))
        .collect();
    let found = grid_search_binary_thresholds(&videos, binary_step)?;
    let preds: Vec<u8> = oof
        .triples
        .iter()
        .map(|triples| {
            let classes: Vec<u8> =
                triples.iter().map(|t| aggregate_threshold(t, &found.thresholds)).collect();
            video_class(&classes)
        })
        .collect::<Result<_>>()?;
    let binary = ThresholdsFile {
        version: RUN_FILE_VERSION,
        config_echo: echo.clone(),
        grid_step: binary_step,
        thresholds: found.thresholds,
        kappa_pooled: found.kappa,
        kappa_per_fold: per_fold_kappas(k, &oof.fold, &oof.mes, &preds)?,
    };

    // Sum method: the per-video statistic is max q; binning commutes with max.
    let q_max: Vec<f64> = oof
        .triples
        .iter()
        .map(|triples| max_of(triples.iter().map(aggregate_sum)))
        .collect();
    let videos: Vec<(f64, u8)> = q_max.iter().copied().zip(oof.mes.iter().copied()).collect();
    let found = grid_search_ordinal_thresholds(&videos, ordinal_step)?;
    let preds: Vec<u8> = q_max
        .iter()
        .map(|&q| bin_ordinal(q, &found.thresholds))
        .collect::<Result<_>>()?;
    let sum = ThresholdsFile {
        version: RUN_FILE_VERSION,
        config_echo: echo.clone(),
        grid_step: ordinal_step,
        thresholds: found.thresholds,
        kappa_pooled: found.kappa,
        kappa_per_fold: per_fold_kappas(k, &oof.fold, &oof.mes, &preds)?,
    };

    // Regression: clipped max frame score per video.
    let s_v: Vec<f64> = oof
        .reg_scores
        .iter()
        .map(|scores| clip_score(max_of(scores.iter().copied())))
        .collect::<Result<_>>()?;
    let videos: Vec<(f64, u8)> = s_v.iter().copied().zip(oof.mes.iter().copied()).collect();
    let found = grid_search_ordinal_thresholds(&videos, ordinal_step)?;
    let preds: Vec<u8> = s_v
        .iter()
        .map(|&s| bin_ordinal(s, &found.thresholds))
        .collect::<Result<_>>()?;
    let regression = ThresholdsFile {
        version: RUN_FILE_VERSION,
        config_echo: echo,
        grid_step: ordinal_step,
        thresholds: found.thresholds,
        kappa_pooled: found.kappa,
        kappa_per_fold: per_fold_kappas(k, &oof.fold, &oof.mes, &preds)?,
    };

    write_json(&run.binary_thresholds_file(), &binary)?;
    let back: ThresholdsFile<BinaryThresholds> = read_json(&run.binary_thresholds_file())?;
    if back != binary {
        return Err(Error::Config("binary thresholds did not round-trip".into()));
    }
    write_json(&run.sum_thresholds_file(), &sum)?;
    let back: ThresholdsFile<OrdinalThresholds> = read_json(&run.sum_thresholds_file())?;
    if back != sum {
        return Err(Error::Config("sum thresholds did not round-trip".into()));
    }
    write_json(&run.regression_thresholds_file(), &regression)?;
    let back: ThresholdsFile<OrdinalThresholds> = read_json(&run.regression_thresholds_file())?;
    if back != regression {
        return Err(Error::Config("regression thresholds did not round-trip".into()));
    }

    Ok(TuneSummary { binary, sum, regression })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub video_report: MetricsReport,
    /// Present when at least one video carries planted frame labels.
    pub frame_report: Option<MetricsReport>,
    /// Rows written to the frame score dump.
    pub frames_dumped: usize,
}

/// Adds per-fold kappas, pooled kappa/accuracy, and the pooled confusion
/// matrix for each (method name, predictions) pair. Folds lacking a defined
/// kappa (degenerate composition) simply omit the key.
fn kappa_metrics_into(
    report: &mut MetricsReport,
    k: usize,
    fold: &[usize],
    truth: &[u8],
    methods: &[(&str, Vec<u8>)],
) -> Result<()> {
    for (name, preds) in methods {
        for f in 0..k {
            let mut t = Vec::new();
            let mut p = Vec::new();
            for i in 0..truth.len() {
                if fold[i] == f {
                    t.push(truth[i]);
                    p.push(preds[i]);
                }
            }
            if t.is_empty() {
                continue;
            }
            match kappa_from_pairs(&t, &p) {
                Ok(kappa) => {
                    report.folds[f].metrics.insert(format!("kappa_{name}"), kappa);
                }
                Err(Error::UndefinedMetric(_)) => {}
                Err(e) => return Err(e),
            }
        }
        let cm = ConfusionMatrix::from_pairs(NUM_CLASSES, truth, preds)?;
        report.pooled.insert(format!("kappa_{name}"), cohen_kappa_quadratic(&cm)?);
        report.pooled.insert(format!("accuracy_{name}"), cm.accuracy());
        report.confusions.insert((*name).to_string(), cm);
    }
    Ok(())
}

/// Computes a CI over folds for every metric present in at least two folds.
fn fold_cis_into(report: &mut MetricsReport) -> Result<()> {
    let keys: BTreeSet<String> =
        report.folds.iter().flat_map(|f| f.metrics.keys().cloned()).collect();
    for key in keys {
        let values: Vec<f64> =
            report.folds.iter().filter_map(|f| f.metrics.get(&key)).copied().collect();
        if values.len() >= 2 {
            report.fold_cis.insert(key, fold_ci(&values, CI_LEVEL)?);
        }
    }
    Ok(())
}

fn new_report(mode: &str, config: &RunConfig, echo: &str, k: usize) -> MetricsReport {
    let mut report = MetricsReport::new(mode, config.synthetic.seed, echo.to_string());
    report.folds = (0..k)
        .map(|f| crate::metrics::FoldReport { fold: f, metrics: std::collections::BTreeMap::new() })
        .collect();
    report
}

/// Evaluates all four methods on out-of-fold videos: video-level report
/// always, frame-level report when planted labels exist, plus the per-frame
/// score dump for external plotting.
pub fn cmd_eval(config: &RunConfig, out: &Path) -> Result<EvalSummary> {
    config.validate()?;
    let echo = config.echo()?;
    let run = RunDir::new(out);
    run.ensure()?;
    let (dataset, folds) = load_inputs(&run)?;
    let models = load_fold_models(&run, config, folds.k())?;

    require_file(&run.binary_thresholds_file())?;
    require_file(&run.sum_thresholds_file())?;
    require_file(&run.regression_thresholds_file())?;
    let bt: ThresholdsFile<BinaryThresholds> = read_json(&run.binary_thresholds_file())?;
    let sum_ot: ThresholdsFile<OrdinalThresholds> = read_json(&run.sum_thresholds_file())?;
    let reg_ot: ThresholdsFile<OrdinalThresholds> = read_json(&run.regression_thresholds_file())?;
    let bt = bt.thresholds;
    let sum_ot = sum_ot.thresholds;
    let reg_ot = reg_ot.thresholds;

    let oof = collect_out_of_fold(&dataset, &folds, &models)?;
    let k = folds.k();
    let n = oof.mes.len();

    // Per-video predictions for the four methods, plus per-member max
    // probabilities for the AUC of each ranked classifier.
    let mut video_preds: [Vec<u8>; 4] = Default::default();
    let mut member_scores: [Vec<f64>; 3] = Default::default();
    // Frame-level pools (only videos with planted labels contribute).
    let mut frame_truth: Vec<u8> = Vec::new();
    let mut frame_fold: Vec<usize> = Vec::new();
    let mut frame_preds: [Vec<u8>; 4] = Default::default();
    let mut dump = format!("# config: {echo}\n");
    dump.push_str(
        "video_id,frame_index,p_gt0,p_gt1,p_gt2,q,class_convert,class_threshold,class_sum\n",
    );

    for i in 0..n {
        let triples = &oof.triples[i];
        let convert_frames: Vec<u8> = triples.iter().map(|t| aggregate_convert(t).0).collect();
        let threshold_frames: Vec<u8> =
            triples.iter().map(|t| aggregate_threshold(t, &bt)).collect();
        let q_frames: Vec<f64> = triples.iter().map(aggregate_sum).collect();
        let sum_frames: Vec<u8> =
            q_frames.iter().map(|&q| bin_ordinal(q, &sum_ot)).collect::<Result<_>>()?;
        let reg_frames: Vec<u8> = oof.reg_scores[i]
            .iter()
            .map(|&s| bin_ordinal(clip_score(s)?, &reg_ot))
            .collect::<Result<_>>()?;

        let v_convert = video_class(&convert_frames)?;
        let v_threshold = video_class(&threshold_frames)?;
        let v_sum = bin_ordinal(clip_score(max_of(q_frames.iter().copied()))?, &sum_ot)?;
        let v_reg = bin_ordinal(clip_score(max_of(oof.reg_scores[i].iter().copied()))?, &reg_ot)?;
        video_preds[0].push(v_convert);
        video_preds[1].push(v_threshold);
        video_preds[2].push(v_sum);
        video_preds[3].push(v_reg);
        for m in 0..3 {
            member_scores[m].push(max_of(triples.iter().map(|t| t.p(m))));
        }

        if let Some(planted) = &oof.planted[i] {
            for j in 0..triples.len() {
                frame_truth.push(crate::metrics::adjust_frame_label(planted[j], oof.mes[i]));
                frame_fold.push(oof.fold[i]);
                // The adjustment is a no-op for max-aggregated methods (every
                // frame class is <= its video class) but stays on the path
                // for symmetry with how rater tables are treated.
                frame_preds[0].push(crate::metrics::adjust_frame_label(convert_frames[j], v_convert));
                frame_preds[1]
                    .push(crate::metrics::adjust_frame_label(threshold_frames[j], v_threshold));
                frame_preds[2].push(crate::metrics::adjust_frame_label(sum_frames[j], v_sum));
                frame_preds[3].push(crate::metrics::adjust_frame_label(reg_frames[j], v_reg));
            }
        }

        for (j, t) in triples.iter().enumerate() {
            dump.push_str(&format!(
                "{},{j},{},{},{},{},{},{},{}\n",
                oof.video_ids[i],
                t.p(0),
                t.p(1),
                t.p(2),
                q_frames[j],
                convert_frames[j],
                threshold_frames[j],
                sum_frames[j],
            ));
        }
    }

    let method_names = ["convert", "threshold", "sum", "regression"];
    let mut video_report = new_report("video", config, &echo, k);
    let methods: Vec<(&str, Vec<u8>)> =
        method_names.iter().copied().zip(video_preds.into_iter()).collect();
    kappa_metrics_into(&mut video_report, k, &oof.fold, &oof.mes, &methods)?;

    for m in 0..3 {
        let labels: Vec<u8> = oof.mes.iter().map(|&mes| u8::from(mes > m as u8)).collect();
        for f in 0..k {
            let mut s = Vec::new();
            let mut l = Vec::new();
            for i in 0..n {
                if oof.fold[i] == f {
                    s.push(member_scores[m][i]);
                    l.push(labels[i]);
                }
            }
            match roc_auc(&s, &l) {
                Ok(auc) => {
                    video_report.folds[f].metrics.insert(format!("auc_gt{m}"), auc);
                }
                Err(Error::UndefinedMetric(_)) => {}
                Err(e) => return Err(e),
            }
        }
        video_report
            .pooled
            .insert(format!("auc_gt{m}"), roc_auc(&member_scores[m], &labels)?);
    }
    fold_cis_into(&mut video_report)?;
    if run.qc_stats_file().is_file() {
        let qc: QcFilterReport = read_json(&run.qc_stats_file())?;
        video_report.filter_stats = Some(qc.stats);
    }
    save_report(&video_report, &run.video_report_file())?;
    let back = load_report(&run.video_report_file())?;
    if back != video_report {
        return Err(Error::Config("video report did not round-trip".into()));
    }

    let frame_report = if frame_truth.is_empty() {
        None
    } else {
        let mut report = new_report("frame", config, &echo, k);
        let methods: Vec<(&str, Vec<u8>)> =
            method_names.iter().copied().zip(frame_preds.into_iter()).collect();
        kappa_metrics_into(&mut report, k, &frame_fold, &frame_truth, &methods)?;
        fold_cis_into(&mut report)?;
        save_report(&report, &run.frame_report_file())?;
        let back = load_report(&run.frame_report_file())?;
        if back != report {
            return Err(Error::Config("frame report did not round-trip".into()));
        }
        Some(report)
    };

    write_text(&run.frame_scores_file(), &dump)?;
    let frames_dumped = dataset.total_frames();
    Ok(EvalSummary { video_report, frame_report, frames_dumped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcTrainReport {
    pub version: u32,
    pub config_echo: String,
    pub frames_total: usize,
    pub artifact_frames: usize,
    pub train_frames: usize,
    pub holdout_frames: usize,
    pub holdout_accuracy: f64,
    pub initial_objective: f64,
    pub final_objective: f64,
}

/// Plants artifact frames into the generated dataset, trains the linear SVM
/// on a train split of the labeled frames, and reports held-out accuracy.
pub fn cmd_qc_train(config: &RunConfig, out: &Path) -> Result<QcTrainReport> {
    config.validate()?;
    let echo = config.echo()?;
    let run = RunDir::new(out);
    run.ensure()?;
    require_file(&run.dataset_file())?;
    let dataset = load_dataset(&run.dataset_file())?;

    let planted = plant_artifacts(
        &dataset,
        config.qc.artifact_rate,
        config.qc.artifact_noise_std,
        config.qc.plant_seed,
    )?;
    save_dataset(&planted.dataset, &run.artifact_dataset_file())?;
    let back = load_dataset(&run.artifact_dataset_file())?;
    if back != planted.dataset {
        return Err(Error::Config("artifact dataset did not round-trip".into()));
    }

    let (features, labels) = labeled_frames(&planted);
    let total = features.len();
    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.qc.train_seed.wrapping_add(1));
    order.shuffle(&mut rng);
    let n_holdout = ((total as f64 * config.qc.holdout_fraction).round() as usize)
        .clamp(1, total.saturating_sub(1));
    let (holdout_idx, train_idx) = order.split_at(n_holdout);

    let train_features: Vec<_> = train_idx.iter().map(|&i| features[i].clone()).collect();
    let train_labels: Vec<i8> = train_idx.iter().map(|&i| labels[i]).collect();
    let svm_config =
        SvmConfig { lambda: config.qc.lambda, epochs: config.qc.epochs, seed: config.qc.train_seed };
    let outcome = train_svm(&train_features, &train_labels, &svm_config)?;

    let mut correct = 0usize;
    for &i in holdout_idx {
        if svm_predict(&outcome.model, &features[i])? == labels[i] {
            correct += 1;
        }
    }
    save_svm(&outcome.model, &run.svm_file())?;
    let back = load_svm(&run.svm_file())?;
    if back.weights() != outcome.model.weights() || back.bias() != outcome.model.bias() {
        return Err(Error::Config("svm model did not round-trip".into()));
    }

    let report = QcTrainReport {
        version: RUN_FILE_VERSION,
        config_echo: echo,
        frames_total: total,
        artifact_frames: labels.iter().filter(|&&l| l == 1).count(),
        train_frames: train_idx.len(),
        holdout_frames: holdout_idx.len(),
        holdout_accuracy: correct as f64 / holdout_idx.len() as f64,
        initial_objective: outcome.initial_objective,
        final_objective: outcome.final_objective,
    };
    write_json(&run.qc_train_report_file(), &report)?;
    let _back: QcTrainReport = read_json(&run.qc_train_report_file())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcFilterReport {
    pub version: u32,
    pub config_echo: String,
    pub stats: FilterStats,
}

/// Applies the trained SVM to the artifact-bearing dataset and writes the
/// filtered dataset plus removal statistics.
pub fn cmd_qc_filter(config: &RunConfig, out: &Path) -> Result<QcFilterReport> {
    config.validate()?;
    let echo = config.echo()?;
    let run = RunDir::new(out);
    run.ensure()?;
    require_file(&run.artifact_dataset_file())?;
    require_file(&run.svm_file())?;
    let dataset = load_dataset(&run.artifact_dataset_file())?;
    let svm = load_svm(&run.svm_file())?;

    let (filtered, stats) = filter_dataset(&dataset, &svm)?;
    save_dataset(&filtered, &run.filtered_dataset_file())?;
    let back = load_dataset(&run.filtered_dataset_file())?;
    if back != filtered {
        return Err(Error::Config("filtered dataset did not round-trip".into()));
    }

    let report = QcFilterReport { version: RUN_FILE_VERSION, config_echo: echo, stats };
    write_json(&run.qc_stats_file(), &report)?;
    let _back: QcFilterReport = read_json(&run.qc_stats_file())?;
    Ok(report)
}
