//! Experiment runner: configs, evaluation, reports, sweeps and self-checks.
//!
//! A run trains every configured model for every seed (and every sweep
//! value), evaluates each one on the clean test set with Monte Carlo
//! dropout, and scores two prediction rules: the argmax of the mean
//! predictive distribution (`standard`) and the gain-maximizing class
//! (`optimal`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gen_diabetes, Dataset, MnistConfig, MnistSource, Split, SynthConfig};
use crate::decision::{
    class_gains, confusion_matrix, expected_utility, optimal_for_probs, shape_gain, UtilityMatrix,
    UtilityRows,
};
use crate::error::{Error, Result};
use crate::gradcheck::{gradient_suite, library_logit_grad, LogitGrad, SuiteResult};
use crate::nn::{NetworkParams, ProbVector, RngState, Stream};
use crate::objective::RegularizerConfig;
use crate::oracle::{kl_check, KlCheckReport};
use crate::trainer::{
    save_checkpoint, train, EpochRecord, LossKind, LrSchedule, ModelConfig, TrainConfig,
    UtilitySpec,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Threshold on the identity residual and the Jensen slack.
pub const KL_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    /// `seed` is replaced by the run seed.
    Diabetes(SynthConfig),
    Mnist(MnistConfig),
}

impl DataConfig {
    fn name(&self) -> &'static str {
        match self {
            DataConfig::Diabetes(_) => "diabetes",
            DataConfig::Mnist(_) => "mnist",
        }
    }

    fn classes(&self) -> usize {
        match self {
            DataConfig::Diabetes(_) => 3,
            DataConfig::Mnist(_) => 10,
        }
    }
}

/// Weight decay, with the lengthscale form resolved against the training
/// set size and dropout rate of each run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerSpec {
    Lengthscale(f64),
    WeightDecay(f64),
}

impl RegularizerSpec {
    pub fn resolve(&self, dropout_rate: f64, dataset_size: usize) -> RegularizerConfig {
        match *self {
            RegularizerSpec::Lengthscale(lengthscale) => RegularizerConfig::Lengthscale {
                lengthscale,
                dropout_rate,
                dataset_size,
            },
            RegularizerSpec::WeightDecay(d) => RegularizerConfig::WeightDecay(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub lr: LrSchedule,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_train_samples")]
    pub mc_samples: usize,
    pub regularizer: RegularizerSpec,
}

fn default_train_samples() -> usize {
    10
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Standard,
    Weighted,
    Lc,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Standard => "standard",
            ModelKind::Weighted => "weighted",
            ModelKind::Lc => "lc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// Argmax of the mean predictive distribution.
    Standard,
    /// Maximizer of the conditional gain.
    Optimal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Monte Carlo dropout passes per test input.
    pub mc_samples: usize,
    /// Mode whose expected utility is used for summaries and orderings;
    /// both modes are always reported.
    pub mode: PredictionMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mc_samples: 100,
            mode: PredictionMode::Optimal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    HiddenSize,
    Noise,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::HiddenSize => "hidden_size",
            SweepAxis::Noise => "noise",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepAxis::HiddenSize => vec![2.0, 5.0, 10.0, 20.0, 50.0, 100.0],
            SweepAxis::Noise => vec![0.0, 0.1, 0.25, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    #[serde(default)]
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub train: TrainSettings,
    #[serde(default = "all_models")]
    pub models: Vec<ModelKind>,
    /// Class weights of the weighted baseline.
    #[serde(default)]
    pub alphas: Option<Vec<f64>>,
    pub utility: UtilitySpec,
    #[serde(default)]
    pub shift: f64,
    #[serde(default)]
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

fn default_name() -> String {
    "experiment".into()
}

fn all_models() -> Vec<ModelKind> {
    vec![ModelKind::Standard, ModelKind::Weighted, ModelKind::Lc]
}

fn field_error(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::InvalidConfig(format!("field `{field}`: {msg}"))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn utility(&self) -> Result<UtilityMatrix> {
        self.utility.resolve(self.shift)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(field_error(
                "schema_version",
                format!(
                    "unsupported version {} (expected {SCHEMA_VERSION})",
                    self.schema_version
                ),
            ));
        }
        if self.seeds.is_empty() {
            return Err(field_error("seeds", "seed list must not be empty"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(field_error("seeds", "seeds must be distinct"));
        }
        if self.models.is_empty() {
            return Err(field_error("models", "at least one model is required"));
        }
        let utility = self.utility().map_err(|e| field_error("utility", e))?;
        let classes = self.data.classes();
        if utility.classes() != classes {
            return Err(field_error(
                "utility",
                format!(
                    "{} classes, but {} data has {classes}",
                    utility.classes(),
                    self.data.name()
                ),
            ));
        }
        if self.models.contains(&ModelKind::Weighted) {
            match &self.alphas {
                None => {
                    return Err(field_error(
                        "alphas",
                        "required when the weighted model is listed",
                    ))
                }
                Some(a) if a.len() != classes => {
                    return Err(field_error(
                        "alphas",
                        format!("{} weights for {classes} classes", a.len()),
                    ))
                }
                Some(a) if a.iter().any(|v| !(v.is_finite() && *v > 0.0)) => {
                    return Err(field_error("alphas", "weights must be positive"))
                }
                _ => {}
            }
        }
        match &self.data {
            DataConfig::Diabetes(s) => s.validate().map_err(|e| field_error("data", e))?,
            DataConfig::Mnist(m) => m.validate().map_err(|e| field_error("data", e))?,
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(field_error(
                "model.hidden",
                "hidden widths must be nonempty and positive",
            ));
        }
        self.model
            .dropout()
            .map_err(|e| field_error("model.dropout_rate", e))?;
        if self.eval.mc_samples == 0 {
            return Err(field_error("eval.mc_samples", "must be positive"));
        }
        // Validates the training block with a stand-in dataset size.
        self.train_config(ModelKind::Standard, 0, 1)
            .validate()
            .map_err(|e| field_error("train", e))?;
        if let Some(sweep) = &self.sweep {
            self.check_axis_values(sweep.axis, &self.sweep_values(sweep))?;
        }
        Ok(())
    }

    fn sweep_values(&self, sweep: &SweepConfig) -> Vec<f64> {
        if sweep.values.is_empty() {
            sweep.axis.default_values()
        } else {
            sweep.values.clone()
        }
    }

    fn check_axis_values(&self, axis: SweepAxis, values: &[f64]) -> Result<()> {
        if values.is_empty() {
            return Err(field_error("sweep.values", "must not be empty"));
        }
        for &v in values {
            let ok = match axis {
                SweepAxis::HiddenSize => v >= 1.0 && v.fract() == 0.0,
                SweepAxis::Noise => (0.0..=1.0).contains(&v),
            };
            if !ok {
                return Err(field_error(
                    "sweep.values",
                    format!("{v} is not a valid {}", axis.name()),
                ));
            }
        }
        Ok(())
    }

    /// Training configuration for one model.
    pub fn train_config(&self, kind: ModelKind, seed: u64, dataset_size: usize) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            mc_samples: t.mc_samples,
            loss: match kind {
                ModelKind::Standard => LossKind::Standard,
                ModelKind::Weighted => LossKind::Weighted {
                    alphas: self.alphas.clone().unwrap_or_default(),
                },
                ModelKind::Lc => LossKind::Lc,
            },
            utility: Some(self.utility.clone()),
            shift: self.shift,
            regularizer: t
                .regularizer
                .resolve(self.model.dropout_rate, dataset_size.max(1)),
            seed,
        }
    }

    /// Same config with the seed list replaced.
    pub fn with_seeds(mut self, seeds: Vec<u64>) -> Result<Self> {
        self.seeds = seeds;
        self.validate()?;
        Ok(self)
    }
}

/// Accuracy, expected utility and confusion counts under one prediction rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeMetrics {
    pub accuracy: f64,
    pub expected_utility: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub standard: ModeMetrics,
    pub optimal: ModeMetrics,
    /// Smallest per-example difference between the model-estimated gain of
    /// the optimal and of the standard prediction (never negative).
    pub min_gain_margin: f64,
}

impl Evaluation {
    pub fn mode(&self, mode: PredictionMode) -> &ModeMetrics {
        match mode {
            PredictionMode::Standard => &self.standard,
            PredictionMode::Optimal => &self.optimal,
        }
    }
}

/// Mean Monte Carlo predictive distribution for every example. Each example
/// draws its masks from its own stream, so the result does not depend on
/// the number of threads.
pub fn mc_mean_probs(
    params: &NetworkParams,
    data: &Dataset,
    samples: usize,
    seed: u64,
) -> Result<Vec<ProbVector>> {
    let state = RngState::new(seed);
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = state.with_example(i as u64).rng(Stream::Eval);
            Ok(params.mc_predict(data.input(i), samples, &mut rng)?.mean())
        })
        .collect()
}

fn mode_metrics(preds: &[usize], data: &Dataset, utility: &UtilityMatrix) -> Result<ModeMetrics> {
    let correct = preds
        .iter()
        .zip(data.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(ModeMetrics {
        accuracy: correct as f64 / data.len() as f64,
        expected_utility: expected_utility(preds, data.labels(), utility)?,
        confusion: confusion_matrix(preds, data.labels(), data.classes())?.counts,
    })
}

pub fn evaluate(
    params: &NetworkParams,
    test: &Dataset,
    utility: &UtilityMatrix,
    samples: usize,
    seed: u64,
) -> Result<Evaluation> {
    if utility.classes() != test.classes() || params.classes() != test.classes() {
        return Err(Error::Shape(format!(
            "utility ({}), network ({}) and data ({}) disagree on class count",
            utility.classes(),
            params.classes(),
            test.classes()
        )));
    }
    let probs = mc_mean_probs(params, test, samples, seed)?;
    let mut standard = Vec::with_capacity(probs.len());
    let mut optimal = Vec::with_capacity(probs.len());
    let mut margin = f64::INFINITY;
    for p in &probs {
        let s = p.argmax();
        let o = optimal_for_probs(p, utility)?;
        let q = p.as_slice();
        margin = margin
            .min((shape_gain(o.class, q, utility) - shape_gain(s, q, utility)) * utility.scale());
        standard.push(s);
        optimal.push(o.class);
    }
    Ok(Evaluation {
        standard: mode_metrics(&standard, test, utility)?,
        optimal: mode_metrics(&optimal, test, utility)?,
        min_gain_margin: margin,
    })
}

/// One trained and evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: ModelKind,
    pub seed: u64,
    #[serde(default)]
    pub axis_value: Option<f64>,
    pub evaluation: Evaluation,
    pub epochs: usize,
    pub final_epoch: Option<EpochRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (zero for a single value).
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Stat { mean, std }
    }
}

/// Seed statistics for one (axis value, model) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub model: ModelKind,
    #[serde(default)]
    pub axis_value: Option<f64>,
    pub seeds: usize,
    pub standard_accuracy: Stat,
    pub standard_expected_utility: Stat,
    pub optimal_accuracy: Stat,
    pub optimal_expected_utility: Stat,
    /// Optimal-mode confusion counts summed over seeds.
    pub optimal_confusion: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub name: String,
    pub data: String,
    #[serde(default)]
    pub axis: Option<SweepAxis>,
    pub utility: UtilityRows,
    pub eval_mc_samples: usize,
    pub mode: PredictionMode,
    pub runs: Vec<RunRecord>,
    pub cells: Vec<CellSummary>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn cell(&self, model: ModelKind, axis_value: Option<f64>) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.model == model && c.axis_value == axis_value)
    }

    pub fn runs_for(&self, model: ModelKind) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(move |r| r.model == model)
    }

    /// True when every run's optimal prediction has at least the
    /// model-estimated gain of its standard prediction.
    pub fn gain_check_holds(&self) -> bool {
        self.runs
            .iter()
            .all(|r| r.evaluation.min_gain_margin >= 0.0)
    }

    pub fn write_results_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "axis",
            "axis_value",
            "seed",
            "model",
            "standard_accuracy",
            "standard_expected_utility",
            "optimal_accuracy",
            "optimal_expected_utility",
            "min_gain_margin",
            "final_train_loss",
        ])?;
        let axis = self.axis.map(SweepAxis::name).unwrap_or("");
        for r in &self.runs {
            let e = &r.evaluation;
            w.write_record([
                axis.to_string(),
                r.axis_value.map(|v| v.to_string()).unwrap_or_default(),
                r.seed.to_string(),
                r.model.name().to_string(),
                e.standard.accuracy.to_string(),
                e.standard.expected_utility.to_string(),
                e.optimal.accuracy.to_string(),
                e.optimal.expected_utility.to_string(),
                e.min_gain_margin.to_string(),
                r.final_epoch
                    .map(|f| f.loss.total.to_string())
                    .unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "axis_value",
            "model",
            "seeds",
            "standard_eu_mean",
            "standard_eu_std",
            "optimal_eu_mean",
            "optimal_eu_std",
            "standard_accuracy_mean",
            "optimal_accuracy_mean",
        ])?;
        for c in &self.cells {
            w.write_record([
                c.axis_value.map(|v| v.to_string()).unwrap_or_default(),
                c.model.name().to_string(),
                c.seeds.to_string(),
                c.standard_expected_utility.mean.to_string(),
                c.standard_expected_utility.std.to_string(),
                c.optimal_expected_utility.mean.to_string(),
                c.optimal_expected_utility.std.to_string(),
                c.standard_accuracy.mean.to_string(),
                c.optimal_accuracy.mean.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn summarize(runs: &[RunRecord], classes: usize) -> Vec<CellSummary> {
    let mut groups: BTreeMap<(Option<u64>, ModelKind), Vec<&RunRecord>> = BTreeMap::new();
    for r in runs {
        groups
            .entry((r.axis_value.map(f64::to_bits), r.model))
            .or_default()
            .push(r);
    }
    let mut cells: Vec<CellSummary> = groups
        .into_values()
        .map(|rs| {
            let stat = |f: &dyn Fn(&RunRecord) -> f64| {
                Stat::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            let mut confusion = vec![vec![0u64; classes]; classes];
            for r in &rs {
                for (row, src) in confusion.iter_mut().zip(&r.evaluation.optimal.confusion) {
                    for (a, b) in row.iter_mut().zip(src) {
                        *a += b;
                    }
                }
            }
            CellSummary {
                model: rs[0].model,
                axis_value: rs[0].axis_value,
                seeds: rs.len(),
                standard_accuracy: stat(&|r| r.evaluation.standard.accuracy),
                standard_expected_utility: stat(&|r| r.evaluation.standard.expected_utility),
                optimal_accuracy: stat(&|r| r.evaluation.optimal.accuracy),
                optimal_expected_utility: stat(&|r| r.evaluation.optimal.expected_utility),
                optimal_confusion: confusion,
            }
        })
        .collect();
    cells.sort_by(|a, b| {
        a.axis_value
            .partial_cmp(&b.axis_value)
            .expect("finite axis values")
            .then(a.model.cmp(&b.model))
    });
    cells
}

/// Where the report files go and how many threads run seeds in parallel.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
}

/// Data for one (axis value, seed).
fn build_split(
    cfg: &ExperimentConfig,
    data: &DataConfig,
    mnist: Option<&MnistSource>,
    seed: u64,
) -> Result<Split> {
    match data {
        DataConfig::Diabetes(s) => gen_diabetes(&SynthConfig { seed, ..s.clone() }),
        DataConfig::Mnist(m) => mnist
            .ok_or_else(|| {
                Error::InvalidConfig(format!("{}: MNIST files were not loaded", cfg.name))
            })?
            .split(m, seed),
    }
}

fn uniform_corruption(rho: f64, classes: usize) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|i| {
            (0..classes)
                .map(|j| rho / classes as f64 + if i == j { 1.0 - rho } else { 0.0 })
                .collect()
        })
        .collect()
}

/// The config with one sweep value applied.
fn apply_axis(cfg: &ExperimentConfig, axis: SweepAxis, value: f64) -> ExperimentConfig {
    let mut c = cfg.clone();
    match axis {
        SweepAxis::HiddenSize => {
            let width = value as usize;
            let layers = c.model.hidden.len().max(1);
            c.model.hidden = vec![width; layers];
        }
        SweepAxis::Noise => match &mut c.data {
            DataConfig::Diabetes(s) => s.corruption = uniform_corruption(value, 3),
            DataConfig::Mnist(m) => m.rho = value,
        },
    }
    c
}

fn file_stem(kind: ModelKind, seed: u64, axis: Option<(SweepAxis, f64)>) -> String {
    match axis {
        Some((a, v)) => format!("{}_{}{}_seed{}", kind.name(), a.name(), v, seed),
        None => format!("{}_seed{}", kind.name(), seed),
    }
}

fn run_group(
    cfg: &ExperimentConfig,
    mnist: Option<&MnistSource>,
    axis: Option<(SweepAxis, f64)>,
    seed: u64,
    out: Option<&Path>,
) -> Result<Vec<RunRecord>> {
    let cell_cfg = match axis {
        Some((a, v)) => apply_axis(cfg, a, v),
        None => cfg.clone(),
    };
    let split = build_split(&cell_cfg, &cell_cfg.data, mnist, seed)?;
    let utility = cell_cfg.utility()?;
    cell_cfg
        .models
        .iter()
        .map(|&kind| {
            let tc = cell_cfg.train_config(kind, seed, split.train.len());
            let (params, history) = train(&tc, &cell_cfg.model, &split.train)?;
            let evaluation = evaluate(
                &params,
                &split.test,
                &utility,
                cell_cfg.eval.mc_samples,
                seed,
            )?;
            if let Some(dir) = out {
                let stem = file_stem(kind, seed, axis);
                history.write_csv(&dir.join("history").join(format!("{stem}.csv")))?;
                save_checkpoint(
                    &params,
                    &dir.join("checkpoints").join(format!("{stem}.ckpt")),
                )?;
            }
            Ok(RunRecord {
                model: kind,
                seed,
                axis_value: axis.map(|(_, v)| v),
                evaluation,
                epochs: history.epochs.len(),
                final_epoch: history.last().copied(),
            })
        })
        .collect()
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(field_error("threads", "must be positive")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
            .map(|pool| pool.install(f)),
    }
}

fn execute(
    cfg: &ExperimentConfig,
    axis: Option<(SweepAxis, Vec<f64>)>,
    opts: &RunOptions,
) -> Result<MetricsReport> {
    cfg.validate()?;
    if let Some((a, values)) = &axis {
        cfg.check_axis_values(*a, values)?;
    }
    let out = opts.out_dir.clone().or_else(|| cfg.output_dir.clone());
    if let Some(dir) = &out {
        for sub in ["history", "checkpoints"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(p, e))?;
        }
    }
    let mnist = match &cfg.data {
        DataConfig::Mnist(m) => Some(MnistSource::open(&m.resolved_dir())?),
        DataConfig::Diabetes(_) => None,
    };
    let points: Vec<Option<(SweepAxis, f64)>> = match &axis {
        Some((a, values)) => values.iter().map(|&v| Some((*a, v))).collect(),
        None => vec![None],
    };
    let jobs: Vec<(Option<(SweepAxis, f64)>, u64)> = points
        .iter()
        .flat_map(|&p| cfg.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let results: Vec<Result<Vec<RunRecord>>> = with_pool(opts.threads, || {
        jobs.par_iter()
            .map(|&(p, seed)| run_group(cfg, mnist.as_ref(), p, seed, out.as_deref()))
            .collect()
    })?;
    let mut runs = Vec::new();
    for r in results {
        runs.extend(r?);
    }
    let utility = cfg.utility()?;
    let report = MetricsReport {
        schema_version: SCHEMA_VERSION,
        name: cfg.name.clone(),
        data: cfg.data.name().to_string(),
        axis: axis.as_ref().map(|(a, _)| *a),
        utility: utility.to_rows(),
        eval_mc_samples: cfg.eval.mc_samples,
        mode: cfg.eval.mode,
        cells: summarize(&runs, cfg.data.classes()),
        runs,
    };
    if let Some(dir) = &out {
        let json = dir.join("report.json");
        std::fs::write(&json, report.to_json()?).map_err(|e| Error::io(json, e))?;
        report.write_results_csv(&dir.join("results.csv"))?;
        report.write_summary_csv(&dir.join("summary.csv"))?;
    }
    Ok(report)
}

/// Trains and evaluates every (seed, model) pair. If the config carries a
/// sweep block, the sweep is run instead.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<MetricsReport> {
    match &cfg.sweep {
        Some(s) => execute(cfg, Some((s.axis, cfg.sweep_values(s))), opts),
        None => execute(cfg, None, opts),
    }
}

/// Full grid over `axis` × seeds × models. `values` defaults to the
/// config's sweep values, then to the axis defaults.
pub fn sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: Option<Vec<f64>>,
    opts: &RunOptions,
) -> Result<MetricsReport> {
    let values = values
        .or_else(|| {
            cfg.sweep
                .as_ref()
                .filter(|s| s.axis == axis && !s.values.is_empty())
                .map(|s| s.values.clone())
        })
        .unwrap_or_else(|| axis.default_values());
    execute(cfg, Some((axis, values)), opts)
}

/// Built-in configurations: `diabetes`, `mnist` (half the training labels
/// corrupted) and `mnist-clean`.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let seeds: Vec<u64> = (0..10).collect();
    match name {
        "diabetes" => Ok(ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            name: "diabetes".into(),
            data: DataConfig::Diabetes(SynthConfig {
                test_per_class: 2000,
                noise_std: 0.22,
                corruption: vec![
                    vec![0.95, 0.05, 0.0],
                    vec![0.05, 0.9, 0.05],
                    vec![0.0, 0.05, 0.95],
                ],
                ..SynthConfig::default()
            }),
            model: ModelConfig::default(),
            train: TrainSettings {
                epochs: 200,
                batch_size: 10,
                lr: LrSchedule::Constant { rate: 0.05 },
                momentum: 0.0,
                mc_samples: 10,
                regularizer: RegularizerSpec::WeightDecay(1e-4),
            },
            models: all_models(),
            alphas: Some(vec![1.0, 2.0, 2.0]),
            utility: UtilitySpec::Builtin("diabetes".into()),
            shift: 0.0,
            eval: EvalConfig::default(),
            seeds,
            output_dir: None,
            sweep: None,
        }),
        "mnist" | "mnist-clean" => Ok(ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            name: name.into(),
            data: DataConfig::Mnist(MnistConfig {
                rho: if name == "mnist" { 0.5 } else { 0.0 },
                ..MnistConfig::default()
            }),
            model: ModelConfig {
                hidden: vec![100],
                ..ModelConfig::default()
            },
            train: TrainSettings {
                epochs: 80,
                batch_size: 25,
                lr: LrSchedule::Constant { rate: 0.05 },
                momentum: 0.0,
                mc_samples: 10,
                regularizer: RegularizerSpec::Lengthscale(0.01),
            },
            models: all_models(),
            alphas: Some(
                (0..10)
                    .map(|d| if d == 3 || d == 8 { 2.0 } else { 1.0 })
                    .collect(),
            ),
            utility: UtilitySpec::Builtin("mnist38".into()),
            shift: 0.0,
            eval: EvalConfig::default(),
            seeds,
            output_dir: None,
            sweep: None,
        }),
        other => Err(Error::InvalidConfig(format!(
            "unknown preset {other:?} (expected diabetes, mnist or mnist-clean)"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfCheckReport {
    pub gradients: Vec<SuiteResult>,
    pub kl: KlCheckReport,
    pub kl_passed: bool,
    pub passed: bool,
}

/// Gradient suite against finite differences plus the exact-oracle identity
/// and bound checks.
pub fn selfcheck(seed: u64) -> Result<SelfCheckReport> {
    selfcheck_with(seed, &library_logit_grad)
}

/// [`selfcheck`] with a replaceable analytic logit gradient.
pub fn selfcheck_with(seed: u64, analytic: &LogitGrad<'_>) -> Result<SelfCheckReport> {
    let gradients = gradient_suite(20, seed, analytic)?;
    let kl = kl_check(100, seed)?;
    let kl_passed = kl.max_identity_residual < KL_TOLERANCE
        && kl.max_jensen_excess <= KL_TOLERANCE
        && kl.max_tight_gap < KL_TOLERANCE;
    let passed = kl_passed && gradients.iter().all(SuiteResult::passed);
    Ok(SelfCheckReport {
        gradients,
        kl,
        kl_passed,
        passed,
    })
}

/// Writes `index,label,p_0..,gain_0..,h_star,max_gain` for every example.
pub fn gainmap(
    params: &NetworkParams,
    data: &Dataset,
    utility: &UtilityMatrix,
    samples: usize,
    seed: u64,
    output: &Path,
) -> Result<()> {
    if params.input_dim() != data.dim() {
        return Err(Error::Shape(format!(
            "network expects {} features, data has {}",
            params.input_dim(),
            data.dim()
        )));
    }
    if params.classes() != utility.classes() {
        return Err(Error::Shape(format!(
            "network has {} classes, utility has {}",
            params.classes(),
            utility.classes()
        )));
    }
    let probs = mc_mean_probs(params, data, samples, seed)?;
    let c = utility.classes();
    let mut w = csv::Writer::from_path(output)?;
    let mut header = vec!["index".to_string(), "label".to_string()];
    header.extend((0..c).map(|k| format!("p_{k}")));
    header.extend((0..c).map(|k| format!("gain_{k}")));
    header.extend(["h_star".to_string(), "max_gain".to_string()]);
    w.write_record(&header)?;
    for (i, p) in probs.iter().enumerate() {
        let gains = class_gains(p, utility)?;
        let best = optimal_for_probs(p, utility)?;
        let mut rec = vec![i.to_string(), data.labels()[i].to_string()];
        rec.extend(p.as_slice().iter().map(f64::to_string));
        rec.extend(gains.iter().map(f64::to_string));
        rec.push(best.class.to_string());
        rec.push(gains[best.class].to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(output, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_diabetes() -> ExperimentConfig {
        let mut cfg = preset("diabetes").unwrap();
        cfg.seeds = vec![0, 1];
        cfg.train.epochs = 5;
        cfg.eval.mc_samples = 10;
        if let DataConfig::Diabetes(d) = &mut cfg.data {
            d.test_per_class = 100;
        }
        cfg
    }

    #[test]
    fn presets_validate_and_round_trip() {
        for name in ["diabetes", "mnist", "mnist-clean"] {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(
                ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap(),
                cfg
            );
        }
        assert!(preset("camvid").is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let msg = |cfg: ExperimentConfig| cfg.validate().unwrap_err().to_string();
        let mut cfg = tiny_diabetes();
        cfg.seeds.clear();
        assert!(msg(cfg).contains("`seeds`"));

        let mut cfg = tiny_diabetes();
        cfg.alphas = Some(vec![1.0, 2.0]);
        assert!(msg(cfg).contains("`alphas`"));

        let mut cfg = tiny_diabetes();
        cfg.utility = UtilitySpec::Builtin("mnist38".into());
        assert!(msg(cfg).contains("`utility`"));

        let mut cfg = tiny_diabetes();
        cfg.utility = UtilitySpec::Builtin("nope".into());
        assert!(msg(cfg).contains("`utility`"));

        let mut cfg = tiny_diabetes();
        cfg.train.batch_size = 0;
        assert!(msg(cfg).contains("`train`"));

        let mut cfg = tiny_diabetes();
        cfg.schema_version = 7;
        assert!(msg(cfg).contains("`schema_version`"));

        let mut cfg = tiny_diabetes();
        cfg.sweep = Some(SweepConfig {
            axis: SweepAxis::Noise,
            values: vec![1.5],
        });
        assert!(msg(cfg).contains("`sweep.values`"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v: serde_json::Value =
            serde_json::from_str(&tiny_diabetes().to_json().unwrap()).unwrap();
        v["surprise"] = serde_json::json!(1);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn run_is_deterministic_and_thread_independent() {
        let cfg = tiny_diabetes();
        let a = run(&cfg, &RunOptions::default()).unwrap();
        let b = run(
            &cfg,
            &RunOptions {
                threads: Some(1),
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.runs.len(), 6);
        assert_eq!(a.cells.len(), 3);
        assert!(a.gain_check_holds());
        for r in &a.runs {
            let total: u64 = r.evaluation.optimal.confusion.iter().flatten().sum();
            assert_eq!(total, 300);
        }
        assert_eq!(MetricsReport::from_json(&a.to_json().unwrap()).unwrap(), a);
    }

    #[test]
    fn run_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_diabetes();
        cfg.models = vec![ModelKind::Lc];
        let opts = RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            threads: None,
        };
        let report = run(&cfg, &opts).unwrap();
        let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        assert_eq!(MetricsReport::from_json(&text).unwrap(), report);
        let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2);
        assert!(dir.path().join("history/lc_seed1.csv").exists());
        assert!(dir.path().join("checkpoints/lc_seed0.ckpt").exists());
    }

    #[test]
    fn sweep_covers_the_grid() {
        let mut cfg = tiny_diabetes();
        cfg.models = vec![ModelKind::Standard, ModelKind::Lc];
        let report = sweep(
            &cfg,
            SweepAxis::Noise,
            Some(vec![0.0, 0.5]),
            &RunOptions::default(),
        )
        .unwrap();
        assert_eq!(report.runs.len(), 2 * 2 * 2);
        assert_eq!(report.cells.len(), 4);
        assert!(report.cell(ModelKind::Lc, Some(0.5)).is_some());
        let report = sweep(
            &cfg,
            SweepAxis::HiddenSize,
            Some(vec![3.0]),
            &RunOptions::default(),
        )
        .unwrap();
        assert_eq!(report.cells[0].axis_value, Some(3.0));
        assert!(sweep(
            &cfg,
            SweepAxis::HiddenSize,
            Some(vec![2.5]),
            &RunOptions::default()
        )
        .is_err());
    }

    #[test]
    fn default_axis_values() {
        assert_eq!(SweepAxis::Noise.default_values(), vec![0.0, 0.1, 0.25, 0.5]);
        assert_eq!(
            SweepAxis::HiddenSize.default_values(),
            vec![2.0, 5.0, 10.0, 20.0, 50.0, 100.0]
        );
    }

    #[test]
    fn uniform_corruption_rows() {
        let m = uniform_corruption(0.5, 3);
        assert!((m[0][0] - (0.5 + 0.5 / 3.0)).abs() < 1e-15);
        assert!((m[0][1] - 0.5 / 3.0).abs() < 1e-15);
        assert_eq!(uniform_corruption(0.0, 3)[2], vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn stat_uses_sample_std() {
        let s = Stat::of(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(Stat::of(&[4.0]).std, 0.0);
    }

    #[test]
    fn selfcheck_passes_and_detects_mutation() {
        let report = selfcheck(0).unwrap();
        assert!(report.passed, "{report:?}");
        let flipped =
            |o: &crate::objective::Objective, p: &ProbVector, y: usize, h: Option<usize>| {
                let mut g = o.example(p, y, h)?.2;
                if matches!(o, crate::objective::Objective::LossCalibrated { .. }) {
                    let nll = crate::objective::Objective::Standard.example(p, y, None)?.2;
                    for (gi, ni) in g.iter_mut().zip(nll) {
                        *gi = 2.0 * ni - *gi;
                    }
                }
                Ok(g)
            };
        assert!(!selfcheck_with(0, &flipped).unwrap().passed);
    }

    fn trained_diabetes() -> (NetworkParams, Dataset) {
        let split = gen_diabetes(&SynthConfig::default()).unwrap();
        let cfg = tiny_diabetes();
        let tc = cfg.train_config(ModelKind::Standard, 0, split.train.len());
        let (params, _) = train(&tc, &cfg.model, &split.train).unwrap();
        (params, split.test)
    }

    fn read_rows(path: &Path) -> Vec<Vec<f64>> {
        let mut r = csv::Reader::from_path(path).unwrap();
        r.records()
            .map(|rec| rec.unwrap().iter().map(|f| f.parse().unwrap()).collect())
            .collect()
    }

    #[test]
    fn gainmap_columns() {
        let (params, test) = trained_diabetes();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");

        gainmap(&params, &test, &UtilityMatrix::identity(3), 20, 0, &path).unwrap();
        for row in read_rows(&path) {
            for k in 0..3 {
                assert!((row[2 + k] - row[5 + k]).abs() < 1e-15);
            }
        }

        gainmap(
            &params,
            &test,
            &UtilityMatrix::constant(3, 0.7).unwrap(),
            20,
            0,
            &path,
        )
        .unwrap();
        for row in read_rows(&path) {
            for k in 0..3 {
                assert!((row[5 + k] - 0.7).abs() < 1e-12);
            }
        }

        let table = crate::decision::builtin_utility("diabetes").unwrap();
        gainmap(&params, &test, &table, 20, 0, &path).unwrap();
        let rows = read_rows(&path);
        assert_eq!(rows.len(), test.len());
        assert!(rows.iter().all(|r| r[9] <= 2.0 + 1e-12));

        let wrong = UtilityMatrix::identity(4);
        assert!(matches!(
            gainmap(&params, &test, &wrong, 5, 0, &path),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn evaluate_is_consistent() {
        let (params, test) = trained_diabetes();
        let u = crate::decision::builtin_utility("diabetes").unwrap();
        let e = evaluate(&params, &test, &u, 30, 3).unwrap();
        assert!(e.min_gain_margin >= 0.0);
        assert_eq!(e, evaluate(&params, &test, &u, 30, 3).unwrap());
        // Identity utility: both rules coincide.
        let e = evaluate(&params, &test, &UtilityMatrix::identity(3), 30, 3).unwrap();
        assert_eq!(e.standard, e.optimal);
        assert_eq!(e.standard.accuracy, e.standard.expected_utility);
    }
}
