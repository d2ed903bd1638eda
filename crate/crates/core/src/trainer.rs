//! Minibatch SGD for the three objectives.
//!
//! Loss-calibrated training alternates, every step, between setting each
//! example's optimal prediction `h*` from `T` Monte Carlo dropout passes and
//! taking one gradient step with a fresh dropout mask per example. The
//! decision passes draw from their own random stream, so with a constant
//! utility the training masks (and therefore the parameters) match standard
//! training exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::decision::{
    builtin_utility, optimal_for_probs, optimal_prediction, transform_utility, UtilityMatrix,
};
use crate::error::{Error, Result};
use crate::nn::{
    Activation, DropoutConfig, DropoutMask, Matrix, NetworkParams, ParamGrads, RngState, Stream,
};
use crate::objective::{batch_objective, Batch, LossBreakdown, Objective, RegularizerConfig};

/// Learning rate as a function of the epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant {
        rate: f64,
    },
    /// `initial · gamma^epoch`.
    Exponential {
        initial: f64,
        gamma: f64,
    },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Constant { rate: 0.1 }
    }
}

pub fn lr_at(schedule: &LrSchedule, epoch: usize) -> Result<f64> {
    match *schedule {
        LrSchedule::Constant { rate } if rate > 0.0 && rate.is_finite() => Ok(rate),
        LrSchedule::Exponential { initial, gamma }
            if initial > 0.0 && initial.is_finite() && gamma > 0.0 && gamma.is_finite() =>
        {
            Ok(initial * gamma.powi(epoch.min(i32::MAX as usize) as i32))
        }
        other => Err(Error::InvalidConfig(format!(
            "learning rate and decay must be positive: {other:?}"
        ))),
    }
}

/// Where a utility comes from: a built-in name, explicit rows, or a text
/// grid file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum UtilitySpec {
    Builtin(String),
    Rows(Vec<Vec<f64>>),
    File { file: PathBuf },
}

impl UtilitySpec {
    /// The utility with every entry shifted by `shift`.
    pub fn resolve(&self, shift: f64) -> Result<UtilityMatrix> {
        match self {
            UtilitySpec::Builtin(name) => {
                let base = builtin_utility(name)?;
                if shift == 0.0 {
                    return Ok(base);
                }
                let names = base.class_names().map(<[String]>::to_vec);
                let shifted = transform_utility(&Matrix::from_rows(&base.to_rows().rows)?, shift)?;
                match names {
                    Some(n) => shifted.with_class_names(n),
                    None => Ok(shifted),
                }
            }
            UtilitySpec::Rows(rows) => transform_utility(&Matrix::from_rows(rows)?, shift),
            UtilitySpec::File { file } => UtilityMatrix::load(file, shift),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossKind {
    Standard,
    Weighted { alphas: Vec<f64> },
    Lc,
}

/// Network shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub dropout_rate: f64,
    pub activation: Activation,
    /// Also mask the raw input features (by default only hidden units are
    /// dropped).
    pub drop_inputs: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![20],
            dropout_rate: 0.2,
            activation: Activation::Relu,
            drop_inputs: false,
        }
    }
}

impl ModelConfig {
    pub fn dropout(&self) -> Result<DropoutConfig> {
        DropoutConfig::from_rate(self.dropout_rate, self.drop_inputs)
    }

    pub fn init(&self, input_dim: usize, classes: usize, seed: u64) -> Result<NetworkParams> {
        NetworkParams::init(
            input_dim,
            &self.hidden,
            classes,
            self.activation,
            self.dropout()?,
            &mut RngState::new(seed).rng(Stream::Init),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub lr: LrSchedule,
    #[serde(default)]
    pub momentum: f64,
    /// Monte Carlo passes per example when choosing `h*`.
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    pub loss: LossKind,
    /// Required for `lc`; when present for other losses it is only used
    /// for the training expected-utility column of the history.
    #[serde(default)]
    pub utility: Option<UtilitySpec>,
    #[serde(default)]
    pub shift: f64,
    pub regularizer: RegularizerConfig,
    pub seed: u64,
}

fn default_mc_samples() -> usize {
    10
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.epochs == 0 {
            return invalid("train.epochs must be positive");
        }
        if self.batch_size == 0 {
            return invalid("train.batch_size must be positive");
        }
        if self.mc_samples == 0 {
            return invalid("train.mc_samples must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid("train.momentum must lie in [0, 1)");
        }
        lr_at(&self.lr, 0)?;
        self.regularizer.weight_decay()?;
        match &self.loss {
            LossKind::Lc if self.utility.is_none() => {
                invalid("train.utility is required for the lc loss")
            }
            LossKind::Weighted { alphas }
                if alphas.iter().any(|a| !(a.is_finite() && *a > 0.0)) =>
            {
                invalid("train.loss.alphas must be positive")
            }
            _ => Ok(()),
        }
    }

    pub fn resolved_utility(&self) -> Result<Option<UtilityMatrix>> {
        self.utility
            .as_ref()
            .map(|u| u.resolve(self.shift))
            .transpose()
    }

    pub fn objective(&self) -> Result<Objective> {
        Ok(match &self.loss {
            LossKind::Standard => Objective::Standard,
            LossKind::Weighted { alphas } => Objective::Weighted {
                alphas: alphas.clone(),
            },
            LossKind::Lc => Objective::LossCalibrated {
                utility: self.resolved_utility()?.ok_or_else(|| {
                    Error::InvalidConfig("train.utility is required for the lc loss".into())
                })?,
            },
        })
    }
}

/// Means over one epoch's training passes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Accuracy of the training-pass argmax against the (possibly noisy)
    /// training labels.
    pub accuracy: f64,
    /// Mean utility of the optimal decision under each training pass.
    pub expected_utility: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "epoch",
            "lr",
            "nll",
            "l2",
            "penalty",
            "total",
            "accuracy",
            "expected_utility",
        ])?;
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                r.lr.to_string(),
                r.loss.nll.to_string(),
                r.loss.l2.to_string(),
                r.loss.penalty.to_string(),
                r.loss.total.to_string(),
                r.accuracy.to_string(),
                r.expected_utility
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Default)]
struct EpochTotals {
    examples: usize,
    nll: f64,
    l2: f64,
    penalty: f64,
    correct: usize,
    utility: f64,
}

/// Step-by-step training state.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    objective: Objective,
    eval_utility: Option<UtilityMatrix>,
    data: &'a Dataset,
    params: NetworkParams,
    velocity: ParamGrads,
    state: RngState,
    epoch: usize,
    batch: usize,
    steps: usize,
    order: Vec<usize>,
    totals: EpochTotals,
    history: TrainHistory,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, params: NetworkParams, data: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        if params.input_dim() != data.dim() || params.classes() != data.classes() {
            return Err(Error::Shape(format!(
                "network maps {} inputs to {} classes, data has {} features and {} classes",
                params.input_dim(),
                params.classes(),
                data.dim(),
                data.classes()
            )));
        }
        let objective = cfg.objective()?;
        let eval_utility = cfg.resolved_utility()?;
        match (&objective, &eval_utility) {
            (Objective::Weighted { alphas }, _) if alphas.len() != data.classes() => {
                return Err(Error::Shape(format!(
                    "{} class weights for {} classes",
                    alphas.len(),
                    data.classes()
                )))
            }
            (_, Some(u)) if u.classes() != data.classes() => {
                return Err(Error::Shape(format!(
                    "utility has {} classes, data has {}",
                    u.classes(),
                    data.classes()
                )))
            }
            _ => {}
        }
        let state = RngState::new(cfg.seed);
        let velocity = ParamGrads::zeros_like(&params);
        let mut t = Trainer {
            cfg,
            objective,
            eval_utility,
            data,
            params,
            velocity,
            state,
            epoch: 0,
            batch: 0,
            steps: 0,
            order: Vec::new(),
            totals: EpochTotals::default(),
            history: TrainHistory::default(),
        };
        t.reshuffle();
        Ok(t)
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        self.order = (0..self.data.len()).collect();
        self.order
            .shuffle(&mut self.state.at(self.epoch as u64, 0, 0).rng(Stream::Shuffle));
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// Steps taken so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    fn batches_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.cfg.batch_size)
    }

    /// Runs the next minibatch. Returns its loss, or `None` once all epochs
    /// have completed.
    pub fn step(&mut self) -> Result<Option<LossBreakdown>> {
        if self.is_done() {
            return Ok(None);
        }
        let lr = lr_at(&self.cfg.lr, self.epoch)?;
        let start = self.batch * self.cfg.batch_size;
        let end = (start + self.cfg.batch_size).min(self.data.len());
        let idx = &self.order[start..end];
        let inputs: Vec<&[f64]> = idx.iter().map(|&i| self.data.input(i)).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| self.data.labels()[i]).collect();
        let coords = |j: usize| {
            self.state
                .at(self.epoch as u64, self.batch as u64, j as u64)
        };

        let h_star = match &self.objective {
            Objective::LossCalibrated { utility } => Some(
                inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| {
                        let samples = self.params.mc_predict(
                            x,
                            self.cfg.mc_samples,
                            &mut coords(j).rng(Stream::DecisionMask),
                        )?;
                        Ok(optimal_prediction(&samples, utility)?.class)
                    })
                    .collect::<Result<Vec<usize>>>()?,
            ),
            _ => None,
        };
        let masks: Vec<DropoutMask> = (0..idx.len())
            .map(|j| {
                self.params
                    .sample_mask(&mut coords(j).rng(Stream::TrainMask))
            })
            .collect();

        let out = batch_objective(
            &self.params,
            &self.objective,
            &self.cfg.regularizer,
            Batch {
                inputs: &inputs,
                labels: &labels,
                masks: &masks,
                h_star: h_star.as_deref(),
            },
        )?;
        if !out.loss.is_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch,
                step: self.steps,
                detail: format!("non-finite loss {:?}", out.loss),
            });
        }

        let mu = self.cfg.momentum;
        for (layer, (v, g)) in self
            .params
            .layers_mut()
            .iter_mut()
            .zip(self.velocity.layers.iter_mut().zip(&out.grads.layers))
        {
            let pairs = layer
                .weights
                .as_mut_slice()
                .iter_mut()
                .zip(
                    v.weights
                        .as_mut_slice()
                        .iter_mut()
                        .zip(g.weights.as_slice()),
                )
                .chain(layer.bias.iter_mut().zip(v.bias.iter_mut().zip(&g.bias)));
            for (theta, (vel, &grad)) in pairs {
                *vel = if mu == 0.0 { grad } else { mu * *vel + grad };
                *theta -= lr * *vel;
            }
        }
        if self.params.layers().iter().any(|l| {
            l.weights
                .as_slice()
                .iter()
                .chain(&l.bias)
                .any(|v| !v.is_finite())
        }) {
            return Err(Error::Diverged {
                epoch: self.epoch,
                step: self.steps,
                detail: "parameters became non-finite".into(),
            });
        }

        let n = idx.len();
        let t = &mut self.totals;
        t.examples += n;
        t.nll += out.loss.nll * n as f64;
        t.penalty += out.loss.penalty * n as f64;
        t.l2 += out.loss.l2 * n as f64;
        for (p, &y) in out.probs.iter().zip(&labels) {
            t.correct += usize::from(p.argmax() == y);
            if let Some(u) = &self.eval_utility {
                t.utility += u.get(optimal_for_probs(p, u)?.class, y);
            }
        }

        self.steps += 1;
        self.batch += 1;
        if self.batch == self.batches_per_epoch() {
            self.finish_epoch(lr);
        }
        Ok(Some(out.loss))
    }

    fn finish_epoch(&mut self, lr: f64) {
        let t = std::mem::take(&mut self.totals);
        let n = t.examples as f64;
        self.history.epochs.push(EpochRecord {
            epoch: self.epoch,
            lr,
            loss: LossBreakdown::new(t.nll / n, t.l2 / n, t.penalty / n),
            accuracy: t.correct as f64 / n,
            expected_utility: self.eval_utility.as_ref().map(|_| t.utility / n),
        });
        self.epoch += 1;
        self.batch = 0;
        if !self.is_done() {
            self.reshuffle();
        }
    }

    pub fn run(mut self) -> Result<(NetworkParams, TrainHistory)> {
        while self.step()?.is_some() {}
        Ok((self.params, self.history))
    }
}

/// Initializes a network from `model` (seeded by `cfg.seed`) and trains it.
pub fn train(
    cfg: &TrainConfig,
    model: &ModelConfig,
    data: &Dataset,
) -> Result<(NetworkParams, TrainHistory)> {
    let params = model.init(data.dim(), data.classes(), cfg.seed)?;
    Trainer::new(cfg.clone(), params, data)?.run()
}

const CHECKPOINT_HEADER: &str = "lcbnn-checkpoint 1";

/// Plain-text checkpoint:
///
/// ```text
/// lcbnn-checkpoint 1
/// activation relu
/// keep_prob 0.8
/// drop_inputs false
/// layers 2
/// layer <inputs> <outputs>
/// <one line of `inputs` weights per output unit>
/// <one line of biases>
/// ...
/// ```
///
/// Numbers use Rust's shortest round-trip formatting, so loading restores
/// every parameter exactly.
pub fn checkpoint_to_string(params: &NetworkParams) -> String {
    let mut s = String::new();
    let d = params.dropout();
    let _ = writeln!(s, "{CHECKPOINT_HEADER}");
    let _ = writeln!(s, "activation {}", params.activation().name());
    let _ = writeln!(s, "keep_prob {}", d.keep_prob);
    let _ = writeln!(s, "drop_inputs {}", d.drop_inputs);
    let _ = writeln!(s, "layers {}", params.layers().len());
    let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
    for layer in params.layers() {
        let _ = writeln!(s, "layer {} {}", layer.inputs(), layer.outputs());
        for row in layer.weights.row_iter() {
            let _ = writeln!(s, "{}", join(row));
        }
        let _ = writeln!(s, "{}", join(&layer.bias));
    }
    s
}

struct Lines<'t> {
    path: &'t Path,
    iter: std::str::Lines<'t>,
    offset: usize,
}

impl<'t> Lines<'t> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.offset as u64,
            detail: detail.into(),
        }
    }

    fn next_line(&mut self) -> Result<(usize, &'t str)> {
        let line = self
            .iter
            .next()
            .ok_or_else(|| self.err("unexpected end of checkpoint"))?;
        let at = self.offset;
        self.offset += line.len() + 1;
        Ok((at, line))
    }

    fn keyed(&mut self, key: &str) -> Result<&'t str> {
        let (at, line) = self.next_line()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| Error::Parse {
                path: self.path.to_path_buf(),
                offset: at as u64,
                detail: format!("expected `{key} ...`, found {line:?}"),
            })
    }

    fn numbers<T: std::str::FromStr>(
        &mut self,
        text: &str,
        at: usize,
        expected: usize,
    ) -> Result<Vec<T>> {
        let values: Vec<T> = text
            .split_whitespace()
            .map(|t| t.parse::<T>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                path: self.path.to_path_buf(),
                offset: at as u64,
                detail: format!("bad number in {text:?}"),
            })?;
        if values.len() != expected {
            return Err(Error::Parse {
                path: self.path.to_path_buf(),
                offset: at as u64,
                detail: format!("expected {expected} values, found {}", values.len()),
            });
        }
        Ok(values)
    }
}

pub fn checkpoint_from_str(text: &str, path: &Path) -> Result<NetworkParams> {
    let mut lines = Lines {
        path,
        iter: text.lines(),
        offset: 0,
    };
    let (_, header) = lines.next_line()?;
    if header != CHECKPOINT_HEADER {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            detail: format!("not a checkpoint (header {header:?})"),
        });
    }
    let act = lines.keyed("activation")?;
    let activation = Activation::from_name(act)
        .ok_or_else(|| lines.err(format!("unknown activation {act:?}")))?;
    let keep_prob: f64 = lines
        .keyed("keep_prob")?
        .parse()
        .map_err(|_| lines.err("bad keep_prob"))?;
    let drop_inputs: bool = lines
        .keyed("drop_inputs")?
        .parse()
        .map_err(|_| lines.err("bad drop_inputs"))?;
    let count: usize = lines
        .keyed("layers")?
        .parse()
        .map_err(|_| lines.err("bad layer count"))?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let at = lines.offset;
        let dims = lines.keyed("layer")?;
        let dims: Vec<usize> = lines.numbers(dims, at, 2)?;
        let (inputs, outputs) = (dims[0], dims[1]);
        let mut data = Vec::with_capacity(inputs * outputs);
        for _ in 0..outputs {
            let (at, line) = lines.next_line()?;
            data.extend(lines.numbers::<f64>(line, at, inputs)?);
        }
        let (at, line) = lines.next_line()?;
        let bias = lines.numbers::<f64>(line, at, outputs)?;
        layers.push(crate::nn::Dense::new(
            Matrix::new(outputs, inputs, data)?,
            bias,
        )?);
    }
    NetworkParams::new(
        layers,
        activation,
        DropoutConfig {
            keep_prob,
            drop_inputs,
        },
    )
}

pub fn save_checkpoint(params: &NetworkParams, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text, path)
}
