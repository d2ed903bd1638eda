//! Training objectives and their logit/parameter gradients.
//!
//! All three objectives share the dropout data term and weight decay; the
//! loss-calibrated one adds `-log Σ_c u(h*, c) p(c)` per example, where `h*`
//! is the current optimal prediction for that example.

use serde::{Deserialize, Serialize};

use crate::decision::{shape_gain, UtilityMatrix};
use crate::error::{Error, Result};
use crate::nn::{DropoutMask, NetworkParams, ParamGrads, ProbVector};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub l2: f64,
    pub penalty: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(nll: f64, l2: f64, penalty: f64) -> Self {
        LossBreakdown {
            nll,
            l2,
            penalty,
            total: nll + l2 + penalty,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.nll.is_finite()
            && self.l2.is_finite()
            && self.penalty.is_finite()
            && self.total.is_finite()
    }
}

/// Weight decay on the weight matrices (biases are not decayed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerConfig {
    /// Decay implied by a Gaussian prior of the given lengthscale:
    /// `λ² (1 - dropout_rate) / (2 N)`.
    Lengthscale {
        lengthscale: f64,
        dropout_rate: f64,
        dataset_size: usize,
    },
    WeightDecay(f64),
}

impl RegularizerConfig {
    pub fn weight_decay(&self) -> Result<f64> {
        match *self {
            RegularizerConfig::Lengthscale {
                lengthscale,
                dropout_rate,
                dataset_size,
            } => {
                if !(lengthscale > 0.0) || !(0.0..1.0).contains(&dropout_rate) || dataset_size == 0
                {
                    return Err(Error::InvalidConfig(format!(
                        "lengthscale regularizer needs lengthscale > 0, dropout_rate in [0, 1) \
                         and N > 0; got {lengthscale}, {dropout_rate}, {dataset_size}"
                    )));
                }
                Ok(lengthscale * lengthscale * (1.0 - dropout_rate) / (2.0 * dataset_size as f64))
            }
            RegularizerConfig::WeightDecay(d) if d >= 0.0 && d.is_finite() => Ok(d),
            RegularizerConfig::WeightDecay(d) => Err(Error::InvalidConfig(format!(
                "weight decay must be nonnegative, got {d}"
            ))),
        }
    }
}

fn check_class(y: usize, c: usize) -> Result<()> {
    if y < c {
        Ok(())
    } else {
        Err(Error::Index { index: y, len: c })
    }
}

/// `-log p_y`, gradient `p - onehot(y)`.
pub fn nll_loss(p: &ProbVector, y: usize) -> Result<(f64, Vec<f64>)> {
    check_class(y, p.len())?;
    let mut grad = p.as_slice().to_vec();
    grad[y] -= 1.0;
    Ok((-p.as_slice()[y].ln(), grad))
}

/// `decay · Σ w²` over weight matrices, gradient `2 · decay · w`.
pub fn l2_penalty(params: &NetworkParams, reg: &RegularizerConfig) -> Result<(f64, ParamGrads)> {
    let decay = reg.weight_decay()?;
    let mut grads = ParamGrads::zeros_like(params);
    let value = add_l2(params, decay, &mut grads);
    Ok((value, grads))
}

fn add_l2(params: &NetworkParams, decay: f64, grads: &mut ParamGrads) -> f64 {
    if decay == 0.0 {
        return 0.0;
    }
    let mut sum_sq = 0.0;
    for (layer, g) in params.layers().iter().zip(&mut grads.layers) {
        for (gw, &w) in g
            .weights
            .as_mut_slice()
            .iter_mut()
            .zip(layer.weights.as_slice())
        {
            sum_sq += w * w;
            *gw += 2.0 * decay * w;
        }
    }
    decay * sum_sq
}

fn check_alphas(alphas: &[f64], c: usize) -> Result<()> {
    if alphas.len() != c {
        return Err(Error::Shape(format!(
            "{} class weights for {c} classes",
            alphas.len()
        )));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a >= 0.0 && a.is_finite())) {
        return Err(Error::InvalidConfig(format!(
            "class weights must be nonnegative, got {a}"
        )));
    }
    Ok(())
}

/// `α_y · (-log p_y)`, gradient `α_y (p - onehot(y))`.
pub fn weighted_ce(p: &ProbVector, y: usize, alphas: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_alphas(alphas, p.len())?;
    let (nll, mut grad) = nll_loss(p, y)?;
    let a = alphas[y];
    for g in &mut grad {
        *g *= a;
    }
    Ok((a * nll, grad))
}

/// `-log G` with `G = Σ_c u(h, c) p_c`.
///
/// The logit gradient `p_k - u(h,k) p_k / G` is evaluated as
/// `p_k Σ_c (u(h,c) - u(h,k)) p_c / G`, which is exactly zero for a
/// constant utility and is computed from the unit-maximum utility shape, so
/// positive rescaling of `u` leaves it bit-identical.
pub fn lc_penalty(p: &ProbVector, h: usize, utility: &UtilityMatrix) -> Result<(f64, Vec<f64>)> {
    utility.check_class(h)?;
    if p.len() != utility.classes() {
        return Err(Error::Shape(format!(
            "probability vector has {} classes, utility has {}",
            p.len(),
            utility.classes()
        )));
    }
    let probs = p.as_slice();
    let row = utility.shape_row(h);
    let g = shape_gain(h, probs, utility);
    assert!(g > 0.0, "conditional gain must be positive, got {g}");
    let grad = probs
        .iter()
        .zip(row)
        .map(|(&pk, &uk)| {
            let excess: f64 = row.iter().zip(probs).map(|(&uc, &pc)| (uc - uk) * pc).sum();
            pk * excess / g
        })
        .collect();
    Ok((-g.ln() - utility.scale().ln(), grad))
}

/// Which training loss to minimize.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    Standard,
    Weighted { alphas: Vec<f64> },
    LossCalibrated { utility: UtilityMatrix },
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Standard => "standard",
            Objective::Weighted { .. } => "weighted",
            Objective::LossCalibrated { .. } => "lc",
        }
    }

    /// Per-example `(data term, penalty, logit gradient)`. `h` is only read
    /// by the loss-calibrated objective.
    pub fn example(
        &self,
        p: &ProbVector,
        y: usize,
        h: Option<usize>,
    ) -> Result<(f64, f64, Vec<f64>)> {
        match self {
            Objective::Standard => {
                let (nll, grad) = nll_loss(p, y)?;
                Ok((nll, 0.0, grad))
            }
            Objective::Weighted { alphas } => {
                let (loss, grad) = weighted_ce(p, y, alphas)?;
                Ok((loss, 0.0, grad))
            }
            Objective::LossCalibrated { utility } => {
                let h = h.ok_or_else(|| {
                    Error::InvalidConfig(
                        "loss-calibrated objective needs optimal predictions".into(),
                    )
                })?;
                let (nll, mut grad) = nll_loss(p, y)?;
                let (penalty, pgrad) = lc_penalty(p, h, utility)?;
                for (g, pg) in grad.iter_mut().zip(pgrad) {
                    *g += pg;
                }
                Ok((nll, penalty, grad))
            }
        }
    }
}

/// One minibatch: inputs, labels, one fresh dropout mask per example and,
/// for the loss-calibrated objective, the optimal prediction per example.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub inputs: &'a [&'a [f64]],
    pub labels: &'a [usize],
    pub masks: &'a [DropoutMask],
    pub h_star: Option<&'a [usize]>,
}

/// Per-example probabilities from the training passes, returned alongside
/// the loss so callers can track accuracy without another forward pass.
pub struct BatchResult {
    pub loss: LossBreakdown,
    pub grads: ParamGrads,
    pub probs: Vec<ProbVector>,
}

/// Minibatch mean of the per-example loss plus weight decay once; the
/// gradients are accumulated in example order.
pub fn batch_objective(
    params: &NetworkParams,
    objective: &Objective,
    reg: &RegularizerConfig,
    batch: Batch<'_>,
) -> Result<BatchResult> {
    let n = batch.inputs.len();
    if n == 0 {
        return Err(Error::InvalidConfig("empty minibatch".into()));
    }
    if batch.labels.len() != n
        || batch.masks.len() != n
        || batch.h_star.is_some_and(|h| h.len() != n)
    {
        return Err(Error::Shape("minibatch fields disagree in length".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mut grads = ParamGrads::zeros_like(params);
    let (mut nll_sum, mut pen_sum) = (0.0, 0.0);
    let mut probs = Vec::with_capacity(n);
    for i in 0..n {
        let trace = params.forward_traced(&batch.masks[i], batch.inputs[i])?;
        let p = ProbVector::softmax(trace.logits());
        let (nll, pen, mut dz) =
            objective.example(&p, batch.labels[i], batch.h_star.map(|h| h[i]))?;
        nll_sum += nll;
        pen_sum += pen;
        for g in &mut dz {
            *g *= inv_n;
        }
        params.backward_into(&trace, &batch.masks[i], &dz, &mut grads);
        probs.push(p);
    }
    let l2 = add_l2(params, reg.weight_decay()?, &mut grads);
    Ok(BatchResult {
        loss: LossBreakdown::new(nll_sum * inv_n, l2, pen_sum * inv_n),
        grads,
        probs,
    })
}

/// The loss-calibrated minibatch objective.
pub fn lc_batch_objective(
    params: &NetworkParams,
    masks: &[DropoutMask],
    inputs: &[&[f64]],
    labels: &[usize],
    h_star: &[usize],
    utility: &UtilityMatrix,
    reg: &RegularizerConfig,
) -> Result<(LossBreakdown, ParamGrads)> {
    let objective = Objective::LossCalibrated {
        utility: utility.clone(),
    };
    let out = batch_objective(
        params,
        &objective,
        reg,
        Batch {
            inputs,
            labels,
            masks,
            h_star: Some(h_star),
        },
    )?;
    Ok((out.loss, out.grads))
}
