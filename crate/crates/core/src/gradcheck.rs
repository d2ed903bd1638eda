//! Finite-difference checking of backprop.
//!
//! The numeric side only ever calls forward passes; it never touches the
//! backward code it is checking.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decision::UtilityMatrix;
use crate::error::Result;
use crate::nn::{
    Activation, Dense, DropoutConfig, DropoutMask, Matrix, NetworkParams, ParamGrads, ProbVector,
    RngState, Stream,
};
use crate::objective::Objective;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Floor on the denominator of the relative error so exact or near-zero
/// gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub params_checked: usize,
    /// Parameters whose ±step both cross a ReLU kink (no valid difference).
    pub params_skipped: usize,
}

fn relu_pattern(params: &NetworkParams, mask: &DropoutMask, x: &[f64]) -> Vec<bool> {
    let trace = params
        .forward_traced(mask, x)
        .expect("shapes checked by caller");
    let hidden = &trace.preacts()[..trace.preacts().len() - 1];
    hidden.iter().flatten().map(|&z| z > 0.0).collect()
}

/// Numerical gradient of `loss(logits)` w.r.t. every parameter, using the
/// forward pass under a fixed mask. Where one side of the central difference
/// crosses a ReLU kink, the one-sided difference on the other side is used.
pub fn numeric_grads(
    params: &NetworkParams,
    mask: &DropoutMask,
    x: &[f64],
    loss: &dyn Fn(&[f64]) -> f64,
) -> Vec<Option<f64>> {
    let relu = params.activation() == Activation::Relu;
    let eval = |p: &NetworkParams| {
        let (logits, _) = p
            .forward_stochastic(mask, x)
            .expect("shapes checked by caller");
        loss(&logits)
    };
    let base_pattern = relu.then(|| relu_pattern(params, mask, x));
    let f0 = eval(params);
    let mut work = params.clone();
    (0..params.num_params())
        .map(|i| {
            let orig = params.flat_get(i);
            work.flat_set(i, orig + FD_STEP);
            let plus = eval(&work);
            let plus_ok = base_pattern
                .as_ref()
                .is_none_or(|b| *b == relu_pattern(&work, mask, x));
            work.flat_set(i, orig - FD_STEP);
            let minus = eval(&work);
            let minus_ok = base_pattern
                .as_ref()
                .is_none_or(|b| *b == relu_pattern(&work, mask, x));
            work.flat_set(i, orig);
            match (plus_ok, minus_ok) {
                (true, true) => Some((plus - minus) / (2.0 * FD_STEP)),
                (true, false) => Some((plus - f0) / FD_STEP),
                (false, true) => Some((f0 - minus) / FD_STEP),
                (false, false) => None,
            }
        })
        .collect()
}

pub fn compare(analytic: &ParamGrads, numeric: &[Option<f64>]) -> GradCheck {
    let analytic = analytic.flatten();
    assert_eq!(analytic.len(), numeric.len());
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst_param: 0,
        params_checked: 0,
        params_skipped: 0,
    };
    for (i, (&a, n)) in analytic.iter().zip(numeric).enumerate() {
        let Some(n) = *n else {
            out.params_skipped += 1;
            continue;
        };
        out.params_checked += 1;
        let err = relative_error(a, n);
        if err > out.max_rel_error || err.is_nan() {
            out.max_rel_error = err;
            out.worst_param = i;
        }
    }
    out
}

/// A random network with at most three weight layers, at most ten units per
/// layer and between two and `max_classes` outputs, plus a sampled mask.
pub fn random_network<R: Rng + ?Sized>(
    rng: &mut R,
    max_classes: usize,
) -> (NetworkParams, DropoutMask) {
    let input = rng.random_range(1..=10);
    let hidden_layers = rng.random_range(0..=2);
    let classes = rng.random_range(2..=max_classes.max(2));
    let mut widths = vec![input];
    widths.extend((0..hidden_layers).map(|_| rng.random_range(1..=10)));
    widths.push(classes);
    let layers = widths
        .windows(2)
        .map(|w| {
            let data = (0..w[0] * w[1])
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let bias = (0..w[1]).map(|_| rng.random_range(-0.5..0.5)).collect();
            Dense::new(Matrix::new(w[1], w[0], data).expect("sized"), bias).expect("sized")
        })
        .collect();
    let dropout = DropoutConfig {
        keep_prob: rng.random_range(0.5..=1.0),
        drop_inputs: rng.random(),
    };
    let params = NetworkParams::new(layers, Activation::Relu, dropout).expect("consistent widths");
    let mask = params.sample_mask(rng);
    (params, mask)
}

pub fn random_input<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Tolerance of the gradient suite on the relative error.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Logit gradient under test for one example: `(objective, p, y, h)`.
pub type LogitGrad<'a> =
    dyn Fn(&Objective, &ProbVector, usize, Option<usize>) -> Result<Vec<f64>> + 'a;

/// The library's own logit gradients.
pub fn library_logit_grad(
    objective: &Objective,
    p: &ProbVector,
    y: usize,
    h: Option<usize>,
) -> Result<Vec<f64>> {
    Ok(objective.example(p, y, h)?.2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub loss: String,
    pub networks: usize,
    pub max_rel_error: f64,
    pub params_checked: usize,
    pub params_skipped: usize,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.params_checked > 0 && self.max_rel_error < SUITE_TOLERANCE
    }
}

fn log_softmax(z: &[f64], k: usize) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z[k] - lse
}

/// Loss value straight from the logits, written independently of the
/// objective module.
fn reference_loss(objective: &Objective, z: &[f64], y: usize, h: Option<usize>) -> f64 {
    let nll = -log_softmax(z, y);
    match objective {
        Objective::Standard => nll,
        Objective::Weighted { alphas } => alphas[y] * nll,
        Objective::LossCalibrated { utility } => {
            let h = h.expect("lc needs h");
            let gain: f64 = (0..z.len())
                .map(|c| utility.get(h, c) * log_softmax(z, c).exp())
                .sum();
            nll - gain.ln()
        }
    }
}

fn random_utility<R: Rng + ?Sized>(rng: &mut R, c: usize) -> UtilityMatrix {
    let rows: Vec<Vec<f64>> = (0..c)
        .map(|h| {
            (0..c)
                .map(|y| {
                    if h == y {
                        rng.random_range(0.5..2.0)
                    } else {
                        rng.random_range(0.0..1.5)
                    }
                })
                .collect()
        })
        .collect();
    UtilityMatrix::from_rows(&rows).expect("positive diagonal")
}

/// Backprop against central differences on `networks` random networks
/// (at most three weight layers, ten units, five classes) for the standard,
/// weighted and loss-calibrated losses.
pub fn gradient_suite(
    networks: usize,
    seed: u64,
    analytic: &LogitGrad<'_>,
) -> Result<Vec<SuiteResult>> {
    let names = ["nll", "weighted", "lc"];
    let mut results: Vec<SuiteResult> = names
        .iter()
        .map(|n| SuiteResult {
            loss: n.to_string(),
            networks,
            max_rel_error: 0.0,
            params_checked: 0,
            params_skipped: 0,
        })
        .collect();
    for i in 0..networks {
        let mut rng = RngState::new(seed).at(i as u64, 0, 0).rng(Stream::Oracle);
        let (params, mask) = random_network(&mut rng, 5);
        let c = params.classes();
        let x = random_input(&mut rng, params.input_dim());
        let y = rng.random_range(0..c);
        let h = rng.random_range(0..c);
        let objectives = [
            Objective::Standard,
            Objective::Weighted {
                alphas: (0..c).map(|_| rng.random_range(0.5..3.0)).collect(),
            },
            Objective::LossCalibrated {
                utility: random_utility(&mut rng, c),
            },
        ];
        let (_, p) = params.forward_stochastic(&mask, &x)?;
        for (objective, result) in objectives.iter().zip(results.iter_mut()) {
            let h = matches!(objective, Objective::LossCalibrated { .. }).then_some(h);
            let dz = analytic(objective, &p, y, h)?;
            let grads = params.backprop(&mask, &x, &dz)?;
            let numeric =
                numeric_grads(&params, &mask, &x, &|z| reference_loss(objective, z, y, h));
            let check = compare(&grads, &numeric);
            result.max_rel_error = result.max_rel_error.max(check.max_rel_error);
            if check.max_rel_error.is_nan() {
                result.max_rel_error = f64::NAN;
            }
            result.params_checked += check.params_checked;
            result.params_skipped += check.params_skipped;
        }
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_library_gradients() {
        let results = gradient_suite(20, 0, &library_logit_grad).unwrap();
        assert_eq!(results.len(), 3);
        for r in &results {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn suite_catches_a_flipped_penalty_gradient() {
        let flipped =
            |o: &Objective, p: &ProbVector, y: usize, h: Option<usize>| -> Result<Vec<f64>> {
                let full = o.example(p, y, h)?.2;
                if !matches!(o, Objective::LossCalibrated { .. }) {
                    return Ok(full);
                }
                let nll = Objective::Standard.example(p, y, None)?.2;
                Ok(full.iter().zip(&nll).map(|(f, n)| n - (f - n)).collect())
            };
        let results = gradient_suite(20, 0, &flipped).unwrap();
        assert!(results[0].passed() && results[1].passed());
        assert!(!results[2].passed(), "{:?}", results[2]);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-5).abs() < 1e-18);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
