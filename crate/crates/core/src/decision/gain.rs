use serde::{Deserialize, Serialize};

use super::utility::UtilityMatrix;
use crate::error::{Error, Result};
use crate::nn::{argmax, Matrix, PredictiveSamples, ProbVector};

/// Chosen class and its conditional gain `G(h|x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub gain: f64,
}

/// `G(h|x, ω) = Σ_c u(h, c) p(c)`.
pub fn gain_given_probs(h: usize, p: &ProbVector, utility: &UtilityMatrix) -> Result<f64> {
    utility.check_class(h)?;
    utility.check_probs(p)?;
    Ok(entry_gain(h, p.as_slice(), utility))
}

#[inline]
fn entry_gain(h: usize, p: &[f64], utility: &UtilityMatrix) -> f64 {
    (0..p.len()).map(|y| utility.get(h, y) * p[y]).sum()
}

#[inline]
pub(crate) fn shape_gain(h: usize, p: &[f64], utility: &UtilityMatrix) -> f64 {
    utility.shape_row(h).iter().zip(p).map(|(u, q)| u * q).sum()
}

/// Monte Carlo conditional gain `(1/T) Σ_t G(h|x, ω_t)`, evaluated through
/// the mean predictive vector (the gain is linear in `p`).
pub fn mc_gain(h: usize, samples: &PredictiveSamples, utility: &UtilityMatrix) -> Result<f64> {
    gain_given_probs(h, &samples.mean(), utility)
}

/// Gains of every candidate class at a predictive vector, scaled to the
/// utility's units.
pub fn class_gains(p: &ProbVector, utility: &UtilityMatrix) -> Result<Vec<f64>> {
    utility.check_probs(p)?;
    Ok((0..utility.classes())
        .map(|h| entry_gain(h, p.as_slice(), utility))
        .collect())
}

/// The class maximizing the conditional gain at a predictive vector;
/// lowest index wins ties.
pub fn optimal_for_probs(p: &ProbVector, utility: &UtilityMatrix) -> Result<Prediction> {
    utility.check_probs(p)?;
    let shape: Vec<f64> = (0..utility.classes())
        .map(|h| shape_gain(h, p.as_slice(), utility))
        .collect();
    let class = argmax(&shape);
    Ok(Prediction {
        class,
        gain: entry_gain(class, p.as_slice(), utility),
    })
}

/// `h* = argmax_h (1/T) Σ_t Σ_c u(h, c) p_t(c)`.
pub fn optimal_prediction(
    samples: &PredictiveSamples,
    utility: &UtilityMatrix,
) -> Result<Prediction> {
    optimal_for_probs(&samples.mean(), utility)
}

/// Mean realized utility `u(h_i, y_i)` over a labelled set.
pub fn expected_utility(
    predictions: &[usize],
    labels: &[usize],
    utility: &UtilityMatrix,
) -> Result<f64> {
    check_lengths(predictions, labels)?;
    if predictions.is_empty() {
        return Err(Error::InvalidConfig("no predictions to score".into()));
    }
    let mut total = 0.0;
    for (&h, &y) in predictions.iter().zip(labels) {
        utility.check_class(h)?;
        utility.check_class(y)?;
        total += utility.get(h, y);
    }
    Ok(total / predictions.len() as f64)
}

fn check_lengths(predictions: &[usize], labels: &[usize]) -> Result<()> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Per-class conditional gains at one input and the maximizing class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainMap {
    pub gains: Vec<f64>,
    pub best: usize,
}

impl GainMap {
    pub fn best_gain(&self) -> f64 {
        self.gains[self.best]
    }
}

pub fn gain_map(batch: &[PredictiveSamples], utility: &UtilityMatrix) -> Result<Vec<GainMap>> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    batch
        .iter()
        .map(|samples| {
            let mean = samples.mean();
            let best = optimal_for_probs(&mean, utility)?.class;
            Ok(GainMap {
                gains: class_gains(&mean, utility)?,
                best,
            })
        })
        .collect()
}

/// Gain maps laid out on an image grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainGrid {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<GainMap>,
}

impl GainGrid {
    pub fn new(height: usize, width: usize, cells: Vec<GainMap>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(Error::Shape(format!(
                "{} gain maps for a {height}x{width} grid",
                cells.len()
            )));
        }
        Ok(GainGrid {
            height,
            width,
            cells,
        })
    }

    /// The gain of predicting `class` at every pixel.
    pub fn class_plane(&self, class: usize) -> Matrix {
        let data = self.cells.iter().map(|m| m.gains[class]).collect();
        Matrix::new(self.height, self.width, data).expect("sized")
    }

    /// The gain of the optimal prediction at every pixel.
    pub fn best_plane(&self) -> Matrix {
        let data = self.cells.iter().map(GainMap::best_gain).collect();
        Matrix::new(self.height, self.width, data).expect("sized")
    }
}

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    /// Row-normalized proportions; empty rows stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter()
                    .map(|&n| {
                        if total == 0 {
                            0.0
                        } else {
                            n as f64 / total as f64
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn row_total(&self, true_class: usize) -> u64 {
        self.counts[true_class].iter().sum()
    }
}

pub fn confusion_matrix(
    predictions: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<ConfusionMatrix> {
    check_lengths(predictions, labels)?;
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&h, &y) in predictions.iter().zip(labels) {
        for c in [h, y] {
            if c >= classes {
                return Err(Error::Index {
                    index: c,
                    len: classes,
                });
            }
        }
        counts[y][h] += 1;
    }
    Ok(ConfusionMatrix { counts })
}
