//! Utility matrices `u(h, y)`: rows are predictions, columns true classes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Matrix, ProbVector};

/// A validated task utility.
///
/// Stored as a unit-maximum `shape` times a positive `scale`. Scaling the
/// utility by `a > 0` only touches `scale`, so everything that is
/// mathematically scale-free (optimal predictions, the loss-calibrated
/// gradient) is also bit-for-bit scale-free.
///
/// Shape entries are snapped to multiples of `2^-32`, so a table entered
/// already multiplied (`3.0 * 1.4` is not exactly `3 * 1.4`) normalizes to
/// the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityMatrix {
    classes: usize,
    entries: Vec<f64>,
    shape: Vec<f64>,
    scale: f64,
    class_names: Option<Vec<String>>,
}

/// Row-major entries, for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityRows {
    pub rows: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
}

const SHAPE_GRID: f64 = 4_294_967_296.0;

fn snap(v: f64) -> f64 {
    (v * SHAPE_GRID).round() / SHAPE_GRID
}

impl UtilityMatrix {
    /// Validates a square, nonnegative matrix whose every row has a
    /// strictly positive entry.
    pub fn new(raw: &Matrix) -> Result<Self> {
        let c = raw.rows();
        if c == 0 || raw.cols() != c {
            return Err(Error::InvalidUtility(format!(
                "utility must be square and non-empty, got {}x{}",
                raw.rows(),
                raw.cols()
            )));
        }
        for (h, row) in raw.row_iter().enumerate() {
            if let Some(y) = row.iter().position(|&v| v < 0.0) {
                return Err(Error::InvalidUtility(format!(
                    "u({h}, {y}) = {} is negative; shift the utility first",
                    row[y]
                )));
            }
            if !row.iter().any(|&v| v > 0.0) {
                return Err(Error::InvalidUtility(format!(
                    "row {h} has no positive entry, so its gain can vanish"
                )));
            }
        }
        let scale = raw.as_slice().iter().copied().fold(0.0, f64::max);
        let shape = raw.as_slice().iter().map(|&v| snap(v / scale)).collect();
        Ok(UtilityMatrix {
            classes: c,
            entries: raw.as_slice().to_vec(),
            shape,
            scale,
            class_names: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        UtilityMatrix::new(&Matrix::from_rows(rows)?)
    }

    /// Every entry equal to `k > 0`.
    pub fn constant(classes: usize, k: f64) -> Result<Self> {
        UtilityMatrix::from_rows(&vec![vec![k; classes]; classes])
    }

    pub fn identity(classes: usize) -> Self {
        let rows: Vec<Vec<f64>> = (0..classes)
            .map(|h| (0..classes).map(|y| f64::from(u8::from(h == y))).collect())
            .collect();
        UtilityMatrix::from_rows(&rows).expect("identity is valid")
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.classes {
            return Err(Error::Shape(format!(
                "{} class names for {} classes",
                names.len(),
                self.classes
            )));
        }
        self.class_names = Some(names);
        Ok(self)
    }

    /// The same utility multiplied by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::InvalidUtility(format!(
                "scale factor must be positive, got {factor}"
            )));
        }
        Ok(UtilityMatrix {
            entries: self.entries.iter().map(|v| v * factor).collect(),
            scale: self.scale * factor,
            ..self.clone()
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// `u(h, y)`.
    #[inline]
    pub fn get(&self, h: usize, y: usize) -> f64 {
        self.entries[h * self.classes + y]
    }

    /// Row `h` divided by the largest entry of the matrix.
    #[inline]
    pub(crate) fn shape_row(&self, h: usize) -> &[f64] {
        &self.shape[h * self.classes..(h + 1) * self.classes]
    }

    pub fn row(&self, h: usize) -> Vec<f64> {
        (0..self.classes).map(|y| self.get(h, y)).collect()
    }

    pub fn min_entry(&self) -> f64 {
        self.entries.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn to_rows(&self) -> UtilityRows {
        UtilityRows {
            rows: (0..self.classes).map(|h| self.row(h)).collect(),
            class_names: self.class_names.clone(),
        }
    }

    pub(crate) fn check_class(&self, h: usize) -> Result<()> {
        if h < self.classes {
            Ok(())
        } else {
            Err(Error::Index {
                index: h,
                len: self.classes,
            })
        }
    }

    pub(crate) fn check_probs(&self, p: &ProbVector) -> Result<()> {
        if p.len() == self.classes {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "probability vector has {} classes, utility has {}",
                p.len(),
                self.classes
            )))
        }
    }

    /// Parses whitespace-separated rows; blank lines and `#` comments are
    /// skipped. Applies no shift.
    pub fn parse_text(text: &str) -> Result<Matrix> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|e| {
                        Error::InvalidUtility(format!("line {}: {tok:?}: {e}", lineno + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Matrix::from_rows(&rows)
    }

    /// Loads a utility grid file and applies the shift `shift`.
    pub fn load(path: &Path, shift: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        transform_utility(&UtilityMatrix::parse_text(&text)?, shift)
    }
}

/// Shifts every entry by `shift` so the utility is nonnegative, then
/// validates it. The shift never changes which prediction is optimal, but
/// it does change the loss-calibrated training penalty.
pub fn transform_utility(raw: &Matrix, shift: f64) -> Result<UtilityMatrix> {
    if !shift.is_finite() {
        return Err(Error::InvalidUtility(format!(
            "shift must be finite, got {shift}"
        )));
    }
    let data = raw.as_slice().iter().map(|&v| v + shift).collect();
    UtilityMatrix::new(&Matrix::new(raw.rows(), raw.cols(), data)?)
}

pub const DIABETES_CLASSES: [&str; 3] = ["Healthy", "Mild", "Severe"];

pub const CAMVID_CLASSES: [&str; 12] = [
    "Sky",
    "Building",
    "Pole",
    "Road",
    "Pavement",
    "Tree",
    "Sign",
    "Fence",
    "Car",
    "Pedestrian",
    "Cyclist",
    "Unlabelled",
];

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn diabetes() -> UtilityMatrix {
    UtilityMatrix::from_rows(&[
        vec![2.0, 1.0, 0.0],
        vec![1.2, 2.0, 1.3],
        vec![1.1, 1.4, 2.0],
    ])
    .and_then(|u| u.with_class_names(names(&DIABETES_CLASSES)))
    .expect("valid table")
}

fn mnist38() -> UtilityMatrix {
    let rows: Vec<Vec<f64>> = (0..10)
        .map(|h| {
            (0..10)
                .map(|y| match (h == y, h == 3 || h == 8) {
                    (true, _) => 1.0,
                    (false, true) => 0.3,
                    (false, false) => 0.0,
                })
                .collect()
        })
        .collect();
    UtilityMatrix::from_rows(&rows)
        .and_then(|u| u.with_class_names((0..10).map(|d| d.to_string()).collect()))
        .expect("valid table")
}

fn camvid() -> UtilityMatrix {
    const PEDESTRIAN: usize = 9;
    const CYCLIST: usize = 10;
    let rows: Vec<Vec<f64>> = (0..12)
        .map(|h| {
            let off = match h {
                0 | 1 => 0.0,
                8..=10 => 0.4,
                _ => 0.2,
            };
            (0..12)
                .map(|y| {
                    let vulnerable =
                        matches!(h, PEDESTRIAN | CYCLIST) && matches!(y, PEDESTRIAN | CYCLIST);
                    if h == y || vulnerable {
                        0.8
                    } else {
                        off
                    }
                })
                .collect()
        })
        .collect();
    UtilityMatrix::from_rows(&rows)
        .and_then(|u| u.with_class_names(names(&CAMVID_CLASSES)))
        .expect("valid table")
}

/// Built-in utilities: `diabetes` (3 classes), `mnist38` (10 digits,
/// false positives of 3 and 8 earn 0.3) and `camvid` (12 road-scene classes).
pub fn builtin_utility(name: &str) -> Result<UtilityMatrix> {
    match name {
        "diabetes" => Ok(diabetes()),
        "mnist38" => Ok(mnist38()),
        "camvid" => Ok(camvid()),
        other => Err(Error::UnknownUtility(other.to_string())),
    }
}
