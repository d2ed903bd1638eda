//! Datasets: the synthetic three-test diabetes task, MNIST from IDX files,
//! and label corruption.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::decision::DIABETES_CLASSES;
use crate::error::{Error, Result};
use crate::nn::{Matrix, RngState, Stream};

/// Environment variable naming the directory holding the four MNIST IDX files.
pub const MNIST_DIR_ENV: &str = "LCBNN_MNIST_DIR";
pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled examples: an `N×D` feature matrix and `N` labels below `classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    classes: usize,
    class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Consistency("dataset has no examples".into()));
        }
        if features.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Index {
                index: bad,
                len: classes,
            });
        }
        Ok(Dataset {
            features,
            labels,
            classes,
            class_names: None,
        })
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

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Same features with replacement labels.
    pub fn relabel(&self, labels: Vec<usize>) -> Result<Self> {
        let mut d = Dataset::new(self.features.clone(), labels, self.classes)?;
        d.class_names = self.class_names.clone();
        Ok(d)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Index {
                index: bad,
                len: self.len(),
            });
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let mut d = Dataset::new(self.features.select_rows(indices), labels, self.classes)?;
        d.class_names = self.class_names.clone();
        Ok(d)
    }

    /// Writes `x0,…,x{D-1},label` rows with a header line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (row, &y) in self.features.row_iter().zip(&self.labels) {
            let mut record: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            record.push(y.to_string());
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a file written by [`Dataset::write_csv`].
    pub fn read_csv(path: &Path, classes: usize) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut dim = None;
        for (i, record) in r.records().enumerate() {
            let record = record?;
            let parse_err = |detail: String| Error::Parse {
                path: path.to_path_buf(),
                offset: record.position().map_or(0, |p| p.byte()),
                detail,
            };
            if record.is_empty() {
                return Err(parse_err(format!("row {i} is empty")));
            }
            let d = record.len() - 1;
            if *dim.get_or_insert(d) != d {
                return Err(parse_err(format!("row {i} has {} fields", record.len())));
            }
            for field in record.iter().take(d) {
                data.push(
                    field
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| parse_err(format!("bad feature {field:?}: {e}")))?,
                );
            }
            let label = &record[d];
            labels.push(
                label
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| parse_err(format!("bad label {label:?}: {e}")))?,
            );
        }
        let features = Matrix::new(labels.len(), dim.unwrap_or(0), data)?;
        Dataset::new(features, labels, classes)
    }
}

/// Default label corruption for the diabetes task: 10% of each class moves
/// to each adjacent severity level.
pub fn default_diabetes_corruption() -> Vec<Vec<f64>> {
    vec![
        vec![0.9, 0.1, 0.0],
        vec![0.1, 0.8, 0.1],
        vec![0.0, 0.1, 0.9],
    ]
}

/// Generator settings for the synthetic diabetes task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub high_mean: f64,
    pub low_mean: f64,
    pub noise_std: f64,
    /// Row `c` is the distribution of the observed training label when the
    /// true class is `c`.
    pub corruption: Vec<Vec<f64>>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train_per_class: 50,
            test_per_class: 100,
            high_mean: 0.8,
            low_mean: 0.2,
            noise_std: 0.1,
            corruption: default_diabetes_corruption(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidConfig(msg));
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return invalid("train_per_class and test_per_class must be positive".into());
        }
        for (name, v) in [("high_mean", self.high_mean), ("low_mean", self.low_mean)] {
            if !(0.0..=1.0).contains(&v) {
                return invalid(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.noise_std.is_finite() && self.noise_std > 0.0) {
            return invalid(format!(
                "noise_std must be positive, got {}",
                self.noise_std
            ));
        }
        check_row_stochastic(&self.corruption, DIABETES_CLASSES.len())
    }
}

fn check_row_stochastic(m: &[Vec<f64>], classes: usize) -> Result<()> {
    if m.len() != classes {
        return Err(Error::InvalidConfig(format!(
            "corruption matrix has {} rows, expected {classes}",
            m.len()
        )));
    }
    for (i, row) in m.iter().enumerate() {
        if row.len() != classes {
            return Err(Error::InvalidConfig(format!(
                "corruption row {i} has {} entries, expected {classes}",
                row.len()
            )));
        }
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&p| !p.is_finite() || p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "corruption row {i} is not a probability distribution: {row:?}"
            )));
        }
    }
    Ok(())
}

/// Training and held-out test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

fn diabetes_features<R: Rng + ?Sized>(
    cfg: &SynthConfig,
    per_class: usize,
    rng: &mut R,
) -> (Vec<f64>, Vec<usize>) {
    let c = DIABETES_CLASSES.len();
    let high = Normal::new(cfg.high_mean, cfg.noise_std).expect("validated std");
    let low = Normal::new(cfg.low_mean, cfg.noise_std).expect("validated std");
    let mut data = Vec::with_capacity(per_class * c * c);
    let mut labels = Vec::with_capacity(per_class * c);
    for class in 0..c {
        for _ in 0..per_class {
            for feature in 0..c {
                let dist = if feature == class { &high } else { &low };
                data.push(dist.sample(rng).clamp(0.0, 1.0));
            }
            labels.push(class);
        }
    }
    (data, labels)
}

/// Three blood-test features per patient; the test matching the true class
/// reads high and the other two read low. Training labels pass through the
/// corruption matrix, test labels stay clean.
pub fn gen_diabetes(cfg: &SynthConfig) -> Result<Split> {
    cfg.validate()?;
    let c = DIABETES_CLASSES.len();
    let names: Vec<String> = DIABETES_CLASSES.iter().map(|s| s.to_string()).collect();
    let state = RngState::new(cfg.seed);

    let (train_x, true_labels) = diabetes_features(
        cfg,
        cfg.train_per_class,
        &mut state.at(0, 0, 0).rng(Stream::Data),
    );
    let (test_x, test_labels) = diabetes_features(
        cfg,
        cfg.test_per_class,
        &mut state.at(1, 0, 0).rng(Stream::Data),
    );
    let observed = corrupt_with_matrix(
        &true_labels,
        &cfg.corruption,
        &mut state.rng(Stream::Corruption),
    )?;

    let train = Dataset::new(Matrix::new(true_labels.len(), c, train_x)?, observed, c)?
        .with_class_names(names.clone())?;
    let test = Dataset::new(Matrix::new(test_labels.len(), c, test_x)?, test_labels, c)?
        .with_class_names(names)?;
    Ok(Split { train, test })
}

/// Each label independently, with probability `rho`, is replaced by a
/// uniform draw over all `classes` (which may return the original).
pub fn corrupt_uniform<R: Rng + ?Sized>(
    labels: &[usize],
    rho: f64,
    classes: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidConfig(format!(
            "corruption rate must lie in [0, 1], got {rho}"
        )));
    }
    if classes == 0 {
        return Err(Error::InvalidConfig("class count must be positive".into()));
    }
    Ok(labels
        .iter()
        .map(|&y| {
            let hit = rng.random::<f64>() < rho;
            let draw = rng.random_range(0..classes);
            if hit {
                draw
            } else {
                y
            }
        })
        .collect())
}

/// Replaces each label `y` with a draw from row `y` of a row-stochastic matrix.
pub fn corrupt_with_matrix<R: Rng + ?Sized>(
    labels: &[usize],
    matrix: &[Vec<f64>],
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_row_stochastic(matrix, matrix.len())?;
    labels
        .iter()
        .map(|&y| {
            let row = matrix.get(y).ok_or(Error::Index {
                index: y,
                len: matrix.len(),
            })?;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (c, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    return Ok(c);
                }
            }
            Ok(row.iter().rposition(|&p| p > 0.0).unwrap_or(y))
        })
        .collect()
}

/// Unsigned-byte IDX tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn parse_error(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

/// Parses a big-endian IDX byte buffer with element type `u8`.
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(parse_error(
            path,
            bytes.len(),
            "file ends inside the magic number",
        ));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_error(
            path,
            0,
            format!("bad magic {:02x?}", &bytes[..4]),
        ));
    }
    if bytes[2] != 0x08 {
        return Err(parse_error(
            path,
            2,
            format!("unsupported element type 0x{:02x}", bytes[2]),
        ));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(parse_error(path, 3, "zero dimensions"));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(parse_error(
            path,
            bytes.len(),
            "file ends inside the dimension header",
        ));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let total = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| parse_error(path, 4, "dimensions overflow"))?;
    let available = bytes.len() - header;
    if available < total {
        return Err(parse_error(
            path,
            bytes.len(),
            format!("truncated: expected {total} data bytes after the header, found {available}"),
        ));
    }
    if available > total {
        return Err(parse_error(
            path,
            header + total,
            "trailing bytes after the data",
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

fn magic_of(bytes: &[u8]) -> Option<u32> {
    bytes
        .get(..4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn read_idx(path: &Path, expected_magic: u32) -> Result<IdxArray> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if let Some(magic) = magic_of(&bytes) {
        if magic != expected_magic {
            return Err(parse_error(
                path,
                0,
                format!("magic 0x{magic:08x}, expected 0x{expected_magic:08x}"),
            ));
        }
    }
    parse_idx(&bytes, path)
}

pub fn encode_idx(array: &IdxArray) -> Result<Vec<u8>> {
    let total: usize = array.dims.iter().product();
    if total != array.data.len() || array.dims.is_empty() || array.dims.len() > 255 {
        return Err(Error::Shape(format!(
            "dims {:?} do not describe {} bytes",
            array.dims,
            array.data.len()
        )));
    }
    let mut out = vec![0, 0, 0x08, array.dims.len() as u8];
    for &d in &array.dims {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    Ok(out)
}

pub fn write_idx(path: &Path, array: &IdxArray) -> Result<()> {
    std::fs::write(path, encode_idx(array)?).map_err(|e| Error::io(path, e))
}

/// Images and labels as read from disk, before conversion to `f64`.
#[derive(Debug, Clone)]
pub struct IdxImages {
    pub count: usize,
    pub pixels_per_image: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl IdxImages {
    pub fn read(image_path: &Path, label_path: &Path) -> Result<Self> {
        let images = read_idx(image_path, IDX_IMAGES_MAGIC)?;
        let labels = read_idx(label_path, IDX_LABELS_MAGIC)?;
        if images.dims.len() != 3 {
            return Err(parse_error(
                image_path,
                3,
                "image file must have 3 dimensions",
            ));
        }
        if labels.dims.len() != 1 {
            return Err(parse_error(
                label_path,
                3,
                "label file must have 1 dimension",
            ));
        }
        if images.dims[0] != labels.dims[0] {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.dims[0], labels.dims[0]
            )));
        }
        Ok(IdxImages {
            count: images.dims[0],
            pixels_per_image: images.dims[1] * images.dims[2],
            pixels: images.data,
            labels: labels.data,
        })
    }

    /// Selected images as a dataset with pixels scaled to `[0, 1]`.
    pub fn to_dataset(&self, indices: &[usize], classes: usize) -> Result<Dataset> {
        let d = self.pixels_per_image;
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.count {
                return Err(Error::Index {
                    index: i,
                    len: self.count,
                });
            }
            data.extend(
                self.pixels[i * d..(i + 1) * d]
                    .iter()
                    .map(|&b| b as f64 / 255.0),
            );
            labels.push(self.labels[i] as usize);
        }
        Dataset::new(Matrix::new(indices.len(), d, data)?, labels, classes)
    }
}

pub fn load_mnist_idx(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let raw = IdxImages::read(image_path, label_path)?;
    let all: Vec<usize> = (0..raw.count).collect();
    raw.to_dataset(&all, 10)
}

/// MNIST directory: `$LCBNN_MNIST_DIR`, else `data/mnist` under the current
/// directory, else `data/mnist` at the workspace root.
pub fn mnist_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(MNIST_DIR_ENV) {
        return PathBuf::from(dir);
    }
    let local = PathBuf::from("data/mnist");
    if local.is_dir() {
        return local;
    }
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

/// MNIST preparation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MnistConfig {
    pub dir: Option<PathBuf>,
    /// Training images drawn without replacement from the 60000.
    pub train_size: usize,
    /// Test images taken from the front of the test file; `None` uses all.
    pub test_size: Option<usize>,
    /// Fraction of training labels uniformly reassigned.
    pub rho: f64,
}

impl Default for MnistConfig {
    fn default() -> Self {
        MnistConfig {
            dir: None,
            train_size: 2500,
            test_size: None,
            rho: 0.0,
        }
    }
}

impl MnistConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 {
            return Err(Error::InvalidConfig(
                "data.mnist.train_size must be positive".into(),
            ));
        }
        if self.test_size == Some(0) {
            return Err(Error::InvalidConfig(
                "data.mnist.test_size must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidConfig(format!(
                "data.mnist.rho must lie in [0, 1], got {}",
                self.rho
            )));
        }
        Ok(())
    }

    pub fn resolved_dir(&self) -> PathBuf {
        self.dir.clone().unwrap_or_else(mnist_dir)
    }
}

/// Both MNIST files loaded once, so several seeds can draw splits cheaply.
#[derive(Debug, Clone)]
pub struct MnistSource {
    train: IdxImages,
    test: IdxImages,
}

impl MnistSource {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(MnistSource {
            train: IdxImages::read(&dir.join(MNIST_TRAIN_IMAGES), &dir.join(MNIST_TRAIN_LABELS))?,
            test: IdxImages::read(&dir.join(MNIST_TEST_IMAGES), &dir.join(MNIST_TEST_LABELS))?,
        })
    }

    pub fn from_parts(train: IdxImages, test: IdxImages) -> Self {
        MnistSource { train, test }
    }

    /// Seeded training subsample with uniformly corrupted labels, and the
    /// clean test set.
    pub fn split(&self, cfg: &MnistConfig, seed: u64) -> Result<Split> {
        cfg.validate()?;
        if cfg.train_size > self.train.count {
            return Err(Error::InvalidConfig(format!(
                "data.mnist.train_size {} exceeds the {} available images",
                cfg.train_size, self.train.count
            )));
        }
        let state = RngState::new(seed);
        let mut picked = sample(
            &mut state.rng(Stream::Subsample),
            self.train.count,
            cfg.train_size,
        )
        .into_vec();
        picked.sort_unstable();
        let clean = self.train.to_dataset(&picked, 10)?;
        let noisy = corrupt_uniform(
            clean.labels(),
            cfg.rho,
            10,
            &mut state.rng(Stream::Corruption),
        )?;
        let test_n = cfg
            .test_size
            .unwrap_or(self.test.count)
            .min(self.test.count);
        let test: Vec<usize> = (0..test_n).collect();
        Ok(Split {
            train: clean.relabel(noisy)?,
            test: self.test.to_dataset(&test, 10)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn identity3() -> Vec<Vec<f64>> {
        vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]
    }

    #[test]
    fn dataset_validation() {
        let x = Matrix::zeros(2, 3);
        assert!(Dataset::new(x.clone(), vec![0, 1], 2).is_ok());
        assert!(matches!(
            Dataset::new(x.clone(), vec![0, 2], 2),
            Err(Error::Index { .. })
        ));
        assert!(matches!(
            Dataset::new(x, vec![0], 2),
            Err(Error::Consistency(_))
        ));
        assert!(Dataset::new(Matrix::zeros(0, 3), vec![], 2).is_err());
    }

    #[test]
    fn identity_corruption_keeps_labels() {
        let cfg = SynthConfig {
            corruption: identity3(),
            ..SynthConfig::default()
        };
        let split = gen_diabetes(&cfg).unwrap();
        let expected: Vec<usize> = (0..3).flat_map(|c| std::iter::repeat_n(c, 50)).collect();
        assert_eq!(split.train.labels(), expected.as_slice());
        assert_eq!(split.train.len(), 150);
    }

    #[test]
    fn default_sizes_and_names() {
        let split = gen_diabetes(&SynthConfig::default()).unwrap();
        assert_eq!(split.train.len(), 150);
        assert_eq!(split.train.dim(), 3);
        assert_eq!(split.test.class_counts(), vec![100, 100, 100]);
        assert_eq!(split.train.class_names().unwrap()[2], "Severe");
    }

    #[test]
    fn generation_is_reproducible_and_seed_dependent() {
        let cfg = SynthConfig::default();
        assert_eq!(gen_diabetes(&cfg).unwrap(), gen_diabetes(&cfg).unwrap());
        let other = SynthConfig {
            seed: 1,
            ..cfg.clone()
        };
        assert_ne!(
            gen_diabetes(&cfg).unwrap().train,
            gen_diabetes(&other).unwrap().train
        );
    }

    #[test]
    fn test_split_is_disjoint_and_clean() {
        let split = gen_diabetes(&SynthConfig::default()).unwrap();
        for (i, row) in split.test.features().row_iter().enumerate() {
            assert!(split.train.features().row_iter().all(|t| t != row));
            // Clean test labels follow the generator's class blocks.
            assert_eq!(split.test.labels()[i], i / 100);
        }
    }

    #[test]
    fn features_are_clipped() {
        let cfg = SynthConfig {
            noise_std: 2.0,
            ..SynthConfig::default()
        };
        let split = gen_diabetes(&cfg).unwrap();
        assert!(split
            .train
            .features()
            .as_slice()
            .iter()
            .all(|v| (0.0..=1.0).contains(v)));
        assert!(split.train.features().as_slice().contains(&0.0));
        assert!(split.train.features().as_slice().contains(&1.0));
    }

    #[test]
    fn class_feature_means() {
        let cfg = SynthConfig {
            train_per_class: 10_000,
            test_per_class: 1,
            corruption: identity3(),
            ..SynthConfig::default()
        };
        let split = gen_diabetes(&cfg).unwrap();
        let d = &split.train;
        for class in 0..3 {
            let rows: Vec<&[f64]> = (0..d.len())
                .filter(|&i| d.labels()[i] == class)
                .map(|i| d.input(i))
                .collect();
            let means: Vec<f64> = (0..3)
                .map(|f| rows.iter().map(|r| r[f]).sum::<f64>() / rows.len() as f64)
                .collect();
            for f in 0..3 {
                if f != class {
                    assert!(means[class] > means[f]);
                }
            }
            // Clipping at 0 and 1 is 6 standard deviations away.
            assert!((means[class] - 0.8).abs() < 4.0 * 0.1 / 100.0);
        }
    }

    #[test]
    fn bad_corruption_is_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.corruption[0] = vec![0.5, 0.6, 0.0];
        assert!(matches!(gen_diabetes(&cfg), Err(Error::InvalidConfig(_))));
        cfg.corruption = vec![vec![1.0]];
        assert!(gen_diabetes(&cfg).is_err());
        let cfg = SynthConfig {
            noise_std: 0.0,
            ..SynthConfig::default()
        };
        assert!(gen_diabetes(&cfg).is_err());
    }

    fn changed_fraction(rho: f64, classes: usize, n: usize, seed: u64) -> f64 {
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = corrupt_uniform(&labels, rho, classes, &mut rng).unwrap();
        out.iter().zip(&labels).filter(|(a, b)| a != b).count() as f64 / n as f64
    }

    #[test]
    fn uniform_corruption_rates() {
        assert_eq!(changed_fraction(0.0, 10, 1000, 1), 0.0);
        let n = 20_000;
        for (rho, classes) in [(1.0, 10), (0.5, 10), (0.25, 3), (1.0, 2)] {
            let p = rho * (classes as f64 - 1.0) / classes as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            let got = changed_fraction(rho, classes, n, 42);
            assert!(
                (got - p).abs() < 3.0 * se,
                "rho {rho}, C {classes}: {got} vs {p}"
            );
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(corrupt_uniform(&[0], 1.5, 2, &mut rng).is_err());
    }

    #[test]
    fn matrix_corruption_follows_rows() {
        let labels = vec![1usize; 30_000];
        let m = default_diabetes_corruption();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = corrupt_with_matrix(&labels, &m, &mut rng).unwrap();
        for (c, &p) in m[1].iter().enumerate() {
            let frac = out.iter().filter(|&&y| y == c).count() as f64 / labels.len() as f64;
            let se = (p * (1.0 - p) / labels.len() as f64).sqrt();
            assert!((frac - p).abs() <= 3.0 * se, "class {c}: {frac} vs {p}");
        }
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let images = IdxArray {
            dims: vec![3, 2, 2],
            data: (0..12).map(|i| (i * 21) as u8).collect(),
        };
        let labels = IdxArray {
            dims: vec![3],
            data: vec![7, 0, 9],
        };
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        write_idx(&ip, &images).unwrap();
        write_idx(&lp, &labels).unwrap();
        assert_eq!(read_idx(&ip, IDX_IMAGES_MAGIC).unwrap(), images);
        assert_eq!(read_idx(&lp, IDX_LABELS_MAGIC).unwrap(), labels);

        let bytes = std::fs::read(&ip).unwrap();
        assert_eq!(&bytes[..8], &[0, 0, 8, 3, 0, 0, 0, 3]);

        let d = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(d.labels(), &[7, 0, 9]);
        assert_eq!(d.dim(), 4);
        assert_eq!(
            d.input(1),
            &[84.0 / 255.0, 105.0 / 255.0, 126.0 / 255.0, 147.0 / 255.0]
        );
    }

    #[test]
    fn idx_errors_report_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img");
        let full = encode_idx(&IdxArray {
            dims: vec![2, 2, 2],
            data: vec![1; 8],
        })
        .unwrap();

        std::fs::write(&path, &full[..full.len() - 3]).unwrap();
        match read_idx(&path, IDX_IMAGES_MAGIC) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, full.len() as u64 - 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&path, &full[..6]).unwrap();
        assert!(matches!(
            read_idx(&path, IDX_IMAGES_MAGIC),
            Err(Error::Parse { offset: 6, .. })
        ));
        std::fs::write(&path, &full[..2]).unwrap();
        assert!(matches!(
            read_idx(&path, IDX_IMAGES_MAGIC),
            Err(Error::Parse { offset: 2, .. })
        ));
        std::fs::write(&path, &full).unwrap();
        assert!(matches!(
            read_idx(&path, IDX_LABELS_MAGIC),
            Err(Error::Parse { offset: 0, .. })
        ));
        assert!(matches!(
            read_idx(&dir.path().join("missing"), IDX_LABELS_MAGIC),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn idx_count_mismatch_is_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        write_idx(
            &ip,
            &IdxArray {
                dims: vec![2, 1, 1],
                data: vec![0, 1],
            },
        )
        .unwrap();
        write_idx(
            &lp,
            &IdxArray {
                dims: vec![3],
                data: vec![0, 1, 2],
            },
        )
        .unwrap();
        assert!(matches!(
            load_mnist_idx(&ip, &lp),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn mnist_split_is_seeded() {
        let n = 50;
        let train = IdxImages {
            count: n,
            pixels_per_image: 2,
            pixels: (0..2 * n).map(|i| i as u8).collect(),
            labels: (0..n).map(|i| (i % 10) as u8).collect(),
        };
        let test = IdxImages {
            count: 20,
            pixels_per_image: 2,
            pixels: vec![0; 40],
            labels: vec![3; 20],
        };
        let src = MnistSource::from_parts(train, test);
        let cfg = MnistConfig {
            train_size: 10,
            rho: 0.5,
            ..MnistConfig::default()
        };
        let a = src.split(&cfg, 1).unwrap();
        assert_eq!(a, src.split(&cfg, 1).unwrap());
        assert_ne!(a.train, src.split(&cfg, 2).unwrap().train);
        assert_eq!(a.train.len(), 10);
        assert_eq!(a.test.len(), 20);
        assert!(a.test.labels().iter().all(|&y| y == 3));
        let too_many = MnistConfig {
            train_size: 51,
            ..cfg
        };
        assert!(src.split(&too_many, 1).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let d = gen_diabetes(&SynthConfig::default()).unwrap().train;
        d.write_csv(&path).unwrap();
        let back = Dataset::read_csv(&path, 3).unwrap();
        assert_eq!(back.features(), d.features());
        assert_eq!(back.labels(), d.labels());
    }

    #[test]
    fn official_mnist_files_if_present() {
        let dir = mnist_dir();
        if !dir.join(MNIST_TRAIN_IMAGES).exists() {
            return;
        }
        let raw =
            IdxImages::read(&dir.join(MNIST_TRAIN_IMAGES), &dir.join(MNIST_TRAIN_LABELS)).unwrap();
        assert_eq!(raw.count, 60_000);
        assert_eq!(raw.pixels_per_image, 784);
    }
}
