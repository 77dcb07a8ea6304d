//! Dataset ingestion, semi-supervised splitting, batch sampling, and
//! pseudo-label augmentation.
//!
//! A [`DatasetSplit`] holds four disjoint partitions: a labeled training set,
//! an unlabeled training set, a labeled validation set, and a labeled test
//! set. All examples are flat `f64` row vectors with entries in `[0, 1]`.
//!
//! Two families of datasets are supported:
//!
//! * Synthetic 2-D mixtures (`gauss2d`, `aniso2d`, `rings2d`), generated on the fly from
//!   a seed. These run the full pipeline on a CPU in seconds.
//! * Image subsets (`cifar10-subset`, `svhn-subset`), read from a prepared
//!   binary cache under `<root>/<name>/`. The cache holds `meta.json` plus
//!   raw `u8` tensors (`train_x.bin`, `train_y.bin`, `test_x.bin`,
//!   `test_y.bin`); pixels are normalized to `[0, 1]` at load time.
//!
//! Splitting is deterministic: the same seed always yields byte-identical
//! partitions, and every split carries a [`SplitManifest`] of source indices
//! that can be persisted as a newline-delimited text file.

use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::{one_hot, Classifier};

/// Salt mixed into the user seed so that the split shuffle and the synthetic
/// data generator consume independent random streams.
const SPLIT_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Rows classified per forward pass when pseudo-labeling a large pool.
const PSEUDO_LABEL_CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown dataset id `{0}` (expected cifar10-subset, svhn-subset, gauss2d, aniso2d, or rings2d)")]
    UnknownDataset(String),
    #[error("missing dataset file {0}")]
    MissingFiles(PathBuf),
    #[error("corrupt dataset cache: {0}")]
    Corrupt(String),
    #[error("label {label} at row {row} is out of range for {num_classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("example value {value} at ({row}, {col}) is outside [0, 1]")]
    ValueOutOfRange { row: usize, col: usize, value: f64 },
    #[error("requested {n_labeled} labeled examples but only {available} are available")]
    BadSplitSize { n_labeled: usize, available: usize },
    #[error("cannot sample from empty {0} partition")]
    EmptyPartition(&'static str),
    #[error("label marginal requires a nonempty labeled set")]
    EmptyLabeled,
    #[error("malformed manifest line `{0}`")]
    BadManifestLine(String),
    #[error("dataset metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A fully labeled dataset: one example per row, one class index per row.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(x: Array2<f64>, y: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if x.nrows() != y.len() {
            return Err(DataError::Corrupt(format!(
                "{} example rows but {} labels",
                x.nrows(),
                y.len()
            )));
        }
        for (row, &label) in y.iter().enumerate() {
            if label >= num_classes {
                return Err(DataError::LabelOutOfRange {
                    row,
                    label,
                    num_classes,
                });
            }
        }
        check_value_range(&x)?;
        Ok(Self { x, y, num_classes })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_value_range(x: &Array2<f64>) -> Result<(), DataError> {
    for ((row, col), &value) in x.indexed_iter() {
        if !(0.0..=1.0).contains(&value) || value.is_nan() {
            return Err(DataError::ValueOutOfRange { row, col, value });
        }
    }
    Ok(())
}

/// Source-index bookkeeping for a split, persistable as a newline-delimited
/// text file (`l <i>` / `v <i>` / `u <i>` lines, indices into the original
/// training set in partition order).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub labeled: Vec<usize>,
    pub validation: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out = String::new();
        for &i in &self.labeled {
            out.push_str(&format!("l {i}\n"));
        }
        for &i in &self.validation {
            out.push_str(&format!("v {i}\n"));
        }
        for &i in &self.unlabeled {
            out.push_str(&format!("u {i}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path)?;
        let mut manifest = SplitManifest::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let tag = parts.next();
            let idx = parts.next().and_then(|s| s.parse::<usize>().ok());
            match (tag, idx, parts.next()) {
                (Some("l"), Some(i), None) => manifest.labeled.push(i),
                (Some("v"), Some(i), None) => manifest.validation.push(i),
                (Some("u"), Some(i), None) => manifest.unlabeled.push(i),
                _ => return Err(DataError::BadManifestLine(line.to_string())),
            }
        }
        Ok(manifest)
    }
}

/// Disjoint labeled / unlabeled / validation / test partitions sharing one
/// example shape and the `[0, 1]` value range.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub labeled_x: Array2<f64>,
    pub labeled_y: Vec<usize>,
    pub unlabeled_x: Array2<f64>,
    pub validation_x: Array2<f64>,
    pub validation_y: Vec<usize>,
    pub test_x: Array2<f64>,
    pub test_y: Vec<usize>,
    pub num_classes: usize,
    /// Source indices (into the originating training set) for the three
    /// training-side partitions.
    pub manifest: SplitManifest,
}

impl DatasetSplit {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        labeled_x: Array2<f64>,
        labeled_y: Vec<usize>,
        unlabeled_x: Array2<f64>,
        validation_x: Array2<f64>,
        validation_y: Vec<usize>,
        test_x: Array2<f64>,
        test_y: Vec<usize>,
        num_classes: usize,
        manifest: SplitManifest,
    ) -> Result<Self, DataError> {
        let split = Self {
            labeled_x,
            labeled_y,
            unlabeled_x,
            validation_x,
            validation_y,
            test_x,
            test_y,
            num_classes,
            manifest,
        };
        split.validate()?;
        Ok(split)
    }

    /// Checks shapes, label ranges, and the `[0, 1]` value range on every
    /// partition.
    pub fn validate(&self) -> Result<(), DataError> {
        let d = self.data_dim();
        for (name, x) in [
            ("labeled", &self.labeled_x),
            ("unlabeled", &self.unlabeled_x),
            ("validation", &self.validation_x),
            ("test", &self.test_x),
        ] {
            if x.nrows() > 0 && x.ncols() != d {
                return Err(DataError::Corrupt(format!(
                    "{name} examples have width {} but labeled examples have width {d}",
                    x.ncols()
                )));
            }
            check_value_range(x)?;
        }
        for (name, x, y) in [
            ("labeled", &self.labeled_x, &self.labeled_y),
            ("validation", &self.validation_x, &self.validation_y),
            ("test", &self.test_x, &self.test_y),
        ] {
            if x.nrows() != y.len() {
                return Err(DataError::Corrupt(format!(
                    "{name} has {} examples but {} labels",
                    x.nrows(),
                    y.len()
                )));
            }
            for (row, &label) in y.iter().enumerate() {
                if label >= self.num_classes {
                    return Err(DataError::LabelOutOfRange {
                        row,
                        label,
                        num_classes: self.num_classes,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn data_dim(&self) -> usize {
        self.labeled_x.ncols()
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled_x.nrows()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled_x.nrows()
    }

    pub fn n_validation(&self) -> usize {
        self.validation_x.nrows()
    }

    pub fn n_test(&self) -> usize {
        self.test_x.nrows()
    }

    /// Total labeled examples drawn from the source, counting both the
    /// training portion and the validation hold-out carved from it.
    pub fn labeled_budget(&self) -> usize {
        self.n_labeled() + self.n_validation()
    }
}

/// One optimization step's worth of data: a labeled minibatch with one-hot
/// targets plus an unlabeled minibatch.
#[derive(Debug, Clone)]
pub struct BatchPair {
    pub labeled_x: Array2<f64>,
    /// One-hot targets, one row per labeled example.
    pub labeled_y: Array2<f64>,
    /// The same targets as class indices.
    pub labeled_classes: Vec<usize>,
    pub unlabeled_x: Array2<f64>,
}

/// Empirical class distribution of a labeled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMarginal {
    pub probabilities: Array1<f64>,
}

impl LabelMarginal {
    /// Draws a class index by inverse-CDF sampling.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (k, &p) in self.probabilities.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        self.probabilities.len() - 1
    }

    /// Draws a batch of class indices and stacks them as one-hot rows.
    pub fn sample_one_hot<R: Rng>(&self, count: usize, rng: &mut R) -> (Array2<f64>, Vec<usize>) {
        let classes: Vec<usize> = (0..count).map(|_| self.sample(rng)).collect();
        (one_hot(&classes, self.probabilities.len()), classes)
    }
}

/// Knobs for [`load_dataset_with`]. `Default` reproduces the standard
/// configuration of each supported dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    /// Labeled budget; the rest of the training set has labels removed.
    /// `None` uses the per-dataset default (4000 for cifar10-subset, 1000
    /// for svhn-subset, 300 for the synthetic mixtures).
    pub n_labeled: Option<usize>,
    /// Fraction of the labeled budget held out for validation.
    pub validation_fraction: f64,
    /// Seed for synthetic generation and the labeled/unlabeled shuffle.
    pub seed: u64,
    /// Synthetic datasets only: class count (mixture components or rings).
    pub synth_classes: usize,
    /// Synthetic datasets only: training examples per class.
    pub synth_train_per_class: usize,
    /// Synthetic datasets only: test examples per class.
    pub synth_test_per_class: usize,
    /// Synthetic datasets only: coordinate noise scale.
    pub synth_noise: f64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            n_labeled: None,
            validation_fraction: 0.2,
            seed: 0,
            synth_classes: 3,
            synth_train_per_class: 1000,
            synth_test_per_class: 200,
            synth_noise: 0.05,
        }
    }
}

fn default_n_labeled(name: &str) -> usize {
    match name {
        "cifar10-subset" => 4000,
        "svhn-subset" => 1000,
        _ => 300,
    }
}

/// Loads a supported dataset with its standard configuration: the labeled
/// budget is 4000 for `cifar10-subset`, 1000 for `svhn-subset`, and 300 for
/// the synthetic mixtures, with a fifth of that budget held out as the
/// validation set.
/// Names accepted by [`load_dataset`] / [`load_dataset_with`].
pub const DATASET_NAMES: &[&str] =
    &["gauss2d", "aniso2d", "rings2d", "cifar10-subset", "svhn-subset"];

pub fn load_dataset(name: &str, root: &Path) -> Result<DatasetSplit, DataError> {
    load_dataset_with(name, root, &DatasetOptions::default())
}

/// Loads a supported dataset with explicit options.
pub fn load_dataset_with(
    name: &str,
    root: &Path,
    opts: &DatasetOptions,
) -> Result<DatasetSplit, DataError> {
    let (train, test) = match name {
        "gauss2d" => synth_gauss2d(
            opts.synth_classes,
            opts.synth_train_per_class,
            opts.synth_test_per_class,
            opts.synth_noise,
            opts.seed,
        )?,
        "aniso2d" => synth_aniso2d(
            opts.synth_classes,
            opts.synth_train_per_class,
            opts.synth_test_per_class,
            opts.synth_noise,
            opts.seed,
        )?,
        "rings2d" => synth_rings2d(
            opts.synth_classes,
            opts.synth_train_per_class,
            opts.synth_test_per_class,
            opts.synth_noise,
            opts.seed,
        )?,
        "cifar10-subset" | "svhn-subset" => load_binary_cache(&root.join(name))?,
        other => return Err(DataError::UnknownDataset(other.to_string())),
    };
    let n_labeled = opts.n_labeled.unwrap_or_else(|| default_n_labeled(name));
    let mut split =
        make_semisupervised_split(&train, n_labeled, opts.seed ^ SPLIT_STREAM_SALT)?;
    carve_validation(&mut split, opts.validation_fraction);
    split.test_x = test.x;
    split.test_y = test.y;
    split.validate()?;
    Ok(split)
}

/// Randomly partitions a fully labeled training set into `n_labeled` examples
/// that keep their labels and a remainder whose labels are dropped. The same
/// seed always produces byte-identical partitions. Validation and test come
/// back empty; see [`load_dataset_with`] for the full pipeline.
pub fn make_semisupervised_split(
    full: &LabeledDataset,
    n_labeled: usize,
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    if n_labeled == 0 || n_labeled > full.len() {
        return Err(DataError::BadSplitSize {
            n_labeled,
            available: full.len(),
        });
    }
    let mut indices: Vec<usize> = (0..full.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let labeled_idx = indices[..n_labeled].to_vec();
    let unlabeled_idx = indices[n_labeled..].to_vec();

    let labeled_x = select_rows(&full.x, &labeled_idx);
    let labeled_y: Vec<usize> = labeled_idx.iter().map(|&i| full.y[i]).collect();
    let unlabeled_x = select_rows(&full.x, &unlabeled_idx);
    let d = full.x.ncols();

    DatasetSplit::from_parts(
        labeled_x,
        labeled_y,
        unlabeled_x,
        Array2::zeros((0, d)),
        Vec::new(),
        Array2::zeros((0, d)),
        Vec::new(),
        full.num_classes,
        SplitManifest {
            labeled: labeled_idx,
            validation: Vec::new(),
            unlabeled: unlabeled_idx,
        },
    )
}

/// Moves the tail `fraction` of the labeled partition into validation. The
/// labeled rows are already in shuffled order, so the tail is a uniform
/// subsample; no additional randomness is consumed.
pub fn carve_validation(split: &mut DatasetSplit, fraction: f64) {
    let n = split.n_labeled();
    let n_val = ((n as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
    let keep = n - n_val;
    split.validation_x = split.labeled_x.slice(ndarray::s![keep.., ..]).to_owned();
    split.validation_y = split.labeled_y.split_off(keep);
    split.labeled_x = split.labeled_x.slice(ndarray::s![..keep, ..]).to_owned();
    split.manifest.validation = split.manifest.labeled.split_off(keep);
}

fn select_rows(x: &Array2<f64>, indices: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((indices.len(), x.ncols()));
    for (row, &i) in indices.iter().enumerate() {
        out.row_mut(row).assign(&x.row(i));
    }
    out
}

/// Draws a labeled minibatch and an unlabeled minibatch, both uniformly with
/// replacement, and attaches one-hot targets to the labeled half.
pub fn sample_batch<R: Rng>(
    split: &DatasetSplit,
    sizes: (usize, usize),
    rng: &mut R,
) -> Result<BatchPair, DataError> {
    let (n_l, n_u) = sizes;
    if n_l > 0 && split.n_labeled() == 0 {
        return Err(DataError::EmptyPartition("labeled"));
    }
    if n_u > 0 && split.n_unlabeled() == 0 {
        return Err(DataError::EmptyPartition("unlabeled"));
    }
    let labeled_idx: Vec<usize> = (0..n_l).map(|_| rng.gen_range(0..split.n_labeled())).collect();
    let unlabeled_idx: Vec<usize> =
        (0..n_u).map(|_| rng.gen_range(0..split.n_unlabeled())).collect();
    let labeled_classes: Vec<usize> = labeled_idx.iter().map(|&i| split.labeled_y[i]).collect();
    Ok(BatchPair {
        labeled_x: select_rows(&split.labeled_x, &labeled_idx),
        labeled_y: one_hot(&labeled_classes, split.num_classes),
        labeled_classes,
        unlabeled_x: select_rows(&split.unlabeled_x, &unlabeled_idx),
    })
}

/// Rows of `probs` whose maximum entry reaches `threshold`, paired with the
/// argmax class. Ties resolve to the lowest class index.
pub fn confident_rows(probs: &Array2<f64>, threshold: f64) -> Vec<(usize, usize)> {
    let mut picked = Vec::new();
    for (row, p) in probs.axis_iter(Axis(0)).enumerate() {
        let mut best = 0;
        let mut best_p = f64::NEG_INFINITY;
        for (k, &v) in p.iter().enumerate() {
            if v > best_p {
                best_p = v;
                best = k;
            }
        }
        if best_p >= threshold {
            picked.push((row, best));
        }
    }
    picked
}

/// Appends every unlabeled example the classifier scores at or above
/// `threshold` to the labeled partition with its predicted class as a hard
/// label. Existing labeled pairs are untouched and the unlabeled pool keeps
/// all of its rows, so distribution-matching terms that read the unlabeled
/// pool are unaffected.
pub fn augment_with_pseudo_labels(
    split: &DatasetSplit,
    classifier: &Classifier,
    threshold: f64,
) -> DatasetSplit {
    assert_eq!(
        classifier.num_classes, split.num_classes,
        "classifier and dataset disagree on the class count"
    );
    let mut picked: Vec<(usize, usize)> = Vec::new();
    let n = split.n_unlabeled();
    let mut start = 0;
    while start < n {
        let stop = (start + PSEUDO_LABEL_CHUNK).min(n);
        let chunk = split.unlabeled_x.slice(ndarray::s![start..stop, ..]).to_owned();
        let probs = classifier.classify(&chunk);
        picked.extend(
            confident_rows(&probs, threshold)
                .into_iter()
                .map(|(row, class)| (start + row, class)),
        );
        start = stop;
    }

    let mut out = split.clone();
    if picked.is_empty() {
        return out;
    }
    let extra_idx: Vec<usize> = picked.iter().map(|&(i, _)| i).collect();
    let extra_x = select_rows(&split.unlabeled_x, &extra_idx);
    let mut labeled_x = Array2::zeros((split.n_labeled() + picked.len(), split.data_dim()));
    labeled_x
        .slice_mut(ndarray::s![..split.n_labeled(), ..])
        .assign(&split.labeled_x);
    labeled_x
        .slice_mut(ndarray::s![split.n_labeled().., ..])
        .assign(&extra_x);
    out.labeled_x = labeled_x;
    out.labeled_y.extend(picked.iter().map(|&(_, class)| class));
    out
}

/// Empirical class frequencies of the labeled partition.
pub fn label_marginal(split: &DatasetSplit) -> Result<LabelMarginal, DataError> {
    if split.n_labeled() == 0 {
        return Err(DataError::EmptyLabeled);
    }
    let mut counts = Array1::<f64>::zeros(split.num_classes);
    for &y in &split.labeled_y {
        counts[y] += 1.0;
    }
    let total = split.n_labeled() as f64;
    Ok(LabelMarginal {
        probabilities: counts / total,
    })
}

// ---------------------------------------------------------------------------
// Synthetic 2-D mixtures
// ---------------------------------------------------------------------------

/// Gaussian mixture in the unit square: one isotropic blob per class, means
/// evenly spaced on a circle of radius 0.3 around (0.5, 0.5). Returns
/// (train, test).
pub fn synth_gauss2d(
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    noise: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset), DataError> {
    if classes == 0 {
        return Err(DataError::Corrupt("synthetic dataset needs at least one class".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let means: Vec<(f64, f64)> = (0..classes)
        .map(|k| {
            let angle = std::f64::consts::TAU * (k as f64) / (classes as f64)
                + std::f64::consts::FRAC_PI_2;
            (0.5 + 0.3 * angle.cos(), 0.5 + 0.3 * angle.sin())
        })
        .collect();
    let draw = |per_class: usize, rng: &mut ChaCha20Rng| {
        let n = per_class * classes;
        let mut x = Array2::zeros((n, 2));
        let mut y = Vec::with_capacity(n);
        let normal = rand_distr::Normal::new(0.0, noise).expect("finite noise scale");
        for (k, mean) in means.iter().enumerate() {
            for i in 0..per_class {
                let row = k * per_class + i;
                x[[row, 0]] = (mean.0 + rng.sample(normal)).clamp(0.0, 1.0);
                x[[row, 1]] = (mean.1 + rng.sample(normal)).clamp(0.0, 1.0);
                y.push(k);
            }
        }
        LabeledDataset::new(x, y, classes)
    };
    let train = draw(train_per_class, &mut rng)?;
    let test = draw(test_per_class, &mut rng)?;
    Ok((train, test))
}

/// Anisotropic Gaussian mixture in the unit square with collinear means. The
/// two coordinates carry the same class ordering but differ sharply in scale:
/// coordinate 0 spreads the class means over [0.44, 0.56] with a fixed 0.006
/// standard deviation, so it separates the classes almost perfectly while
/// leaving only a thin margin between them; coordinate 1 spreads the means
/// over [0.2, 0.8] with standard deviation `noise`, trading some separation
/// for a much wider margin. Classifiers that lean on the narrow coordinate
/// fit the data easily but sit within reach of small input perturbations,
/// whereas the wide coordinate supports decisions that survive them — which
/// makes this mixture a good testbed for comparing natural and
/// adversarially-trained models. Returns (train, test).
pub fn synth_aniso2d(
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    noise: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset), DataError> {
    if classes == 0 {
        return Err(DataError::Corrupt("synthetic dataset needs at least one class".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let spread = |k: usize| {
        if classes == 1 {
            0.5
        } else {
            (k as f64) / ((classes - 1) as f64)
        }
    };
    let means: Vec<(f64, f64)> = (0..classes)
        .map(|k| (0.44 + 0.12 * spread(k), 0.2 + 0.6 * spread(k)))
        .collect();
    let draw = |per_class: usize, rng: &mut ChaCha20Rng| {
        let n = per_class * classes;
        let mut x = Array2::zeros((n, 2));
        let mut y = Vec::with_capacity(n);
        let narrow = rand_distr::Normal::new(0.0, 0.006).expect("finite noise scale");
        let wide = rand_distr::Normal::new(0.0, noise).expect("finite noise scale");
        for (k, mean) in means.iter().enumerate() {
            for i in 0..per_class {
                let row = k * per_class + i;
                x[[row, 0]] = (mean.0 + rng.sample(narrow)).clamp(0.0, 1.0);
                x[[row, 1]] = (mean.1 + rng.sample(wide)).clamp(0.0, 1.0);
                y.push(k);
            }
        }
        LabeledDataset::new(x, y, classes)
    };
    let train = draw(train_per_class, &mut rng)?;
    let test = draw(test_per_class, &mut rng)?;
    Ok((train, test))
}

/// Concentric rings in the unit square: one ring per class around (0.5, 0.5)
/// with radii evenly spaced in [0.12, 0.42], uniform angle, and Gaussian
/// radial noise. Returns (train, test).
pub fn synth_rings2d(
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    noise: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset), DataError> {
    if classes == 0 {
        return Err(DataError::Corrupt("synthetic dataset needs at least one class".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let radii: Vec<f64> = (0..classes)
        .map(|k| {
            if classes == 1 {
                0.3
            } else {
                0.12 + 0.3 * (k as f64) / ((classes - 1) as f64)
            }
        })
        .collect();
    let draw = |per_class: usize, rng: &mut ChaCha20Rng| {
        let n = per_class * classes;
        let mut x = Array2::zeros((n, 2));
        let mut y = Vec::with_capacity(n);
        let normal = rand_distr::Normal::new(0.0, noise).expect("finite noise scale");
        for (k, &radius) in radii.iter().enumerate() {
            for i in 0..per_class {
                let row = k * per_class + i;
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = radius + rng.sample(normal);
                x[[row, 0]] = (0.5 + r * angle.cos()).clamp(0.0, 1.0);
                x[[row, 1]] = (0.5 + r * angle.sin()).clamp(0.0, 1.0);
                y.push(k);
            }
        }
        LabeledDataset::new(x, y, classes)
    };
    let train = draw(train_per_class, &mut rng)?;
    let test = draw(test_per_class, &mut rng)?;
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// Prepared binary cache for image subsets
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CacheMeta {
    num_classes: usize,
    data_dim: usize,
    n_train: usize,
    n_test: usize,
}

/// Reads a prepared image cache from `dir`: `meta.json` describing the
/// shapes, then `train_x.bin`/`test_x.bin` as row-major `u8` pixels and
/// `train_y.bin`/`test_y.bin` as one `u8` class index per example. Pixels are
/// scaled to `[0, 1]`.
pub fn load_binary_cache(dir: &Path) -> Result<(LabeledDataset, LabeledDataset), DataError> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(DataError::MissingFiles(meta_path));
    }
    let meta: CacheMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)
        .map_err(|e| DataError::Meta(e.to_string()))?;
    if meta.num_classes == 0 || meta.num_classes > 256 || meta.data_dim == 0 {
        return Err(DataError::Meta(format!(
            "implausible metadata: {} classes, width {}",
            meta.num_classes, meta.data_dim
        )));
    }
    let train = read_split(dir, "train", meta.n_train, meta.data_dim, meta.num_classes)?;
    let test = read_split(dir, "test", meta.n_test, meta.data_dim, meta.num_classes)?;
    Ok((train, test))
}

fn read_split(
    dir: &Path,
    stem: &str,
    n: usize,
    d: usize,
    num_classes: usize,
) -> Result<LabeledDataset, DataError> {
    let x_bytes = read_exact_file(&dir.join(format!("{stem}_x.bin")), n * d)?;
    let y_bytes = read_exact_file(&dir.join(format!("{stem}_y.bin")), n)?;
    let x = Array2::from_shape_vec((n, d), x_bytes.iter().map(|&b| b as f64 / 255.0).collect())
        .expect("length checked above");
    let y: Vec<usize> = y_bytes.iter().map(|&b| b as usize).collect();
    LabeledDataset::new(x, y, num_classes)
}

fn read_exact_file(path: &Path, expected_len: usize) -> Result<Vec<u8>, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFiles(path.to_path_buf()));
    }
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() != expected_len {
        return Err(DataError::Corrupt(format!(
            "{} holds {} bytes, expected {expected_len}",
            path.display(),
            buf.len()
        )));
    }
    Ok(buf)
}

/// Writes a prepared image cache in the layout [`load_binary_cache`] reads.
/// Intended for one-time dataset preparation scripts and tests.
pub fn write_binary_cache(
    dir: &Path,
    train: (&[u8], &[u8]),
    test: (&[u8], &[u8]),
    num_classes: usize,
    data_dim: usize,
) -> Result<(), DataError> {
    if !train.0.len().is_multiple_of(data_dim) || !test.0.len().is_multiple_of(data_dim) {
        return Err(DataError::Corrupt("pixel buffer not a multiple of the example width".into()));
    }
    let meta = CacheMeta {
        num_classes,
        data_dim,
        n_train: train.0.len() / data_dim,
        n_test: test.0.len() / data_dim,
    };
    if meta.n_train != train.1.len() || meta.n_test != test.1.len() {
        return Err(DataError::Corrupt("label count does not match example count".into()));
    }
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&meta).expect("plain struct serializes"),
    )?;
    fs::write(dir.join("train_x.bin"), train.0)?;
    fs::write(dir.join("train_y.bin"), train.1)?;
    fs::write(dir.join("test_x.bin"), test.0)?;
    fs::write(dir.join("test_y.bin"), test.1)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_models, NetSpec};
    use approx::assert_abs_diff_eq;

    fn toy_dataset(n: usize, classes: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, 2), |_| rng.gen::<f64>());
        let y: Vec<usize> = (0..n).map(|i| i % classes).collect();
        LabeledDataset::new(x, y, classes).unwrap()
    }

    #[test]
    fn split_respects_requested_counts() {
        let full = toy_dataset(120, 3, 1);
        let split = make_semisupervised_split(&full, 40, 7).unwrap();
        assert_eq!(split.n_labeled(), 40);
        assert_eq!(split.n_unlabeled(), 80);
        assert_eq!(split.n_validation(), 0);
        assert_eq!(split.n_test(), 0);
    }

    #[test]
    fn split_with_full_budget_leaves_unlabeled_empty() {
        let full = toy_dataset(50, 2, 1);
        let split = make_semisupervised_split(&full, 50, 3).unwrap();
        assert_eq!(split.n_labeled(), 50);
        assert_eq!(split.n_unlabeled(), 0);
    }

    #[test]
    fn split_rejects_out_of_range_budget() {
        let full = toy_dataset(10, 2, 1);
        assert!(matches!(
            make_semisupervised_split(&full, 0, 3),
            Err(DataError::BadSplitSize { .. })
        ));
        assert!(matches!(
            make_semisupervised_split(&full, 11, 3),
            Err(DataError::BadSplitSize { .. })
        ));
    }

    #[test]
    fn split_is_byte_identical_for_equal_seeds() {
        let full = toy_dataset(200, 4, 9);
        let a = make_semisupervised_split(&full, 60, 42).unwrap();
        let b = make_semisupervised_split(&full, 60, 42).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.labeled_x, b.labeled_x);
        assert_eq!(a.labeled_y, b.labeled_y);
        assert_eq!(a.unlabeled_x, b.unlabeled_x);
        let c = make_semisupervised_split(&full, 60, 43).unwrap();
        assert_ne!(a.manifest, c.manifest);
    }

    #[test]
    fn split_partitions_are_disjoint_and_cover_the_source() {
        let full = toy_dataset(150, 3, 5);
        let mut split = make_semisupervised_split(&full, 50, 11).unwrap();
        carve_validation(&mut split, 0.2);
        let mut all: Vec<usize> = split
            .manifest
            .labeled
            .iter()
            .chain(&split.manifest.validation)
            .chain(&split.manifest.unlabeled)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..150).collect::<Vec<_>>());
        // Rows must match their manifest indices exactly.
        for (row, &src) in split.manifest.labeled.iter().enumerate() {
            assert_eq!(split.labeled_x.row(row), full.x.row(src));
            assert_eq!(split.labeled_y[row], full.y[src]);
        }
        for (row, &src) in split.manifest.unlabeled.iter().enumerate() {
            assert_eq!(split.unlabeled_x.row(row), full.x.row(src));
        }
    }

    #[test]
    fn validation_carve_takes_a_fifth_of_the_labeled_budget() {
        let full = toy_dataset(100, 2, 3);
        let mut split = make_semisupervised_split(&full, 40, 1).unwrap();
        carve_validation(&mut split, 0.2);
        assert_eq!(split.n_labeled(), 32);
        assert_eq!(split.n_validation(), 8);
        assert_eq!(split.labeled_budget(), 40);
        for (row, &src) in split.manifest.validation.iter().enumerate() {
            assert_eq!(split.validation_x.row(row), full.x.row(src));
            assert_eq!(split.validation_y[row], full.y[src]);
        }
    }

    #[test]
    fn gauss2d_loads_with_defaults() {
        let split = load_dataset("gauss2d", Path::new("/nonexistent")).unwrap();
        assert_eq!(split.num_classes, 3);
        assert_eq!(split.data_dim(), 2);
        assert_eq!(split.labeled_budget(), 300);
        assert_eq!(split.n_labeled(), 240);
        assert_eq!(split.n_validation(), 60);
        assert_eq!(split.n_unlabeled(), 2700);
        assert_eq!(split.n_test(), 600);
        split.validate().unwrap();
    }

    #[test]
    fn rings2d_examples_stay_in_the_unit_square() {
        let (train, test) = synth_rings2d(4, 50, 10, 0.05, 21).unwrap();
        for &v in train.x.iter().chain(test.x.iter()) {
            assert!((0.0..=1.0).contains(&v));
        }
        assert_eq!(train.len(), 200);
        assert_eq!(test.len(), 40);
    }

    #[test]
    fn gauss2d_classes_form_separated_clusters() {
        let (train, _) = synth_gauss2d(3, 200, 10, 0.03, 5).unwrap();
        // Class means should be far apart relative to the noise scale.
        let mut means = [(0.0, 0.0); 3];
        for (row, &k) in train.y.iter().enumerate() {
            means[k].0 += train.x[[row, 0]] / 200.0;
            means[k].1 += train.x[[row, 1]] / 200.0;
        }
        for a in 0..3 {
            for b in (a + 1)..3 {
                let d = ((means[a].0 - means[b].0).powi(2) + (means[a].1 - means[b].1).powi(2))
                    .sqrt();
                assert!(d > 0.3, "means {a} and {b} are only {d} apart");
            }
        }
    }

    #[test]
    fn aniso2d_coordinates_have_contrasting_scales() {
        let (train, _) = synth_aniso2d(3, 400, 10, 0.06, 11).unwrap();
        // Per-class sample means track the collinear layout and the narrow
        // coordinate's spread stays an order of magnitude below the wide one's.
        let expected = [(0.44, 0.2), (0.5, 0.5), (0.56, 0.8)];
        for k in 0..3 {
            let rows: Vec<usize> =
                (0..train.len()).filter(|&i| train.y[i] == k).collect();
            let n = rows.len() as f64;
            let mean0: f64 = rows.iter().map(|&i| train.x[[i, 0]]).sum::<f64>() / n;
            let mean1: f64 = rows.iter().map(|&i| train.x[[i, 1]]).sum::<f64>() / n;
            assert!((mean0 - expected[k].0).abs() < 0.003, "class {k} mean0 {mean0}");
            assert!((mean1 - expected[k].1).abs() < 0.02, "class {k} mean1 {mean1}");
            let var0: f64 =
                rows.iter().map(|&i| (train.x[[i, 0]] - mean0).powi(2)).sum::<f64>() / n;
            let var1: f64 =
                rows.iter().map(|&i| (train.x[[i, 1]] - mean1).powi(2)).sum::<f64>() / n;
            assert!((var0.sqrt() - 0.006).abs() < 0.003, "class {k} sd0 {}", var0.sqrt());
            assert!((var1.sqrt() - 0.06).abs() < 0.02, "class {k} sd1 {}", var1.sqrt());
        }
    }

    #[test]
    fn aniso2d_loads_and_redraws_deterministically() {
        let opts = DatasetOptions { synth_noise: 0.06, ..DatasetOptions::default() };
        let a = load_dataset_with("aniso2d", Path::new("/nonexistent"), &opts).unwrap();
        let b = load_dataset_with("aniso2d", Path::new("/nonexistent"), &opts).unwrap();
        assert_eq!(a.labeled_x, b.labeled_x);
        assert_eq!(a.test_x, b.test_x);
        assert_eq!(a.num_classes, 3);
        assert_eq!(a.data_dim(), 2);
        a.validate().unwrap();
    }

    #[test]
    fn unknown_dataset_id_is_rejected() {
        assert!(matches!(
            load_dataset("mnist", Path::new("/tmp")),
            Err(DataError::UnknownDataset(_))
        ));
    }

    #[test]
    fn batch_sampling_matches_requested_sizes_and_seed() {
        let split = load_dataset("gauss2d", Path::new("/nonexistent")).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let batch = sample_batch(&split, (32, 48), &mut rng).unwrap();
        assert_eq!(batch.labeled_x.nrows(), 32);
        assert_eq!(batch.labeled_y.nrows(), 32);
        assert_eq!(batch.unlabeled_x.nrows(), 48);
        for row in batch.labeled_y.axis_iter(Axis(0)) {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
        // Same seed replays the identical batch sequence.
        let mut r1 = ChaCha20Rng::seed_from_u64(5);
        let mut r2 = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..3 {
            let a = sample_batch(&split, (8, 8), &mut r1).unwrap();
            let b = sample_batch(&split, (8, 8), &mut r2).unwrap();
            assert_eq!(a.labeled_x, b.labeled_x);
            assert_eq!(a.labeled_classes, b.labeled_classes);
            assert_eq!(a.unlabeled_x, b.unlabeled_x);
        }
    }

    #[test]
    fn singleton_batch_returns_the_unique_items() {
        let x = Array2::from_shape_vec((2, 2), vec![0.1, 0.2, 0.9, 0.8]).unwrap();
        let split = DatasetSplit::from_parts(
            x.slice(ndarray::s![..1, ..]).to_owned(),
            vec![0],
            x.slice(ndarray::s![1.., ..]).to_owned(),
            Array2::zeros((0, 2)),
            Vec::new(),
            Array2::zeros((0, 2)),
            Vec::new(),
            1,
            SplitManifest::default(),
        )
        .unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let batch = sample_batch(&split, (1, 1), &mut rng).unwrap();
        assert_eq!(batch.labeled_x.row(0).to_vec(), [0.1, 0.2]);
        assert_eq!(batch.unlabeled_x.row(0).to_vec(), [0.9, 0.8]);
    }

    #[test]
    fn empty_partition_requests_are_rejected() {
        let split = DatasetSplit::from_parts(
            Array2::zeros((0, 2)),
            Vec::new(),
            Array2::zeros((0, 2)),
            Array2::zeros((0, 2)),
            Vec::new(),
            Array2::zeros((0, 2)),
            Vec::new(),
            2,
            SplitManifest::default(),
        );
        // Zero-row labeled partition means from_parts itself is fine...
        let split = split.unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        // ...but sampling from it is not.
        assert!(matches!(
            sample_batch(&split, (1, 0), &mut rng),
            Err(DataError::EmptyPartition("labeled"))
        ));
        assert!(matches!(
            sample_batch(&split, (0, 1), &mut rng),
            Err(DataError::EmptyPartition("unlabeled"))
        ));
    }

    #[test]
    fn confident_rows_follow_threshold_and_argmax() {
        let probs = Array2::from_shape_vec((1, 2), vec![0.7, 0.3]).unwrap();
        assert_eq!(confident_rows(&probs, 0.5), vec![(0, 0)]);
        // A threshold above 1 admits nothing.
        assert_eq!(confident_rows(&probs, 1.0 + 1e-9), vec![]);
        let uniform = Array2::from_elem((1, 10), 0.1);
        assert_eq!(confident_rows(&uniform, 0.2), vec![]);
        assert_eq!(confident_rows(&uniform, 0.1), vec![(0, 0)]);
    }

    #[test]
    fn pseudo_labels_extend_but_never_rewrite_the_labeled_set() {
        let split = load_dataset_with(
            "gauss2d",
            Path::new("/nonexistent"),
            &DatasetOptions {
                n_labeled: Some(60),
                synth_train_per_class: 100,
                ..DatasetOptions::default()
            },
        )
        .unwrap();
        let spec = NetSpec {
            data_dim: 2,
            classifier_depth: 4,
            classifier_width: 1,
            ..NetSpec::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let models = build_models(&spec, 3, &mut rng).unwrap();
        // Threshold 0 pseudo-labels everything; the originals must survive.
        let grown = augment_with_pseudo_labels(&split, &models.c, 0.0);
        assert_eq!(grown.n_labeled(), split.n_labeled() + split.n_unlabeled());
        assert_eq!(grown.n_unlabeled(), split.n_unlabeled());
        assert_eq!(
            grown.labeled_x.slice(ndarray::s![..split.n_labeled(), ..]),
            split.labeled_x
        );
        assert_eq!(&grown.labeled_y[..split.n_labeled()], &split.labeled_y[..]);
        grown.validate().unwrap();
        // An unreachable threshold changes nothing.
        let same = augment_with_pseudo_labels(&split, &models.c, 1.1);
        assert_eq!(same.n_labeled(), split.n_labeled());
    }

    #[test]
    fn label_marginal_matches_empirical_frequencies() {
        let full = toy_dataset(100, 10, 2);
        let split = make_semisupervised_split(&full, 100, 0).unwrap();
        let marginal = label_marginal(&split).unwrap();
        for &p in marginal.probabilities.iter() {
            assert_abs_diff_eq!(p, 0.1, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(marginal.probabilities.sum(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn label_marginal_reproduces_skewed_counts() {
        // Class counts matching a 2000-example digit subset with 392 ones.
        let counts = [134usize, 392, 319, 221, 194, 183, 152, 155, 128, 122];
        let n: usize = counts.iter().sum();
        assert_eq!(n, 2000);
        let mut y = Vec::new();
        for (k, &c) in counts.iter().enumerate() {
            y.extend(std::iter::repeat_n(k, c));
        }
        let split = DatasetSplit::from_parts(
            Array2::zeros((n, 2)),
            y,
            Array2::zeros((0, 2)),
            Array2::zeros((0, 2)),
            Vec::new(),
            Array2::zeros((0, 2)),
            Vec::new(),
            10,
            SplitManifest::default(),
        )
        .unwrap();
        let marginal = label_marginal(&split).unwrap();
        assert_abs_diff_eq!(marginal.probabilities[1], 0.196, epsilon = 1e-12);
        assert_abs_diff_eq!(marginal.probabilities.sum(), 1.0, epsilon = 1e-9);
        assert!(marginal.probabilities.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn degenerate_marginal_is_one_hot_and_empty_errors() {
        let split = DatasetSplit::from_parts(
            Array2::zeros((5, 2)),
            vec![2; 5],
            Array2::zeros((0, 2)),
            Array2::zeros((0, 2)),
            Vec::new(),
            Array2::zeros((0, 2)),
            Vec::new(),
            4,
            SplitManifest::default(),
        )
        .unwrap();
        let marginal = label_marginal(&split).unwrap();
        assert_eq!(marginal.probabilities.to_vec(), vec![0.0, 0.0, 1.0, 0.0]);

        let empty = DatasetSplit::from_parts(
            Array2::zeros((0, 2)),
            Vec::new(),
            Array2::zeros((3, 2)),
            Array2::zeros((0, 2)),
            Vec::new(),
            Array2::zeros((0, 2)),
            Vec::new(),
            4,
            SplitManifest::default(),
        )
        .unwrap();
        assert!(matches!(label_marginal(&empty), Err(DataError::EmptyLabeled)));
    }

    #[test]
    fn marginal_sampling_tracks_the_distribution() {
        let marginal = LabelMarginal {
            probabilities: Array1::from_vec(vec![0.8, 0.2]),
        };
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let draws: Vec<usize> = (0..4000).map(|_| marginal.sample(&mut rng)).collect();
        let ones = draws.iter().filter(|&&k| k == 1).count() as f64 / 4000.0;
        assert!((ones - 0.2).abs() < 0.03, "empirical rate {ones}");
        let (hot, classes) = marginal.sample_one_hot(16, &mut rng);
        assert_eq!(hot.nrows(), 16);
        for (row, &k) in classes.iter().enumerate() {
            assert_eq!(hot[[row, k]], 1.0);
        }
    }

    #[test]
    fn binary_cache_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cache = dir.path().join("cifar10-subset");
        let train_x: Vec<u8> = (0..48).map(|i| (i * 5) as u8).collect();
        let train_y: Vec<u8> = vec![0, 1, 0, 1, 1, 0, 1, 0];
        let test_x: Vec<u8> = (0..12).map(|i| (255 - i) as u8).collect();
        let test_y: Vec<u8> = vec![1, 0];
        write_binary_cache(&cache, (&train_x, &train_y), (&test_x, &test_y), 2, 6).unwrap();

        let (train, test) = load_binary_cache(&cache).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(test.len(), 2);
        assert_eq!(train.num_classes, 2);
        assert_abs_diff_eq!(train.x[[0, 1]], 5.0 / 255.0, epsilon = 1e-15);
        assert_eq!(train.y, vec![0, 1, 0, 1, 1, 0, 1, 0]);

        let split = load_dataset_with(
            "cifar10-subset",
            dir.path(),
            &DatasetOptions {
                n_labeled: Some(5),
                validation_fraction: 0.2,
                ..DatasetOptions::default()
            },
        )
        .unwrap();
        assert_eq!(split.labeled_budget(), 5);
        assert_eq!(split.n_labeled(), 4);
        assert_eq!(split.n_validation(), 1);
        assert_eq!(split.n_unlabeled(), 3);
        assert_eq!(split.n_test(), 2);
    }

    #[test]
    fn missing_and_corrupt_caches_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cache = dir.path().join("svhn-subset");
        assert!(matches!(
            load_binary_cache(&cache),
            Err(DataError::MissingFiles(p)) if p.ends_with("meta.json")
        ));

        write_binary_cache(&cache, (&[0u8; 12], &[0u8, 1]), (&[0u8; 6], &[0u8]), 2, 6).unwrap();
        // Truncate a tensor file to corrupt the cache.
        fs::write(cache.join("train_x.bin"), [0u8; 5]).unwrap();
        assert!(matches!(load_binary_cache(&cache), Err(DataError::Corrupt(_))));

        // A label outside the advertised class range is also corrupt.
        fs::write(cache.join("train_x.bin"), [0u8; 12]).unwrap();
        fs::write(cache.join("train_y.bin"), [9u8, 0]).unwrap();
        assert!(matches!(
            load_binary_cache(&cache),
            Err(DataError::LabelOutOfRange { label: 9, .. })
        ));
    }

    #[test]
    fn manifest_round_trips_through_disk() {
        let manifest = SplitManifest {
            labeled: vec![5, 2, 9],
            validation: vec![1],
            unlabeled: vec![0, 3, 4, 6, 7, 8],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.txt");
        manifest.save(&path).unwrap();
        assert_eq!(SplitManifest::load(&path).unwrap(), manifest);

        fs::write(&path, "l 1\nbogus line\n").unwrap();
        assert!(matches!(
            SplitManifest::load(&path),
            Err(DataError::BadManifestLine(_))
        ));
    }
}
