//! Metrics and experiment artifacts: accuracy, distribution-alignment
//! diagnostics, trade-off sweeps, class-count tables, and embedding export.
//!
//! Alignment diagnostics compare three labeled sample sources — real data,
//! generator output conditioned per class, and unlabeled points adopted
//! under the classifier's own predictions — in the classifier's
//! penultimate-layer feature space. When the three joint distributions
//! coincide, per-class clusters pooled across sources stay tight and
//! separated, which the silhouette coefficient measures directly.
//!
//! Everything here is read-only over models and emits plain data (numbers,
//! CSV text, columnar embedding files); plotting is out of scope.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{evaluate_robust_accuracy, AttackError, AttackSpec};
use crate::datasets::DatasetSplit;
use crate::nets::{one_hot, Classifier, ModelBundle};
use crate::trainer::{fit, seeded_stream, TrainConfig, TrainError, TrainReport, EVAL_STREAM_SALT};
use crate::uae::sample_noise;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty test set")]
    EmptyTestSet,
    #[error("degenerate clustering input: {0}")]
    DegenerateClustering(String),
    #[error("baseline wall-clock time is zero")]
    ZeroBaselineTime,
    #[error("class {class} has {have} examples, need {need}")]
    InsufficientClassExamples {
        class: usize,
        have: usize,
        need: usize,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Where an alignment sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleSource {
    /// Labeled test data with its true class.
    Real,
    /// Generator output, tagged with its conditioning class.
    Generator,
    /// Unlabeled/test points tagged with the classifier's prediction.
    ClassifierPseudo,
}

impl SampleSource {
    pub fn label(&self) -> &'static str {
        match self {
            SampleSource::Real => "real",
            SampleSource::Generator => "generator",
            SampleSource::ClassifierPseudo => "classifier-pseudo",
        }
    }
}

/// Tagged sample collection for alignment diagnostics: raw inputs, their
/// penultimate-layer features, and a (source, class) tag per row.
#[derive(Debug, Clone)]
pub struct AlignmentSample {
    pub x: Array2<f64>,
    pub features: Array2<f64>,
    pub source: Vec<SampleSource>,
    pub class: Vec<usize>,
    pub num_classes: usize,
}

impl AlignmentSample {
    pub fn len(&self) -> usize {
        self.class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class.is_empty()
    }

    /// Rows from one source.
    pub fn count_from(&self, source: SampleSource) -> usize {
        self.source.iter().filter(|s| **s == source).count()
    }
}

/// Fraction of argmax-correct predictions on a labeled set.
pub fn natural_accuracy(
    c: &Classifier,
    x: &Array2<f64>,
    y: &[usize],
) -> Result<f64, EvalError> {
    if y.is_empty() || x.nrows() == 0 {
        return Err(EvalError::EmptyTestSet);
    }
    let pred = c.predict(x);
    Ok(pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64)
}

fn euclidean(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean silhouette coefficient of `points` under the given cluster labels
/// (Euclidean distance). For each point, `a` is its mean distance to its own
/// cluster's other members and `b` the smallest mean distance to any other
/// cluster; its score is `(b − a) / max(a, b)`, or 0 when both vanish.
/// Requires at least two clusters and at least two points in each.
pub fn silhouette_score(points: &Array2<f64>, labels: &[usize]) -> Result<f64, EvalError> {
    let n = points.nrows();
    if n != labels.len() {
        return Err(EvalError::DegenerateClustering(format!(
            "{n} points but {} labels",
            labels.len()
        )));
    }
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return Err(EvalError::DegenerateClustering(
            "need at least two clusters".into(),
        ));
    }
    for &c in &clusters {
        let size = labels.iter().filter(|l| **l == c).count();
        if size < 2 {
            return Err(EvalError::DegenerateClustering(format!(
                "cluster {c} has only {size} point(s)"
            )));
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        let mut own_sum = 0.0;
        let mut own_count = 0usize;
        let mut other: Vec<(f64, usize)> = clusters
            .iter()
            .filter(|c| **c != own)
            .map(|_| (0.0, 0))
            .collect();
        let others: Vec<usize> = clusters.iter().copied().filter(|c| *c != own).collect();
        for (j, &label_j) in labels.iter().enumerate() {
            if i == j {
                continue;
            }
            let d = euclidean(points.row(i), points.row(j));
            if label_j == own {
                own_sum += d;
                own_count += 1;
            } else {
                let k = others.iter().position(|c| *c == label_j).unwrap();
                other[k].0 += d;
                other[k].1 += 1;
            }
        }
        let a = own_sum / own_count as f64;
        let b = other
            .iter()
            .map(|(sum, count)| sum / *count as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        total += if denom == 0.0 { 0.0 } else { (b - a) / denom };
    }
    Ok(total / n as f64)
}

/// Silhouette of the pooled alignment sample with clusters given by class
/// tags: higher means the three sources' per-class clusters coincide better.
pub fn silhouette_alignment(sample: &AlignmentSample) -> Result<f64, EvalError> {
    silhouette_score(&sample.features, &sample.class)
}

/// Per-class sample counts under the three distributions: real labels,
/// generator conditioning labels, and the classifier's predictions on the
/// real rows. Each column sums to its source's row count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCountTable {
    pub real: Vec<usize>,
    pub generator: Vec<usize>,
    pub classifier: Vec<usize>,
}

impl ClassCountTable {
    pub fn csv(&self) -> String {
        let mut out = String::from("class,real,generator,classifier\n");
        for k in 0..self.real.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                k, self.real[k], self.generator[k], self.classifier[k]
            ));
        }
        out
    }
}

pub fn class_count_table(sample: &AlignmentSample, c: &Classifier) -> ClassCountTable {
    let k = sample.num_classes;
    let mut real = vec![0usize; k];
    let mut generator = vec![0usize; k];
    let mut real_rows: Vec<usize> = Vec::new();
    for (i, (src, cls)) in sample.source.iter().zip(&sample.class).enumerate() {
        match src {
            SampleSource::Real => {
                real[*cls] += 1;
                real_rows.push(i);
            }
            SampleSource::Generator => generator[*cls] += 1,
            SampleSource::ClassifierPseudo => {}
        }
    }
    let mut classifier = vec![0usize; k];
    if !real_rows.is_empty() {
        let mut x = Array2::zeros((real_rows.len(), sample.x.ncols()));
        for (r, &i) in real_rows.iter().enumerate() {
            x.row_mut(r).assign(&sample.x.row(i));
        }
        for p in c.predict(&x) {
            classifier[p] += 1;
        }
    }
    ClassCountTable {
        real,
        generator,
        classifier,
    }
}

/// Builds the three-source alignment sample: `per_class` real test examples
/// and `per_class` generated examples for every class, plus up to
/// `per_class` unlabeled-style test points per predicted class (actual
/// pseudo counts depend on the classifier's predictions). Features are the
/// classifier's penultimate activations.
pub fn build_alignment_sample<R: Rng>(
    models: &ModelBundle,
    data: &DatasetSplit,
    per_class: usize,
    rng: &mut R,
) -> Result<AlignmentSample, EvalError> {
    if data.test_x.nrows() == 0 {
        return Err(EvalError::EmptyTestSet);
    }
    let k = data.num_classes;
    let dim = data.test_x.ncols();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut source = Vec::new();
    let mut class = Vec::new();

    // Real rows: the first `per_class` test examples of each class.
    for y in 0..k {
        let idx: Vec<usize> = (0..data.test_x.nrows())
            .filter(|i| data.test_y[*i] == y)
            .take(per_class)
            .collect();
        if idx.len() < per_class {
            return Err(EvalError::InsufficientClassExamples {
                class: y,
                have: idx.len(),
                need: per_class,
            });
        }
        for i in idx {
            rows.push(data.test_x.row(i).to_vec());
            source.push(SampleSource::Real);
            class.push(y);
        }
    }

    // Generated rows: equal counts by construction.
    for y in 0..k {
        let z = sample_noise(per_class, models.g.noise_dim, rng);
        let y_onehot = one_hot(&vec![y; per_class], k);
        let x_gen = models.g.decode(&z, &y_onehot);
        for r in 0..per_class {
            rows.push(x_gen.row(r).to_vec());
            source.push(SampleSource::Generator);
            class.push(y);
        }
    }

    // Pseudo rows: test points tagged with the classifier's prediction,
    // capped per class to keep the pool balanced.
    let preds = models.c.predict(&data.test_x);
    let mut taken = vec![0usize; k];
    for (i, &p) in preds.iter().enumerate() {
        if taken[p] < per_class {
            taken[p] += 1;
            rows.push(data.test_x.row(i).to_vec());
            source.push(SampleSource::ClassifierPseudo);
            class.push(p);
        }
    }

    let mut x = Array2::zeros((rows.len(), dim));
    for (r, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            x[[r, j]] = *v;
        }
    }
    let features = models.c.features(&x);
    Ok(AlignmentSample {
        x,
        features,
        source,
        class,
        num_classes: k,
    })
}

/// Writes the sample as columnar text: a header line
/// `source,class,f0,...,f{d−1}`, then one CSV row per sample carrying the
/// source tag, the class index, and the feature vector. Deterministic for a
/// fixed sample.
pub fn export_embeddings(sample: &AlignmentSample, path: &Path) -> Result<(), EvalError> {
    let d = sample.features.ncols();
    let mut out = String::from("source,class");
    for j in 0..d {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for i in 0..sample.len() {
        out.push_str(sample.source[i].label());
        out.push_str(&format!(",{}", sample.class[i]));
        for j in 0..d {
            out.push_str(&format!(",{}", sample.features[[i, j]]));
        }
        out.push('\n');
    }
    std::fs::write(path, out.as_bytes())?;
    Ok(())
}

/// One point of the natural-versus-robust trade-off sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub beta: f64,
    pub natural_acc: f64,
    /// One robust accuracy per attack in the battery, in caller order.
    pub robust_acc: Vec<f64>,
}

/// Trains one model per robustness-weight value and measures test natural
/// accuracy plus robust accuracy under each attack in the battery. When the
/// base config has an output directory, each run writes into a `beta-<i>`
/// subdirectory.
pub fn pareto_sweep(
    base_cfg: &TrainConfig,
    betas: &[f64],
    attacks: &[AttackSpec],
    data: &DatasetSplit,
) -> Result<Vec<ParetoRow>, EvalError> {
    let mut rows = Vec::with_capacity(betas.len());
    for (idx, &beta) in betas.iter().enumerate() {
        let mut cfg = base_cfg.clone();
        cfg.weights.beta = beta;
        cfg.output_dir = base_cfg
            .output_dir
            .as_ref()
            .map(|d| d.join(format!("beta-{idx}")));
        let outcome = fit(&cfg, data)?;
        let natural_acc = natural_accuracy(&outcome.models.c, &data.test_x, &data.test_y)?;
        let mut robust_acc = Vec::with_capacity(attacks.len());
        for (a_idx, attack) in attacks.iter().enumerate() {
            let mut rng = seeded_stream(cfg.seed, EVAL_STREAM_SALT ^ (a_idx as u64 + 1));
            robust_acc.push(evaluate_robust_accuracy(
                &outcome.models,
                attack,
                &data.test_x,
                &data.test_y,
                &mut rng,
            )?);
        }
        rows.push(ParetoRow {
            beta,
            natural_acc,
            robust_acc,
        });
    }
    Ok(rows)
}

/// CSV rendering of sweep rows; `attack_labels` names the robust-accuracy
/// columns and must match the battery the sweep ran.
pub fn pareto_csv(rows: &[ParetoRow], attack_labels: &[String]) -> String {
    let mut out = String::from("beta,natural_acc");
    for label in attack_labels {
        out.push_str(&format!(",robust_acc_{label}"));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{},{}", row.beta, row.natural_acc));
        for v in &row.robust_acc {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Wall-clock cost of a run relative to a baseline run, counting only time
/// until each stopped.
pub fn training_time_ratio(
    report: &TrainReport,
    baseline: &TrainReport,
) -> Result<f64, EvalError> {
    if baseline.wall_seconds <= 0.0 {
        return Err(EvalError::ZeroBaselineTime);
    }
    Ok(report.wall_seconds / baseline.wall_seconds)
}
