//! The four networks of the min-max game and the EMA teacher.
//!
//! * `C` — classifier: dense stem, residual blocks, linear head. Its
//!   penultimate activations are the feature space used by the alignment
//!   diagnostics.
//! * `G` — conditional generator `(z, y) → x`: batch-norm + ReLU stem and
//!   residual blocks, `tanh` output remapped to the canonical `[0,1]` range.
//! * `D` — conditional discriminator `(x, y) → score`: every weight is
//!   spectrally normalized via persistent power-iteration state.
//! * `A` — latent attacker `(z, y) → z_a`: same family as `G` but mapping
//!   noise to noise; its output is unconstrained by default (an optional
//!   smooth clamp is available) — imperceptibility of the decoded examples
//!   comes from distribution alignment, not from a norm bound.
//! * `C′` — the teacher: an exact parameter copy of `C` advanced by
//!   [`ema_update`] instead of gradients.
//!
//! At desk scale every network is a dense residual stack; the classifier
//! keeps the usual depth/width parameterization of wide residual nets
//! (`classifier_depth` 16, `classifier_width` 2 by default) with residual
//! blocks of dense layers standing in for convolutional groups.
//!
//! Label conditioning is a learned embedding of the one-hot label
//! concatenated onto the input representation, shared structurally (but not
//! parameter-wise) by `G`, `D`, and `A`.
//!
//! # Binding pattern
//!
//! Training passes run on a [`Graph`] tape. Each network exposes `bind`,
//! which pushes its parameters onto a graph as leaves (trainable or frozen)
//! and returns a typed handle; the corresponding `*_graph` forward consumes
//! that handle. After `backward`, `Vars::flat()` lists the parameter vars in
//! exactly the order of `params()`/`params_mut()`, which is the pairing the
//! optimizer relies on.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Var};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid net spec: {reason}")]
    InvalidSpec { reason: String },
}

/// Which statistics batch-norm layers consume during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stats {
    /// Current-batch statistics (training and gradient-check passes).
    Batch,
    /// Stored running statistics (deterministic evaluation).
    Running,
}

/// Architecture hyperparameters for one model bundle.
///
/// `data_dim` is the flattened example dimensionality; datasets fix it at
/// load time and the config layer writes it here before building.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetSpec {
    pub classifier_depth: usize,
    pub classifier_width: usize,
    pub generator_channels: usize,
    pub discriminator_channels: usize,
    pub attacker_hidden: usize,
    pub noise_dim: usize,
    pub label_embed_dim: usize,
    pub data_dim: usize,
    /// Optional smooth bound on the attacker output magnitude
    /// (`c·tanh(raw/c)`); `None` leaves `z_a` unconstrained.
    pub attacker_clamp: Option<f64>,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self {
            classifier_depth: 16,
            classifier_width: 2,
            generator_channels: 128,
            discriminator_channels: 128,
            attacker_hidden: 256,
            noise_dim: 100,
            label_embed_dim: 32,
            data_dim: 3072,
            attacker_clamp: None,
        }
    }
}

impl NetSpec {
    pub fn validate(&self) -> Result<(), NetError> {
        let fields = [
            ("classifier_depth", self.classifier_depth),
            ("classifier_width", self.classifier_width),
            ("generator_channels", self.generator_channels),
            ("discriminator_channels", self.discriminator_channels),
            ("attacker_hidden", self.attacker_hidden),
            ("noise_dim", self.noise_dim),
            ("label_embed_dim", self.label_embed_dim),
            ("data_dim", self.data_dim),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(NetError::InvalidSpec {
                    reason: format!("{name} must be positive"),
                });
            }
        }
        if let Some(c) = self.attacker_clamp {
            if c.is_nan() || c <= 0.0 {
                return Err(NetError::InvalidSpec {
                    reason: format!("attacker_clamp must be positive, got {c}"),
                });
            }
        }
        Ok(())
    }

    /// Hidden width of the classifier's residual trunk.
    pub fn classifier_hidden(&self) -> usize {
        32 * self.classifier_width
    }

    /// Number of residual blocks in the classifier trunk: the depth knob
    /// counts roughly two dense layers per block plus stem and head.
    pub fn classifier_blocks(&self) -> usize {
        (self.classifier_depth.saturating_sub(4) / 2).max(1)
    }
}

/// One-hot encodes integer class labels into a `B×K` matrix.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), num_classes));
    for (i, &y) in labels.iter().enumerate() {
        assert!(
            y < num_classes,
            "label {y} out of range for {num_classes} classes"
        );
        out[(i, y)] = 1.0;
    }
    out
}

fn he_init<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let std = (2.0 / rows as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

pub struct DenseVars {
    pub w: Var,
    pub b: Var,
}

impl Dense {
    fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            w: he_init(in_dim, out_dim, rng),
            b: Array2::zeros((1, out_dim)),
        }
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> DenseVars {
        DenseVars {
            w: g.leaf(self.w.clone(), trainable),
            b: g.leaf(self.b.clone(), trainable),
        }
    }

    fn forward(&self, g: &mut Graph, v: &DenseVars, x: Var) -> Var {
        g.affine(x, v.w, v.b)
    }
}

/// Batch normalization over the batch axis with running statistics for
/// evaluation. Normalization uses biased batch variance; running statistics
/// follow `running ← (1−momentum)·running + momentum·batch`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
    pub running_mean: Array2<f64>,
    pub running_var: Array2<f64>,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BatchNormVars {
    pub gamma: Var,
    pub beta: Var,
}

/// Batch statistics observed by batch-norm layers during one forward pass,
/// in traversal order. Committing them updates the running statistics; a
/// pass whose statistics are dropped has no side effects, which keeps
/// finite-difference checks and auxiliary passes clean.
#[derive(Debug, Default)]
pub struct BnUpdates(Vec<(Array2<f64>, Array2<f64>)>);

impl BnUpdates {
    /// Number of normalization layers that recorded statistics.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl BatchNorm {
    fn new(dim: usize) -> Self {
        Self {
            gamma: Array2::ones((1, dim)),
            beta: Array2::zeros((1, dim)),
            running_mean: Array2::zeros((1, dim)),
            running_var: Array2::ones((1, dim)),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> BatchNormVars {
        BatchNormVars {
            gamma: g.leaf(self.gamma.clone(), trainable),
            beta: g.leaf(self.beta.clone(), trainable),
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        v: &BatchNormVars,
        x: Var,
        stats: Stats,
        updates: &mut BnUpdates,
    ) -> Var {
        let (rows, _) = g.shape(x);
        let (mu, var) = match stats {
            Stats::Batch => {
                let mu = g.mean_rows(x);
                let mu_b = g.broadcast_row(mu, rows);
                let centered = g.sub(x, mu_b);
                let sq = g.square(centered);
                let var = g.mean_rows(sq);
                updates
                    .0
                    .push((g.value(mu).clone(), g.value(var).clone()));
                (mu, var)
            }
            Stats::Running => {
                let mu = g.constant(self.running_mean.clone());
                let var = g.constant(self.running_var.clone());
                (mu, var)
            }
        };
        let mu_b = g.broadcast_row(mu, rows);
        let centered = g.sub(x, mu_b);
        let var_eps = g.add_scalar(var, self.eps);
        let std = g.sqrt(var_eps);
        let inv = g.recip(std);
        let inv_b = g.broadcast_row(inv, rows);
        let xhat = g.mul(centered, inv_b);
        let gamma_b = g.broadcast_row(v.gamma, rows);
        let beta_b = g.broadcast_row(v.beta, rows);
        let scaled = g.mul(xhat, gamma_b);
        g.add(scaled, beta_b)
    }

    fn commit(&mut self, mu: &Array2<f64>, var: &Array2<f64>) {
        self.running_mean = &self.running_mean * (1.0 - self.momentum) + mu * self.momentum;
        self.running_var = &self.running_var * (1.0 - self.momentum) + var * self.momentum;
    }
}

/// Dense layer with spectral normalization: the weight used in the forward
/// pass is `W/σ̂(W)`, where `σ̂ = ‖v·W‖₂` for the persistent power-iteration
/// vector `v`. The estimate `σ̂` is part of the tape, so gradients flow
/// through the normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralDense {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
    /// Left singular-vector estimate (output side), `1×out`.
    pub u: Array2<f64>,
    /// Right singular-vector estimate (input side), `1×in`.
    pub v: Array2<f64>,
}

pub struct SpectralDenseVars {
    pub w: Var,
    pub b: Var,
}

impl SpectralDense {
    fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, 1.0).expect("valid normal");
        let mut u = Array2::from_shape_fn((1, out_dim), |_| dist.sample(rng));
        let mut v = Array2::from_shape_fn((1, in_dim), |_| dist.sample(rng));
        normalize_row(&mut u);
        normalize_row(&mut v);
        let mut layer = Self {
            w: he_init(in_dim, out_dim, rng),
            b: Array2::zeros((1, out_dim)),
            u,
            v,
        };
        layer.power_iterate(5);
        layer
    }

    /// Advances the power-iteration estimate of the top singular pair.
    pub fn power_iterate(&mut self, iters: usize) {
        for _ in 0..iters {
            let mut u = self.v.dot(&self.w);
            normalize_row(&mut u);
            let mut v = u.dot(&self.w.t());
            normalize_row(&mut v);
            self.u = u;
            self.v = v;
        }
    }

    /// Current spectral-norm estimate `‖v·W‖₂`.
    pub fn sigma_hat(&self) -> f64 {
        self.v.dot(&self.w).iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// The weight as the forward pass sees it. Zero weights are left
    /// unchanged by the guarded division.
    pub fn normalized_weight(&self) -> Array2<f64> {
        let sigma = self.sigma_hat();
        if sigma <= 1e-12 {
            self.w.clone()
        } else {
            &self.w / sigma
        }
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> SpectralDenseVars {
        SpectralDenseVars {
            w: g.leaf(self.w.clone(), trainable),
            b: g.leaf(self.b.clone(), trainable),
        }
    }

    fn forward(&self, g: &mut Graph, v: &SpectralDenseVars, x: Var) -> Var {
        let (in_dim, out_dim) = g.shape(v.w);
        let vv = g.constant(self.v.clone());
        let vw = g.matmul(vv, v.w);
        let sq = g.square(vw);
        let s2 = g.sum_all(sq);
        // Tiny floor keeps the division defined for zero weights while
        // leaving realistic spectra untouched.
        let s2e = g.add_scalar(s2, 1e-24);
        let sigma = g.sqrt(s2e);
        let inv = g.recip(sigma);
        let inv_b = g.broadcast_scalar(inv, in_dim, out_dim);
        let w_sn = g.mul(v.w, inv_b);
        let xw = g.matmul(x, w_sn);
        let rows = g.shape(xw).0;
        let bb = g.broadcast_row(v.b, rows);
        g.add(xw, bb)
    }
}

fn normalize_row(row: &mut Array2<f64>) {
    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-12;
    row.mapv_inplace(|x| x / norm);
}

/// Learned label embedding: one-hot rows times an embedding table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Embedding {
    pub table: Array2<f64>,
}

pub struct EmbeddingVars {
    pub table: Var,
}

impl Embedding {
    fn new<R: Rng>(num_classes: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            table: he_init(num_classes, dim, rng),
        }
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> EmbeddingVars {
        EmbeddingVars {
            table: g.leaf(self.table.clone(), trainable),
        }
    }

    fn forward(&self, g: &mut Graph, v: &EmbeddingVars, onehot: Var) -> Var {
        g.matmul(onehot, v.table)
    }
}

// ---------------------------------------------------------------------------
// Residual blocks
// ---------------------------------------------------------------------------

/// Plain residual block: `relu(x + fc2(relu(fc1(x))))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResBlock {
    pub fc1: Dense,
    pub fc2: Dense,
}

pub struct ResBlockVars {
    fc1: DenseVars,
    fc2: DenseVars,
}

impl ResBlock {
    fn new<R: Rng>(dim: usize, rng: &mut R) -> Self {
        Self {
            fc1: Dense::new(dim, dim, rng),
            fc2: Dense::new(dim, dim, rng),
        }
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> ResBlockVars {
        ResBlockVars {
            fc1: self.fc1.bind(g, trainable),
            fc2: self.fc2.bind(g, trainable),
        }
    }

    fn forward(&self, g: &mut Graph, v: &ResBlockVars, x: Var) -> Var {
        let h = self.fc1.forward(g, &v.fc1, x);
        let h = g.relu(h);
        let h = self.fc2.forward(g, &v.fc2, h);
        let s = g.add(x, h);
        g.relu(s)
    }
}

/// Residual block with batch norm after each dense layer (generator and
/// attacker trunks).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BnResBlock {
    pub fc1: Dense,
    pub bn1: BatchNorm,
    pub fc2: Dense,
    pub bn2: BatchNorm,
}

pub struct BnResBlockVars {
    fc1: DenseVars,
    bn1: BatchNormVars,
    fc2: DenseVars,
    bn2: BatchNormVars,
}

impl BnResBlock {
    fn new<R: Rng>(dim: usize, rng: &mut R) -> Self {
        Self {
            fc1: Dense::new(dim, dim, rng),
            bn1: BatchNorm::new(dim),
            fc2: Dense::new(dim, dim, rng),
            bn2: BatchNorm::new(dim),
        }
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> BnResBlockVars {
        BnResBlockVars {
            fc1: self.fc1.bind(g, trainable),
            bn1: self.bn1.bind(g, trainable),
            fc2: self.fc2.bind(g, trainable),
            bn2: self.bn2.bind(g, trainable),
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        v: &BnResBlockVars,
        x: Var,
        stats: Stats,
        updates: &mut BnUpdates,
    ) -> Var {
        let h = self.fc1.forward(g, &v.fc1, x);
        let h = self.bn1.forward(g, &v.bn1, h, stats, updates);
        let h = g.relu(h);
        let h = self.fc2.forward(g, &v.fc2, h);
        let h = self.bn2.forward(g, &v.bn2, h, stats, updates);
        let s = g.add(x, h);
        g.relu(s)
    }

    fn commit(&mut self, updates: &mut std::vec::IntoIter<(Array2<f64>, Array2<f64>)>) {
        let (mu, var) = updates.next().expect("bn1 stats recorded");
        self.bn1.commit(&mu, &var);
        let (mu, var) = updates.next().expect("bn2 stats recorded");
        self.bn2.commit(&mu, &var);
    }
}

/// Residual block whose dense layers are spectrally normalized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnResBlock {
    pub fc1: SpectralDense,
    pub fc2: SpectralDense,
}

pub struct SnResBlockVars {
    fc1: SpectralDenseVars,
    fc2: SpectralDenseVars,
}

impl SnResBlock {
    fn new<R: Rng>(dim: usize, rng: &mut R) -> Self {
        Self {
            fc1: SpectralDense::new(dim, dim, rng),
            fc2: SpectralDense::new(dim, dim, rng),
        }
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> SnResBlockVars {
        SnResBlockVars {
            fc1: self.fc1.bind(g, trainable),
            fc2: self.fc2.bind(g, trainable),
        }
    }

    fn forward(&self, g: &mut Graph, v: &SnResBlockVars, x: Var) -> Var {
        let h = self.fc1.forward(g, &v.fc1, x);
        let h = leaky_relu(g, h, 0.2);
        let h = self.fc2.forward(g, &v.fc2, h);
        let s = g.add(x, h);
        leaky_relu(g, s, 0.2)
    }
}

/// `max(x, 0) − alpha·max(−x, 0)`, composed from primitives so the tape
/// differentiates it.
fn leaky_relu(g: &mut Graph, x: Var, alpha: f64) -> Var {
    let pos = g.relu(x);
    let nx = g.neg(x);
    let negpart = g.relu(nx);
    let scaled = g.scale(negpart, alpha);
    g.sub(pos, scaled)
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Classifier {
    pub stem: Dense,
    pub blocks: Vec<ResBlock>,
    pub head: Dense,
    pub num_classes: usize,
}

pub struct ClassifierVars {
    stem: DenseVars,
    blocks: Vec<ResBlockVars>,
    head: DenseVars,
}

impl ClassifierVars {
    /// Parameter vars in the exact order of [`Classifier::params`].
    pub fn flat(&self) -> Vec<Var> {
        let mut out = vec![self.stem.w, self.stem.b];
        for b in &self.blocks {
            out.extend([b.fc1.w, b.fc1.b, b.fc2.w, b.fc2.b]);
        }
        out.extend([self.head.w, self.head.b]);
        out
    }
}

impl Classifier {
    pub fn new<R: Rng>(spec: &NetSpec, num_classes: usize, rng: &mut R) -> Self {
        let h = spec.classifier_hidden();
        Self {
            stem: Dense::new(spec.data_dim, h, rng),
            blocks: (0..spec.classifier_blocks())
                .map(|_| ResBlock::new(h, rng))
                .collect(),
            head: Dense::new(h, num_classes, rng),
            num_classes,
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ClassifierVars {
        ClassifierVars {
            stem: self.stem.bind(g, trainable),
            blocks: self.blocks.iter().map(|b| b.bind(g, trainable)).collect(),
            head: self.head.bind(g, trainable),
        }
    }

    /// Penultimate activations (input to the linear head).
    pub fn features_graph(&self, g: &mut Graph, v: &ClassifierVars, x: Var) -> Var {
        let mut h = self.stem.forward(g, &v.stem, x);
        h = g.relu(h);
        for (block, bv) in self.blocks.iter().zip(&v.blocks) {
            h = block.forward(g, bv, h);
        }
        h
    }

    pub fn logits_graph(&self, g: &mut Graph, v: &ClassifierVars, x: Var) -> Var {
        let feats = self.features_graph(g, v, x);
        self.head.forward(g, &v.head, feats)
    }

    /// Softmax class probabilities for a batch (evaluation path; rows sum to
    /// 1 within 1e-6 by construction).
    pub fn classify(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let v = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let logits = self.logits_graph(&mut g, &v, xv);
        let soft = g.softmax(logits);
        g.value(soft).clone()
    }

    /// Penultimate feature rows for a batch (evaluation path).
    pub fn features(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let v = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let f = self.features_graph(&mut g, &v, xv);
        g.value(f).clone()
    }

    /// Hard predictions: argmax class per row.
    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        argmax_rows(&self.classify(x))
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut out = vec![&self.stem.w, &self.stem.b];
        for b in &self.blocks {
            out.extend([&b.fc1.w, &b.fc1.b, &b.fc2.w, &b.fc2.b]);
        }
        out.extend([&self.head.w, &self.head.b]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = vec![&mut self.stem.w, &mut self.stem.b];
        for b in &mut self.blocks {
            out.push(&mut b.fc1.w);
            out.push(&mut b.fc1.b);
            out.push(&mut b.fc2.w);
            out.push(&mut b.fc2.b);
        }
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out
    }
}

pub fn argmax_rows(p: &Array2<f64>) -> Vec<usize> {
    p.rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
                .expect("nonempty row")
                .0
        })
        .collect()
}

/// Exponential-moving-average teacher update:
/// `θ′ ← decay·θ′ + (1−decay)·θ`, exactly, parameter-wise.
pub fn ema_update(teacher: &mut Classifier, student: &Classifier, decay: f64) {
    assert!((0.0..=1.0).contains(&decay), "decay must lie in [0,1]");
    let student_params = student.params();
    let teacher_params = teacher.params_mut();
    assert_eq!(
        student_params.len(),
        teacher_params.len(),
        "teacher/student parameter lists differ"
    );
    for (t, s) in teacher_params.into_iter().zip(student_params) {
        assert_eq!(t.dim(), s.dim(), "teacher/student parameter shapes differ");
        *t = &*t * decay + s * (1.0 - decay);
    }
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Generator {
    pub embed: Embedding,
    pub stem: Dense,
    pub stem_bn: BatchNorm,
    pub blocks: Vec<BnResBlock>,
    pub out: Dense,
    pub noise_dim: usize,
}

pub struct GeneratorVars {
    embed: EmbeddingVars,
    stem: DenseVars,
    stem_bn: BatchNormVars,
    blocks: Vec<BnResBlockVars>,
    out: DenseVars,
}

impl GeneratorVars {
    pub fn flat(&self) -> Vec<Var> {
        let mut out = vec![self.embed.table, self.stem.w, self.stem.b];
        out.extend([self.stem_bn.gamma, self.stem_bn.beta]);
        for b in &self.blocks {
            out.extend([
                b.fc1.w, b.fc1.b, b.bn1.gamma, b.bn1.beta, b.fc2.w, b.fc2.b, b.bn2.gamma,
                b.bn2.beta,
            ]);
        }
        out.extend([self.out.w, self.out.b]);
        out
    }
}

impl Generator {
    pub fn new<R: Rng>(spec: &NetSpec, num_classes: usize, rng: &mut R) -> Self {
        let h = spec.generator_channels;
        Self {
            embed: Embedding::new(num_classes, spec.label_embed_dim, rng),
            stem: Dense::new(spec.noise_dim + spec.label_embed_dim, h, rng),
            stem_bn: BatchNorm::new(h),
            blocks: (0..2).map(|_| BnResBlock::new(h, rng)).collect(),
            out: Dense::new(h, spec.data_dim, rng),
            noise_dim: spec.noise_dim,
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> GeneratorVars {
        GeneratorVars {
            embed: self.embed.bind(g, trainable),
            stem: self.stem.bind(g, trainable),
            stem_bn: self.stem_bn.bind(g, trainable),
            blocks: self.blocks.iter().map(|b| b.bind(g, trainable)).collect(),
            out: self.out.bind(g, trainable),
        }
    }

    /// Raw `tanh` output in `[−1, 1]`.
    pub fn raw_graph(
        &self,
        g: &mut Graph,
        v: &GeneratorVars,
        z: Var,
        y_onehot: Var,
        stats: Stats,
    ) -> (Var, BnUpdates) {
        let mut updates = BnUpdates::default();
        let e = self.embed.forward(g, &v.embed, y_onehot);
        let zin = g.concat_cols(z, e);
        let mut h = self.stem.forward(g, &v.stem, zin);
        h = self
            .stem_bn
            .forward(g, &v.stem_bn, h, stats, &mut updates);
        h = g.relu(h);
        for (block, bv) in self.blocks.iter().zip(&v.blocks) {
            h = block.forward(g, bv, h, stats, &mut updates);
        }
        let o = self.out.forward(g, &v.out, h);
        (g.tanh(o), updates)
    }

    /// Canonical-range output in `[0, 1]`: the raw `tanh` linearly remapped
    /// at the module boundary so generated examples live in the same range
    /// as dataset examples.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        v: &GeneratorVars,
        z: Var,
        y_onehot: Var,
        stats: Stats,
    ) -> (Var, BnUpdates) {
        let (raw, updates) = self.raw_graph(g, v, z, y_onehot, stats);
        let shifted = g.add_scalar(raw, 1.0);
        (g.scale(shifted, 0.5), updates)
    }

    /// Applies recorded batch statistics to the running estimates.
    pub fn commit_bn(&mut self, updates: BnUpdates) {
        let mut it = updates.0.into_iter();
        if let Some((mu, var)) = it.next() {
            self.stem_bn.commit(&mu, &var);
        }
        for block in &mut self.blocks {
            block.commit(&mut it);
        }
        assert!(it.next().is_none(), "unconsumed batch-norm statistics");
    }

    /// Decodes noise at evaluation time (running statistics, `[0,1]` range).
    pub fn decode(&self, z: &Array2<f64>, y_onehot: &Array2<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let v = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let yv = g.constant(y_onehot.clone());
        let (out, _) = self.forward_graph(&mut g, &v, zv, yv, Stats::Running);
        g.value(out).clone()
    }

    /// Raw `tanh` decode at evaluation time (`[−1,1]` range).
    pub fn decode_raw(&self, z: &Array2<f64>, y_onehot: &Array2<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let v = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let yv = g.constant(y_onehot.clone());
        let (out, _) = self.raw_graph(&mut g, &v, zv, yv, Stats::Running);
        g.value(out).clone()
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut out = vec![&self.embed.table, &self.stem.w, &self.stem.b];
        out.extend([&self.stem_bn.gamma, &self.stem_bn.beta]);
        for b in &self.blocks {
            out.extend([
                &b.fc1.w, &b.fc1.b, &b.bn1.gamma, &b.bn1.beta, &b.fc2.w, &b.fc2.b, &b.bn2.gamma,
                &b.bn2.beta,
            ]);
        }
        out.extend([&self.out.w, &self.out.b]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> =
            vec![&mut self.embed.table, &mut self.stem.w, &mut self.stem.b];
        out.push(&mut self.stem_bn.gamma);
        out.push(&mut self.stem_bn.beta);
        for b in &mut self.blocks {
            out.push(&mut b.fc1.w);
            out.push(&mut b.fc1.b);
            out.push(&mut b.bn1.gamma);
            out.push(&mut b.bn1.beta);
            out.push(&mut b.fc2.w);
            out.push(&mut b.fc2.b);
            out.push(&mut b.bn2.gamma);
            out.push(&mut b.bn2.beta);
        }
        out.push(&mut self.out.w);
        out.push(&mut self.out.b);
        out
    }
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Discriminator {
    pub embed: Embedding,
    pub stem: SpectralDense,
    pub blocks: Vec<SnResBlock>,
    pub head: SpectralDense,
}

pub struct DiscriminatorVars {
    embed: EmbeddingVars,
    stem: SpectralDenseVars,
    blocks: Vec<SnResBlockVars>,
    head: SpectralDenseVars,
}

impl DiscriminatorVars {
    pub fn flat(&self) -> Vec<Var> {
        let mut out = vec![self.embed.table, self.stem.w, self.stem.b];
        for b in &self.blocks {
            out.extend([b.fc1.w, b.fc1.b, b.fc2.w, b.fc2.b]);
        }
        out.extend([self.head.w, self.head.b]);
        out
    }
}

impl Discriminator {
    pub fn new<R: Rng>(spec: &NetSpec, num_classes: usize, rng: &mut R) -> Self {
        let h = spec.discriminator_channels;
        Self {
            embed: Embedding::new(num_classes, spec.label_embed_dim, rng),
            stem: SpectralDense::new(spec.data_dim + spec.label_embed_dim, h, rng),
            blocks: (0..2).map(|_| SnResBlock::new(h, rng)).collect(),
            head: SpectralDense::new(h, 1, rng),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DiscriminatorVars {
        DiscriminatorVars {
            embed: self.embed.bind(g, trainable),
            stem: self.stem.bind(g, trainable),
            blocks: self.blocks.iter().map(|b| b.bind(g, trainable)).collect(),
            head: self.head.bind(g, trainable),
        }
    }

    /// Conditional score `D(x, y)` as a `B×1` column.
    pub fn score_graph(&self, g: &mut Graph, v: &DiscriminatorVars, x: Var, y_onehot: Var) -> Var {
        let e = self.embed.forward(g, &v.embed, y_onehot);
        let xin = g.concat_cols(x, e);
        let mut h = self.stem.forward(g, &v.stem, xin);
        h = leaky_relu(g, h, 0.2);
        for (block, bv) in self.blocks.iter().zip(&v.blocks) {
            h = block.forward(g, bv, h);
        }
        self.head.forward(g, &v.head, h)
    }

    /// Evaluation-time scores.
    pub fn score(&self, x: &Array2<f64>, y_onehot: &Array2<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let v = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let yv = g.constant(y_onehot.clone());
        let s = self.score_graph(&mut g, &v, xv, yv);
        g.value(s).clone()
    }

    /// Runs power iteration on every spectrally normalized weight.
    pub fn spectral_normalize(&mut self, iters: usize) {
        self.stem.power_iterate(iters);
        for b in &mut self.blocks {
            b.fc1.power_iterate(iters);
            b.fc2.power_iterate(iters);
        }
        self.head.power_iterate(iters);
    }

    /// All spectrally normalized layers, for inspection and tests.
    pub fn spectral_layers(&self) -> Vec<&SpectralDense> {
        let mut out = vec![&self.stem];
        for b in &self.blocks {
            out.push(&b.fc1);
            out.push(&b.fc2);
        }
        out.push(&self.head);
        out
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut out = vec![&self.embed.table, &self.stem.w, &self.stem.b];
        for b in &self.blocks {
            out.extend([&b.fc1.w, &b.fc1.b, &b.fc2.w, &b.fc2.b]);
        }
        out.extend([&self.head.w, &self.head.b]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> =
            vec![&mut self.embed.table, &mut self.stem.w, &mut self.stem.b];
        for b in &mut self.blocks {
            out.push(&mut b.fc1.w);
            out.push(&mut b.fc1.b);
            out.push(&mut b.fc2.w);
            out.push(&mut b.fc2.b);
        }
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out
    }
}

// ---------------------------------------------------------------------------
// Attacker
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Attacker {
    pub embed: Embedding,
    pub stem: Dense,
    pub stem_bn: BatchNorm,
    pub blocks: Vec<BnResBlock>,
    pub out: Dense,
    pub clamp: Option<f64>,
}

pub struct AttackerVars {
    embed: EmbeddingVars,
    stem: DenseVars,
    stem_bn: BatchNormVars,
    blocks: Vec<BnResBlockVars>,
    out: DenseVars,
}

impl AttackerVars {
    pub fn flat(&self) -> Vec<Var> {
        let mut out = vec![self.embed.table, self.stem.w, self.stem.b];
        out.extend([self.stem_bn.gamma, self.stem_bn.beta]);
        for b in &self.blocks {
            out.extend([
                b.fc1.w, b.fc1.b, b.bn1.gamma, b.bn1.beta, b.fc2.w, b.fc2.b, b.bn2.gamma,
                b.bn2.beta,
            ]);
        }
        out.extend([self.out.w, self.out.b]);
        out
    }
}

impl Attacker {
    pub fn new<R: Rng>(spec: &NetSpec, num_classes: usize, rng: &mut R) -> Self {
        let h = spec.attacker_hidden;
        Self {
            embed: Embedding::new(num_classes, spec.label_embed_dim, rng),
            stem: Dense::new(spec.noise_dim + spec.label_embed_dim, h, rng),
            stem_bn: BatchNorm::new(h),
            blocks: (0..2).map(|_| BnResBlock::new(h, rng)).collect(),
            out: Dense::new(h, spec.noise_dim, rng),
            clamp: spec.attacker_clamp,
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> AttackerVars {
        AttackerVars {
            embed: self.embed.bind(g, trainable),
            stem: self.stem.bind(g, trainable),
            stem_bn: self.stem_bn.bind(g, trainable),
            blocks: self.blocks.iter().map(|b| b.bind(g, trainable)).collect(),
            out: self.out.bind(g, trainable),
        }
    }

    /// Adversarial noise `z_a = A(z, y)`; unconstrained unless a clamp was
    /// configured, in which case the output is smoothly bounded by
    /// `c·tanh(raw/c)`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        v: &AttackerVars,
        z: Var,
        y_onehot: Var,
        stats: Stats,
    ) -> (Var, BnUpdates) {
        let mut updates = BnUpdates::default();
        let e = self.embed.forward(g, &v.embed, y_onehot);
        let zin = g.concat_cols(z, e);
        let mut h = self.stem.forward(g, &v.stem, zin);
        h = self
            .stem_bn
            .forward(g, &v.stem_bn, h, stats, &mut updates);
        h = g.relu(h);
        for (block, bv) in self.blocks.iter().zip(&v.blocks) {
            h = block.forward(g, bv, h, stats, &mut updates);
        }
        let mut out = self.out.forward(g, &v.out, h);
        if let Some(c) = self.clamp {
            let scaled = g.scale(out, 1.0 / c);
            let t = g.tanh(scaled);
            out = g.scale(t, c);
        }
        (out, updates)
    }

    pub fn commit_bn(&mut self, updates: BnUpdates) {
        let mut it = updates.0.into_iter();
        if let Some((mu, var)) = it.next() {
            self.stem_bn.commit(&mu, &var);
        }
        for block in &mut self.blocks {
            block.commit(&mut it);
        }
        assert!(it.next().is_none(), "unconsumed batch-norm statistics");
    }

    /// Evaluation-time adversarial noise (running statistics).
    pub fn perturb(&self, z: &Array2<f64>, y_onehot: &Array2<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let v = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let yv = g.constant(y_onehot.clone());
        let (out, _) = self.forward_graph(&mut g, &v, zv, yv, Stats::Running);
        g.value(out).clone()
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut out = vec![&self.embed.table, &self.stem.w, &self.stem.b];
        out.extend([&self.stem_bn.gamma, &self.stem_bn.beta]);
        for b in &self.blocks {
            out.extend([
                &b.fc1.w, &b.fc1.b, &b.bn1.gamma, &b.bn1.beta, &b.fc2.w, &b.fc2.b, &b.bn2.gamma,
                &b.bn2.beta,
            ]);
        }
        out.extend([&self.out.w, &self.out.b]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> =
            vec![&mut self.embed.table, &mut self.stem.w, &mut self.stem.b];
        out.push(&mut self.stem_bn.gamma);
        out.push(&mut self.stem_bn.beta);
        for b in &mut self.blocks {
            out.push(&mut b.fc1.w);
            out.push(&mut b.fc1.b);
            out.push(&mut b.bn1.gamma);
            out.push(&mut b.bn1.beta);
            out.push(&mut b.fc2.w);
            out.push(&mut b.fc2.b);
            out.push(&mut b.bn2.gamma);
            out.push(&mut b.bn2.beta);
        }
        out.push(&mut self.out.w);
        out.push(&mut self.out.b);
        out
    }
}

// ---------------------------------------------------------------------------
// Bundle
// ---------------------------------------------------------------------------

/// All five parameter sets of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelBundle {
    pub c: Classifier,
    pub c_teacher: Classifier,
    pub g: Generator,
    pub d: Discriminator,
    pub a: Attacker,
    pub spec: NetSpec,
    pub num_classes: usize,
}

/// Builds a randomly initialized bundle; the teacher starts as an exact copy
/// of the classifier, and every discriminator weight carries power-iteration
/// state initialized with a short burn-in.
pub fn build_models<R: Rng>(
    spec: &NetSpec,
    num_classes: usize,
    rng: &mut R,
) -> Result<ModelBundle, NetError> {
    spec.validate()?;
    if num_classes == 0 {
        return Err(NetError::InvalidSpec {
            reason: "num_classes must be positive".into(),
        });
    }
    let c = Classifier::new(spec, num_classes, rng);
    let c_teacher = c.clone();
    let g = Generator::new(spec, num_classes, rng);
    let d = Discriminator::new(spec, num_classes, rng);
    let a = Attacker::new(spec, num_classes, rng);
    Ok(ModelBundle {
        c,
        c_teacher,
        g,
        d,
        a,
        spec: spec.clone(),
        num_classes,
    })
}
