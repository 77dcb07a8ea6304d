//! The alternating four-network training loop.
//!
//! One step runs, in order: the discriminator ascends its two-game objective;
//! the seed attacker ascends the adversarial cross-entropy; the classifier
//! descends its combined objective and the exponential-moving-average teacher
//! follows it; the generator descends its own game term. Each parameter set
//! is written exactly once per step by its own update, which is enforced with
//! version counters. `fit` wraps the step in epochs with pretraining,
//! per-epoch validation, early stopping, checkpointing, and a metrics log.
//!
//! Reproducibility: every random consumer (initialization, batch sampling,
//! generator noise, conditioning labels, robust evaluation) draws from its
//! own seeded stream, so disabling one loss term never shifts the draws seen
//! by another. Two runs with the same configuration and seed produce
//! byte-identical checkpoints and metrics files.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{evaluate_robust_accuracy, pgd_attack, AttackError, AttackFamily, AttackSpec};
use crate::datasets::{
    augment_with_pseudo_labels, label_marginal, sample_batch, BatchPair, DataError, DatasetSplit,
};
use crate::losses::{
    adv_loss_graph, c_gan_term_graph, d_fake_term_graph, d_real_term_graph, nat_loss_graph,
    rae_loss_graph, GanMode, LossError, LossTerms, WeightConfig,
};
use crate::nets::{
    argmax_rows, build_models, ema_update, Classifier, ModelBundle, NetError, NetSpec, Stats,
};
use crate::tensor::{Graph, Var};
use crate::uae::{sample_noise, uae_graph, UaeError};

/// Stream salts: every random consumer gets `seed ^ salt` so that enabling or
/// disabling one consumer never shifts the draws another one sees.
pub const INIT_STREAM_SALT: u64 = 0x5eed_0000_0000_0001;
pub const BATCH_STREAM_SALT: u64 = 0x5eed_0000_0000_0002;
pub const NOISE_STREAM_SALT: u64 = 0x5eed_0000_0000_0003;
pub const LABEL_STREAM_SALT: u64 = 0x5eed_0000_0000_0004;
pub const EVAL_STREAM_SALT: u64 = 0x5eed_0000_0000_0005;

/// One independently seeded random stream.
pub fn seeded_stream(seed: u64, salt: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed ^ salt)
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite {stage} at step {step}")]
    NonFinite { stage: &'static str, step: u64 },
    #[error("unsupported checkpoint format version {0}")]
    CheckpointVersion(u32),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Uae(#[from] UaeError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint serialization failure: {0}")]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

/// Learning-rate profile over the whole run (pretraining plus training).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    /// Cosine annealing from the peak down to zero, restarted `cycles` times
    /// over the run.
    CosineCyclic { cycles: u32 },
}

impl LrSchedule {
    /// Multiplier in `[0, 1]` applied to the peak learning rate at `step` of
    /// a run `total_steps` long.
    pub fn factor(&self, step: u64, total_steps: u64) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::CosineCyclic { cycles } => {
                let cycles = u64::from((*cycles).max(1));
                let cycle_len = total_steps.max(1).div_ceil(cycles).max(1);
                let phase = (step % cycle_len) as f64 / cycle_len as f64;
                0.5 * (1.0 + (PI * phase).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Peak learning rate of the classifier.
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub schedule: LrSchedule,
    /// The generator, discriminator, and attacker run at `lr × aux_lr_scale`.
    pub aux_lr_scale: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.2,
            weight_decay: 5e-4,
            momentum: 0.9,
            nesterov: true,
            schedule: LrSchedule::CosineCyclic { cycles: 1 },
            aux_lr_scale: 0.05,
        }
    }
}

/// Stochastic gradient descent with classical momentum, optional Nesterov
/// lookahead, and decoupled-free (L2-in-gradient) weight decay:
/// `g ← ∇ + wd·θ; v ← μ·v + g; θ ← θ − lr·(g + μ·v)` (Nesterov) or
/// `θ ← θ − lr·v` (classical). Velocity buffers are aligned with the
/// network's canonical parameter order.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    velocity: Vec<Array2<f64>>,
}

impl Sgd {
    pub fn new(params: &[&Array2<f64>], momentum: f64, weight_decay: f64, nesterov: bool) -> Self {
        Self {
            momentum,
            weight_decay,
            nesterov,
            velocity: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
        }
    }

    /// One descent step. To ascend an objective, negate it before taking
    /// gradients.
    pub fn step(&mut self, lr: f64, params: Vec<&mut Array2<f64>>, grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        assert_eq!(params.len(), self.velocity.len(), "optimizer bound to a different network");
        for ((theta, grad), vel) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            let mut g = grad.clone();
            if self.weight_decay != 0.0 {
                g.scaled_add(self.weight_decay, theta);
            }
            vel.mapv_inplace(|v| v * self.momentum);
            *vel += &g;
            if self.nesterov {
                g.scaled_add(self.momentum, vel);
                theta.scaled_add(-lr, &g);
            } else {
                theta.scaled_add(-lr, vel);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Which validation metric drives early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopMetric {
    RobustAccuracy,
    NaturalAccuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub metric: StopMetric,
    /// Stop after this many consecutive epochs without improvement.
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub net: NetSpec,
    pub weights: WeightConfig,
    pub optimizer: OptimizerConfig,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    /// Warm-up epochs training the classifier on its natural loss and the
    /// generator–discriminator pair on their game; the attacker sits out.
    pub t_pre: usize,
    pub t_train: usize,
    pub early_stopping: EarlyStopping,
    pub seed: u64,
    pub gan_mode: GanMode,
    pub ema_decay: f64,
    /// Fraction of total steps over which the EMA decay ramps linearly from
    /// zero up to `ema_decay`.
    pub ema_ramp_frac: f64,
    /// Pixel-space projected-ascent attack used by the robustness loss term
    /// (active when `weights.beta > 0`).
    pub rae_attack: AttackSpec,
    /// Attack used for the per-epoch validation robust-accuracy metric.
    pub eval_attack: AttackSpec,
    /// When set, unlabeled points classified above this confidence are
    /// pseudo-labeled after pretraining and folded into the label marginal
    /// that conditions generated examples.
    pub pseudo_label_threshold: Option<f64>,
    /// Where to write `best.json`, `last.json`, and `metrics.csv`; `None`
    /// keeps everything in memory.
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetSpec::default(),
            weights: WeightConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch_labeled: 256,
            batch_unlabeled: 256,
            t_pre: 2,
            t_train: 20,
            early_stopping: EarlyStopping {
                metric: StopMetric::RobustAccuracy,
                patience: 5,
            },
            seed: 0,
            gan_mode: GanMode::Hinge,
            ema_decay: 0.999,
            ema_ramp_frac: 0.01,
            rae_attack: AttackSpec::pixel_pgd(8.0 / 255.0, 1.0 / 255.0, 20),
            eval_attack: AttackSpec::pixel_pgd(8.0 / 255.0, 1.0 / 255.0, 20),
            pseudo_label_threshold: None,
            output_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if !(self.optimizer.lr.is_finite() && self.optimizer.lr > 0.0) {
            return bad(format!("peak learning rate must be positive, got {}", self.optimizer.lr));
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.optimizer.momentum));
        }
        if !(self.optimizer.weight_decay.is_finite() && self.optimizer.weight_decay >= 0.0) {
            return bad(format!("weight decay must be ≥ 0, got {}", self.optimizer.weight_decay));
        }
        if !(self.optimizer.aux_lr_scale.is_finite() && self.optimizer.aux_lr_scale > 0.0) {
            return bad(format!(
                "auxiliary learning-rate scale must be positive, got {}",
                self.optimizer.aux_lr_scale
            ));
        }
        if self.batch_labeled == 0 {
            return bad("labeled batch size must be at least 1".into());
        }
        if self.batch_unlabeled == 0 && (self.weights.alpha > 0.0 || self.weights.gamma > 0.0) {
            return bad(
                "unlabeled batch size must be at least 1 when the consistency or GAN weight is active"
                    .into(),
            );
        }
        if self.early_stopping.patience == 0 {
            return bad("early-stopping patience must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("EMA decay must lie in [0, 1), got {}", self.ema_decay));
        }
        if !(0.0..=1.0).contains(&self.ema_ramp_frac) {
            return bad(format!("EMA ramp fraction must lie in [0, 1], got {}", self.ema_ramp_frac));
        }
        if let Some(t) = self.pseudo_label_threshold {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("pseudo-label threshold must lie in [0, 1], got {t}"));
            }
        }
        self.weights.validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        self.net.validate()?;
        self.rae_attack.validate()?;
        self.rae_attack.expect_family(AttackFamily::PixelPgd)?;
        self.eval_attack.validate()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// Monotone per-network write counters; every update bumps exactly one.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParamVersions {
    pub d: u64,
    pub a: u64,
    pub c: u64,
    pub teacher: u64,
    pub g: u64,
}

/// The seeded random streams a fit consumes.
pub struct FitStreams {
    pub batch: ChaCha20Rng,
    pub noise: ChaCha20Rng,
    pub label: ChaCha20Rng,
    pub eval: ChaCha20Rng,
}

impl FitStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            batch: seeded_stream(seed, BATCH_STREAM_SALT),
            noise: seeded_stream(seed, NOISE_STREAM_SALT),
            label: seeded_stream(seed, LABEL_STREAM_SALT),
            eval: seeded_stream(seed, EVAL_STREAM_SALT),
        }
    }
}

pub struct Trainer {
    pub models: ModelBundle,
    pub cfg: TrainConfig,
    pub versions: ParamVersions,
    /// Completed classifier updates (pretraining included); indexes the
    /// learning-rate schedule and the EMA ramp.
    pub step: u64,
    pub total_steps: u64,
    /// Set once by non-finite recovery; halves every auxiliary learning rate.
    pub gan_lr_halved: bool,
    c_opt: Sgd,
    g_opt: Sgd,
    d_opt: Sgd,
    a_opt: Sgd,
}

fn collect_grads(g: &Graph, vars: &[Var]) -> Vec<Array2<f64>> {
    vars.iter().map(|v| g.grad(*v).clone()).collect()
}

fn all_finite(arrays: &[&Array2<f64>]) -> bool {
    arrays.iter().all(|a| a.iter().all(|v| v.is_finite()))
}

impl Trainer {
    /// Builds freshly initialized models from the config's seed.
    pub fn new(cfg: TrainConfig, num_classes: usize, total_steps: u64) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut rng = seeded_stream(cfg.seed, INIT_STREAM_SALT);
        let models = build_models(&cfg.net, num_classes, &mut rng)?;
        Ok(Self::assemble(cfg, models, total_steps))
    }

    /// Wraps existing models (e.g. from a checkpoint) with fresh optimizer
    /// state.
    pub fn from_models(
        cfg: TrainConfig,
        models: ModelBundle,
        total_steps: u64,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        Ok(Self::assemble(cfg, models, total_steps))
    }

    fn assemble(cfg: TrainConfig, models: ModelBundle, total_steps: u64) -> Self {
        let o = &cfg.optimizer;
        let c_opt = Sgd::new(&models.c.params(), o.momentum, o.weight_decay, o.nesterov);
        let g_opt = Sgd::new(&models.g.params(), o.momentum, o.weight_decay, o.nesterov);
        let d_opt = Sgd::new(&models.d.params(), o.momentum, o.weight_decay, o.nesterov);
        let a_opt = Sgd::new(&models.a.params(), o.momentum, o.weight_decay, o.nesterov);
        Self {
            models,
            cfg,
            versions: ParamVersions::default(),
            step: 0,
            total_steps,
            gan_lr_halved: false,
            c_opt,
            g_opt,
            d_opt,
            a_opt,
        }
    }

    fn reset_optimizers(&mut self) {
        let o = &self.cfg.optimizer;
        self.c_opt = Sgd::new(&self.models.c.params(), o.momentum, o.weight_decay, o.nesterov);
        self.g_opt = Sgd::new(&self.models.g.params(), o.momentum, o.weight_decay, o.nesterov);
        self.d_opt = Sgd::new(&self.models.d.params(), o.momentum, o.weight_decay, o.nesterov);
        self.a_opt = Sgd::new(&self.models.a.params(), o.momentum, o.weight_decay, o.nesterov);
    }

    /// Whether any update needs the generator–discriminator game.
    pub fn gan_active(&self) -> bool {
        self.cfg.weights.gamma > 0.0 || self.cfg.weights.lambda > 0.0
    }

    fn params_finite(&self) -> bool {
        let m = &self.models;
        [
            m.c.params(),
            m.c_teacher.params(),
            m.g.params(),
            m.d.params(),
            m.a.params(),
        ]
        .iter()
        .all(|set| all_finite(set))
    }

    /// Divergence guard run before any graph is built: blown-up parameters
    /// or corrupt inputs abort the step with a diagnostic instead of
    /// propagating through the tape.
    fn check_step_preconditions(
        &self,
        inputs: &[&Array2<f64>],
    ) -> Result<(), TrainError> {
        if !all_finite(inputs) {
            return Err(TrainError::NonFinite {
                stage: "input batch",
                step: self.step,
            });
        }
        if !self.params_finite() {
            return Err(TrainError::NonFinite {
                stage: "model parameters",
                step: self.step,
            });
        }
        Ok(())
    }

    /// Classifier learning rate at a given step.
    pub fn lr_at(&self, step: u64) -> f64 {
        self.cfg.optimizer.lr * self.cfg.optimizer.schedule.factor(step, self.total_steps)
    }

    /// Generator/discriminator/attacker learning rate derived from the
    /// classifier's.
    pub fn aux_lr(&self, lr_c: f64) -> f64 {
        let halved = if self.gan_lr_halved { 0.5 } else { 1.0 };
        lr_c * self.cfg.optimizer.aux_lr_scale * halved
    }

    /// EMA decay at a step: ramps linearly from ~0 to the configured decay
    /// over the first `ema_ramp_frac` of the run, then stays flat.
    pub fn ema_decay_at(&self, step: u64) -> f64 {
        let ramp = (self.total_steps as f64 * self.cfg.ema_ramp_frac).ceil().max(1.0);
        self.cfg.ema_decay * ((step as f64 + 1.0) / ramp).min(1.0)
    }

    pub fn steps_per_epoch(&self, data: &DatasetSplit) -> u64 {
        ((data.n_labeled() / self.cfg.batch_labeled).max(1)) as u64
    }

    /// Generated batch `G(z, y)` as values, using batch statistics without
    /// committing them (this is not the generator's own update pass).
    fn generated_values(&self, z: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let gv = self.models.g.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let yv = g.constant(y.clone());
        let (x, _discarded) = self.models.g.forward_graph(&mut g, &gv, zv, yv, Stats::Batch);
        g.value(x).clone()
    }

    /// Attacked batch `G(A(z, y), y)` as values (batch statistics, nothing
    /// committed).
    fn uae_values(&self, z: &Array2<f64>, y: &Array2<f64>) -> Result<Array2<f64>, TrainError> {
        let mut g = Graph::new();
        let parts = uae_graph(
            &mut g,
            &self.models.g,
            false,
            &self.models.a,
            false,
            z,
            y,
            Stats::Batch,
        )?;
        Ok(g.value(parts.x_tilde).clone())
    }

    /// Discriminator ascent. With both fake sources the objective is
    /// `2·real + fake_gen + fake_cls` (the sum of its two pairwise games);
    /// during pretraining only the generator game `real + fake_gen` runs.
    /// Returns the step's (real, fake-generator, fake-classifier) term
    /// values; the last is 0 when absent.
    fn update_d(
        &mut self,
        x_l: &Array2<f64>,
        y_l: &Array2<f64>,
        fake_g: (&Array2<f64>, &Array2<f64>),
        fake_c: Option<(&Array2<f64>, &Array2<f64>)>,
        lr: f64,
    ) -> Result<(f64, f64, f64), TrainError> {
        let mode = self.cfg.gan_mode;
        let mut g = Graph::new();
        let dv = self.models.d.bind(&mut g, true);
        let flat = dv.flat();
        let xl = g.constant(x_l.clone());
        let yl = g.constant(y_l.clone());
        let real = d_real_term_graph(&mut g, &self.models.d, &dv, xl, yl, mode);
        let xg = g.constant(fake_g.0.clone());
        let yg = g.constant(fake_g.1.clone());
        let fg = d_fake_term_graph(&mut g, &self.models.d, &dv, xg, yg, mode);
        let mut l_c = 0.0;
        let objective = match fake_c {
            Some((x_c, y_c)) => {
                let xc = g.constant(x_c.clone());
                let yc = g.constant(y_c.clone());
                let fc = d_fake_term_graph(&mut g, &self.models.d, &dv, xc, yc, mode);
                l_c = g.value(fc)[[0, 0]];
                let real2 = g.scale(real, 2.0);
                let partial = g.add(real2, fg);
                g.add(partial, fc)
            }
            None => g.add(real, fg),
        };
        if !g.value(objective)[[0, 0]].is_finite() {
            return Err(TrainError::NonFinite {
                stage: "discriminator objective",
                step: self.step,
            });
        }
        let descent = g.scale(objective, -1.0);
        g.backward(descent);
        let grads = collect_grads(&g, &flat);
        self.d_opt.step(lr, self.models.d.params_mut(), &grads);
        self.models.d.spectral_normalize(1);
        self.versions.d += 1;
        Ok((g.value(real)[[0, 0]], g.value(fg)[[0, 0]], l_c))
    }

    /// Attacker ascent on the adversarial cross-entropy; the generator and
    /// classifier are frozen in-graph. Commits the attacker's own batch-norm
    /// statistics only.
    fn update_a(&mut self, z: &Array2<f64>, y_g: &Array2<f64>, lr: f64) -> Result<(), TrainError> {
        let mut g = Graph::new();
        let parts = uae_graph(
            &mut g,
            &self.models.g,
            false,
            &self.models.a,
            true,
            z,
            y_g,
            Stats::Batch,
        )?;
        let cv = self.models.c.bind(&mut g, false);
        let y = g.constant(y_g.clone());
        let adv = adv_loss_graph(&mut g, &self.models.c, &cv, parts.x_tilde, y);
        if !g.value(adv)[[0, 0]].is_finite() {
            return Err(TrainError::NonFinite {
                stage: "attacker objective",
                step: self.step,
            });
        }
        let descent = g.scale(adv, -1.0);
        g.backward(descent);
        let flat = parts.att_vars.flat();
        let grads = collect_grads(&g, &flat);
        self.a_opt.step(lr, self.models.a.params_mut(), &grads);
        self.models.a.commit_bn(parts.att_bn);
        self.versions.a += 1;
        Ok(())
    }

    /// Classifier descent on `L_nat + λ·L_adv + γ·L_gan + β·L_r` followed by
    /// the teacher's EMA update. Zero-weight terms are skipped exactly: they
    /// contribute no graph nodes and no gradient. Returns the step's
    /// (natural, adversarial, robustness) term values.
    fn update_c(
        &mut self,
        batch: &BatchPair,
        x_tilde: Option<&Array2<f64>>,
        y_g: &Array2<f64>,
        w: &WeightConfig,
        lr: f64,
    ) -> Result<(f64, f64, f64), TrainError> {
        let num_classes = self.models.c.num_classes;
        let teacher_probs = if w.alpha > 0.0 {
            self.models.c_teacher.classify(&batch.unlabeled_x)
        } else {
            Array2::zeros((0, num_classes))
        };
        let x_hat = if w.beta > 0.0 {
            Some(pgd_attack(
                &self.models.c,
                &batch.labeled_x,
                &batch.labeled_y,
                &self.cfg.rae_attack,
            )?)
        } else {
            None
        };

        let mut g = Graph::new();
        let cv = self.models.c.bind(&mut g, true);
        let flat = cv.flat();
        let nat = nat_loss_graph(
            &mut g,
            &self.models.c,
            &cv,
            &batch.labeled_x,
            &batch.labeled_y,
            &batch.unlabeled_x,
            &teacher_probs,
            w.alpha,
        );
        let mut objective = nat;
        let mut adv_term = None;
        if w.lambda > 0.0 {
            let xt = g.constant(
                x_tilde
                    .expect("an attacked batch is required when the adversarial weight is active")
                    .clone(),
            );
            let yv = g.constant(y_g.clone());
            let adv = adv_loss_graph(&mut g, &self.models.c, &cv, xt, yv);
            let weighted = g.scale(adv, w.lambda);
            objective = g.add(objective, weighted);
            adv_term = Some(adv);
        }
        if w.gamma > 0.0 {
            let dv = self.models.d.bind(&mut g, false);
            let cgan = c_gan_term_graph(
                &mut g,
                &self.models.d,
                &dv,
                &self.models.c,
                &cv,
                &batch.unlabeled_x,
            );
            let weighted = g.scale(cgan, w.gamma);
            objective = g.add(objective, weighted);
        }
        let mut rae_term = None;
        if let Some(x_hat) = &x_hat {
            let rae = rae_loss_graph(&mut g, &self.models.c, &cv, x_hat, &batch.labeled_y);
            let weighted = g.scale(rae, w.beta);
            objective = g.add(objective, weighted);
            rae_term = Some(rae);
        }
        if !g.value(objective)[[0, 0]].is_finite() {
            return Err(TrainError::NonFinite {
                stage: "classifier objective",
                step: self.step,
            });
        }
        g.backward(objective);
        let grads = collect_grads(&g, &flat);
        self.c_opt.step(lr, self.models.c.params_mut(), &grads);
        self.versions.c += 1;

        let decay = self.ema_decay_at(self.step);
        ema_update(&mut self.models.c_teacher, &self.models.c, decay);
        self.versions.teacher += 1;

        let l_nat = g.value(nat)[[0, 0]];
        let l_adv = adv_term.map_or(0.0, |v| g.value(v)[[0, 0]]);
        let l_r = rae_term.map_or(0.0, |v| g.value(v)[[0, 0]]);
        Ok((l_nat, l_adv, l_r))
    }

    /// Generator descent on `mean −D(G(z, y), y)` (linear in both GAN modes)
    /// with the discriminator frozen in-graph. Commits the generator's
    /// batch-norm statistics from this pass.
    fn update_g(&mut self, z: &Array2<f64>, y_g: &Array2<f64>, lr: f64) -> Result<(), TrainError> {
        let mut g = Graph::new();
        let gv = self.models.g.bind(&mut g, true);
        let dv = self.models.d.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let yv = g.constant(y_g.clone());
        let (x_fake, bn) = self.models.g.forward_graph(&mut g, &gv, zv, yv, Stats::Batch);
        let objective = d_fake_term_graph(&mut g, &self.models.d, &dv, x_fake, yv, GanMode::Linear);
        if !g.value(objective)[[0, 0]].is_finite() {
            return Err(TrainError::NonFinite {
                stage: "generator objective",
                step: self.step,
            });
        }
        g.backward(objective);
        let flat = gv.flat();
        let grads = collect_grads(&g, &flat);
        self.g_opt.step(lr, self.models.g.params_mut(), &grads);
        self.models.g.commit_bn(bn);
        self.versions.g += 1;
        Ok(())
    }

    /// One full alternating step at schedule-determined learning rates.
    /// `z`/`y_g` condition the generated batch; they may be empty when both
    /// the GAN and adversarial weights are zero.
    pub fn train_step(
        &mut self,
        batch: &BatchPair,
        z: &Array2<f64>,
        y_g: &Array2<f64>,
    ) -> Result<LossTerms, TrainError> {
        let lr_c = self.lr_at(self.step);
        let lr_aux = self.aux_lr(lr_c);
        self.train_step_with_lr(batch, z, y_g, lr_c, lr_aux)
    }

    /// One full alternating step at explicit learning rates: discriminator
    /// ascent, attacker ascent, classifier descent plus teacher EMA,
    /// generator descent — in that order.
    pub fn train_step_with_lr(
        &mut self,
        batch: &BatchPair,
        z: &Array2<f64>,
        y_g: &Array2<f64>,
        lr_c: f64,
        lr_aux: f64,
    ) -> Result<LossTerms, TrainError> {
        self.check_step_preconditions(&[
            &batch.labeled_x,
            &batch.labeled_y,
            &batch.unlabeled_x,
            z,
            y_g,
        ])?;
        let w = self.cfg.weights;
        let gan = self.gan_active();
        let before = self.versions;

        let (mut l_d, mut l_g, mut l_c_gan) = (0.0, 0.0, 0.0);
        if gan {
            let x_fake_g = self.generated_values(z, y_g);
            let y_soft = self.models.c.classify(&batch.unlabeled_x);
            (l_d, l_g, l_c_gan) = self.update_d(
                &batch.labeled_x,
                &batch.labeled_y,
                (&x_fake_g, y_g),
                Some((&batch.unlabeled_x, &y_soft)),
                lr_aux,
            )?;
        }
        if w.lambda > 0.0 {
            self.update_a(z, y_g, lr_aux)?;
        }
        let x_tilde = if w.lambda > 0.0 {
            Some(self.uae_values(z, y_g)?)
        } else {
            None
        };
        let (l_nat, l_adv, l_r) = self.update_c(batch, x_tilde.as_ref(), y_g, &w, lr_c)?;
        if gan {
            self.update_g(z, y_g, lr_aux)?;
        }

        let v = self.versions;
        assert_eq!(v.d, before.d + u64::from(gan), "discriminator written off-schedule");
        assert_eq!(v.a, before.a + u64::from(w.lambda > 0.0), "attacker written off-schedule");
        assert_eq!(v.c, before.c + 1, "classifier written off-schedule");
        assert_eq!(v.teacher, before.teacher + 1, "teacher written off-schedule");
        assert_eq!(v.g, before.g + u64::from(gan), "generator written off-schedule");

        self.step += 1;
        let terms = LossTerms::assemble(l_d, l_g, l_c_gan, l_nat, l_adv, l_r, &w);
        if !terms.is_finite() {
            return Err(TrainError::NonFinite {
                stage: "assembled loss report",
                step: self.step - 1,
            });
        }
        Ok(terms)
    }

    /// One warm-up step: the classifier trains on its natural loss alone and
    /// the generator–discriminator pair play their game; the attacker is
    /// untouched. Returns the step's natural loss.
    pub fn pretrain_step(
        &mut self,
        batch: &BatchPair,
        gan_inputs: Option<(&Array2<f64>, &Array2<f64>)>,
    ) -> Result<f64, TrainError> {
        let mut inputs = vec![&batch.labeled_x, &batch.labeled_y, &batch.unlabeled_x];
        if let Some((z, y_g)) = gan_inputs {
            inputs.push(z);
            inputs.push(y_g);
        }
        self.check_step_preconditions(&inputs)?;
        let lr_c = self.lr_at(self.step);
        let lr_aux = self.aux_lr(lr_c);
        let a_before = self.versions.a;
        if let Some((z, y_g)) = gan_inputs {
            let x_fake_g = self.generated_values(z, y_g);
            self.update_d(
                &batch.labeled_x,
                &batch.labeled_y,
                (&x_fake_g, y_g),
                None,
                lr_aux,
            )?;
        }
        let nat_only = WeightConfig {
            alpha: self.cfg.weights.alpha,
            lambda: 0.0,
            gamma: 0.0,
            beta: 0.0,
        };
        let (l_nat, _, _) = self.update_c(batch, None, &Array2::zeros((0, 0)), &nat_only, lr_c)?;
        if let Some((z, y_g)) = gan_inputs {
            self.update_g(z, y_g, lr_aux)?;
        }
        assert_eq!(self.versions.a, a_before, "attacker must sit out pretraining");
        self.step += 1;
        Ok(l_nat)
    }

    /// Runs `t_pre` warm-up epochs; returns the mean natural loss per epoch.
    pub fn pretrain(
        &mut self,
        data: &DatasetSplit,
        streams: &mut FitStreams,
    ) -> Result<Vec<f64>, TrainError> {
        let spe = self.steps_per_epoch(data);
        let marginal = label_marginal(data)?;
        let sizes = (self.cfg.batch_labeled, self.cfg.batch_unlabeled);
        let mut per_epoch = Vec::with_capacity(self.cfg.t_pre);
        for _ in 0..self.cfg.t_pre {
            let mut sum = 0.0;
            for _ in 0..spe {
                let batch = sample_batch(data, sizes, &mut streams.batch)?;
                if self.gan_active() {
                    let z = sample_noise(self.cfg.batch_labeled, self.cfg.net.noise_dim, &mut streams.noise);
                    let (y_g, _) = marginal.sample_one_hot(self.cfg.batch_labeled, &mut streams.label);
                    sum += self.pretrain_step(&batch, Some((&z, &y_g)))?;
                } else {
                    sum += self.pretrain_step(&batch, None)?;
                }
            }
            per_epoch.push(sum / spe as f64);
        }
        Ok(per_epoch)
    }

    /// Natural and robust accuracy on the validation split.
    pub fn validation_metrics(
        &self,
        data: &DatasetSplit,
        eval_rng: &mut ChaCha20Rng,
    ) -> Result<(f64, f64), TrainError> {
        let nat = accuracy(&self.models.c, &data.validation_x, &data.validation_y);
        let rob = evaluate_robust_accuracy(
            &self.models,
            &self.cfg.eval_attack,
            &data.validation_x,
            &data.validation_y,
            eval_rng,
        )?;
        Ok((nat, rob))
    }
}

/// Fraction of argmax-correct predictions.
fn accuracy(c: &Classifier, x: &Array2<f64>, y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let pred = argmax_rows(&c.classify(x));
    pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64
}

// ---------------------------------------------------------------------------
// Reports, checkpoints, and the outer loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the step-level loss terms over the epoch.
    pub terms: LossTerms,
    pub val_nat_acc: f64,
    pub val_rob_acc: f64,
    /// Classifier learning rate at the epoch's final step.
    pub lr: f64,
}

/// Header of `metrics.csv`; one [`EpochRecord`] per row.
pub const METRICS_CSV_HEADER: &str =
    "epoch,l_d,l_g,l_c_gan,l_nat,l_adv,l_r,total,val_nat_acc,val_rob_acc,lr";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.terms.l_d,
            self.terms.l_g,
            self.terms.l_c_gan,
            self.terms.l_nat,
            self.terms.l_adv,
            self.terms.l_r,
            self.terms.total,
            self.val_nat_acc,
            self.val_rob_acc,
            self.lr
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean natural loss per warm-up epoch.
    pub pretrain_nat: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the best early-stopping metric; `None` when no
    /// epoch ran.
    pub best_epoch: Option<usize>,
    pub best_metric: f64,
    /// Number of training epochs actually run.
    pub stop_epoch: usize,
    pub wall_seconds: f64,
    pub gan_lr_halved: bool,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub seed: u64,
    /// Training epoch the checkpointed models completed (0-based).
    pub epoch: usize,
    /// Early-stopping metric at that epoch.
    pub metric: f64,
    pub models: ModelBundle,
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), TrainError> {
    let bytes = serde_json::to_vec(ck)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = std::fs::read(path)?;
    let ck: Checkpoint = serde_json::from_slice(&bytes)?;
    if ck.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(TrainError::CheckpointVersion(ck.format_version));
    }
    Ok(ck)
}

/// Result of a full fit: the report and the models restored to the best
/// validation epoch (or the post-pretraining state if no epoch ran).
pub struct FitOutcome {
    pub report: TrainReport,
    pub models: ModelBundle,
}

fn mean_terms(steps: &[LossTerms]) -> LossTerms {
    let n = steps.len().max(1) as f64;
    let mut acc = LossTerms {
        l_d: 0.0,
        l_g: 0.0,
        l_c_gan: 0.0,
        l_gan_total: 0.0,
        l_nat: 0.0,
        l_adv: 0.0,
        l_r: 0.0,
        total: 0.0,
    };
    for t in steps {
        acc.l_d += t.l_d;
        acc.l_g += t.l_g;
        acc.l_c_gan += t.l_c_gan;
        acc.l_gan_total += t.l_gan_total;
        acc.l_nat += t.l_nat;
        acc.l_adv += t.l_adv;
        acc.l_r += t.l_r;
        acc.total += t.total;
    }
    acc.l_d /= n;
    acc.l_g /= n;
    acc.l_c_gan /= n;
    acc.l_gan_total /= n;
    acc.l_nat /= n;
    acc.l_adv /= n;
    acc.l_r /= n;
    acc.total /= n;
    acc
}

/// Full training run: pretraining, optional pseudo-label enrichment of the
/// conditioning label marginal, the alternating loop with per-epoch
/// validation, early stopping on the configured metric, and checkpoint plus
/// metrics persistence when an output directory is configured.
///
/// A non-finite loss aborts the step, restores the last epoch snapshot,
/// and halves the auxiliary learning rates once; a second non-finite loss
/// aborts the run.
pub fn fit(cfg: &TrainConfig, data: &DatasetSplit) -> Result<FitOutcome, TrainError> {
    cfg.validate()?;
    if data.validation_x.nrows() == 0 {
        return Err(TrainError::InvalidConfig("validation split is empty".into()));
    }
    if (cfg.weights.alpha > 0.0 || cfg.weights.gamma > 0.0) && data.n_unlabeled() == 0 {
        return Err(TrainError::InvalidConfig(
            "consistency/GAN terms need an unlabeled partition".into(),
        ));
    }
    let start = Instant::now();
    let mut streams = FitStreams::new(cfg.seed);
    let spe = ((data.n_labeled() / cfg.batch_labeled).max(1)) as u64;
    let total_steps = spe * (cfg.t_pre + cfg.t_train) as u64;
    let mut trainer = Trainer::new(cfg.clone(), data.num_classes, total_steps)?;
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir)?;
    }

    let pretrain_nat = trainer.pretrain(data, &mut streams)?;

    let mut marginal = label_marginal(data)?;
    if let Some(threshold) = cfg.pseudo_label_threshold {
        let enriched = augment_with_pseudo_labels(data, &trainer.models.c, threshold);
        marginal = label_marginal(&enriched)?;
    }

    let sizes = (cfg.batch_labeled, cfg.batch_unlabeled);
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut csv = String::from(METRICS_CSV_HEADER);
    csv.push('\n');
    let mut best: Option<(usize, f64, ModelBundle)> = None;
    let mut since_best = 0usize;
    // Recovery point for non-finite losses: the last completed epoch.
    let mut snapshot = (trainer.models.clone(), trainer.step);

    for epoch in 0..cfg.t_train {
        let mut step_terms: Vec<LossTerms> = Vec::with_capacity(spe as usize);
        while (step_terms.len() as u64) < spe {
            let batch = sample_batch(data, sizes, &mut streams.batch)?;
            let (z, y_g) = if trainer.gan_active() {
                let z = sample_noise(cfg.batch_labeled, cfg.net.noise_dim, &mut streams.noise);
                let (y_g, _) = marginal.sample_one_hot(cfg.batch_labeled, &mut streams.label);
                (z, y_g)
            } else {
                (
                    Array2::zeros((0, cfg.net.noise_dim)),
                    Array2::zeros((0, data.num_classes)),
                )
            };
            match trainer.train_step(&batch, &z, &y_g) {
                Ok(terms) => step_terms.push(terms),
                Err(TrainError::NonFinite { stage, step }) => {
                    if trainer.gan_lr_halved {
                        return Err(TrainError::NonFinite { stage, step });
                    }
                    trainer.models = snapshot.0.clone();
                    trainer.step = snapshot.1;
                    trainer.reset_optimizers();
                    trainer.gan_lr_halved = true;
                }
                Err(other) => return Err(other),
            }
        }

        let terms = mean_terms(&step_terms);
        let (val_nat_acc, val_rob_acc) = trainer.validation_metrics(data, &mut streams.eval)?;
        let lr = trainer.lr_at(trainer.step.saturating_sub(1));
        let record = EpochRecord {
            epoch,
            terms,
            val_nat_acc,
            val_rob_acc,
            lr,
        };
        csv.push_str(&record.csv_row());
        csv.push('\n');
        records.push(record);

        let metric = match cfg.early_stopping.metric {
            StopMetric::RobustAccuracy => val_rob_acc,
            StopMetric::NaturalAccuracy => val_nat_acc,
        };
        let improved = best.as_ref().is_none_or(|(_, m, _)| metric > *m);
        if improved {
            best = Some((epoch, metric, trainer.models.clone()));
            since_best = 0;
            if let Some(dir) = &cfg.output_dir {
                save_checkpoint(
                    &dir.join("best.json"),
                    &Checkpoint {
                        format_version: CHECKPOINT_FORMAT_VERSION,
                        seed: cfg.seed,
                        epoch,
                        metric,
                        models: trainer.models.clone(),
                    },
                )?;
            }
        } else {
            since_best += 1;
        }
        if let Some(dir) = &cfg.output_dir {
            save_checkpoint(
                &dir.join("last.json"),
                &Checkpoint {
                    format_version: CHECKPOINT_FORMAT_VERSION,
                    seed: cfg.seed,
                    epoch,
                    metric,
                    models: trainer.models.clone(),
                },
            )?;
        }
        snapshot = (trainer.models.clone(), trainer.step);
        if since_best >= cfg.early_stopping.patience {
            break;
        }
    }

    if let Some(dir) = &cfg.output_dir {
        std::fs::write(dir.join("metrics.csv"), csv.as_bytes())?;
    }

    let stop_epoch = records.len();
    let (best_epoch, best_metric, best_models) = match best {
        Some((e, m, models)) => (Some(e), m, Some(models)),
        None => (None, 0.0, None),
    };
    let models = best_models.unwrap_or_else(|| trainer.models.clone());
    Ok(FitOutcome {
        report: TrainReport {
            pretrain_nat,
            epochs: records,
            best_epoch,
            best_metric,
            stop_epoch,
            wall_seconds: start.elapsed().as_secs_f64(),
            gan_lr_halved: trainer.gan_lr_halved,
        },
        models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{load_dataset_with, DatasetOptions};
    use crate::losses::{loss_g, loss_nat};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use tempfile::tempdir;

    fn tiny_spec() -> NetSpec {
        NetSpec {
            data_dim: 2,
            noise_dim: 3,
            label_embed_dim: 2,
            generator_channels: 6,
            discriminator_channels: 6,
            attacker_hidden: 5,
            classifier_depth: 4,
            classifier_width: 1,
            ..NetSpec::default()
        }
    }

    fn tiny_data(seed: u64) -> DatasetSplit {
        let opts = DatasetOptions {
            n_labeled: Some(60),
            validation_fraction: 0.2,
            seed,
            synth_classes: 3,
            synth_train_per_class: 40,
            synth_test_per_class: 10,
            synth_noise: 0.05,
        };
        load_dataset_with("gauss2d", Path::new("."), &opts).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            net: tiny_spec(),
            weights: WeightConfig {
                lambda: 1.0,
                gamma: 0.03,
                beta: 1.0,
                alpha: 10.0,
            },
            optimizer: OptimizerConfig {
                lr: 0.05,
                ..OptimizerConfig::default()
            },
            batch_labeled: 16,
            batch_unlabeled: 16,
            t_pre: 1,
            t_train: 3,
            early_stopping: EarlyStopping {
                metric: StopMetric::RobustAccuracy,
                patience: 5,
            },
            seed: 7,
            gan_mode: GanMode::Hinge,
            rae_attack: AttackSpec::pixel_pgd(0.1, 0.02, 3),
            eval_attack: AttackSpec::pixel_pgd(0.1, 0.02, 3),
            ..TrainConfig::default()
        }
    }

    fn draw_inputs(
        trainer: &Trainer,
        data: &DatasetSplit,
        streams: &mut FitStreams,
    ) -> (BatchPair, Array2<f64>, Array2<f64>) {
        let batch = sample_batch(
            data,
            (trainer.cfg.batch_labeled, trainer.cfg.batch_unlabeled),
            &mut streams.batch,
        )
        .unwrap();
        let z = sample_noise(trainer.cfg.batch_labeled, trainer.cfg.net.noise_dim, &mut streams.noise);
        let marginal = label_marginal(data).unwrap();
        let (y_g, _) = marginal.sample_one_hot(trainer.cfg.batch_labeled, &mut streams.label);
        (batch, z, y_g)
    }

    fn params_of(models: &ModelBundle) -> Vec<Array2<f64>> {
        let mut out = Vec::new();
        for p in models.c.params() {
            out.push(p.clone());
        }
        for p in models.g.params() {
            out.push(p.clone());
        }
        for p in models.d.params() {
            out.push(p.clone());
        }
        for p in models.a.params() {
            out.push(p.clone());
        }
        out
    }

    #[test]
    fn sgd_matches_the_plain_and_nesterov_recurrences() {
        // Plain gradient step: zero momentum, zero decay.
        let mut theta = array![[1.0, -2.0]];
        let grad = array![[0.5, 0.25]];
        let mut opt = Sgd::new(&[&theta], 0.0, 0.0, false);
        opt.step(0.1, vec![&mut theta], std::slice::from_ref(&grad));
        assert_abs_diff_eq!(theta[[0, 0]], 1.0 - 0.1 * 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(theta[[0, 1]], -2.0 - 0.1 * 0.25, epsilon = 1e-15);

        // Nesterov with weight decay against the scalar recurrence.
        let (mu, wd, lr) = (0.9, 0.01, 0.1);
        let mut theta = array![[2.0]];
        let mut opt = Sgd::new(&[&theta], mu, wd, true);
        let mut reference = 2.0f64;
        let mut v = 0.0f64;
        for k in 0..3 {
            let raw = 0.3 + 0.1 * k as f64;
            let g = raw + wd * reference;
            v = mu * v + g;
            reference -= lr * (g + mu * v);
            opt.step(lr, vec![&mut theta], &[array![[raw]]]);
            assert_abs_diff_eq!(theta[[0, 0]], reference, epsilon = 1e-15);
        }

        // Classical momentum (no lookahead) recurrence.
        let mut theta = array![[1.0]];
        let mut opt = Sgd::new(&[&theta], mu, 0.0, false);
        let mut reference = 1.0f64;
        let mut v = 0.0f64;
        for _ in 0..3 {
            v = mu * v + 0.2;
            reference -= lr * v;
            opt.step(lr, vec![&mut theta], &[array![[0.2]]]);
            assert_abs_diff_eq!(theta[[0, 0]], reference, epsilon = 1e-15);
        }
    }

    #[test]
    fn cosine_schedule_matches_the_closed_form() {
        let s = LrSchedule::CosineCyclic { cycles: 1 };
        let total = 100u64;
        assert_abs_diff_eq!(s.factor(0, total), 1.0, epsilon = 1e-15);
        // Midpoint, against the formula evaluated independently.
        let expected = 0.5 * (1.0 + (PI * 0.5).cos());
        assert_abs_diff_eq!(s.factor(50, total), expected, epsilon = 1e-15);
        // Near the end the factor approaches zero.
        assert!(s.factor(99, total) < 0.001);
        // Two cycles restart at the peak halfway through.
        let s2 = LrSchedule::CosineCyclic { cycles: 2 };
        assert_abs_diff_eq!(s2.factor(50, total), 1.0, epsilon = 1e-15);
        for step in 0..100 {
            let f = s2.factor(step, total);
            assert!((0.0..=1.0).contains(&f));
        }
        assert_abs_diff_eq!(LrSchedule::Constant.factor(42, total), 1.0);
        // Degenerate run length must not divide by zero.
        assert!(s.factor(0, 0).is_finite());
    }

    #[test]
    fn ema_decay_ramps_linearly_then_stays_flat() {
        let cfg = tiny_cfg();
        let trainer = Trainer::new(cfg, 3, 1000).unwrap();
        // Ramp spans 1% of 1000 steps = 10 steps.
        assert_abs_diff_eq!(trainer.ema_decay_at(0), 0.999 / 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(trainer.ema_decay_at(4), 0.999 * 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(trainer.ema_decay_at(9), 0.999, epsilon = 1e-12);
        assert_abs_diff_eq!(trainer.ema_decay_at(500), 0.999, epsilon = 1e-12);
        for s in 1..20 {
            assert!(trainer.ema_decay_at(s) >= trainer.ema_decay_at(s - 1) - 1e-15);
        }
    }

    #[test]
    fn teacher_follows_the_exact_ema_recurrence() {
        let data = tiny_data(1);
        let mut cfg = tiny_cfg();
        cfg.weights = WeightConfig {
            lambda: 0.0,
            gamma: 0.0,
            beta: 0.0,
            alpha: 10.0,
        };
        let mut trainer = Trainer::new(cfg, data.num_classes, 40).unwrap();
        let mut streams = FitStreams::new(3);
        let mut replay = trainer.models.c_teacher.clone();
        for _ in 0..5 {
            let decay = trainer.ema_decay_at(trainer.step);
            let (batch, z, y_g) = draw_inputs(&trainer, &data, &mut streams);
            trainer.train_step_with_lr(&batch, &z, &y_g, 0.05, 0.0025).unwrap();
            ema_update(&mut replay, &trainer.models.c, decay);
        }
        for (a, b) in replay.params().iter().zip(trainer.models.c_teacher.params()) {
            assert_eq!(*a, b, "teacher diverged from the offline EMA replay");
        }
    }

    #[test]
    fn pretraining_respects_its_contract() {
        let data = tiny_data(2);
        // Zero warm-up epochs change nothing and consume no randomness.
        let mut cfg = tiny_cfg();
        cfg.t_pre = 0;
        let mut trainer = Trainer::new(cfg, data.num_classes, 10).unwrap();
        let before = params_of(&trainer.models);
        let mut streams = FitStreams::new(5);
        let report = trainer.pretrain(&data, &mut streams).unwrap();
        assert!(report.is_empty());
        assert_eq!(params_of(&trainer.models), before);

        // With warm-up epochs the attacker still never moves, and the
        // natural loss drops from the first epoch to the last.
        let mut cfg = tiny_cfg();
        cfg.t_pre = 4;
        cfg.optimizer.schedule = LrSchedule::Constant;
        let mut trainer = Trainer::new(cfg, data.num_classes, 12).unwrap();
        let a_init: Vec<Array2<f64>> =
            trainer.models.a.params().iter().map(|p| (*p).clone()).collect();
        let mut streams = FitStreams::new(5);
        let report = trainer.pretrain(&data, &mut streams).unwrap();
        assert_eq!(report.len(), 4);
        assert!(
            report[3] < report[0],
            "natural loss failed to drop during warm-up: {report:?}"
        );
        for (init, now) in a_init.iter().zip(trainer.models.a.params()) {
            assert_eq!(init, now, "attacker moved during pretraining");
        }
        assert!(trainer.versions.c > 0 && trainer.versions.g > 0 && trainer.versions.d > 0);
        assert_eq!(trainer.versions.a, 0);
    }

    #[test]
    fn zero_learning_rates_freeze_every_network() {
        let data = tiny_data(3);
        let cfg = tiny_cfg();
        let mut trainer = Trainer::new(cfg, data.num_classes, 10).unwrap();
        let mut streams = FitStreams::new(11);
        let (batch, z, y_g) = draw_inputs(&trainer, &data, &mut streams);
        let before = params_of(&trainer.models);
        let teacher_before: Vec<Array2<f64>> = trainer
            .models
            .c_teacher
            .params()
            .iter()
            .map(|p| (*p).clone())
            .collect();
        let terms = trainer.train_step_with_lr(&batch, &z, &y_g, 0.0, 0.0).unwrap();
        assert!(terms.is_finite());
        assert_eq!(params_of(&trainer.models), before);
        // The teacher EMA writes the same values back (student == teacher at
        // initialization), up to floating-point re-rounding.
        for (a, b) in teacher_before.iter().zip(trainer.models.c_teacher.params()) {
            let diff = (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn vanishing_weights_reduce_to_supervised_consistency_training() {
        let data = tiny_data(4);
        let mut cfg = tiny_cfg();
        cfg.weights = WeightConfig {
            lambda: 0.0,
            gamma: 0.0,
            beta: 0.0,
            alpha: 10.0,
        };
        let mut trainer = Trainer::new(cfg.clone(), data.num_classes, 10).unwrap();
        let mut streams = FitStreams::new(9);
        let batch = sample_batch(&data, (16, 16), &mut streams.batch).unwrap();

        // Independent reference: one supervised+consistency step on a clone.
        let mut c_ref = trainer.models.c.clone();
        let mut teacher_ref = trainer.models.c_teacher.clone();
        let mut opt = Sgd::new(
            &c_ref.params(),
            cfg.optimizer.momentum,
            cfg.optimizer.weight_decay,
            cfg.optimizer.nesterov,
        );
        let teacher_probs = teacher_ref.classify(&batch.unlabeled_x);
        let mut g = Graph::new();
        let cv = c_ref.bind(&mut g, true);
        let flat = cv.flat();
        let nat = nat_loss_graph(
            &mut g,
            &c_ref,
            &cv,
            &batch.labeled_x,
            &batch.labeled_y,
            &batch.unlabeled_x,
            &teacher_probs,
            10.0,
        );
        g.backward(nat);
        let grads = collect_grads(&g, &flat);
        let decay = trainer.ema_decay_at(0);
        opt.step(0.05, c_ref.params_mut(), &grads);
        ema_update(&mut teacher_ref, &c_ref, decay);

        let empty_z = Array2::zeros((0, 3));
        let empty_y = Array2::zeros((0, data.num_classes));
        let before = trainer.versions;
        trainer
            .train_step_with_lr(&batch, &empty_z, &empty_y, 0.05, 0.0025)
            .unwrap();
        assert_eq!(trainer.versions.d, before.d);
        assert_eq!(trainer.versions.a, before.a);
        assert_eq!(trainer.versions.g, before.g);
        assert_eq!(trainer.versions.c, before.c + 1);

        for (a, b) in c_ref.params().iter().zip(trainer.models.c.params()) {
            assert_eq!(*a, b, "classifier step deviates from the supervised reference");
        }
        for (a, b) in teacher_ref.params().iter().zip(trainer.models.c_teacher.params()) {
            assert_eq!(*a, b, "teacher step deviates from the supervised reference");
        }
    }

    #[test]
    fn each_update_moves_its_own_objective_the_right_way() {
        let data = tiny_data(5);
        let mut cfg = tiny_cfg();
        cfg.gan_mode = GanMode::Linear;
        let mut trainer = Trainer::new(cfg, data.num_classes, 10).unwrap();
        trainer.models.d.spectral_normalize(30);
        let mut streams = FitStreams::new(13);
        let (batch, z, y_g) = draw_inputs(&trainer, &data, &mut streams);
        let lr = 1e-4;

        // Discriminator: its two-game objective must not decrease.
        let x_fake_g = trainer.generated_values(&z, &y_g);
        let y_soft = trainer.models.c.classify(&batch.unlabeled_x);
        let d_value = |t: &Trainer| {
            let mut g = Graph::new();
            let dv = t.models.d.bind(&mut g, false);
            let v = crate::losses::d_update_objective_graph(
                &mut g,
                &t.models.d,
                &dv,
                &batch.labeled_x,
                &batch.labeled_y,
                &x_fake_g,
                &y_g,
                &batch.unlabeled_x,
                &y_soft,
                GanMode::Linear,
            );
            g.value(v)[[0, 0]]
        };
        let before = d_value(&trainer);
        trainer
            .update_d(
                &batch.labeled_x,
                &batch.labeled_y,
                (&x_fake_g, &y_g),
                Some((&batch.unlabeled_x, &y_soft)),
                lr,
            )
            .unwrap();
        assert!(
            d_value(&trainer) >= before - 1e-8,
            "discriminator ascent lowered its objective"
        );

        // Attacker: adversarial cross-entropy must not decrease.
        let adv_value = |t: &Trainer| {
            let mut g = Graph::new();
            let parts = uae_graph(
                &mut g,
                &t.models.g,
                false,
                &t.models.a,
                false,
                &z,
                &y_g,
                Stats::Batch,
            )
            .unwrap();
            let cv = t.models.c.bind(&mut g, false);
            let y = g.constant(y_g.clone());
            let v = adv_loss_graph(&mut g, &t.models.c, &cv, parts.x_tilde, y);
            g.value(v)[[0, 0]]
        };
        let before = adv_value(&trainer);
        trainer.update_a(&z, &y_g, lr).unwrap();
        assert!(
            adv_value(&trainer) >= before - 1e-8,
            "attacker ascent lowered the adversarial loss"
        );

        // Classifier: with only the natural term active, a small step must
        // not increase it (teacher frozen at its pre-step state).
        let teacher_frozen = trainer.models.c_teacher.clone();
        let nat_only = WeightConfig {
            lambda: 0.0,
            gamma: 0.0,
            beta: 0.0,
            alpha: 10.0,
        };
        let before = loss_nat(
            &trainer.models.c,
            &teacher_frozen,
            &batch.labeled_x,
            &batch.labeled_y,
            &batch.unlabeled_x,
            10.0,
        )
        .unwrap();
        trainer
            .update_c(&batch, None, &Array2::zeros((0, 0)), &nat_only, lr)
            .unwrap();
        let after = loss_nat(
            &trainer.models.c,
            &teacher_frozen,
            &batch.labeled_x,
            &batch.labeled_y,
            &batch.unlabeled_x,
            10.0,
        )
        .unwrap();
        assert!(after <= before + 1e-8, "classifier descent raised its loss");

        // Generator: its game term must not increase (batch statistics via
        // the same frozen forward used during the update).
        let g_value = |t: &Trainer| {
            let mut g = Graph::new();
            let gv = t.models.g.bind(&mut g, false);
            let dv = t.models.d.bind(&mut g, false);
            let zv = g.constant(z.clone());
            let yv = g.constant(y_g.clone());
            let (x_fake, _) = t.models.g.forward_graph(&mut g, &gv, zv, yv, Stats::Batch);
            let v = d_fake_term_graph(&mut g, &t.models.d, &dv, x_fake, yv, GanMode::Linear);
            g.value(v)[[0, 0]]
        };
        let before = g_value(&trainer);
        trainer.update_g(&z, &y_g, lr).unwrap();
        assert!(
            g_value(&trainer) <= before + 1e-8,
            "generator descent raised its objective"
        );
    }

    #[test]
    fn one_default_step_touches_all_four_networks_once() {
        let data = tiny_data(6);
        let cfg = tiny_cfg();
        let mut trainer = Trainer::new(cfg, data.num_classes, 10).unwrap();
        let mut streams = FitStreams::new(17);
        let (batch, z, y_g) = draw_inputs(&trainer, &data, &mut streams);
        let before = params_of(&trainer.models);
        let c_n = trainer.models.c.params().len();
        let g_n = trainer.models.g.params().len();
        let d_n = trainer.models.d.params().len();
        let terms = trainer.train_step(&batch, &z, &y_g).unwrap();
        assert!(terms.is_finite());
        assert_eq!(
            trainer.versions,
            ParamVersions {
                d: 1,
                a: 1,
                c: 1,
                teacher: 1,
                g: 1
            }
        );
        let after = params_of(&trainer.models);
        let delta = |range: std::ops::Range<usize>| {
            range
                .map(|i| (&before[i] - &after[i]).iter().fold(0.0f64, |m, v| m.max(v.abs())))
                .fold(0.0f64, f64::max)
        };
        assert!(delta(0..c_n) > 0.0, "classifier did not move");
        assert!(delta(c_n..c_n + g_n) > 0.0, "generator did not move");
        assert!(delta(c_n + g_n..c_n + g_n + d_n) > 0.0, "discriminator did not move");
        assert!(delta(c_n + g_n + d_n..after.len()) > 0.0, "attacker did not move");
    }

    #[test]
    fn non_finite_inputs_abort_the_step_with_a_stage_label() {
        let data = tiny_data(7);
        let cfg = tiny_cfg();
        let mut trainer = Trainer::new(cfg, data.num_classes, 10).unwrap();
        let mut streams = FitStreams::new(19);
        let (mut batch, z, y_g) = draw_inputs(&trainer, &data, &mut streams);
        batch.labeled_x[[0, 0]] = f64::NAN;
        match trainer.train_step(&batch, &z, &y_g) {
            Err(TrainError::NonFinite { stage, .. }) => {
                assert_eq!(stage, "input batch");
            }
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
        // Blown-up parameters are caught the same way before any graph runs.
        let (batch, z, y_g) = draw_inputs(&trainer, &data, &mut streams);
        trainer.models.c.stem.w[[0, 0]] = f64::INFINITY;
        match trainer.train_step(&batch, &z, &y_g) {
            Err(TrainError::NonFinite { stage, .. }) => {
                assert_eq!(stage, "model parameters");
            }
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn fit_produces_a_consistent_report_and_artifacts() {
        let data = tiny_data(8);
        let dir = tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.output_dir = Some(dir.path().to_path_buf());
        let outcome = fit(&cfg, &data).unwrap();
        let report = &outcome.report;
        assert_eq!(report.pretrain_nat.len(), cfg.t_pre);
        assert!(report.stop_epoch <= cfg.t_train);
        assert_eq!(report.epochs.len(), report.stop_epoch);
        for (i, r) in report.epochs.iter().enumerate() {
            assert_eq!(r.epoch, i);
            assert!(r.terms.is_finite());
            assert!((0.0..=1.0).contains(&r.val_nat_acc));
            assert!((0.0..=1.0).contains(&r.val_rob_acc));
        }
        let best = report.best_epoch.unwrap();
        let best_metric = report.epochs[best].val_rob_acc;
        assert_abs_diff_eq!(report.best_metric, best_metric);
        for r in &report.epochs {
            assert!(r.val_rob_acc <= best_metric + 1e-15);
        }
        assert!(report.wall_seconds > 0.0);

        // Artifacts: metrics CSV plus both checkpoints.
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), METRICS_CSV_HEADER);
        assert_eq!(lines.count(), report.epochs.len());
        let best_ck = load_checkpoint(&dir.path().join("best.json")).unwrap();
        assert_eq!(best_ck.epoch, best);
        let last_ck = load_checkpoint(&dir.path().join("last.json")).unwrap();
        assert_eq!(last_ck.epoch, report.epochs.last().unwrap().epoch);

        // The returned models are the best checkpoint's models.
        let returned = outcome.models.c.classify(&data.validation_x);
        let reloaded = best_ck.models.c.classify(&data.validation_x);
        assert_eq!(returned, reloaded);
    }

    #[test]
    fn identical_seeds_give_identical_runs_and_files() {
        let data = tiny_data(9);
        let run = |dir: &Path| {
            let mut cfg = tiny_cfg();
            cfg.t_pre = 0;
            cfg.t_train = 2;
            cfg.output_dir = Some(dir.to_path_buf());
            fit(&cfg, &data).unwrap()
        };
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        let r1 = run(d1.path());
        let r2 = run(d2.path());
        assert_eq!(r1.report.epochs.len(), r2.report.epochs.len());
        for (a, b) in r1.report.epochs.iter().zip(&r2.report.epochs) {
            assert_eq!(a.terms, b.terms);
            assert_eq!(a.val_nat_acc, b.val_nat_acc);
            assert_eq!(a.val_rob_acc, b.val_rob_acc);
        }
        for name in ["metrics.csv", "best.json", "last.json"] {
            let b1 = std::fs::read(d1.path().join(name)).unwrap();
            let b2 = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(b1, b2, "{name} differs between identical runs");
        }
    }

    #[test]
    fn early_stopping_respects_patience() {
        let data = tiny_data(10);
        let mut cfg = tiny_cfg();
        // Freeze learning so the metric never improves after the first epoch.
        cfg.weights = WeightConfig {
            lambda: 0.0,
            gamma: 0.0,
            beta: 0.0,
            alpha: 0.0,
        };
        cfg.optimizer.lr = 1e-12;
        cfg.t_pre = 0;
        cfg.t_train = 10;
        cfg.early_stopping.patience = 1;
        cfg.eval_attack = AttackSpec::pixel_pgd(0.0, 1.0, 0);
        let outcome = fit(&cfg, &data).unwrap();
        assert_eq!(outcome.report.epochs.len(), 2, "one post-best epoch then stop");
        assert_eq!(outcome.report.best_epoch, Some(0));
    }

    #[test]
    fn checkpoints_round_trip_and_reject_unknown_versions() {
        let cfg = tiny_cfg();
        let trainer = Trainer::new(cfg, 3, 10).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let ck = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            seed: 7,
            epoch: 2,
            metric: 0.5,
            models: trainer.models.clone(),
        };
        save_checkpoint(&path, &ck).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.epoch, 2);
        let x = Array2::from_elem((4, 2), 0.3);
        assert_eq!(trainer.models.c.classify(&x), loaded.models.c.classify(&x));

        let mut doctored = ck;
        doctored.format_version = 99;
        save_checkpoint(&path, &doctored).unwrap();
        match load_checkpoint(&path) {
            Err(TrainError::CheckpointVersion(99)) => {}
            other => panic!("expected a version error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        let mut cfg = tiny_cfg();
        cfg.optimizer.lr = 0.0;
        assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig(_))));
        let mut cfg = tiny_cfg();
        cfg.early_stopping.patience = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.ema_decay = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.rae_attack = AttackSpec::latent_pgd(0.1, 0.1, 5);
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.batch_unlabeled = 0;
        assert!(cfg.validate().is_err(), "active consistency needs unlabeled data");
        assert!(tiny_cfg().validate().is_ok());
    }

    #[test]
    fn gan_loss_values_are_reported_from_the_discriminator_pass() {
        let data = tiny_data(11);
        let mut cfg = tiny_cfg();
        cfg.gan_mode = GanMode::Linear;
        let mut trainer = Trainer::new(cfg, data.num_classes, 10).unwrap();
        let mut streams = FitStreams::new(23);
        let (batch, z, y_g) = draw_inputs(&trainer, &data, &mut streams);
        // Reference values computed with the pre-step models on identical
        // inputs via the value-level loss functions.
        let expected_l_g = {
            // The step's fake batch comes from a batch-statistics forward,
            // which differs from the running-statistics decode; compare the
            // discriminator's real-pair term instead, which has no such
            // dependency, and check l_g is finite and mode-consistent.
            loss_g(&trainer.models.d, &trainer.models.g, &z, &y_g, GanMode::Linear).unwrap()
        };
        let expected_l_d =
            crate::losses::loss_d(&trainer.models.d, &batch.labeled_x, &batch.labeled_y, GanMode::Linear)
                .unwrap();
        let expected_l_cgan = crate::losses::loss_c_gan(
            &trainer.models.d,
            &trainer.models.c,
            &batch.unlabeled_x,
            GanMode::Linear,
        )
        .unwrap();
        let terms = trainer.train_step(&batch, &z, &y_g).unwrap();
        assert_abs_diff_eq!(terms.l_d, expected_l_d, epsilon = 1e-12);
        assert_abs_diff_eq!(terms.l_c_gan, expected_l_cgan, epsilon = 1e-12);
        assert!(terms.l_g.is_finite() && expected_l_g.is_finite());
        assert_abs_diff_eq!(
            terms.l_gan_total,
            terms.l_d + 0.5 * terms.l_g + 0.5 * terms.l_c_gan,
            epsilon = 1e-15
        );
    }
}
