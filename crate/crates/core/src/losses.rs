//! Every scalar objective in the four-network game, in two GAN flavors.
//!
//! The *linear* mode scores real pairs with `mean D` and fakes with
//! `mean −D`; summed with the canonical ½-weights it is exactly the quantity
//! whose tabular optimum equals twice the total variation between the data
//! distribution and the generator/classifier mixture (see the theory
//! module). The *hinge* mode replaces the discriminator's own terms with
//! their saturating hinge counterparts for training stability; generator and
//! classifier updates keep the linear (non-saturating) form in both modes,
//! as is standard for hinge GANs.
//!
//! Value-level functions build a private graph and return plain numbers for
//! reporting and tests. The `*_graph` builders return differentiable nodes
//! and are what the trainer wires into its four per-step updates. Gradient
//! routing follows the alternating scheme: the seed attacker and the
//! classifier both receive gradient from the adversarial term, the generator
//! does not; the pixel-attacked inputs of the robustness term enter as
//! constants so the inner maximization never leaks gradient.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{pgd_attack, AttackError, AttackSpec};
use crate::nets::{Classifier, ClassifierVars, Discriminator, DiscriminatorVars};
use crate::tensor::{Graph, Var};
use crate::uae::{UaeBatch, UaeError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("empty {0} batch")]
    EmptyBatch(&'static str),
    #[error("invalid weight {name} = {value}; weights must be finite and ≥ 0")]
    BadWeight { name: &'static str, value: f64 },
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Uae(#[from] UaeError),
}

/// Which functional form the discriminator's own objective uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GanMode {
    /// Literal mean-score form; tabular optimum is a total-variation
    /// distance, which the theory checks rely on.
    Linear,
    /// Saturating hinge form for the discriminator update (training
    /// default). Generator/classifier GAN terms stay linear.
    Hinge,
}

/// Scalar weights of the combined objective: `lambda` on the adversarial
/// term, `gamma` on the GAN term, `beta` on the pixel-robustness term, and
/// `alpha` on the teacher-consistency term inside the natural loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub beta: f64,
    pub alpha: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            gamma: 0.03,
            beta: 6.0,
            alpha: 50.0,
        }
    }
}

impl WeightConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in [
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("alpha", self.alpha),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(LossError::BadWeight { name, value });
            }
        }
        Ok(())
    }
}

/// One step's scalar loss values. `l_gan_total` and `total` are always the
/// exact affine combinations of the other fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_d: f64,
    pub l_g: f64,
    pub l_c_gan: f64,
    pub l_gan_total: f64,
    pub l_nat: f64,
    pub l_adv: f64,
    pub l_r: f64,
    pub total: f64,
}

impl LossTerms {
    /// Assembles the two derived fields from the six primitive terms.
    pub fn assemble(
        l_d: f64,
        l_g: f64,
        l_c_gan: f64,
        l_nat: f64,
        l_adv: f64,
        l_r: f64,
        w: &WeightConfig,
    ) -> Self {
        let l_gan_total = loss_gan_total(l_d, l_g, l_c_gan);
        Self {
            l_d,
            l_g,
            l_c_gan,
            l_gan_total,
            l_nat,
            l_adv,
            l_r,
            total: l_nat + w.lambda * l_adv + w.gamma * l_gan_total + w.beta * l_r,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_d,
            self.l_g,
            self.l_c_gan,
            self.l_gan_total,
            self.l_nat,
            self.l_adv,
            self.l_r,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Column names for the metrics log, in field order.
    pub const CSV_HEADER: &'static str = "l_d,l_g,l_c_gan,l_gan_total,l_nat,l_adv,l_r,total";

    /// Comma-separated values matching [`Self::CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.l_d,
            self.l_g,
            self.l_c_gan,
            self.l_gan_total,
            self.l_nat,
            self.l_adv,
            self.l_r,
            self.total
        )
    }
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v)[[0, 0]]
}

// ---------------------------------------------------------------------------
// Graph builders (shared by the value-level API and the trainer)
// ---------------------------------------------------------------------------

/// Real-pair discriminator term. Linear: `mean D(x, y)`. Hinge:
/// `−mean relu(1 − D(x, y))` — the form the discriminator ascends.
pub fn d_real_term_graph(
    g: &mut Graph,
    d: &Discriminator,
    dv: &DiscriminatorVars,
    x: Var,
    y: Var,
    mode: GanMode,
) -> Var {
    let score = d.score_graph(g, dv, x, y);
    match mode {
        GanMode::Linear => g.mean_all(score),
        GanMode::Hinge => {
            let neg = g.scale(score, -1.0);
            let margin = g.add_scalar(neg, 1.0);
            let hinge = g.relu(margin);
            let mean = g.mean_all(hinge);
            g.scale(mean, -1.0)
        }
    }
}

/// Fake-pair discriminator term. Linear: `mean −D(x, y)`. Hinge:
/// `−mean relu(1 + D(x, y))`.
pub fn d_fake_term_graph(
    g: &mut Graph,
    d: &Discriminator,
    dv: &DiscriminatorVars,
    x: Var,
    y: Var,
    mode: GanMode,
) -> Var {
    let score = d.score_graph(g, dv, x, y);
    match mode {
        GanMode::Linear => {
            let mean = g.mean_all(score);
            g.scale(mean, -1.0)
        }
        GanMode::Hinge => {
            let margin = g.add_scalar(score, 1.0);
            let hinge = g.relu(margin);
            let mean = g.mean_all(hinge);
            g.scale(mean, -1.0)
        }
    }
}

/// The discriminator's full ascent objective for one step:
/// `2·L_D + L_G + L_Cgan`, i.e. the sum of its two pairwise games, with the
/// real term counted once per game. All inputs are values (the other
/// networks' outputs enter as constants).
#[allow(clippy::too_many_arguments)]
pub fn d_update_objective_graph(
    g: &mut Graph,
    d: &Discriminator,
    dv: &DiscriminatorVars,
    x_l: &Array2<f64>,
    y_l: &Array2<f64>,
    x_fake_g: &Array2<f64>,
    y_fake_g: &Array2<f64>,
    x_fake_c: &Array2<f64>,
    y_fake_c: &Array2<f64>,
    mode: GanMode,
) -> Var {
    let xl = g.constant(x_l.clone());
    let yl = g.constant(y_l.clone());
    let xg = g.constant(x_fake_g.clone());
    let yg = g.constant(y_fake_g.clone());
    let xc = g.constant(x_fake_c.clone());
    let yc = g.constant(y_fake_c.clone());
    let real = d_real_term_graph(g, d, dv, xl, yl, mode);
    let fake_g = d_fake_term_graph(g, d, dv, xg, yg, mode);
    let fake_c = d_fake_term_graph(g, d, dv, xc, yc, mode);
    let real2 = g.scale(real, 2.0);
    let partial = g.add(real2, fake_g);
    g.add(partial, fake_c)
}

/// Natural-training loss: cross-entropy on the labeled batch plus
/// `alpha ×` the batch-mean squared distance between the classifier's and
/// the teacher's probability vectors on the unlabeled batch. The teacher
/// probabilities enter as constants (no gradient to the teacher).
#[allow(clippy::too_many_arguments)]
pub fn nat_loss_graph(
    g: &mut Graph,
    c: &Classifier,
    cv: &ClassifierVars,
    x_l: &Array2<f64>,
    y_l: &Array2<f64>,
    x_c: &Array2<f64>,
    teacher_probs: &Array2<f64>,
    alpha: f64,
) -> Var {
    let xl = g.constant(x_l.clone());
    let yl = g.constant(y_l.clone());
    let logits = c.logits_graph(g, cv, xl);
    let ce = g.cross_entropy(logits, yl);
    if alpha == 0.0 {
        return ce;
    }
    let rows = x_c.nrows();
    let xc = g.constant(x_c.clone());
    let tp = g.constant(teacher_probs.clone());
    let student_logits = c.logits_graph(g, cv, xc);
    let student_probs = g.softmax(student_logits);
    let diff = g.sub(student_probs, tp);
    let sq = g.square(diff);
    let sum = g.sum_all(sq);
    // Batch-mean of per-row squared distances.
    let consistency = g.scale(sum, 1.0 / rows as f64);
    let weighted = g.scale(consistency, alpha);
    g.add(ce, weighted)
}

/// Adversarial cross-entropy on an attacked-example node already present in
/// the graph (typically `x_tilde` from the differentiable attack chain).
pub fn adv_loss_graph(
    g: &mut Graph,
    c: &Classifier,
    cv: &ClassifierVars,
    x_tilde: Var,
    y: Var,
) -> Var {
    let logits = c.logits_graph(g, cv, x_tilde);
    g.cross_entropy(logits, y)
}

/// The classifier-side GAN term `mean −D(x_c, softmax C(x_c))`, linear in
/// both modes (non-saturating update form). The discriminator is in-graph
/// so gradient reaches the classifier through the scores, but `dv` should be
/// bound non-trainable for classifier updates.
pub fn c_gan_term_graph(
    g: &mut Graph,
    d: &Discriminator,
    dv: &DiscriminatorVars,
    c: &Classifier,
    cv: &ClassifierVars,
    x_c: &Array2<f64>,
) -> Var {
    let xc = g.constant(x_c.clone());
    let logits = c.logits_graph(g, cv, xc);
    let soft = g.softmax(logits);
    let score = d.score_graph(g, dv, xc, soft);
    let mean = g.mean_all(score);
    g.scale(mean, -1.0)
}

/// Cross-entropy on pixel-attacked inputs entering as constants: the inner
/// maximization contributes only its attacked values, never gradient.
pub fn rae_loss_graph(
    g: &mut Graph,
    c: &Classifier,
    cv: &ClassifierVars,
    x_attacked: &Array2<f64>,
    y_l: &Array2<f64>,
) -> Var {
    let xa = g.constant(x_attacked.clone());
    let yl = g.constant(y_l.clone());
    let logits = c.logits_graph(g, cv, xa);
    g.cross_entropy(logits, yl)
}

// ---------------------------------------------------------------------------
// Value-level API
// ---------------------------------------------------------------------------

/// Mean discriminator score on real labeled pairs (or its hinge form).
pub fn loss_d(
    d: &Discriminator,
    x_l: &Array2<f64>,
    y_l: &Array2<f64>,
    mode: GanMode,
) -> Result<f64, LossError> {
    if x_l.nrows() == 0 {
        return Err(LossError::EmptyBatch("labeled"));
    }
    let mut g = Graph::new();
    let dv = d.bind(&mut g, false);
    let x = g.constant(x_l.clone());
    let y = g.constant(y_l.clone());
    let v = d_real_term_graph(&mut g, d, &dv, x, y, mode);
    Ok(scalar(&g, v))
}

/// Mean negated score on generated pairs `(G(z, y), y)` (or its hinge form).
/// One noise row per label row.
pub fn loss_g(
    d: &Discriminator,
    gen: &crate::nets::Generator,
    z: &Array2<f64>,
    y: &Array2<f64>,
    mode: GanMode,
) -> Result<f64, LossError> {
    if z.nrows() == 0 {
        return Err(LossError::EmptyBatch("noise"));
    }
    if z.nrows() != y.nrows() {
        return Err(UaeError::RowMismatch {
            z_rows: z.nrows(),
            y_rows: y.nrows(),
        }
        .into());
    }
    let x_fake = gen.decode(z, y);
    let mut g = Graph::new();
    let dv = d.bind(&mut g, false);
    let x = g.constant(x_fake);
    let yv = g.constant(y.clone());
    let v = d_fake_term_graph(&mut g, d, &dv, x, yv, mode);
    Ok(scalar(&g, v))
}

/// Mean negated score on classifier-labeled unlabeled pairs
/// `(x_c, softmax C(x_c))` (or its hinge form). Labels are soft.
pub fn loss_c_gan(
    d: &Discriminator,
    c: &Classifier,
    x_c: &Array2<f64>,
    mode: GanMode,
) -> Result<f64, LossError> {
    if x_c.nrows() == 0 {
        return Err(LossError::EmptyBatch("unlabeled"));
    }
    let soft = c.classify(x_c);
    let mut g = Graph::new();
    let dv = d.bind(&mut g, false);
    let x = g.constant(x_c.clone());
    let y = g.constant(soft);
    let v = d_fake_term_graph(&mut g, d, &dv, x, y, mode);
    Ok(scalar(&g, v))
}

/// The canonical combination `L_D + ½·L_G + ½·L_Cgan`. All three inputs must
/// come from the same mode; computing them through [`compute_loss_terms`]
/// makes a mode mismatch impossible by construction.
pub fn loss_gan_total(l_d: f64, l_g: f64, l_c_gan: f64) -> f64 {
    l_d + 0.5 * l_g + 0.5 * l_c_gan
}

/// Cross-entropy on labeled data plus the weighted teacher-consistency
/// penalty on unlabeled data. The unlabeled batch may be empty only when
/// `alpha = 0`.
pub fn loss_nat(
    c: &Classifier,
    c_teacher: &Classifier,
    x_l: &Array2<f64>,
    y_l: &Array2<f64>,
    x_c: &Array2<f64>,
    alpha: f64,
) -> Result<f64, LossError> {
    if x_l.nrows() == 0 {
        return Err(LossError::EmptyBatch("labeled"));
    }
    if alpha != 0.0 && x_c.nrows() == 0 {
        return Err(LossError::EmptyBatch("unlabeled"));
    }
    let teacher_probs = if alpha == 0.0 {
        Array2::zeros((0, c.num_classes))
    } else {
        c_teacher.classify(x_c)
    };
    let mut g = Graph::new();
    let cv = c.bind(&mut g, false);
    let v = nat_loss_graph(&mut g, c, &cv, x_l, y_l, x_c, &teacher_probs, alpha);
    Ok(scalar(&g, v))
}

/// Mean `−log P_C(y | x̃)` over an attacked batch.
pub fn loss_adv(c: &Classifier, batch: &UaeBatch) -> Result<f64, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch("attacked"));
    }
    let mut g = Graph::new();
    let cv = c.bind(&mut g, false);
    let xt = g.constant(batch.x_tilde.clone());
    let y = g.constant(batch.labels.clone());
    let v = adv_loss_graph(&mut g, c, &cv, xt, y);
    Ok(scalar(&g, v))
}

/// Mean cross-entropy on pixel-attacked labeled inputs: runs the projected
/// ascent first, then scores the attacked batch.
pub fn loss_rae(
    c: &Classifier,
    x_l: &Array2<f64>,
    y_l: &Array2<f64>,
    attack: &AttackSpec,
) -> Result<f64, LossError> {
    if x_l.nrows() == 0 {
        return Err(LossError::EmptyBatch("labeled"));
    }
    let x_hat = pgd_attack(c, x_l, y_l, attack)?;
    let mut g = Graph::new();
    let cv = c.bind(&mut g, false);
    let v = rae_loss_graph(&mut g, c, &cv, &x_hat, y_l);
    Ok(scalar(&g, v))
}

/// `L_nat + λ·L_adv + γ·L_gan_total + β·L_r`, exactly.
pub fn total_objective(terms: &LossTerms, w: &WeightConfig) -> f64 {
    terms.l_nat + w.lambda * terms.l_adv + w.gamma * terms.l_gan_total + w.beta * terms.l_r
}

/// Evaluates every term once with a single mode and weight set, for
/// reporting. Zero-weight optional inputs may be omitted; their terms are
/// reported as 0.
#[allow(clippy::too_many_arguments)]
pub fn compute_loss_terms(
    models: &crate::nets::ModelBundle,
    x_l: &Array2<f64>,
    y_l: &Array2<f64>,
    x_c: &Array2<f64>,
    z: &Array2<f64>,
    y_g: &Array2<f64>,
    uae: Option<&UaeBatch>,
    rae_attack: Option<&AttackSpec>,
    w: &WeightConfig,
    mode: GanMode,
) -> Result<LossTerms, LossError> {
    w.validate()?;
    let l_d = loss_d(&models.d, x_l, y_l, mode)?;
    let l_g = loss_g(&models.d, &models.g, z, y_g, mode)?;
    let l_c_gan = loss_c_gan(&models.d, &models.c, x_c, mode)?;
    let l_nat = loss_nat(&models.c, &models.c_teacher, x_l, y_l, x_c, w.alpha)?;
    let l_adv = match uae {
        Some(batch) => loss_adv(&models.c, batch)?,
        None => 0.0,
    };
    let l_r = match rae_attack {
        Some(spec) => loss_rae(&models.c, x_l, y_l, spec)?,
        None => 0.0,
    };
    Ok(LossTerms::assemble(l_d, l_g, l_c_gan, l_nat, l_adv, l_r, w))
}
