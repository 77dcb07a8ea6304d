//! Exact brute-force checks of the distribution-alignment guarantees on
//! finite discrete instances.
//!
//! The training stack elsewhere in this crate optimizes neural networks; none
//! of its guarantees are decidable there. This module re-states each guarantee
//! on tabular objects — joint distributions over a small `(x-index, y-index)`
//! grid, loss tables, and neighborhood maps — where every quantity can be
//! computed exactly:
//!
//! * the optimal conditional discriminator has the closed form
//!   `D*(x,y) = sign(P − P_GC)` with `P_GC = (P_G + P_C)/2`, and plugging it
//!   into the linear adversarial value yields exactly `2·TV(P, P_GC)`;
//! * the unrestricted adversary (an arbitrary budget-respecting transport map
//!   `T(x,y) ↦ x̂` with `x̂` in the neighborhood of `x`) attains exactly the
//!   same optimum as the pointwise restricted adversary
//!   `E max_{x̂∈nbhd(x)} l(x̂, y)` — verified here by enumerating *all* maps;
//! * the finite-sample bounds `B`, the natural-generalization bound, and the
//!   adversarial-generalization bound are evaluated from their closed
//!   formulas, and Monte-Carlo sweeps confirm that their failure probability
//!   is consistent with the advertised `δ`.
//!
//! All logarithms are natural. All operations are pure; nothing here touches
//! the neural-network stack.

use ndarray::Array2;
use rand::Rng;
use thiserror::Error;

pub mod suite;
pub use suite::{run_verification, CheckOutcome, SuiteConfig, VerificationReport};

/// Probability-mass tolerance: a joint table must sum to 1 within this.
pub const MASS_TOL: f64 = 1e-12;

/// Brute-force enumeration cap for the unrestricted adversary.
pub const MAX_BRUTEFORCE_MAPPINGS: u128 = 1 << 24;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("support mismatch: left is {left_nx}x{left_ny}, right is {right_nx}x{right_ny}")]
    SupportMismatch {
        left_nx: usize,
        left_ny: usize,
        right_nx: usize,
        right_ny: usize,
    },
    #[error("probabilities sum to {sum}, expected 1 within {MASS_TOL}")]
    NotNormalized { sum: f64 },
    #[error("negative probability {value} at cell ({x}, {y})")]
    NegativeProb { x: usize, y: usize, value: f64 },
    #[error("absolute continuity violated: P({x},{y}) = {p} > 0 but Q({x},{y}) = 0")]
    AbsoluteContinuity { x: usize, y: usize, p: f64 },
    #[error("empty neighborhood for x-index {x}")]
    EmptyNeighborhood { x: usize },
    #[error("x-index {x} is missing from its own neighborhood")]
    SelfMissing { x: usize },
    #[error("neighborhood of x-index {x} references out-of-range index {j} (nx = {nx})")]
    NeighborOutOfRange { x: usize, j: usize, nx: usize },
    #[error("instance too large to enumerate: {mappings} transport maps exceeds cap {MAX_BRUTEFORCE_MAPPINGS}")]
    InstanceTooLarge { mappings: u128 },
    #[error("loss table entry at ({x}, {y}) is {value}; entries must be finite and nonnegative")]
    BadLossEntry { x: usize, y: usize, value: f64 },
    #[error("negative radicand {value} in bound formula")]
    NegativeRadicand { value: f64 },
    #[error("invalid bound inputs: {reason}")]
    InvalidInputs { reason: String },
}

pub type Result<T> = std::result::Result<T, TheoryError>;

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// A joint distribution over a finite `(x-index, y-index)` grid.
///
/// Rows index `x`, columns index `y`. Entries are nonnegative and sum to 1
/// within [`MASS_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    probs: Array2<f64>,
}

impl DiscreteJoint {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        for ((x, y), &v) in probs.indexed_iter() {
            if v.is_nan() || v < 0.0 || !v.is_finite() {
                return Err(TheoryError::NegativeProb { x, y, value: v });
            }
        }
        let sum = probs.sum();
        if (sum - 1.0).abs() > MASS_TOL {
            return Err(TheoryError::NotNormalized { sum });
        }
        Ok(Self { probs })
    }

    /// Normalizes an arbitrary nonnegative table into a joint distribution.
    pub fn from_weights(weights: Array2<f64>) -> Result<Self> {
        let sum = weights.sum();
        if sum.is_nan() || sum <= 0.0 {
            return Err(TheoryError::NotNormalized { sum });
        }
        Self::new(weights / sum)
    }

    /// Uniform distribution over the grid.
    pub fn uniform(nx: usize, ny: usize) -> Self {
        let v = 1.0 / (nx * ny) as f64;
        Self {
            probs: Array2::from_elem((nx, ny), v),
        }
    }

    /// Random joint with full support (every cell strictly positive).
    pub fn random<R: Rng>(nx: usize, ny: usize, rng: &mut R) -> Self {
        let mut w = Array2::zeros((nx, ny));
        for v in w.iter_mut() {
            // Bound cell weights away from zero so log-ratios stay finite.
            *v = 0.05 + rng.gen::<f64>();
        }
        Self::from_weights(w).expect("positive weights always normalize")
    }

    pub fn nx(&self) -> usize {
        self.probs.nrows()
    }

    pub fn ny(&self) -> usize {
        self.probs.ncols()
    }

    pub fn prob(&self, x: usize, y: usize) -> f64 {
        self.probs[(x, y)]
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    /// Marginal distribution over x-indices.
    pub fn x_marginal(&self) -> Vec<f64> {
        (0..self.nx()).map(|x| self.probs.row(x).sum()).collect()
    }

    /// Pointwise mixture `(P_G + P_C)/2`.
    pub fn mixture(p_g: &Self, p_c: &Self) -> Result<Self> {
        check_same_support(p_g, p_c)?;
        Ok(Self {
            probs: (&p_g.probs + &p_c.probs) * 0.5,
        })
    }

    /// Joint `P(x)·K(y|x)` from an x-marginal and a row-stochastic conditional.
    pub fn from_conditional(x_marginal: &[f64], cond: &CondTable) -> Result<Self> {
        if x_marginal.len() != cond.nx() {
            return Err(TheoryError::InvalidInputs {
                reason: format!(
                    "marginal has {} x-indices, conditional has {}",
                    x_marginal.len(),
                    cond.nx()
                ),
            });
        }
        let mut probs = Array2::zeros((cond.nx(), cond.ny()));
        for x in 0..cond.nx() {
            for y in 0..cond.ny() {
                probs[(x, y)] = x_marginal[x] * cond.prob(x, y);
            }
        }
        Self::new(probs)
    }

    /// Draws i.i.d. `(x, y)` samples by inverse-CDF over the flattened grid.
    pub fn sample<R: Rng>(&self, count: usize, rng: &mut R) -> Vec<(usize, usize)> {
        let flat: Vec<f64> = self.probs.iter().copied().collect();
        let mut cdf = Vec::with_capacity(flat.len());
        let mut acc = 0.0;
        for v in &flat {
            acc += v;
            cdf.push(acc);
        }
        let ny = self.ny();
        (0..count)
            .map(|_| {
                let u: f64 = rng.gen();
                let idx = match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
                    Ok(i) => i + 1,
                    Err(i) => i,
                }
                .min(flat.len() - 1);
                (idx / ny, idx % ny)
            })
            .collect()
    }

    /// Empirical joint (histogram) of a sample drawn over the same grid.
    pub fn empirical(samples: &[(usize, usize)], nx: usize, ny: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(TheoryError::InvalidInputs {
                reason: "empirical distribution needs at least one sample".into(),
            });
        }
        let mut w = Array2::zeros((nx, ny));
        for &(x, y) in samples {
            w[(x, y)] += 1.0;
        }
        Self::from_weights(w)
    }
}

/// A row-stochastic conditional table `K(y|x)`: rows index `x`, each row sums
/// to 1. Used for tabular classifiers `P_C(y|x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondTable {
    p: Array2<f64>,
}

impl CondTable {
    pub fn new(p: Array2<f64>) -> Result<Self> {
        for x in 0..p.nrows() {
            let row = p.row(x);
            for (y, &v) in row.iter().enumerate() {
                if v.is_nan() || v < 0.0 || !v.is_finite() {
                    return Err(TheoryError::NegativeProb { x, y, value: v });
                }
            }
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(TheoryError::NotNormalized { sum });
            }
        }
        Ok(Self { p })
    }

    /// Random conditional with every entry strictly positive.
    pub fn random<R: Rng>(nx: usize, ny: usize, rng: &mut R) -> Self {
        let mut p = Array2::zeros((nx, ny));
        for x in 0..nx {
            let mut row_sum = 0.0;
            for y in 0..ny {
                let v = 0.05 + rng.gen::<f64>();
                p[(x, y)] = v;
                row_sum += v;
            }
            for y in 0..ny {
                p[(x, y)] /= row_sum;
            }
        }
        Self { p }
    }

    pub fn nx(&self) -> usize {
        self.p.nrows()
    }

    pub fn ny(&self) -> usize {
        self.p.ncols()
    }

    pub fn prob(&self, x: usize, y: usize) -> f64 {
        self.p[(x, y)]
    }
}

/// For each x-index, the set of x̂-indices reachable within the perturbation
/// budget. Every x-index is a member of its own neighborhood.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodMap {
    nbrs: Vec<Vec<usize>>,
}

impl NeighborhoodMap {
    pub fn new(nbrs: Vec<Vec<usize>>) -> Result<Self> {
        let nx = nbrs.len();
        for (x, set) in nbrs.iter().enumerate() {
            if set.is_empty() {
                return Err(TheoryError::EmptyNeighborhood { x });
            }
            if !set.contains(&x) {
                return Err(TheoryError::SelfMissing { x });
            }
            if let Some(&j) = set.iter().find(|&&j| j >= nx) {
                return Err(TheoryError::NeighborOutOfRange { x, j, nx });
            }
        }
        Ok(Self { nbrs })
    }

    /// Zero-budget map: each x-index can only stay where it is.
    pub fn self_only(nx: usize) -> Self {
        Self {
            nbrs: (0..nx).map(|x| vec![x]).collect(),
        }
    }

    /// Indices embedded on a 1-D unit-spacing grid; `x̂ ∈ nbhd(x)` iff
    /// `|x̂ − x| ≤ eps`.
    pub fn from_grid_1d(nx: usize, eps: f64) -> Self {
        let r = eps.max(0.0).floor() as usize;
        let nbrs = (0..nx)
            .map(|x| (x.saturating_sub(r)..=(x + r).min(nx - 1)).collect())
            .collect();
        Self { nbrs }
    }

    /// Random neighborhoods with at most `max_size` members each (self always
    /// included), suitable for brute-force enumeration.
    pub fn random<R: Rng>(nx: usize, max_size: usize, rng: &mut R) -> Self {
        let max_size = max_size.max(1);
        let nbrs = (0..nx)
            .map(|x| {
                let mut set = vec![x];
                let extra = rng.gen_range(0..max_size);
                for _ in 0..extra {
                    let j = rng.gen_range(0..nx);
                    if !set.contains(&j) {
                        set.push(j);
                    }
                }
                set.sort_unstable();
                set
            })
            .collect();
        Self { nbrs }
    }

    pub fn nx(&self) -> usize {
        self.nbrs.len()
    }

    pub fn neighbors(&self, x: usize) -> &[usize] {
        &self.nbrs[x]
    }
}

/// Nonnegative loss values `l(x, y)` for a fixed tabular classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTable {
    l: Array2<f64>,
}

impl LossTable {
    pub fn new(l: Array2<f64>) -> Result<Self> {
        for ((x, y), &v) in l.indexed_iter() {
            if !v.is_finite() || v < 0.0 {
                return Err(TheoryError::BadLossEntry { x, y, value: v });
            }
        }
        Ok(Self { l })
    }

    /// Negative log-likelihood table `−ln K(y|x)` of a tabular classifier.
    pub fn nll_of(cond: &CondTable) -> Self {
        let mut l = Array2::zeros((cond.nx(), cond.ny()));
        for x in 0..cond.nx() {
            for y in 0..cond.ny() {
                l[(x, y)] = -cond.prob(x, y).ln();
            }
        }
        Self { l }
    }

    pub fn random<R: Rng>(nx: usize, ny: usize, rng: &mut R) -> Self {
        let mut l = Array2::zeros((nx, ny));
        for v in l.iter_mut() {
            *v = rng.gen::<f64>() * 4.0;
        }
        Self { l }
    }

    pub fn nx(&self) -> usize {
        self.l.nrows()
    }

    pub fn ny(&self) -> usize {
        self.l.ncols()
    }

    pub fn loss(&self, x: usize, y: usize) -> f64 {
        self.l[(x, y)]
    }

    /// `max_{x̂ ∈ nbhd(x)} l(x̂, y)` — the worst achievable loss when the
    /// adversary may move `x` anywhere in its neighborhood.
    pub fn neighborhood_max(&self, nbhd: &NeighborhoodMap, x: usize, y: usize) -> f64 {
        nbhd.neighbors(x)
            .iter()
            .map(|&j| self.l[(j, y)])
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// A `{−1, 0, +1}`-valued discriminator table.
#[derive(Debug, Clone, PartialEq)]
pub struct SignTable {
    d: Array2<f64>,
}

impl SignTable {
    pub fn value(&self, x: usize, y: usize) -> f64 {
        self.d[(x, y)]
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.d
    }
}

/// Inputs to the finite-sample bound formulas.
///
/// `m` labeled and `n` unlabeled sample counts; `delta` the failure
/// probability; `b`/`b1` sup-log bounds; `gan_sup` the value of
/// `max_D L̂_gan`; `lhat_nat`/`lhat_adv_max` empirical losses; `r1`/`r2` the
/// Bayes-error terms they are measured against.
#[derive(Debug, Clone, Copy)]
pub struct BoundInputs {
    pub m: usize,
    pub n: usize,
    pub delta: f64,
    pub b: f64,
    pub b1: f64,
    pub gan_sup: f64,
    pub lhat_nat: f64,
    pub lhat_adv_max: f64,
    pub r1: f64,
    pub r2: f64,
}

impl BoundInputs {
    fn validate(&self) -> Result<()> {
        if self.m < 1 || self.n < 1 {
            return Err(TheoryError::InvalidInputs {
                reason: format!("sample counts must be ≥ 1, got m={}, n={}", self.m, self.n),
            });
        }
        if self.delta.is_nan() || self.delta <= 0.0 || self.delta >= 1.0 {
            return Err(TheoryError::InvalidInputs {
                reason: format!("delta must lie in (0,1), got {}", self.delta),
            });
        }
        Ok(())
    }
}

fn check_same_support(p: &DiscreteJoint, q: &DiscreteJoint) -> Result<()> {
    if p.nx() != q.nx() || p.ny() != q.ny() {
        return Err(TheoryError::SupportMismatch {
            left_nx: p.nx(),
            left_ny: p.ny(),
            right_nx: q.nx(),
            right_ny: q.ny(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Divergences and the optimal discriminator
// ---------------------------------------------------------------------------

/// Total variation distance `½·Σ|P − Q|`. Always in `[0, 1]`.
pub fn tv(p: &DiscreteJoint, q: &DiscreteJoint) -> Result<f64> {
    check_same_support(p, q)?;
    let mut s = 0.0;
    for (a, b) in p.probs.iter().zip(q.probs.iter()) {
        s += (a - b).abs();
    }
    Ok(0.5 * s)
}

/// Kullback–Leibler divergence `Σ P ln(P/Q)` in nats.
///
/// Requires `Q > 0` wherever `P > 0`; cells with `P = 0` contribute nothing.
pub fn kl(p: &DiscreteJoint, q: &DiscreteJoint) -> Result<f64> {
    check_same_support(p, q)?;
    let mut s = 0.0;
    for ((x, y), &pv) in p.probs.indexed_iter() {
        if pv > 0.0 {
            let qv = q.prob(x, y);
            if qv <= 0.0 {
                return Err(TheoryError::AbsoluteContinuity { x, y, p: pv });
            }
            s += pv * (pv / qv).ln();
        }
    }
    Ok(s)
}

/// The closed-form optimal discriminator `D*(x,y) = sign(P − P_GC)`.
pub fn optimal_discriminator(p: &DiscreteJoint, p_gc: &DiscreteJoint) -> Result<SignTable> {
    check_same_support(p, p_gc)?;
    let mut d = Array2::zeros((p.nx(), p.ny()));
    for ((x, y), cell) in d.indexed_iter_mut() {
        let diff = p.prob(x, y) - p_gc.prob(x, y);
        *cell = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    Ok(SignTable { d })
}

/// Linear three-distribution adversarial value for a tabular discriminator:
///
/// `L_D + ½·L_G + ½·L_C  =  E_P[D] − ½·E_{P_G}[D] − ½·E_{P_C}[D]`.
///
/// Maximized over `|D| ≤ 1` this equals `2·TV(P, (P_G+P_C)/2)`.
pub fn linear_gan_value(
    p: &DiscreteJoint,
    p_g: &DiscreteJoint,
    p_c: &DiscreteJoint,
    d: &Array2<f64>,
) -> Result<f64> {
    check_same_support(p, p_g)?;
    check_same_support(p, p_c)?;
    if d.nrows() != p.nx() || d.ncols() != p.ny() {
        return Err(TheoryError::SupportMismatch {
            left_nx: p.nx(),
            left_ny: p.ny(),
            right_nx: d.nrows(),
            right_ny: d.ncols(),
        });
    }
    let mut s = 0.0;
    for ((x, y), &dv) in d.indexed_iter() {
        s += dv * (p.prob(x, y) - 0.5 * p_g.prob(x, y) - 0.5 * p_c.prob(x, y));
    }
    Ok(s)
}

/// Distance of the triple from its alignment equilibrium:
/// `TV(P, (P_G + P_C)/2)`. Zero iff the mixture already equals `P`.
pub fn equilibrium_residual(
    p: &DiscreteJoint,
    p_g: &DiscreteJoint,
    p_c: &DiscreteJoint,
) -> Result<f64> {
    let p_gc = DiscreteJoint::mixture(p_g, p_c)?;
    tv(p, &p_gc)
}

// ---------------------------------------------------------------------------
// Adversaries
// ---------------------------------------------------------------------------

/// Restricted adversary: perturbs each example pointwise,
/// `E_{(x,y)~P} max_{x̂ ∈ nbhd(x)} l(x̂, y)`.
pub fn rae_adversary(p: &DiscreteJoint, loss: &LossTable, nbhd: &NeighborhoodMap) -> Result<f64> {
    check_adversary_instance(p, loss, nbhd)?;
    let mut s = 0.0;
    for ((x, y), &pv) in p.probs.indexed_iter() {
        if pv > 0.0 {
            s += pv * loss.neighborhood_max(nbhd, x, y);
        }
    }
    Ok(s)
}

/// Unrestricted adversary by exhaustive enumeration: the best expected loss
/// over *all* transport maps `T` that send each support cell `(x, y)` to some
/// `x̂ ∈ nbhd(x)`.
///
/// The map may pick a different `x̂` for different labels of the same `x`,
/// matching a generator-side adversary that chooses where to place each
/// labeled example. Enumeration is exponential in the number of support
/// cells, so instances must stay small (`|nbhd| ≤ 4`, `≤ 8` cells is always
/// safe).
pub fn uae_adversary_bruteforce(
    p: &DiscreteJoint,
    loss: &LossTable,
    nbhd: &NeighborhoodMap,
) -> Result<f64> {
    check_adversary_instance(p, loss, nbhd)?;
    // Cells are grid positions; each contributes a |nbhd(x)| -way choice.
    let cells: Vec<(usize, usize)> = p
        .probs
        .indexed_iter()
        .map(|((x, y), _)| (x, y))
        .collect();
    let mut total: u128 = 1;
    for &(x, _) in &cells {
        total = total.saturating_mul(nbhd.neighbors(x).len() as u128);
        if total > MAX_BRUTEFORCE_MAPPINGS {
            return Err(TheoryError::InstanceTooLarge { mappings: total });
        }
    }

    // Odometer over the per-cell choice indices.
    let mut choice = vec![0usize; cells.len()];
    let mut best = f64::NEG_INFINITY;
    loop {
        let mut value = 0.0;
        for (k, &(x, y)) in cells.iter().enumerate() {
            let xhat = nbhd.neighbors(x)[choice[k]];
            value += p.prob(x, y) * loss.loss(xhat, y);
        }
        if value > best {
            best = value;
        }
        // Advance the odometer; stop after the last combination.
        let mut k = 0;
        loop {
            if k == cells.len() {
                return Ok(best);
            }
            choice[k] += 1;
            if choice[k] < nbhd.neighbors(cells[k].0).len() {
                break;
            }
            choice[k] = 0;
            k += 1;
        }
    }
}

/// Gap between the adversary measured under the generated distribution and
/// under the real one, with its transport bound:
///
/// `G_U = |E_{P_G} max l − E_P max l|  ≤  2·B1·TV(P, P_G)`,
///
/// where `B1` is the largest neighborhood-max loss over cells where the two
/// distributions disagree. Returns `(G_U, bound)` and asserts the inequality.
pub fn adversary_gap(
    p: &DiscreteJoint,
    p_g: &DiscreteJoint,
    loss: &LossTable,
    nbhd: &NeighborhoodMap,
) -> Result<(f64, f64)> {
    check_same_support(p, p_g)?;
    check_adversary_instance(p, loss, nbhd)?;
    let mut gap = 0.0;
    let mut b1 = 0.0;
    for ((x, y), &pv) in p.probs.indexed_iter() {
        let gv = p_g.prob(x, y);
        let worst = loss.neighborhood_max(nbhd, x, y);
        gap += (gv - pv) * worst;
        if gv != pv && worst > b1 {
            b1 = worst;
        }
    }
    let g_u = gap.abs();
    let bound = 2.0 * b1 * tv(p, p_g)?;
    debug_assert!(
        g_u <= bound + 1e-12,
        "transport bound violated: gap {g_u} > bound {bound}"
    );
    Ok((g_u, bound))
}

fn check_adversary_instance(
    p: &DiscreteJoint,
    loss: &LossTable,
    nbhd: &NeighborhoodMap,
) -> Result<()> {
    if loss.nx() != p.nx() || loss.ny() != p.ny() || nbhd.nx() != p.nx() {
        return Err(TheoryError::SupportMismatch {
            left_nx: p.nx(),
            left_ny: p.ny(),
            right_nx: loss.nx(),
            right_ny: loss.ny(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Finite-sample bounds
// ---------------------------------------------------------------------------

/// Alignment generalization bound
///
/// ```text
/// B = ( ½·b + ¼·gan_sup + sqrt(ln(1/δ)/(8m)) + sqrt(ln(1/δ)/(32n)) )^½
/// ```
///
/// A negative radicand is reported as an error, never clamped.
pub fn bound_b(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    let log_term = (1.0 / inputs.delta).ln();
    let radicand = 0.5 * inputs.b
        + 0.25 * inputs.gan_sup
        + (log_term / (8.0 * inputs.m as f64)).sqrt()
        + (log_term / (32.0 * inputs.n as f64)).sqrt();
    if radicand < 0.0 {
        return Err(TheoryError::NegativeRadicand { value: radicand });
    }
    Ok(radicand.sqrt())
}

/// Natural-generalization bound
///
/// ```text
/// (1/√2)·( L̂_nat + b1·sqrt(ln(1/δ)/(2m)) − R1 )^½
/// ```
pub fn nat_generalization_bound(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    let log_term = (1.0 / inputs.delta).ln();
    let radicand =
        inputs.lhat_nat + inputs.b1 * (log_term / (2.0 * inputs.m as f64)).sqrt() - inputs.r1;
    if radicand < 0.0 {
        return Err(TheoryError::NegativeRadicand { value: radicand });
    }
    Ok(radicand.sqrt() / std::f64::consts::SQRT_2)
}

/// Adversarial-generalization bound
///
/// ```text
/// (1/(2√2))·( L̂_adv_max − R2 )^½ + B
/// ```
///
/// The same value bounds `TV(P, Q)` for `Q` either the classifier-induced or
/// the generator-induced joint.
pub fn adv_generalization_bound(inputs: &BoundInputs, b: f64) -> Result<f64> {
    inputs.validate()?;
    let radicand = inputs.lhat_adv_max - inputs.r2;
    if radicand < 0.0 {
        return Err(TheoryError::NegativeRadicand { value: radicand });
    }
    Ok(radicand.sqrt() / (2.0 * std::f64::consts::SQRT_2) + b)
}

// ---------------------------------------------------------------------------
// Exact scalar helpers for the bound inputs
// ---------------------------------------------------------------------------

/// `b = max_{(x,y): P>0} ln(P/P_GC) + 1` — the sup-log term of the alignment
/// bound, computed exactly from the tables.
pub fn sup_log_ratio_plus_one(p: &DiscreteJoint, p_gc: &DiscreteJoint) -> Result<f64> {
    check_same_support(p, p_gc)?;
    let mut max_ratio = f64::NEG_INFINITY;
    for ((x, y), &pv) in p.probs.indexed_iter() {
        if pv > 0.0 {
            let qv = p_gc.prob(x, y);
            if qv <= 0.0 {
                return Err(TheoryError::AbsoluteContinuity { x, y, p: pv });
            }
            max_ratio = max_ratio.max((pv / qv).ln());
        }
    }
    Ok(max_ratio + 1.0)
}

/// `b1 = max_{(x,y): P>0} −ln P_C(y|x)` — the sup-norm of the classifier's
/// negative log-likelihood over the real support.
pub fn sup_nll(p: &DiscreteJoint, cond: &CondTable) -> Result<f64> {
    let mut worst = 0.0f64;
    for ((x, y), &pv) in p.probs.indexed_iter() {
        if pv > 0.0 {
            let c = cond.prob(x, y);
            if c <= 0.0 {
                return Err(TheoryError::AbsoluteContinuity { x, y, p: pv });
            }
            worst = worst.max(-c.ln());
        }
    }
    Ok(worst)
}

/// Bayes error of the real joint: `R1 = −E_P ln P(y|x)`.
pub fn bayes_error_r1(p: &DiscreteJoint) -> f64 {
    let marg = p.x_marginal();
    let mut s = 0.0;
    for ((x, _), &pv) in p.probs.indexed_iter() {
        if pv > 0.0 {
            s -= pv * (pv / marg[x]).ln();
        }
    }
    s
}

/// Generator-side Bayes term: `R2 = −E_{P_G} ln(P_G(x,y)/P(x))` where `P(x)`
/// is the real x-marginal.
pub fn bayes_error_r2(p_g: &DiscreteJoint, p: &DiscreteJoint) -> Result<f64> {
    check_same_support(p_g, p)?;
    let marg = p.x_marginal();
    let mut s = 0.0;
    for ((x, _), &gv) in p_g.probs.indexed_iter() {
        if gv > 0.0 {
            if marg[x] <= 0.0 {
                return Err(TheoryError::AbsoluteContinuity { x, y: 0, p: gv });
            }
            s -= gv * (gv / marg[x]).ln();
        }
    }
    Ok(s)
}
