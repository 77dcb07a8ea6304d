//! Randomized verification suite over the exact theory oracles.
//!
//! Each check draws many random finite instances, evaluates the corresponding
//! guarantee exactly, and reports an instance count, a failure count, and the
//! worst observed slack (how close the tightest instance came to violating
//! the claim; negative slack means "margin to spare"). Deterministic for a
//! fixed seed.
//!
//! Probabilistic bounds ("holds with probability ≥ 1−δ") are accepted when
//! the empirical failure rate stays below `δ + 3·sqrt(δ(1−δ)/trials)` — the
//! three-sigma envelope of a binomial with success probability δ.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

/// Instance counts and sample sizes for one full verification run.
///
/// Defaults match the acceptance gate: 200 adversary-equivalence instances,
/// 100 + 100 equilibrium instances, 1,000 Pinsker and transport instances,
/// and 100-trial Monte-Carlo sweeps at δ = 0.1.
#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub equivalence_instances: usize,
    pub equilibrium_instances: usize,
    pub pinsker_instances: usize,
    pub transport_instances: usize,
    pub mc_trials: usize,
    pub mc_labeled: usize,
    pub mc_unlabeled: usize,
    pub delta: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            equivalence_instances: 200,
            equilibrium_instances: 100,
            pinsker_instances: 1000,
            transport_instances: 1000,
            mc_trials: 100,
            mc_labeled: 400,
            mc_unlabeled: 1600,
            delta: 0.1,
        }
    }
}

/// Result of one named check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub instances: usize,
    pub failures: usize,
    /// Worst slack over all instances; the check-specific meaning is
    /// "violation margin", so any positive value beyond the check's tolerance
    /// is a failure.
    pub worst_slack: f64,
    pub pass: bool,
}

impl CheckOutcome {
    fn new(name: &str, instances: usize, failures: usize, worst_slack: f64, pass: bool) -> Self {
        Self {
            name: name.to_string(),
            instances,
            failures,
            worst_slack,
            pass,
        }
    }
}

/// Aggregated outcome of the whole suite.
#[derive(Debug, Clone)]
pub struct VerificationReport {
    pub checks: Vec<CheckOutcome>,
}

impl VerificationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Runs every check with a deterministic seed and returns the report.
pub fn run_verification(config: &SuiteConfig, seed: u64) -> VerificationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let checks = vec![
        adversary_equivalence_check(config, &mut rng),
        equilibrium_check(config, &mut rng),
        mismatched_equilibrium_check(config, &mut rng),
        pinsker_check(config, &mut rng),
        transport_bound_check(config, &mut rng),
        bound_arithmetic_check(),
        bound_monotonicity_check(),
        mc_alignment_bound_check(config, &mut rng),
        mc_nat_bound_check(config, &mut rng),
        mc_adv_bound_check(config, &mut rng),
    ];
    VerificationReport { checks }
}

/// Unrestricted-vs-restricted adversary equivalence: on every enumerable
/// instance, the best transport map attains exactly the pointwise worst case.
fn adversary_equivalence_check(config: &SuiteConfig, rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut failures = 0;
    let mut worst = 0.0f64;
    for i in 0..config.equivalence_instances {
        // Alternate between 6-cell and 8-cell supports; both enumerable.
        let (nx, ny) = if i % 2 == 0 { (3, 2) } else { (4, 2) };
        let p = DiscreteJoint::random(nx, ny, rng);
        let loss = LossTable::random(nx, ny, rng);
        let nbhd = NeighborhoodMap::random(nx, 4, rng);
        let direct = rae_adversary(&p, &loss, &nbhd).expect("valid instance");
        let brute = uae_adversary_bruteforce(&p, &loss, &nbhd).expect("enumerable instance");
        let diff = (direct - brute).abs();
        worst = worst.max(diff);
        if diff > 1e-12 {
            failures += 1;
        }
    }
    CheckOutcome::new(
        "adversary-equivalence",
        config.equivalence_instances,
        failures,
        worst,
        failures == 0,
    )
}

/// At the equilibrium `P = (P_G+P_C)/2` the best bounded discriminator
/// extracts exactly zero adversarial value.
fn equilibrium_check(config: &SuiteConfig, rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut failures = 0;
    let mut worst = 0.0f64;
    for i in 0..config.equilibrium_instances {
        let (nx, ny) = if i % 2 == 0 { (3, 2) } else { (4, 3) };
        let p_g = DiscreteJoint::random(nx, ny, rng);
        let p_c = DiscreteJoint::random(nx, ny, rng);
        let p = DiscreteJoint::mixture(&p_g, &p_c).expect("same support");
        let p_gc = DiscreteJoint::mixture(&p_g, &p_c).expect("same support");
        let d = optimal_discriminator(&p, &p_gc).expect("same support");
        let value = linear_gan_value(&p, &p_g, &p_c, d.table()).expect("same support");
        worst = worst.max(value.abs());
        if value.abs() > 1e-9 {
            failures += 1;
        }
    }
    CheckOutcome::new(
        "equilibrium-zero-value",
        config.equilibrium_instances,
        failures,
        worst,
        failures == 0,
    )
}

/// Away from equilibrium the optimal discriminator's value equals
/// `2·TV(P, P_GC)`.
fn mismatched_equilibrium_check(config: &SuiteConfig, rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut failures = 0;
    let mut worst = 0.0f64;
    for i in 0..config.equilibrium_instances {
        let (nx, ny) = if i % 2 == 0 { (3, 2) } else { (4, 3) };
        let p = DiscreteJoint::random(nx, ny, rng);
        let p_g = DiscreteJoint::random(nx, ny, rng);
        let p_c = DiscreteJoint::random(nx, ny, rng);
        let p_gc = DiscreteJoint::mixture(&p_g, &p_c).expect("same support");
        let d = optimal_discriminator(&p, &p_gc).expect("same support");
        let value = linear_gan_value(&p, &p_g, &p_c, d.table()).expect("same support");
        let expect = 2.0 * tv(&p, &p_gc).expect("same support");
        let diff = (value - expect).abs();
        worst = worst.max(diff);
        if diff > 1e-9 {
            failures += 1;
        }
    }
    CheckOutcome::new(
        "optimal-discriminator-value",
        config.equilibrium_instances,
        failures,
        worst,
        failures == 0,
    )
}

/// `TV ≤ sqrt(KL/2)` on random pairs.
fn pinsker_check(config: &SuiteConfig, rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut failures = 0;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..config.pinsker_instances {
        let p = DiscreteJoint::random(3, 3, rng);
        let q = DiscreteJoint::random(3, 3, rng);
        let t = tv(&p, &q).expect("same support");
        let k = kl(&p, &q).expect("full support");
        let slack = t - (k / 2.0).sqrt();
        worst = worst.max(slack);
        if slack > 1e-12 {
            failures += 1;
        }
    }
    CheckOutcome::new(
        "pinsker",
        config.pinsker_instances,
        failures,
        worst,
        failures == 0,
    )
}

/// Adversary transport bound `G_U ≤ 2·B1·TV(P, P_G)` on random instances.
fn transport_bound_check(config: &SuiteConfig, rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut failures = 0;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..config.transport_instances {
        let p = DiscreteJoint::random(4, 3, rng);
        let p_g = DiscreteJoint::random(4, 3, rng);
        let loss = LossTable::random(4, 3, rng);
        let nbhd = NeighborhoodMap::random(4, 3, rng);
        let (gap, bound) = adversary_gap(&p, &p_g, &loss, &nbhd).expect("valid instance");
        let slack = gap - bound;
        worst = worst.max(slack);
        if slack > 1e-12 {
            failures += 1;
        }
    }
    CheckOutcome::new(
        "adversary-transport-bound",
        config.transport_instances,
        failures,
        worst,
        failures == 0,
    )
}

/// The three bound formulas agree with an independent re-evaluation written
/// out again from scratch.
fn bound_arithmetic_check() -> CheckOutcome {
    let inputs = BoundInputs {
        m: 1000,
        n: 4000,
        delta: 0.1,
        b: 1.0,
        b1: 2.5,
        gan_sup: 0.3,
        lhat_nat: 1.1,
        lhat_adv_max: 1.4,
        r1: 0.6,
        r2: 0.7,
    };
    let lt = (1.0 / inputs.delta).ln();
    let expect_b =
        (0.5 * inputs.b + 0.25 * inputs.gan_sup + (lt / 8000.0).sqrt() + (lt / 128000.0).sqrt())
            .sqrt();
    let expect_nat =
        ((inputs.lhat_nat + inputs.b1 * (lt / 2000.0).sqrt() - inputs.r1) / 2.0).sqrt();
    let expect_adv = (inputs.lhat_adv_max - inputs.r2).sqrt() / (2.0 * 2.0f64.sqrt()) + expect_b;

    let got_b = bound_b(&inputs).expect("valid inputs");
    let got_nat = nat_generalization_bound(&inputs).expect("valid inputs");
    let got_adv = adv_generalization_bound(&inputs, got_b).expect("valid inputs");

    let worst = (got_b - expect_b)
        .abs()
        .max((got_nat - expect_nat).abs())
        .max((got_adv - expect_adv).abs());
    CheckOutcome::new("bound-arithmetic", 3, 0, worst, worst <= 1e-12)
}

/// Strict monotone decrease of every bound in the sample counts it depends
/// on, over a grid of counts.
fn bound_monotonicity_check() -> CheckOutcome {
    let base = BoundInputs {
        m: 50,
        n: 50,
        delta: 0.05,
        b: 1.0,
        b1: 2.0,
        gan_sup: 0.3,
        lhat_nat: 1.2,
        lhat_adv_max: 1.5,
        r1: 0.4,
        r2: 0.5,
    };
    let grid = [50usize, 100, 200, 400, 800, 1600];
    let mut failures = 0;
    let mut checked = 0;
    for w in grid.windows(2) {
        let (small, large) = (w[0], w[1]);
        let b_small = bound_b(&BoundInputs { m: small, ..base }).unwrap();
        let b_large = bound_b(&BoundInputs { m: large, ..base }).unwrap();
        checked += 1;
        if b_large >= b_small {
            failures += 1;
        }
        let b_small = bound_b(&BoundInputs { n: small, ..base }).unwrap();
        let b_large = bound_b(&BoundInputs { n: large, ..base }).unwrap();
        checked += 1;
        if b_large >= b_small {
            failures += 1;
        }
        let n_small = nat_generalization_bound(&BoundInputs { m: small, ..base }).unwrap();
        let n_large = nat_generalization_bound(&BoundInputs { m: large, ..base }).unwrap();
        checked += 1;
        if n_large >= n_small {
            failures += 1;
        }
    }
    CheckOutcome::new("bound-monotonicity", checked, failures, 0.0, failures == 0)
}

/// One Monte-Carlo trial's shared random instance: a real joint `P`, a
/// generator joint `P_G`, and a tabular classifier `P_C(y|x)`.
struct McInstance {
    p: DiscreteJoint,
    p_g: DiscreteJoint,
    cond: CondTable,
    p_c_joint: DiscreteJoint,
    p_gc: DiscreteJoint,
}

impl McInstance {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let (nx, ny) = (3, 3);
        let p = DiscreteJoint::random(nx, ny, rng);
        let p_g = DiscreteJoint::random(nx, ny, rng);
        let cond = CondTable::random(nx, ny, rng);
        let p_c_joint =
            DiscreteJoint::from_conditional(&p.x_marginal(), &cond).expect("consistent sizes");
        let p_gc = DiscreteJoint::mixture(&p_g, &p_c_joint).expect("same support");
        Self {
            p,
            p_g,
            cond,
            p_c_joint,
            p_gc,
        }
    }

    /// Empirical `max_D L̂_gan`: the sign discriminator applied to the
    /// empirical labeled histogram, the exact generator distribution (the
    /// infinite-noise-set limit), and soft classifier pseudo-labels on the
    /// unlabeled sample.
    fn empirical_gan_sup(&self, labeled: &[(usize, usize)], unlabeled_x: &[usize]) -> f64 {
        let (nx, ny) = (self.p.nx(), self.p.ny());
        let mut weight: Array2<f64> = Array2::zeros((nx, ny));
        for &(x, y) in labeled {
            weight[(x, y)] += 1.0 / labeled.len() as f64;
        }
        for ((x, y), w) in weight.indexed_iter_mut() {
            *w -= 0.5 * self.p_g.prob(x, y);
            let mut pseudo = 0.0;
            for &xj in unlabeled_x {
                if xj == x {
                    pseudo += self.cond.prob(x, y);
                }
            }
            *w -= 0.5 * pseudo / unlabeled_x.len() as f64;
        }
        weight.iter().map(|w| w.abs()).sum()
    }
}

/// Lemma-level Monte-Carlo check: `TV(P, P_GC) ≤ B` with empirical GAN value,
/// claimed to hold with probability ≥ (1−δ)².
fn mc_alignment_bound_check(config: &SuiteConfig, rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut failures = 0;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..config.mc_trials {
        let inst = McInstance::random(rng);
        let labeled = inst.p.sample(config.mc_labeled, rng);
        let unlabeled: Vec<usize> = inst
            .p
            .sample(config.mc_unlabeled, rng)
            .into_iter()
            .map(|(x, _)| x)
            .collect();
        let inputs = BoundInputs {
            m: config.mc_labeled,
            n: config.mc_unlabeled,
            delta: config.delta,
            b: sup_log_ratio_plus_one(&inst.p, &inst.p_gc).expect("full support"),
            b1: 0.0,
            gan_sup: inst.empirical_gan_sup(&labeled, &unlabeled),
            lhat_nat: 0.0,
            lhat_adv_max: 0.0,
            r1: 0.0,
            r2: 0.0,
        };
        let true_tv = tv(&inst.p, &inst.p_gc).expect("same support");
        match bound_b(&inputs) {
            Ok(b) => {
                let slack = true_tv - b;
                worst = worst.max(slack);
                if slack > 0.0 {
                    failures += 1;
                }
            }
            Err(_) => failures += 1,
        }
    }
    // Two Hoeffding events stacked: failure probability 1 − (1−δ)².
    let delta2 = 1.0 - (1.0 - config.delta) * (1.0 - config.delta);
    let allowed = mc_allowed_failures(delta2, config.mc_trials);
    CheckOutcome::new(
        "mc-alignment-bound",
        config.mc_trials,
        failures,
        worst,
        failures <= allowed,
    )
}

/// Natural-generalization Monte-Carlo check: `TV(P, P_C) ≤ bound` with the
/// empirical natural loss from m i.i.d. labeled samples, claimed with
/// probability ≥ 1−δ.
fn mc_nat_bound_check(config: &SuiteConfig, rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut failures = 0;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..config.mc_trials {
        let inst = McInstance::random(rng);
        let labeled = inst.p.sample(config.mc_labeled, rng);
        // Consistency weight is zero here: the optimum-level statement drops
        // the teacher term, so the empirical natural loss is plain NLL.
        let lhat_nat = labeled
            .iter()
            .map(|&(x, y)| -inst.cond.prob(x, y).ln())
            .sum::<f64>()
            / labeled.len() as f64;
        let inputs = BoundInputs {
            m: config.mc_labeled,
            n: 1,
            delta: config.delta,
            b: 0.0,
            b1: sup_nll(&inst.p, &inst.cond).expect("full support"),
            gan_sup: 0.0,
            lhat_nat,
            lhat_adv_max: 0.0,
            r1: bayes_error_r1(&inst.p),
            r2: 0.0,
        };
        let true_tv = tv(&inst.p, &inst.p_c_joint).expect("same support");
        match nat_generalization_bound(&inputs) {
            Ok(bound) => {
                let slack = true_tv - bound;
                worst = worst.max(slack);
                if slack > 0.0 {
                    failures += 1;
                }
            }
            Err(_) => failures += 1,
        }
    }
    let allowed = mc_allowed_failures(config.delta, config.mc_trials);
    CheckOutcome::new(
        "mc-natural-bound",
        config.mc_trials,
        failures,
        worst,
        failures <= allowed,
    )
}

/// Adversarial-generalization Monte-Carlo check: with the exact worst-case
/// adversarial loss (infinite-noise-set limit) and the empirical `B`,
/// `TV(P, Q) ≤ bound` for both `Q = P_C` and `Q = P_G`, claimed with
/// probability ≥ (1−δ)².
fn mc_adv_bound_check(config: &SuiteConfig, rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut failures = 0;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..config.mc_trials {
        let inst = McInstance::random(rng);
        let labeled = inst.p.sample(config.mc_labeled, rng);
        let unlabeled: Vec<usize> = inst
            .p
            .sample(config.mc_unlabeled, rng)
            .into_iter()
            .map(|(x, _)| x)
            .collect();
        let nbhd = NeighborhoodMap::random(inst.p.nx(), 3, rng);
        // Worst-case adversarial loss: the attacker moves every generated
        // example to the most damaging neighbor, in expectation under P_G.
        let nll = LossTable::nll_of(&inst.cond);
        let lhat_adv_max = rae_adversary(&inst.p_g, &nll, &nbhd).expect("valid instance");
        let inputs = BoundInputs {
            m: config.mc_labeled,
            n: config.mc_unlabeled,
            delta: config.delta,
            b: sup_log_ratio_plus_one(&inst.p, &inst.p_gc).expect("full support"),
            b1: 0.0,
            gan_sup: inst.empirical_gan_sup(&labeled, &unlabeled),
            lhat_nat: 0.0,
            lhat_adv_max,
            r1: 0.0,
            r2: bayes_error_r2(&inst.p_g, &inst.p).expect("full support"),
        };
        let outcome = bound_b(&inputs)
            .and_then(|b| adv_generalization_bound(&inputs, b));
        match outcome {
            Ok(bound) => {
                let tv_c = tv(&inst.p, &inst.p_c_joint).expect("same support");
                let tv_g = tv(&inst.p, &inst.p_g).expect("same support");
                let slack = tv_c.max(tv_g) - bound;
                worst = worst.max(slack);
                if slack > 0.0 {
                    failures += 1;
                }
            }
            Err(_) => failures += 1,
        }
    }
    let delta2 = 1.0 - (1.0 - config.delta) * (1.0 - config.delta);
    let allowed = mc_allowed_failures(delta2, config.mc_trials);
    CheckOutcome::new(
        "mc-adversarial-bound",
        config.mc_trials,
        failures,
        worst,
        failures <= allowed,
    )
}

/// Largest failure count consistent with failure probability `delta`:
/// `trials · (delta + 3·sqrt(delta(1−delta)/trials))`, rounded down.
pub fn mc_allowed_failures(delta: f64, trials: usize) -> usize {
    let t = trials as f64;
    (t * (delta + 3.0 * (delta * (1.0 - delta) / t).sqrt())).floor() as usize
}
