//! Unrestricted adversarial example construction through the composed attack
//! map: a label-conditional noise attacker rewrites a latent seed, and the
//! conditional generator decodes both the original seed and the rewritten one
//! with the same parameters. Each output pair (natural example, attacked
//! example) therefore differs only through the attacker — the property every
//! downstream adversarial loss relies on.
//!
//! Evaluation-time helpers here decode with frozen (running) normalization
//! statistics. The graph-level builder [`uae_graph`] is what training uses:
//! it keeps the whole chain differentiable, so attacker updates receive
//! gradient through the generator, including through batch statistics when
//! batch mode is selected.

use ndarray::Array2;
use thiserror::Error;

use crate::nets::{Attacker, AttackerVars, BnUpdates, Generator, GeneratorVars, Stats};
use crate::tensor::{Graph, Var};

#[derive(Debug, Error)]
pub enum UaeError {
    #[error("{what}: expected {expected} columns, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("noise and label batches disagree: {z_rows} noise rows vs {y_rows} label rows")]
    RowMismatch { z_rows: usize, y_rows: usize },
    #[error("empty batch")]
    EmptyBatch,
}

/// A batch of paired natural and attacked examples with full provenance.
/// Row `i` of every field belongs to the same `(z, y)` draw.
#[derive(Debug, Clone)]
pub struct UaeBatch {
    /// Natural examples decoded from the unmodified seeds.
    pub x_g: Array2<f64>,
    /// Attacked examples decoded from the rewritten seeds.
    pub x_tilde: Array2<f64>,
    /// One-hot conditioning labels.
    pub labels: Array2<f64>,
    /// Original latent seeds.
    pub z: Array2<f64>,
    /// Rewritten latent seeds.
    pub z_a: Array2<f64>,
}

impl UaeBatch {
    pub fn len(&self) -> usize {
        self.x_g.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Recomputes both decodes from the stored provenance and checks they
    /// reproduce the stored examples exactly.
    pub fn verify_pairing(&self, gen: &Generator) -> bool {
        gen.decode(&self.z, &self.labels) == self.x_g
            && gen.decode(&self.z_a, &self.labels) == self.x_tilde
    }
}

fn check_inputs(
    noise_dim: usize,
    num_classes: usize,
    z: &Array2<f64>,
    y: &Array2<f64>,
) -> Result<(), UaeError> {
    if z.nrows() == 0 {
        return Err(UaeError::EmptyBatch);
    }
    if z.ncols() != noise_dim {
        return Err(UaeError::DimensionMismatch {
            what: "noise batch",
            expected: noise_dim,
            got: z.ncols(),
        });
    }
    if y.ncols() != num_classes {
        return Err(UaeError::DimensionMismatch {
            what: "label batch",
            expected: num_classes,
            got: y.ncols(),
        });
    }
    if z.nrows() != y.nrows() {
        return Err(UaeError::RowMismatch {
            z_rows: z.nrows(),
            y_rows: y.nrows(),
        });
    }
    Ok(())
}

/// Draws a standard-normal latent batch.
pub fn sample_noise<R: rand::Rng>(count: usize, noise_dim: usize, rng: &mut R) -> Array2<f64> {
    let normal = rand_distr::StandardNormal;
    Array2::from_shape_fn((count, noise_dim), |_| rng.sample(normal))
}

/// Decodes unmodified seeds into natural examples (evaluation statistics).
pub fn generate_natural(
    gen: &Generator,
    z: &Array2<f64>,
    y: &Array2<f64>,
) -> Result<Array2<f64>, UaeError> {
    check_inputs(gen.noise_dim, gen.embed.table.nrows(), z, y)?;
    Ok(gen.decode(z, y))
}

/// Rewrites seeds through the attacker (evaluation statistics).
pub fn perturb_seed(
    att: &Attacker,
    z: &Array2<f64>,
    y: &Array2<f64>,
) -> Result<Array2<f64>, UaeError> {
    check_inputs(
        att.out.b.ncols(),
        att.embed.table.nrows(),
        z,
        y,
    )?;
    Ok(att.perturb(z, y))
}

/// Decodes an explicit (seed, rewritten-seed) pair through the same
/// generator. Passing `z_a = z` collapses the pair: the attacked examples
/// equal the natural ones bit for bit.
pub fn generate_from_seeds(
    gen: &Generator,
    z: &Array2<f64>,
    z_a: &Array2<f64>,
    y: &Array2<f64>,
) -> Result<UaeBatch, UaeError> {
    check_inputs(gen.noise_dim, gen.embed.table.nrows(), z, y)?;
    check_inputs(gen.noise_dim, gen.embed.table.nrows(), z_a, y)?;
    Ok(UaeBatch {
        x_g: gen.decode(z, y),
        x_tilde: gen.decode(z_a, y),
        labels: y.clone(),
        z: z.clone(),
        z_a: z_a.clone(),
    })
}

/// Full attack-map evaluation: rewrite each seed with the attacker, then
/// decode both seeds with the generator (evaluation statistics throughout).
pub fn generate_uae(
    gen: &Generator,
    att: &Attacker,
    z: &Array2<f64>,
    y: &Array2<f64>,
) -> Result<UaeBatch, UaeError> {
    let z_a = perturb_seed(att, z, y)?;
    generate_from_seeds(gen, z, &z_a, y)
}

/// Graph nodes for one differentiable pass through the attack map, plus the
/// batch statistics each network recorded (empty under running statistics).
/// The natural and attacked decodes share one set of generator parameter
/// bindings, so both contribute gradient to the same variables.
pub struct UaeGraph {
    pub x_g: Var,
    pub x_tilde: Var,
    pub z_a: Var,
    pub gen_vars: GeneratorVars,
    pub att_vars: AttackerVars,
    /// Statistics recorded by the natural decode `G(z, y)`.
    pub gen_bn_natural: BnUpdates,
    /// Statistics recorded by the attacked decode `G(A(z, y), y)`.
    pub gen_bn_attacked: BnUpdates,
    pub att_bn: BnUpdates,
}

/// Builds the differentiable chain `z → z_a = A(z, y) → x̃ = G(z_a, y)`
/// together with the paired natural decode `x_g = G(z, y)`.
///
/// `gen_trainable` / `att_trainable` control which parameter sets collect
/// gradient; batch-vs-running statistics are selected by `stats`. In batch
/// mode each decode computes its own normalization statistics, and the
/// attacker's gradient flows through the attacked decode's statistics.
#[allow(clippy::too_many_arguments)]
pub fn uae_graph(
    g: &mut Graph,
    gen: &Generator,
    gen_trainable: bool,
    att: &Attacker,
    att_trainable: bool,
    z: &Array2<f64>,
    y: &Array2<f64>,
    stats: Stats,
) -> Result<UaeGraph, UaeError> {
    check_inputs(gen.noise_dim, gen.embed.table.nrows(), z, y)?;
    let gen_vars = gen.bind(g, gen_trainable);
    let att_vars = att.bind(g, att_trainable);
    let zv = g.constant(z.clone());
    let yv = g.constant(y.clone());
    let (z_a, att_bn) = att.forward_graph(g, &att_vars, zv, yv, stats);
    let (x_g, gen_bn_natural) = gen.forward_graph(g, &gen_vars, zv, yv, stats);
    let (x_tilde, gen_bn_attacked) = gen.forward_graph(g, &gen_vars, z_a, yv, stats);
    Ok(UaeGraph {
        x_g,
        x_tilde,
        z_a,
        gen_vars,
        att_vars,
        gen_bn_natural,
        gen_bn_attacked,
        att_bn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_models, one_hot, NetSpec};
    use crate::tensor::{finite_difference_gradient, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tiny_spec() -> NetSpec {
        NetSpec {
            data_dim: 4,
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

    fn fixture(seed: u64) -> (crate::nets::ModelBundle, Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let models = build_models(&tiny_spec(), 3, &mut rng).unwrap();
        let z = sample_noise(5, 3, &mut rng);
        let y = one_hot(&[0, 1, 2, 1, 0], 3);
        (models, z, y)
    }

    #[test]
    fn natural_generation_is_deterministic_and_shaped() {
        let (models, z, y) = fixture(1);
        let a = generate_natural(&models.g, &z, &y).unwrap();
        let b = generate_natural(&models.g, &z, &y).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (5, 4));
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let (models, z, y) = fixture(2);
        let bad_z = Array2::zeros((5, 7));
        assert!(matches!(
            generate_natural(&models.g, &bad_z, &y),
            Err(UaeError::DimensionMismatch { what: "noise batch", .. })
        ));
        let bad_y = one_hot(&[0; 5], 9);
        assert!(matches!(
            generate_natural(&models.g, &z, &bad_y),
            Err(UaeError::DimensionMismatch { what: "label batch", .. })
        ));
        let short_y = one_hot(&[0, 1], 3);
        assert!(matches!(
            generate_natural(&models.g, &z, &short_y),
            Err(UaeError::RowMismatch { .. })
        ));
        assert!(matches!(
            generate_natural(&models.g, &Array2::zeros((0, 3)), &one_hot(&[], 3)),
            Err(UaeError::EmptyBatch)
        ));
    }

    #[test]
    fn perturbed_seed_keeps_shape_and_determinism() {
        let (models, z, y) = fixture(3);
        let za1 = perturb_seed(&models.a, &z, &y).unwrap();
        let za2 = perturb_seed(&models.a, &z, &y).unwrap();
        assert_eq!(za1, za2);
        assert_eq!(za1.dim(), z.dim());
        // A generic random attacker actually moves the seeds.
        assert!((&za1 - &z).iter().any(|&d| d.abs() > 1e-6));
    }

    #[test]
    fn forcing_identity_seeds_collapses_the_pair_exactly() {
        let (models, z, y) = fixture(4);
        let batch = generate_from_seeds(&models.g, &z, &z, &y).unwrap();
        assert_eq!(batch.x_g, batch.x_tilde);
    }

    #[test]
    fn decoding_is_continuous_at_the_identity_limit() {
        let (models, z, y) = fixture(5);
        let batch = generate_uae(&models.g, &models.a, &z, &y).unwrap();
        // Shrink the seed rewrite toward zero; the attacked decode must
        // approach the natural decode.
        let blend = &z + &((&batch.z_a - &z) * 1e-7);
        let near = generate_from_seeds(&models.g, &z, &blend, &y).unwrap();
        let max_gap = (&near.x_tilde - &near.x_g)
            .iter()
            .fold(0.0f64, |m, &d| m.max(d.abs()));
        assert!(max_gap < 1e-4, "gap {max_gap}");
    }

    #[test]
    fn uae_batch_carries_consistent_provenance() {
        let (models, z, y) = fixture(6);
        let batch = generate_uae(&models.g, &models.a, &z, &y).unwrap();
        assert_eq!(batch.len(), 5);
        assert!(!batch.is_empty());
        assert!(batch.verify_pairing(&models.g));
        // Distinct attacker parameters change x_tilde but never x_g.
        let mut rng = ChaCha20Rng::seed_from_u64(999);
        let other = build_models(&tiny_spec(), 3, &mut rng).unwrap();
        let batch2 = generate_uae(&models.g, &other.a, &z, &y).unwrap();
        assert_eq!(batch.x_g, batch2.x_g);
        assert_ne!(batch.x_tilde, batch2.x_tilde);
    }

    #[test]
    fn graph_pass_matches_eval_helpers_under_running_stats() {
        let (models, z, y) = fixture(7);
        let batch = generate_uae(&models.g, &models.a, &z, &y).unwrap();
        let mut g = Graph::new();
        let parts =
            uae_graph(&mut g, &models.g, false, &models.a, false, &z, &y, Stats::Running)
                .unwrap();
        assert_eq!(g.value(parts.x_g), &batch.x_g);
        assert_eq!(g.value(parts.x_tilde), &batch.x_tilde);
        assert_eq!(g.value(parts.z_a), &batch.z_a);
        assert!(parts.gen_bn_natural.is_empty());
        assert!(parts.att_bn.is_empty());
    }

    #[test]
    fn batch_stats_differ_from_running_stats_and_are_recorded() {
        let (models, z, y) = fixture(8);
        let mut g = Graph::new();
        let parts =
            uae_graph(&mut g, &models.g, false, &models.a, false, &z, &y, Stats::Batch).unwrap();
        assert!(!parts.gen_bn_natural.is_empty());
        assert!(!parts.gen_bn_attacked.is_empty());
        assert!(!parts.att_bn.is_empty());
        let eval = generate_uae(&models.g, &models.a, &z, &y).unwrap();
        assert_ne!(g.value(parts.x_tilde), &eval.x_tilde);
    }

    #[test]
    fn attacker_gradient_through_the_full_chain_matches_finite_differences() {
        let (mut models, z, y) = fixture(9);
        let scalar_of = |models: &crate::nets::ModelBundle| {
            let mut g = Graph::new();
            let parts =
                uae_graph(&mut g, &models.g, false, &models.a, true, &z, &y, Stats::Batch)
                    .unwrap();
            // Cross-entropy of the classifier on the attacked decode: the
            // scalar every training-time attacker update ascends.
            let cv = models.c.bind(&mut g, false);
            let logits = models.c.logits_graph(&mut g, &cv, parts.x_tilde);
            let yv = g.constant(y.clone());
            let loss = g.cross_entropy(logits, yv);
            (g, parts, loss)
        };

        let (mut g, parts, loss) = scalar_of(&models);
        g.backward(loss);
        let flat = parts.att_vars.flat();
        // Analytic gradients for two attacker parameter sets, one early and
        // one late in the chain.
        for (pick, label) in [(0usize, "embedding"), (flat.len() - 2, "output weight")] {
            let analytic = g.grad(flat[pick]).clone();
            let norm: f64 = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm > 1e-10, "{label} gradient vanished");
            let base = models.a.params()[pick].clone();
            let numeric = finite_difference_gradient(
                |p| {
                    *models.a.params_mut()[pick] = p.clone();
                    let (g2, _, l2) = scalar_of(&models);
                    let v = g2.value(l2)[[0, 0]];
                    v
                },
                &base,
                1e-5,
            );
            *models.a.params_mut()[pick] = base;
            let err = max_relative_error(&analytic, &numeric);
            assert!(err < 1e-3, "{label} rel err {err}");
        }
    }

    #[test]
    fn perturb_seed_scalar_gradient_matches_finite_differences() {
        let (mut models, z, y) = fixture(10);
        let scalar_of = |models: &crate::nets::ModelBundle| {
            let mut g = Graph::new();
            let av = models.a.bind(&mut g, true);
            let zv = g.constant(z.clone());
            let yv = g.constant(y.clone());
            let (z_a, _) = models.a.forward_graph(&mut g, &av, zv, yv, Stats::Batch);
            let sq = g.square(z_a);
            let loss = g.mean_all(sq);
            (g, av, loss)
        };
        let (mut g, av, loss) = scalar_of(&models);
        g.backward(loss);
        let pick = 1; // stem weight
        let analytic = g.grad(av.flat()[pick]).clone();
        let base = models.a.params()[pick].clone();
        let numeric = finite_difference_gradient(
            |p| {
                *models.a.params_mut()[pick] = p.clone();
                let (g2, _, l2) = scalar_of(&models);
                let v = g2.value(l2)[[0, 0]];
                v
            },
            &base,
            1e-5,
        );
        *models.a.params_mut()[pick] = base;
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-3, "rel err {err}");
    }
}
