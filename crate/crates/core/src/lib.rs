//! Semi-supervised adversarial training with a learned generative attacker.
//!
//! The library trains a robust classifier `C` inside a four-network game:
//!
//! * a conditional generator `G(z, y)` that maps noise and a class label to an
//!   example,
//! * a latent attacker `A(z, y)` that perturbs the noise seed so that the
//!   decoded example `G(A(z, y), y)` is hard for the classifier,
//! * a conditional discriminator `D(x, y)` that aligns three joint
//!   distributions — real pairs, generated pairs, and classifier-pseudo-labeled
//!   pairs — through a shared adversarial value, and
//! * the classifier `C` itself, regularized by a slow exponential-moving-average
//!   teacher and optionally hardened with a pixel-space attack on labeled data.
//!
//! Besides the training stack, [`theory`] provides exact, brute-force checks of
//! the alignment guarantees (optimal-discriminator form, attacker equivalence,
//! total-variation generalization bounds) on small discrete instances, and
//! [`eval`] measures natural/robust accuracy and feature-space alignment.
//!
//! Everything is CPU-only, `f64`, and deterministic for a fixed seed: given the
//! same config and seed, training produces byte-identical metrics and
//! checkpoints.

#![deny(unsafe_code)]

pub mod attacks;
pub mod config;
pub mod datasets;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod tensor;
pub mod theory;
pub mod trainer;
pub mod uae;
