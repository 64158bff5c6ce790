//! Optional perturbation of agent-to-server updates.
//!
//! Updates are clipped to an L2 sensitivity bound and get independent
//! Laplace(0, clip_norm / epsilon) noise per coordinate. `epsilon` is a
//! utility trade-off knob here: there is deliberately no accounting across
//! rounds, so this is not a formal (eps, delta)-DP guarantee.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyConfig {
    pub enabled: bool,
    pub epsilon: f64,
    /// L2 sensitivity bound applied before noising.
    pub clip_norm: f64,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        PrivacyConfig {
            enabled: false,
            epsilon: 0.1,
            clip_norm: 1.0,
        }
    }
}

/// Rescale `update` onto the L2 ball of radius `clip_norm` if it lies outside.
pub fn clip(update: &ParamVector, clip_norm: f64) -> ParamVector {
    debug_assert!(clip_norm > 0.0);
    let norm = update.l2_norm();
    if norm <= clip_norm {
        update.clone()
    } else {
        update.scale(clip_norm / norm)
    }
}

/// One draw from Laplace(0, b) via inverse CDF.
fn laplace(rng: &mut ChaCha8Rng, b: f64) -> f64 {
    let u: f64 = rng.random::<f64>() - 0.5;
    // Keep the argument of ln strictly positive at the u = -0.5 edge.
    let t = (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE);
    -b * u.signum() * t.ln()
}

/// Clip, then add independent Laplace(0, clip_norm / epsilon) noise per
/// coordinate. Deterministic for a fixed generator state.
pub fn perturb(update: &ParamVector, cfg: &PrivacyConfig, rng: &mut ChaCha8Rng) -> ParamVector {
    debug_assert!(cfg.enabled && cfg.epsilon > 0.0);
    let mut out = clip(update, cfg.clip_norm);
    let b = cfg.clip_norm / cfg.epsilon;
    for v in out.values_mut() {
        *v += laplace(rng, b);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn clip_inside_ball_is_identity() {
        let u = ParamVector::single_row(vec![0.3, 0.4]); // norm 0.5
        assert_eq!(clip(&u, 1.0), u);
    }

    #[test]
    fn clip_rescales_to_bound() {
        let u = ParamVector::single_row(vec![3.0, 4.0]); // norm 5
        let c = clip(&u, 1.0);
        assert!((c.values()[0] - 0.6).abs() < 1e-15);
        assert!((c.values()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_zero_is_zero() {
        let u = ParamVector::zeros(1, 3);
        assert_eq!(clip(&u, 1.0), u);
    }

    #[test]
    fn perturb_is_deterministic_for_fixed_seed() {
        let u = ParamVector::single_row(vec![0.1, 0.2, 0.3]);
        let cfg = PrivacyConfig {
            enabled: true,
            epsilon: 0.1,
            clip_norm: 1.0,
        };
        let a = perturb(&u, &cfg, &mut ChaCha8Rng::seed_from_u64(7));
        let b = perturb(&u, &cfg, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }

    #[test]
    fn huge_epsilon_approaches_clipped_update() {
        let u = ParamVector::single_row(vec![0.1, 0.2]);
        let cfg = PrivacyConfig {
            enabled: true,
            epsilon: 1e12,
            clip_norm: 1.0,
        };
        let out = perturb(&u, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(out.max_abs_diff(&u) < 1e-9);
    }

    #[test]
    fn laplace_variance_matches_theory() {
        // Monte-Carlo oracle: Var[Laplace(0, b)] = 2 b^2 = 2 at b = 1.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let x = laplace(&mut rng, 1.0);
            sum += x;
            sum_sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!((1.9..=2.1).contains(&var), "empirical variance {}", var);
    }

    #[test]
    fn noise_magnitude_monotone_in_inverse_epsilon() {
        // Same seed stream: mean |noise| at eps = 0.01 exceeds eps = 0.1.
        let u = ParamVector::zeros(1, 64);
        let mean_abs = |eps: f64| {
            let cfg = PrivacyConfig {
                enabled: true,
                epsilon: eps,
                clip_norm: 1.0,
            };
            let out = perturb(&u, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
            out.values().iter().map(|v| v.abs()).sum::<f64>() / 64.0
        };
        assert!(mean_abs(0.01) > mean_abs(0.1));
    }

    #[test]
    fn perturb_is_unbiased_around_clipped_update() {
        // E[perturb(u)] = clip(u): empirical mean within 3 sigma per coordinate.
        let u = ParamVector::single_row(vec![0.25, -0.4]);
        let cfg = PrivacyConfig {
            enabled: true,
            epsilon: 1.0,
            clip_norm: 1.0,
        };
        let n = 100_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut acc = vec![0.0; 2];
        for _ in 0..n {
            let out = perturb(&u, &cfg, &mut rng);
            acc[0] += out.values()[0];
            acc[1] += out.values()[1];
        }
        // Var of a single draw is 2 b^2 = 2; the mean of n draws has
        // sigma = sqrt(2 / n).
        let sigma = (2.0 / n as f64).sqrt();
        for (a, expect) in acc.iter().zip(u.values()) {
            let mean = a / n as f64;
            assert!(
                (mean - expect).abs() < 3.0 * sigma,
                "mean {} vs {} (3 sigma {})",
                mean,
                expect,
                3.0 * sigma
            );
        }
    }
}
