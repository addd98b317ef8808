//! Noised ground-truth moments for contrastive denoising.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{MomentSpan, Polarity};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Noise magnitude multiplier `delta2`.
    pub delta: f64,
    pub pos_replicas: usize,
    pub neg_replicas: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            delta: 1.0,
            pos_replicas: 2,
            neg_replicas: 2,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("noise delta must be positive, got {}", self.delta)));
        }
        Ok(())
    }

    pub fn num_groups(&self) -> usize {
        self.pos_replicas.max(self.neg_replicas)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisedMoment {
    pub span: MomentSpan,
    pub gt_index: usize,
    pub polarity: Polarity,
    /// Replica group; queries only attend within their group.
    pub group: usize,
    /// Sampled noise scale.
    pub lambda: f64,
    /// Signs applied to the center and span offsets.
    pub signs: (f64, f64),
}

/// Offset magnitude `delta2 * lambda * s / 2`, shared by center and span.
pub fn noise_magnitude(span: f64, delta: f64, lambda: f64) -> f64 {
    delta * lambda * span / 2.0
}

/// Applies signed offsets and clamps into a valid span of at least `min_span`.
pub fn apply_noise(m: &MomentSpan, magnitude: f64, signs: (f64, f64), min_span: f64) -> MomentSpan {
    let span = (m.span + signs.1 * magnitude).clamp(min_span.min(1.0), 1.0);
    let center = (m.center + signs.0 * magnitude).clamp(span / 2.0, 1.0 - span / 2.0);
    MomentSpan { center, span }
}

/// Perturbs every moment once with the scale range of `polarity`:
/// `lambda ~ U[0,1]` for positives and `U[1,2]` for negatives.
pub fn perturb_moments(
    moments: &[MomentSpan],
    polarity: Polarity,
    delta: f64,
    min_span: f64,
    group: usize,
    rng: &mut impl Rng,
) -> Vec<NoisedMoment> {
    moments
        .iter()
        .enumerate()
        .map(|(gt_index, m)| {
            let lambda = match polarity {
                Polarity::Positive => rng.random_range(0.0..=1.0),
                Polarity::HardNegative => rng.random_range(1.0..=2.0),
            };
            let mut sign = || if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let signs = (sign(), sign());
            NoisedMoment {
                span: apply_noise(m, noise_magnitude(m.span, delta, lambda), signs, min_span),
                gt_index,
                polarity,
                group,
                lambda,
                signs,
            }
        })
        .collect()
}

/// All replica groups for one sample. Group `r` holds the `r`-th positive
/// and `r`-th negative replica of every moment.
pub fn build_noise_groups(moments: &[MomentSpan], cfg: &NoiseConfig, num_clips: usize, rng: &mut impl Rng) -> Vec<NoisedMoment> {
    let min_span = 1.0 / num_clips.max(1) as f64;
    let mut out = Vec::new();
    for r in 0..cfg.num_groups() {
        if r < cfg.pos_replicas {
            out.extend(perturb_moments(moments, Polarity::Positive, cfg.delta, min_span, r, rng));
        }
        if r < cfg.neg_replicas {
            out.extend(perturb_moments(moments, Polarity::HardNegative, cfg.delta, min_span, r, rng));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn magnitude_spot_value() {
        assert!((noise_magnitude(0.4, 1.0, 0.5) - 0.1).abs() < 1e-15);
        let noised = apply_noise(&MomentSpan::new(0.5, 0.4).unwrap(), 0.1, (1.0, -1.0), 0.0);
        assert!((noised.center - 0.6).abs() < 1e-15);
        assert!((noised.span - 0.3).abs() < 1e-15);
    }

    #[test]
    fn tiny_delta_is_identity() {
        let m = vec![MomentSpan::new(0.3, 0.2).unwrap(), MomentSpan::new(0.7, 0.1).unwrap()];
        let out = perturb_moments(&m, Polarity::HardNegative, 0.0, 0.0, 0, &mut ChaCha8Rng::seed_from_u64(1));
        for (o, g) in out.iter().zip(&m) {
            assert_eq!(o.span, *g);
        }
        assert!(perturb_moments(&[], Polarity::Positive, 1.0, 0.0, 0, &mut ChaCha8Rng::seed_from_u64(1)).is_empty());
    }

    #[test]
    fn magnitude_ranges_by_polarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let pos: f64 = rng.random_range(0.0..=1.0);
            let neg: f64 = rng.random_range(1.0..=2.0);
            assert!(noise_magnitude(0.3, 1.0, pos) <= 0.15);
            let n = noise_magnitude(0.3, 1.0, neg);
            assert!((0.15..=0.3).contains(&n));
        }
        let m = [MomentSpan::new(0.5, 0.3).unwrap()];
        for o in perturb_moments(&m, Polarity::Positive, 1.0, 0.0, 0, &mut rng) {
            assert!((0.0..=1.0).contains(&o.lambda));
        }
        for o in perturb_moments(&m, Polarity::HardNegative, 1.0, 0.0, 0, &mut rng) {
            assert!((1.0..=2.0).contains(&o.lambda));
        }
    }

    #[test]
    fn groups_hold_one_pos_and_neg_per_moment() {
        let m = vec![MomentSpan::new(0.3, 0.2).unwrap(), MomentSpan::new(0.7, 0.1).unwrap()];
        let out = build_noise_groups(&m, &NoiseConfig::default(), 32, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out.len(), 8);
        for r in 0..2 {
            let g: Vec<_> = out.iter().filter(|n| n.group == r).collect();
            assert_eq!(g.iter().filter(|n| n.polarity == Polarity::Positive).count(), 2);
            assert_eq!(g.iter().filter(|n| n.polarity == Polarity::HardNegative).count(), 2);
        }
        let again = build_noise_groups(&m, &NoiseConfig::default(), 32, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out, again);
    }

    #[test]
    fn config_rejects_non_positive_delta() {
        assert!(NoiseConfig { delta: 0.0, ..Default::default() }.validate().is_err());
        assert!(NoiseConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn clamped_spans_are_valid(c in 0.0f64..1.0, s in 0.01f64..1.0, seed in any::<u64>(), delta in 0.01f64..3.0) {
            let span = s.min(2.0 * c.min(1.0 - c)).max(0.01);
            let c = c.clamp(span / 2.0, 1.0 - span / 2.0);
            let m = [MomentSpan { center: c, span }];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for pol in [Polarity::Positive, Polarity::HardNegative] {
                for o in perturb_moments(&m, pol, delta, 1.0 / 32.0, 0, &mut rng) {
                    prop_assert!(MomentSpan::new(o.span.center, o.span.span).is_ok());
                    prop_assert!(o.span.span >= 1.0 / 32.0 - 1e-12);
                    prop_assert!(o.span.start() >= -1e-12 && o.span.end() <= 1.0 + 1e-12);
                }
            }
        }
    }
}
