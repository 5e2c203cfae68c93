//! Auxiliary-noise input: a convex pixel-space blend of the raw image with a
//! uniform `[0, 255]` noise field, applied before normalization.

use crate::data::normalize_raw;
use crate::diffcore::{Shape4, Tensor4};
use crate::error::{Error, Result};
use crate::networks::Generator;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const NOISE_MAX: f64 = 255.0;

/// `alpha` is the share of the raw image in the blended input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub alpha: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(alpha: f64, seed: u64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(NoiseSpec { alpha, seed })
    }
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Uniform `[0, 255]` field, one draw per pixel per channel.
pub fn noise_field(shape: Shape4, seed: u64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.len()).map(|_| rng.random_range(0.0..=NOISE_MAX)).collect();
    Tensor4::from_vec(shape, data).expect("field length matches shape")
}

/// `x·α + (1-α)·n`, held inside `[min(x, n), max(x, n)]` against rounding.
pub fn mix_with_field(x_raw: &Tensor4, noise: &Tensor4, alpha: f64) -> Result<Tensor4> {
    check_alpha(alpha)?;
    if x_raw.shape() != noise.shape() {
        return Err(Error::shape("mix_noise", x_raw.shape(), noise.shape()));
    }
    let data = x_raw
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&x, &n)| (x * alpha + (1.0 - alpha) * n).clamp(x.min(n), x.max(n)))
        .collect();
    Tensor4::from_vec(x_raw.shape(), data)
}

pub fn mix_noise(x_raw: &Tensor4, spec: &NoiseSpec) -> Result<Tensor4> {
    check_alpha(spec.alpha)?;
    if x_raw.data().iter().any(|v| !(0.0..=NOISE_MAX).contains(v)) {
        return Err(Error::invalid("raw image values must lie in [0, 255]"));
    }
    mix_with_field(x_raw, &noise_field(x_raw.shape(), spec.seed), spec.alpha)
}

/// Translates `x_raw` once per alpha, reusing one noise field so outputs
/// differ only through alpha.
pub fn alpha_sweep(g: &Generator, x_raw: &Tensor4, alphas: &[f64], seed: u64) -> Result<Vec<Tensor4>> {
    for &a in alphas {
        check_alpha(a)?;
    }
    let field = noise_field(x_raw.shape(), seed);
    alphas
        .iter()
        .map(|&a| {
            let input = if a == 1.0 {
                x_raw.clone()
            } else {
                mix_with_field(x_raw, &field, a)?
            };
            g.forward(&normalize_raw(&input))
        })
        .collect()
}

/// How alpha is chosen for each training batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum NoiseSchedule {
    Off,
    Fixed(f64),
    /// Alpha drawn uniformly from `[lo, hi]` per batch.
    Range(f64, f64),
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::Fixed(0.9)
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseSchedule::Off => Ok(()),
            NoiseSchedule::Fixed(a) => check_alpha(a),
            NoiseSchedule::Range(lo, hi) => {
                check_alpha(lo)?;
                check_alpha(hi)?;
                if lo > hi {
                    return Err(Error::invalid(format!("alpha range [{lo}, {hi}] is empty")));
                }
                Ok(())
            }
        }
    }

    pub fn draw_alpha(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            NoiseSchedule::Off => 1.0,
            NoiseSchedule::Fixed(a) => a,
            NoiseSchedule::Range(lo, hi) if lo == hi => lo,
            NoiseSchedule::Range(lo, hi) => rng.random_range(lo..=hi),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(v: f64) -> Tensor4 {
        Tensor4::full(Shape4::new(1, 3, 4, 4), v)
    }

    #[test]
    fn alpha_one_is_identity() {
        let mut x = image(0.0);
        x.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i * 5) as f64);
        assert_eq!(mix_noise(&x, &NoiseSpec::new(1.0, 3).unwrap()).unwrap(), x);
    }

    #[test]
    fn alpha_zero_is_pure_noise() {
        let x = image(77.0);
        let out = mix_noise(&x, &NoiseSpec::new(0.0, 3).unwrap()).unwrap();
        assert_eq!(out, noise_field(x.shape(), 3));
    }

    #[test]
    fn half_blend_of_100_and_200() {
        let x = Tensor4::full(Shape4::new(1, 1, 1, 1), 100.0);
        let n = Tensor4::full(Shape4::new(1, 1, 1, 1), 200.0);
        assert_eq!(mix_with_field(&x, &n, 0.5).unwrap().item(), 150.0);
    }

    #[test]
    fn alpha_out_of_range_rejected() {
        assert!(NoiseSpec::new(1.5, 0).is_err());
        assert!(mix_noise(&image(1.0), &NoiseSpec { alpha: -0.1, seed: 0 }).is_err());
        assert!(mix_noise(&image(300.0), &NoiseSpec { alpha: 0.5, seed: 0 }).is_err());
    }

    #[test]
    fn schedules() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(NoiseSchedule::Off.draw_alpha(&mut rng), 1.0);
        assert_eq!(NoiseSchedule::Fixed(0.9).draw_alpha(&mut rng), 0.9);
        let a = NoiseSchedule::Range(0.6, 0.8).draw_alpha(&mut rng);
        assert!((0.6..=0.8).contains(&a));
        assert!(NoiseSchedule::Range(0.8, 0.6).validate().is_err());
    }
}
