//! Adversarial, cycle-consistency and perceptual objectives, and their
//! weighted composition into the generator objective.
//!
//! Each loss has a value-level form (plain tensors in, scalar out) and a tape
//! form in [`tape`] used by the trainer and the gradient checker.

use crate::diffcore::{ops, Tensor4};
use crate::error::{Error, Result};
use crate::networks::{PatchGrid, PerceptionNet};
use serde::{Deserialize, Serialize};

pub const DEFAULT_GAMMA: f64 = 10.0;
pub const DEFAULT_SIGMA: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the cycle-consistency term.
    pub gamma: f64,
    /// Weight of the perceptual term.
    pub sigma: f64,
    /// Per-tap weights of the perceptual sum.
    pub lambda_n: Vec<f64>,
    /// Weights of the coarse and fine adversarial terms.
    pub coarse_fine_mix: (f64, f64),
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma: DEFAULT_GAMMA,
            sigma: DEFAULT_SIGMA,
            lambda_n: vec![1.0; 4],
            coarse_fine_mix: (0.5, 0.5),
        }
    }
}

impl LossWeights {
    pub fn validate(&self, taps: usize) -> Result<()> {
        if !(self.gamma >= 0.0 && self.sigma >= 0.0) {
            return Err(Error::invalid("gamma and sigma must be non-negative"));
        }
        if self.lambda_n.len() != taps {
            return Err(Error::invalid(format!(
                "lambda_n has {} entries but the perception net has {taps} taps",
                self.lambda_n.len()
            )));
        }
        let (c, f) = self.coarse_fine_mix;
        if c < 0.0 || f < 0.0 || ((c + f) - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("coarse_fine_mix ({c}, {f}) must be non-negative and sum to 1")));
        }
        Ok(())
    }

    /// Mix with a disabled head's weight moved onto the remaining one.
    pub fn effective_mix(&self, use_coarse: bool, use_fine: bool) -> (f64, f64) {
        match (use_coarse, use_fine) {
            (true, true) => self.coarse_fine_mix,
            (true, false) => (1.0, 0.0),
            (false, true) => (0.0, 1.0),
            (false, false) => (0.0, 0.0),
        }
    }
}

fn check_grid(op: &'static str, a: &PatchGrid, b: &PatchGrid) -> Result<()> {
    ops::check_same(op, a.tensor(), b.tensor())
}

/// `-mean(log real) - mean(log(1 - fake))`, each log clamped at 1e-12.
pub fn adversarial_loss_d(real: &PatchGrid, fake: &PatchGrid) -> Result<f64> {
    check_grid("adversarial_loss_d", real, fake)?;
    Ok(ops::neg_mean_log(real.tensor(), false) + ops::neg_mean_log(fake.tensor(), true))
}

/// Non-saturating generator loss `-mean(log fake)`.
pub fn adversarial_loss_g(fake: &PatchGrid) -> f64 {
    ops::neg_mean_log(fake.tensor(), false)
}

pub fn cycle_loss(x: &Tensor4, rec_x: &Tensor4, y: &Tensor4, rec_y: &Tensor4) -> Result<f64> {
    Ok(ops::l1_mean(rec_x, x)? + ops::l1_mean(rec_y, y)?)
}

/// `Σₙ λₙ · mean|Φₙ(y) - Φₙ(g_x)|` between an unpaired target-domain image and a translation.
pub fn perceptual_loss(p: &PerceptionNet, y_unpaired: &Tensor4, g_x: &Tensor4, lambda_n: &[f64]) -> Result<f64> {
    ops::check_same("perceptual_loss", y_unpaired, g_x)?;
    if lambda_n.len() != p.tap_count() {
        return Err(Error::shape("perceptual_loss lambda_n", p.tap_count(), lambda_n.len()));
    }
    let fy = p.features(y_unpaired)?;
    let fg = p.features(g_x)?;
    let mut total = 0.0;
    for ((a, b), l) in fy.iter().zip(&fg).zip(lambda_n) {
        total += l * ops::l1_mean(a, b)?;
    }
    Ok(total)
}

/// `(mix_c·adv_coarse + mix_f·adv_fine) + γ·cyc + σ·percep`.
pub fn total_generator_objective(adv_coarse: f64, adv_fine: f64, cyc: f64, percep: f64, w: &LossWeights) -> f64 {
    let (mc, mf) = w.coarse_fine_mix;
    (mc * adv_coarse + mf * adv_fine) + w.gamma * cyc + w.sigma * percep
}

/// Outcome of one step in one translation direction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    /// Mixed adversarial term of the generator.
    pub adv_g: f64,
    pub adv_d_coarse: f64,
    pub adv_d_fine: f64,
    pub cyc: f64,
    pub percep: f64,
    pub total_g: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    /// Photo → caricature.
    pub ab: DirectionReport,
    /// Caricature → photo.
    pub ba: DirectionReport,
}

impl LossReport {
    pub fn total_g(&self) -> f64 {
        self.ab.total_g + self.ba.total_g
    }

    pub fn cyc(&self) -> f64 {
        self.ab.cyc + self.ba.cyc
    }

    pub fn all_finite(&self) -> bool {
        [self.ab, self.ba].iter().all(|d| {
            [d.adv_g, d.adv_d_coarse, d.adv_d_fine, d.cyc, d.percep, d.total_g]
                .iter()
                .all(|v| v.is_finite())
        })
    }
}

/// Tape forms of the losses.
pub mod tape {
    use super::*;
    use crate::diffcore::{Graph, NodeId};
    use crate::networks::perception::BoundPerception;

    pub fn adversarial_d(g: &mut Graph, real: NodeId, fake: NodeId) -> Result<NodeId> {
        ops::check_same("adversarial_loss_d", g.value(real), g.value(fake))?;
        let r = g.neg_mean_log(real, false);
        let f = g.neg_mean_log(fake, true);
        g.weighted_sum(&[(r, 1.0), (f, 1.0)])
    }

    pub fn adversarial_g(g: &mut Graph, fake: NodeId) -> NodeId {
        g.neg_mean_log(fake, false)
    }

    pub fn cycle(g: &mut Graph, x: NodeId, rec_x: NodeId, y: NodeId, rec_y: NodeId) -> Result<NodeId> {
        let a = g.l1_mean(rec_x, x)?;
        let b = g.l1_mean(rec_y, y)?;
        g.weighted_sum(&[(a, 1.0), (b, 1.0)])
    }

    /// `target_features` are constants (features of the unpaired target image).
    pub fn perceptual(
        g: &mut Graph,
        p: &BoundPerception<'_>,
        target_features: &[NodeId],
        g_x: NodeId,
        lambda_n: &[f64],
    ) -> Result<NodeId> {
        let feats = p.features(g, g_x)?;
        if feats.len() != lambda_n.len() || feats.len() != target_features.len() {
            return Err(Error::shape("perceptual_loss lambda_n", feats.len(), lambda_n.len()));
        }
        let mut terms = Vec::with_capacity(feats.len());
        for ((&t, &f), &l) in target_features.iter().zip(&feats).zip(lambda_n) {
            terms.push((g.l1_mean(t, f)?, l));
        }
        g.weighted_sum(&terms)
    }

    pub fn total(
        g: &mut Graph,
        adv_coarse: NodeId,
        adv_fine: NodeId,
        cyc: NodeId,
        percep: NodeId,
        w: &LossWeights,
    ) -> Result<NodeId> {
        let (mc, mf) = w.coarse_fine_mix;
        g.weighted_sum(&[(adv_coarse, mc), (adv_fine, mf), (cyc, w.gamma), (percep, w.sigma)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Shape4;

    fn grid(v: f64, g: usize) -> PatchGrid {
        PatchGrid(Tensor4::full(Shape4::new(1, 1, g, g), v))
    }

    #[test]
    fn discriminator_loss_values() {
        let l = adversarial_loss_d(&grid(0.5, 4), &grid(0.5, 4)).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((l - 1.3863).abs() < 1e-4);
        let l = adversarial_loss_d(&grid(0.9, 16), &grid(0.1, 16)).unwrap();
        assert!((l - (-2.0 * 0.9f64.ln())).abs() < 1e-12);
        assert!((l - 0.2107).abs() < 1e-4);
        let l = adversarial_loss_d(&grid(1.0 - 1e-15, 4), &grid(1e-15, 4)).unwrap();
        assert!(l < 1e-12);
        assert!(adversarial_loss_d(&grid(0.5, 4), &grid(0.5, 16)).is_err());
    }

    #[test]
    fn generator_loss_values() {
        assert!((adversarial_loss_g(&grid(0.5, 4)) - 2f64.ln()).abs() < 1e-12);
        assert!((adversarial_loss_g(&grid(0.25, 4)) - 4f64.ln()).abs() < 1e-12);
        assert!(adversarial_loss_g(&grid(1.0 - 1e-15, 4)) < 1e-12);
        assert!(adversarial_loss_g(&grid(0.6, 4)) < adversarial_loss_g(&grid(0.4, 4)));
    }

    #[test]
    fn log_clamp_keeps_losses_finite() {
        let l = adversarial_loss_d(&grid(0.0, 4), &grid(1.0, 4)).unwrap();
        assert!(l.is_finite());
        assert!((l - 2.0 * -(1e-12f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn cycle_loss_values() {
        let x = Tensor4::full(Shape4::new(1, 3, 4, 4), 0.1);
        let y = Tensor4::full(Shape4::new(1, 3, 4, 4), -0.3);
        assert_eq!(cycle_loss(&x, &x, &y, &y).unwrap(), 0.0);
        let l = cycle_loss(&x, &x.map(|v| v + 0.5), &y, &y.map(|v| v - 0.5)).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        assert!(cycle_loss(&x, &Tensor4::zeros(Shape4::new(1, 3, 4, 2)), &y, &y).is_err());
    }

    #[test]
    fn cycle_loss_random_two_by_two_matches_brute_force() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![0.2, -0.7, 0.9, 0.0]).unwrap();
        let rx = Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![0.1, -0.2, 1.0, -0.4]).unwrap();
        let y = Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![-0.5, 0.5, 0.3, 0.8]).unwrap();
        let ry = Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![-0.5, 0.1, 0.6, 0.2]).unwrap();
        // |0.1|+|0.5|+|0.1|+|0.4| = 1.1 → 0.275 ; |0|+|0.4|+|0.3|+|0.6| = 1.3 → 0.325
        assert!((cycle_loss(&x, &rx, &y, &ry).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn total_composition() {
        let w = LossWeights::default();
        assert_eq!(total_generator_objective(0.0, 0.0, 0.0, 0.0, &w), 0.0);
        assert!((total_generator_objective(1.0, 1.0, 0.2, 0.1, &w) - 3.2).abs() < 1e-12);
        let zero = LossWeights {
            gamma: 0.0,
            sigma: 0.0,
            ..w
        };
        assert_eq!(total_generator_objective(0.3, 0.7, 5.0, 9.0, &zero), 0.5);
    }

    #[test]
    fn weight_validation() {
        let w = LossWeights::default();
        assert!(w.validate(4).is_ok());
        assert!(w.validate(3).is_err());
        let bad = LossWeights {
            coarse_fine_mix: (0.7, 0.7),
            ..LossWeights::default()
        };
        assert!(bad.validate(4).is_err());
        assert_eq!(w.effective_mix(false, true), (0.0, 1.0));
    }
}
