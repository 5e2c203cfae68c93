use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::{DiscriminatorKind, GeneratorConfig, PerceptionSource};
use crate::noisemix::NoiseSchedule;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Ablation switches: which discriminators train and which loss terms count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub use_coarse: bool,
    pub use_fine: bool,
    pub use_cyc: bool,
    pub use_percep: bool,
    pub coarse_grid: usize,
    pub fine_grid: usize,
}

impl Default for Variant {
    fn default() -> Self {
        Variant {
            use_coarse: true,
            use_fine: true,
            use_cyc: true,
            use_percep: true,
            coarse_grid: 4,
            fine_grid: 16,
        }
    }
}

impl Variant {
    pub fn coarse_kind(&self) -> DiscriminatorKind {
        DiscriminatorKind::coarse().with_grid(self.coarse_grid)
    }

    pub fn fine_kind(&self) -> DiscriminatorKind {
        DiscriminatorKind::fine().with_grid(self.fine_grid)
    }

    /// Discriminators per domain.
    pub fn discriminator_count(&self) -> usize {
        self.use_coarse as usize + self.use_fine as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub resolution: usize,
    pub base_channels: usize,
    pub residual_blocks: usize,
    pub disc_channels: usize,
    pub batch_size: usize,
    pub total_steps: u64,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub weights: LossWeights,
    pub noise: NoiseSchedule,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only the final state.
    pub checkpoint_every: u64,
    /// Render a sample grid every this many steps; 0 disables periodic grids.
    pub sample_every: u64,
    pub variant: Variant,
    pub perception: PerceptionSource,
    /// Also apply the perceptual term in the caricature → photo direction.
    pub symmetric_percep: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            resolution: 256,
            base_channels: 64,
            residual_blocks: 9,
            disc_channels: 64,
            batch_size: 1,
            total_steps: 1000,
            learning_rate: 2e-4,
            betas: (0.5, 0.999),
            weights: LossWeights::default(),
            noise: NoiseSchedule::default(),
            seed: 0,
            checkpoint_every: 100,
            sample_every: 100,
            variant: Variant::default(),
            perception: PerceptionSource::DeskTrained { seed: 0 },
            symmetric_percep: false,
        }
    }
}

impl TrainConfig {
    /// Small networks at 64×64 for desk-scale runs and tests.
    pub fn toy() -> Self {
        TrainConfig {
            resolution: 64,
            base_channels: 12,
            residual_blocks: 2,
            disc_channels: 8,
            batch_size: 4,
            total_steps: 300,
            checkpoint_every: 0,
            sample_every: 0,
            perception: PerceptionSource::FrozenRandom { seed: 0 },
            ..Self::default()
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            base_channels: self.base_channels,
            n_residual_blocks: self.residual_blocks,
            in_channels: 3,
            out_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = &self.variant;
        if !v.use_coarse && !v.use_fine {
            return Err(Error::config("model.use_coarse", "at least one discriminator must be enabled"));
        }
        if self.resolution == 0 || self.resolution % 4 != 0 {
            return Err(Error::config("model.resolution", "must be a positive multiple of 4"));
        }
        v.coarse_kind()
            .down_stages(self.resolution)
            .map_err(|e| Error::config("model.coarse_grid", e.to_string()))?;
        v.fine_kind()
            .down_stages(self.resolution)
            .map_err(|e| Error::config("model.fine_grid", e.to_string()))?;
        if v.coarse_grid >= v.fine_grid {
            return Err(Error::config(
                "model.coarse_grid",
                format!("coarse grid {} must be smaller than fine grid {}", v.coarse_grid, v.fine_grid),
            ));
        }
        self.generator_config()
            .validate()
            .map_err(|e| Error::config("model.residual_blocks", e.to_string()))?;
        if self.disc_channels == 0 {
            return Err(Error::config("model.disc_channels", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::config("train.betas", "moments must lie in [0, 1)"));
        }
        self.noise
            .validate()
            .map_err(|e| Error::config("noise.alpha", e.to_string()))?;
        Ok(())
    }

    /// Hash of everything that shapes the parameter trajectory; run length
    /// and output cadence are excluded so a run can be resumed and extended.
    pub fn config_hash(&self) -> u64 {
        let mut canon = self.clone();
        canon.total_steps = 0;
        canon.checkpoint_every = 0;
        canon.sample_every = 0;
        let json = serde_json::to_vec(&canon).expect("config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::toy().validate().unwrap();
        assert_eq!(TrainConfig::default().weights.gamma, 10.0);
        assert_eq!(TrainConfig::default().weights.sigma, 2.0);
    }

    #[test]
    fn needs_a_discriminator() {
        let mut c = TrainConfig::toy();
        c.variant.use_coarse = false;
        c.variant.use_fine = false;
        assert!(c.validate().unwrap_err().to_string().contains("model.use_coarse"));
    }

    #[test]
    fn grid_constraints() {
        let mut c = TrainConfig::toy();
        c.variant.fine_grid = 48;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::toy();
        c.variant.coarse_grid = 16;
        c.variant.fine_grid = 8;
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_ignores_run_length() {
        let a = TrainConfig::toy();
        let mut b = a.clone();
        b.total_steps = 7;
        b.checkpoint_every = 3;
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed = 1;
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
