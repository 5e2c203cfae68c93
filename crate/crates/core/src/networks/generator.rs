use super::params::{derive_rng, ConvUnit, NormUnit, ParamBuilder, ParamSet, INIT_STD};
use crate::diffcore::{ConvSpec, Graph, NodeId, Tensor4};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub n_residual_blocks: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::for_resolution(256)
    }
}

impl GeneratorConfig {
    /// 9 residual blocks at 256 and above, 6 below.
    pub fn for_resolution(resolution: usize) -> Self {
        GeneratorConfig {
            base_channels: 64,
            n_residual_blocks: if resolution >= 256 { 9 } else { 6 },
            in_channels: 3,
            out_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_residual_blocks < 1 {
            return Err(Error::invalid("generator needs at least one residual block"));
        }
        if self.base_channels < 8 {
            return Err(Error::invalid(format!(
                "generator base_channels {} below minimum 8",
                self.base_channels
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("generator channel counts must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ResidualBlock {
    conv1: ConvUnit,
    norm1: NormUnit,
    conv2: ConvUnit,
    norm2: NormUnit,
}

/// Conv stem, two stride-2 downsampling convs, residual blocks, two stride-2
/// transposed convs and a tanh output conv.
///
/// Convolutions followed by instance normalization carry no bias, since the
/// normalization would cancel it.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    cfg: GeneratorConfig,
    params: ParamSet,
    stem: (ConvUnit, NormUnit),
    down: Vec<(ConvUnit, NormUnit)>,
    blocks: Vec<ResidualBlock>,
    up: Vec<(ConvUnit, NormUnit)>,
    head: ConvUnit,
}

pub fn build_generator(cfg: GeneratorConfig, seed: u64) -> Result<Generator> {
    Generator::with_std(cfg, seed, INIT_STD)
}

impl Generator {
    pub fn with_std(cfg: GeneratorConfig, seed: u64, std: f64) -> Result<Generator> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut b = ParamBuilder::new(&mut params, derive_rng(seed, "generator"), std);
        let c = cfg.base_channels;
        let stem = (
            b.conv("stem.conv", ConvSpec::new(cfg.in_channels, c, 7, 1, 3), false),
            b.norm("stem.norm", c),
        );
        let down = (0..2)
            .map(|i| {
                let (ci, co) = (c << i, c << (i + 1));
                (
                    b.conv(&format!("down{}.conv", i + 1), ConvSpec::new(ci, co, 4, 2, 1), false),
                    b.norm(&format!("down{}.norm", i + 1), co),
                )
            })
            .collect();
        let wide = c * 4;
        let blocks = (0..cfg.n_residual_blocks)
            .map(|i| ResidualBlock {
                conv1: b.conv(&format!("res{i}.conv1"), ConvSpec::new(wide, wide, 3, 1, 1), false),
                norm1: b.norm(&format!("res{i}.norm1"), wide),
                conv2: b.conv(&format!("res{i}.conv2"), ConvSpec::new(wide, wide, 3, 1, 1), false),
                norm2: b.norm(&format!("res{i}.norm2"), wide),
            })
            .collect();
        let up = (0..2)
            .map(|i| {
                let (ci, co) = (wide >> i, wide >> (i + 1));
                (
                    b.deconv(&format!("up{}.deconv", i + 1), ConvSpec::new(ci, co, 4, 2, 1), false),
                    b.norm(&format!("up{}.norm", i + 1), co),
                )
            })
            .collect();
        let head = b.conv("head.conv", ConvSpec::new(c, cfg.out_channels, 7, 1, 3), true);
        Ok(Generator {
            cfg,
            params,
            stem,
            down,
            blocks,
            up,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Binds parameters on the tape; the returned handle runs forward passes.
    /// Handle over parameters already on the tape, in `params()` order.
    pub fn bound_with(&self, ids: Vec<NodeId>) -> BoundGenerator<'_> {
        BoundGenerator { net: self, ids }
    }

    pub fn bind<'a>(&'a self, g: &mut Graph, trainable: bool) -> BoundGenerator<'a> {
        BoundGenerator {
            net: self,
            ids: self.params.bind(g, trainable),
        }
    }

    /// Inference without retaining gradients.
    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xi = g.constant(x.clone());
        let y = bound.forward(&mut g, xi)?;
        Ok(g.value(y).clone())
    }
}

pub struct BoundGenerator<'a> {
    net: &'a Generator,
    pub ids: Vec<NodeId>,
}

impl BoundGenerator<'_> {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let s = g.value(x).shape();
        if s.h() % 4 != 0 || s.w() % 4 != 0 {
            return Err(Error::shape("generator_forward", "spatial size divisible by 4", s));
        }
        let net = self.net;
        let ids = &self.ids;
        let conv_norm_relu = |g: &mut Graph, (conv, norm): &(ConvUnit, NormUnit), x: NodeId| -> Result<NodeId> {
            let h = conv.forward(g, ids, x)?;
            let h = norm.forward(g, ids, h)?;
            Ok(g.relu(h))
        };
        let mut h = conv_norm_relu(g, &net.stem, x)?;
        for layer in &net.down {
            h = conv_norm_relu(g, layer, h)?;
        }
        for blk in &net.blocks {
            let r = blk.conv1.forward(g, ids, h)?;
            let r = blk.norm1.forward(g, ids, r)?;
            let r = g.relu(r);
            let r = blk.conv2.forward(g, ids, r)?;
            let r = blk.norm2.forward(g, ids, r)?;
            h = g.add(h, r)?;
        }
        for layer in &net.up {
            h = conv_norm_relu(g, layer, h)?;
        }
        let out = net.head.forward(g, ids, h)?;
        Ok(g.tanh(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Shape4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            base_channels: 8,
            n_residual_blocks: 2,
            in_channels: 3,
            out_channels: 3,
        }
    }

    /// Layer-by-layer hand count: weights (+bias) for each conv, 2·C for each norm.
    fn hand_count(c: usize, blocks: usize) -> usize {
        let stem = 3 * c * 49 + 2 * c;
        let down1 = c * 2 * c * 16 + 2 * (2 * c);
        let down2 = 2 * c * 4 * c * 16 + 2 * (4 * c);
        let res = blocks * 2 * (4 * c * 4 * c * 9 + 2 * (4 * c));
        let up1 = 4 * c * 2 * c * 16 + 2 * (2 * c);
        let up2 = 2 * c * c * 16 + 2 * c;
        let head = c * 3 * 49 + 3;
        stem + down1 + down2 + res + up1 + up2 + head
    }

    #[test]
    fn parameter_count_matches_hand_sum() {
        let cfg = GeneratorConfig::for_resolution(64);
        assert_eq!(cfg.n_residual_blocks, 6);
        let g = build_generator(cfg, 0).unwrap();
        assert_eq!(g.param_count(), hand_count(64, 6));
        assert_eq!(g.param_count(), 8_414_851);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_generator(small(), 9).unwrap();
        let b = build_generator(small(), 9).unwrap();
        let c = build_generator(small(), 10).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn preserves_shape_and_bounds_output() {
        let g = build_generator(small(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor4::uniform(Shape4::new(2, 3, 16, 16), -1.0, 1.0, &mut rng);
        let y = g.forward(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| *v > -1.0 && *v < 1.0));
        assert_eq!(g.forward(&x).unwrap(), y);
    }

    #[test]
    fn indivisible_size_rejected() {
        let g = build_generator(small(), 1).unwrap();
        assert!(g.forward(&Tensor4::zeros(Shape4::new(1, 3, 18, 18))).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = small();
        cfg.n_residual_blocks = 0;
        assert!(build_generator(cfg, 0).is_err());
        let mut cfg = small();
        cfg.base_channels = 4;
        assert!(build_generator(cfg, 0).is_err());
    }
}
