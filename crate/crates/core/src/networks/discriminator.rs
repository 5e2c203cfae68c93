use super::params::{derive_rng, ConvUnit, NormUnit, ParamBuilder, ParamSet, INIT_STD};
use crate::diffcore::{ConvSpec, Graph, NodeId, Shape4, Tensor4};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DiscriminatorScale {
    Coarse,
    Fine,
}

impl DiscriminatorScale {
    pub fn label(&self) -> &'static str {
        match self {
            DiscriminatorScale::Coarse => "coarse",
            DiscriminatorScale::Fine => "fine",
        }
    }
}

/// Which head, and the side length of the patch grid it emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DiscriminatorKind {
    pub scale: DiscriminatorScale,
    pub patch_grid: usize,
}

impl DiscriminatorKind {
    pub const fn coarse() -> Self {
        DiscriminatorKind {
            scale: DiscriminatorScale::Coarse,
            patch_grid: 4,
        }
    }

    pub const fn fine() -> Self {
        DiscriminatorKind {
            scale: DiscriminatorScale::Fine,
            patch_grid: 16,
        }
    }

    pub fn with_grid(self, patch_grid: usize) -> Self {
        DiscriminatorKind { patch_grid, ..self }
    }

    /// Number of stride-2 stages taking `resolution` down to the grid.
    pub fn down_stages(&self, resolution: usize) -> Result<usize> {
        if self.patch_grid == 0 || resolution % self.patch_grid != 0 {
            return Err(Error::invalid(format!(
                "patch grid {} does not divide resolution {resolution}",
                self.patch_grid
            )));
        }
        let ratio = resolution / self.patch_grid;
        if ratio < 2 || !ratio.is_power_of_two() {
            return Err(Error::invalid(format!(
                "resolution {resolution} is not reducible to a {g}x{g} grid by stride-2 stages",
                g = self.patch_grid
            )));
        }
        Ok(ratio.trailing_zeros() as usize)
    }
}

/// Output of a patch discriminator: `(n, 1, g, g)` probabilities in (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid(pub Tensor4);

impl PatchGrid {
    pub fn tensor(&self) -> &Tensor4 {
        &self.0
    }

    pub fn grid(&self) -> usize {
        self.0.shape().h()
    }

    pub fn mean(&self) -> f64 {
        self.0.mean()
    }

    pub fn is_valid(&self) -> bool {
        let s = self.0.shape();
        s.c() == 1 && s.h() == s.w() && self.0.data().iter().all(|&v| v > 0.0 && v < 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    conv: ConvUnit,
    norm: Option<NormUnit>,
}

/// Stack of 4×4 stride-2 convolutions with leaky-relu (instance norm from the
/// second stage on), then a 3×3 single-channel conv and a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchDiscriminator {
    kind: DiscriminatorKind,
    resolution: usize,
    params: ParamSet,
    stages: Vec<Stage>,
    head: ConvUnit,
}

pub const DEFAULT_DISC_CHANNELS: usize = 64;

pub fn build_discriminator(kind: DiscriminatorKind, resolution: usize, seed: u64) -> Result<PatchDiscriminator> {
    PatchDiscriminator::new(kind, resolution, DEFAULT_DISC_CHANNELS, seed, INIT_STD)
}

impl PatchDiscriminator {
    pub fn new(
        kind: DiscriminatorKind,
        resolution: usize,
        base_channels: usize,
        seed: u64,
        std: f64,
    ) -> Result<PatchDiscriminator> {
        if base_channels == 0 {
            return Err(Error::invalid("discriminator base_channels must be positive"));
        }
        let n = kind.down_stages(resolution)?;
        let mut params = ParamSet::new();
        let label = format!("discriminator.{}.{}", kind.scale.label(), kind.patch_grid);
        let mut b = ParamBuilder::new(&mut params, derive_rng(seed, &label), std);
        let mut stages = Vec::with_capacity(n);
        let mut cin = 3;
        for i in 0..n {
            let cout = base_channels << i.min(3);
            let first = i == 0;
            let conv = b.conv(&format!("stage{i}.conv"), ConvSpec::new(cin, cout, 4, 2, 1), first);
            let norm = (!first).then(|| b.norm(&format!("stage{i}.norm"), cout));
            stages.push(Stage { conv, norm });
            cin = cout;
        }
        let head = b.conv("head.conv", ConvSpec::new(cin, 1, 3, 1, 1), true);
        Ok(PatchDiscriminator {
            kind,
            resolution,
            params,
            stages,
            head,
        })
    }

    pub fn kind(&self) -> DiscriminatorKind {
        self.kind
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Convolution geometry in evaluation order (head last).
    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        self.stages.iter().map(|s| s.conv.spec).chain([self.head.spec]).collect()
    }

    /// Side length of the input window seen by one output cell.
    pub fn receptive_field(&self) -> usize {
        receptive_field(&self.conv_specs())
    }

    /// Handle over parameters already on the tape, in `params()` order.
    pub fn bound_with(&self, ids: Vec<NodeId>) -> BoundDiscriminator<'_> {
        BoundDiscriminator { net: self, ids }
    }

    pub fn bind<'a>(&'a self, g: &mut Graph, trainable: bool) -> BoundDiscriminator<'a> {
        BoundDiscriminator {
            net: self,
            ids: self.params.bind(g, trainable),
        }
    }

    pub fn forward(&self, img: &Tensor4) -> Result<PatchGrid> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(img.clone());
        let y = bound.forward(&mut g, x)?;
        Ok(PatchGrid(g.value(y).clone()))
    }
}

/// `1 + Σ (kᵢ - 1)·Π_{j<i} sⱼ` over a conv stack.
pub fn receptive_field(specs: &[ConvSpec]) -> usize {
    let mut rf = 1;
    let mut jump = 1;
    for s in specs {
        rf += (s.kernel - 1) * jump;
        jump *= s.stride;
    }
    rf
}

pub struct BoundDiscriminator<'a> {
    net: &'a PatchDiscriminator,
    pub ids: Vec<NodeId>,
}

impl BoundDiscriminator<'_> {
    /// Returns the node holding the sigmoid patch grid.
    pub fn forward(&self, g: &mut Graph, img: NodeId) -> Result<NodeId> {
        let s = g.value(img).shape();
        let r = self.net.resolution;
        if s.c() != 3 || s.h() != r || s.w() != r {
            return Err(Error::shape("discriminator_forward", Shape4::new(s.n(), 3, r, r), s));
        }
        let mut h = img;
        for st in &self.net.stages {
            h = st.conv.forward(g, &self.ids, h)?;
            if let Some(norm) = &st.norm {
                h = norm.forward(g, &self.ids, h)?;
            }
            h = g.leaky_relu(h, LEAKY_SLOPE)?;
        }
        let logits = self.net.head.forward(g, &self.ids, h)?;
        Ok(g.sigmoid(logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stage_counts_at_256() {
        assert_eq!(DiscriminatorKind::fine().down_stages(256).unwrap(), 4);
        assert_eq!(DiscriminatorKind::coarse().down_stages(256).unwrap(), 6);
        assert!(DiscriminatorKind::fine().down_stages(48).is_err());
        assert!(DiscriminatorKind::fine().with_grid(16).down_stages(16).is_err());
    }

    #[test]
    fn coarse_sees_more_than_fine() {
        let c = PatchDiscriminator::new(DiscriminatorKind::coarse(), 64, 8, 0, INIT_STD).unwrap();
        let f = PatchDiscriminator::new(DiscriminatorKind::fine(), 64, 8, 0, INIT_STD).unwrap();
        assert!(c.receptive_field() > f.receptive_field());
    }

    #[test]
    fn grid_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor4::uniform(Shape4::new(2, 3, 64, 64), -1.0, 1.0, &mut rng);
        for (kind, g) in [(DiscriminatorKind::coarse(), 4), (DiscriminatorKind::fine(), 16)] {
            let d = PatchDiscriminator::new(kind, 64, 8, 3, INIT_STD).unwrap();
            let out = d.forward(&x).unwrap();
            assert_eq!(out.tensor().shape(), Shape4::new(2, 1, g, g));
            assert!(out.is_valid());
            assert_eq!(d.forward(&x).unwrap(), out);
        }
    }

    #[test]
    fn wrong_resolution_rejected() {
        let d = PatchDiscriminator::new(DiscriminatorKind::fine(), 64, 8, 3, INIT_STD).unwrap();
        assert!(d.forward(&Tensor4::zeros(Shape4::new(1, 3, 32, 32))).is_err());
    }
}
