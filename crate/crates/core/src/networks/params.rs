use crate::diffcore::{ConvSpec, Gradients, Graph, NodeId, Shape4, Tensor4};
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor4,
}

/// Ordered, named parameter storage of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<NamedParam>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor4) -> usize {
        self.params.push(NamedParam {
            name: name.into(),
            tensor,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedParam> {
        self.params.iter()
    }

    pub fn get(&self, i: usize) -> &Tensor4 {
        &self.params[i].tensor
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor4 {
        &mut self.params[i].tensor
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Registers every parameter on the tape. Frozen bindings let gradients
    /// flow through the network without accumulating into its weights.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| {
                let t = p.tensor.clone();
                if trainable {
                    g.variable(t)
                } else {
                    g.constant(t)
                }
            })
            .collect()
    }

    pub fn collect_grads(&self, grads: &Gradients, ids: &[NodeId]) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .zip(ids)
            .map(|(p, &id)| grads.get_or_zeros(id, p.tensor.len()))
            .collect()
    }

    /// Concatenation of every parameter, in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.tensor.data().iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.count() {
            return Err(Error::shape("assign_flat", self.count(), flat.len()));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.tensor.len();
            p.tensor.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Replaces every tensor with the same-named one from `other`, checking shapes.
    pub fn load_from(&mut self, other: &[NamedParam]) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                other.len()
            )));
        }
        for (mine, theirs) in self.params.iter_mut().zip(other) {
            if mine.name != theirs.name || mine.tensor.shape() != theirs.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {} does not match {} {}",
                    mine.name,
                    mine.tensor.shape(),
                    theirs.name,
                    theirs.tensor.shape()
                )));
            }
            mine.tensor = theirs.tensor.clone();
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in p.tensor.shape().0 {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Deterministic per-component RNG derived from a base seed and a label.
pub fn derive_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Convolution layer whose parameters live in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvUnit {
    pub spec: ConvSpec,
    pub transpose: bool,
    pub weight: usize,
    pub bias: Option<usize>,
}

impl ConvUnit {
    pub fn forward(&self, g: &mut Graph, ids: &[NodeId], x: NodeId) -> Result<NodeId> {
        let w = ids[self.weight];
        let b = self.bias.map(|i| ids[i]);
        if self.transpose {
            g.conv_transpose2d(x, w, b, self.spec)
        } else {
            g.conv2d(x, w, b, self.spec)
        }
    }

    pub fn param_count(&self) -> usize {
        let k = self.spec.kernel;
        self.spec.in_channels * self.spec.out_channels * k * k + if self.bias.is_some() { self.spec.out_channels } else { 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormUnit {
    pub scale: usize,
    pub shift: usize,
}

impl NormUnit {
    pub fn forward(&self, g: &mut Graph, ids: &[NodeId], x: NodeId) -> Result<NodeId> {
        g.instance_norm2d(x, ids[self.scale], ids[self.shift])
    }
}

/// Appends freshly initialized layers to a [`ParamSet`].
pub struct ParamBuilder<'a> {
    pub params: &'a mut ParamSet,
    pub rng: ChaCha8Rng,
    pub std: f64,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(params: &'a mut ParamSet, rng: ChaCha8Rng, std: f64) -> Self {
        ParamBuilder { params, rng, std }
    }

    pub fn conv(&mut self, name: &str, spec: ConvSpec, bias: bool) -> ConvUnit {
        self.unit(name, spec, bias, false)
    }

    pub fn deconv(&mut self, name: &str, spec: ConvSpec, bias: bool) -> ConvUnit {
        self.unit(name, spec, bias, true)
    }

    fn unit(&mut self, name: &str, spec: ConvSpec, bias: bool, transpose: bool) -> ConvUnit {
        let shape = if transpose {
            spec.transpose_weight_shape()
        } else {
            spec.conv_weight_shape()
        };
        let weight = self.params.push(format!("{name}.w"), Tensor4::randn(shape, self.std, &mut self.rng));
        let bias = bias.then(|| {
            self.params
                .push(format!("{name}.b"), Tensor4::zeros(Shape4::new(spec.out_channels, 1, 1, 1)))
        });
        ConvUnit {
            spec,
            transpose,
            weight,
            bias,
        }
    }

    pub fn norm(&mut self, name: &str, channels: usize) -> NormUnit {
        let shape = Shape4::new(channels, 1, 1, 1);
        let scale = self.params.push(format!("{name}.scale"), Tensor4::full(shape, 1.0));
        let shift = self.params.push(format!("{name}.shift"), Tensor4::zeros(shape));
        NormUnit { scale, shift }
    }
}
