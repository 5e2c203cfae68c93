//! Frozen feature extractor for the perceptual loss, its binary weight-file
//! format, and the small desk-trained classifier that can stand in for a
//! large pre-trained network.

use super::params::{derive_rng, ConvUnit, ParamBuilder, ParamSet};
use crate::diffcore::{ConvSpec, Graph, NodeId, Shape4, Tensor4};
use crate::error::{Error, Result};
use crate::trainer::optim::Adam;
use rand::Rng;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

pub const PNET_MAGIC: &[u8; 4] = b"PNET";
pub const PNET_VERSION: u32 = 1;

/// Channel widths of the built-in four-stage extractor.
pub const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 64, 64];

#[derive(Clone, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum PerceptionSource {
    File(PathBuf),
    /// Trunk of a small classifier trained on a procedurally generated labeled set.
    DeskTrained { seed: u64 },
    FrozenRandom { seed: u64 },
}

impl PerceptionSource {
    pub fn id(&self) -> String {
        match self {
            PerceptionSource::File(p) => format!("file:{}", p.display()),
            PerceptionSource::DeskTrained { seed } => format!("desk_trained:{seed}"),
            PerceptionSource::FrozenRandom { seed } => format!("frozen_random:{seed}"),
        }
    }

    /// Parses `frozen_random[:seed]`, `desk_trained[:seed]`, or a file path.
    pub fn parse(s: &str) -> Result<Self> {
        let (head, seed) = match s.split_once(':') {
            Some((h, rest)) if h == "frozen_random" || h == "desk_trained" => {
                let seed = rest
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad perception seed in `{s}`")))?;
                (h, seed)
            }
            _ => (s, 0),
        };
        Ok(match head {
            "frozen_random" => PerceptionSource::FrozenRandom { seed },
            "desk_trained" => PerceptionSource::DeskTrained { seed },
            "" => return Err(Error::invalid("empty perception source")),
            path => PerceptionSource::File(PathBuf::from(path)),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerceptionLayer {
    pub conv: ConvUnit,
    pub tap: bool,
}

/// Conv + relu stages with features tapped after selected stages.
/// Parameters are only ever bound as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptionNet {
    params: ParamSet,
    layers: Vec<PerceptionLayer>,
}

fn he_std(spec: &ConvSpec) -> f64 {
    (2.0 / (spec.in_channels * spec.kernel * spec.kernel) as f64).sqrt()
}

impl PerceptionNet {
    /// Four stride-2 3×3 stages, all tapped, He-initialized.
    pub fn frozen_random(seed: u64) -> PerceptionNet {
        Self::random_with_widths(seed, &DEFAULT_WIDTHS)
    }

    pub fn random_with_widths(seed: u64, widths: &[usize]) -> PerceptionNet {
        let mut params = ParamSet::new();
        let mut rng = derive_rng(seed, "perception");
        let mut layers = Vec::new();
        let mut cin = 3;
        for (i, &cout) in widths.iter().enumerate() {
            let spec = ConvSpec::new(cin, cout, 3, 2, 1);
            let mut b = ParamBuilder::new(&mut params, rng, he_std(&spec));
            let conv = b.conv(&format!("layer{i}.conv"), spec, true);
            rng = b.rng;
            layers.push(PerceptionLayer { conv, tap: true });
            cin = cout;
        }
        PerceptionNet { params, layers }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn layers(&self) -> &[PerceptionLayer] {
        &self.layers
    }

    pub fn tap_count(&self) -> usize {
        self.layers.iter().filter(|l| l.tap).count()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.conv.spec.out_channels).unwrap_or(3)
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundPerception<'_> {
        BoundPerception {
            net: self,
            ids: self.params.bind(g, false),
        }
    }

    /// Feature maps at every tap point, shallow to deep.
    pub fn features(&self, img: &Tensor4) -> Result<Vec<Tensor4>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let x = g.constant(img.clone());
        let taps = bound.features(&mut g, x)?;
        Ok(taps.into_iter().map(|id| g.value(id).clone()).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PNET_MAGIC);
        out.extend_from_slice(&PNET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            let s = l.conv.spec;
            for v in [s.in_channels, s.out_channels, s.kernel, s.stride, s.padding, l.tap as usize] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
            let bias = l.conv.bias.expect("perception convs carry a bias");
            for idx in [l.conv.weight, bias] {
                for v in self.params.get(idx).data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<PerceptionNet> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<PerceptionNet> {
        let mut r = ByteReader::new(bytes, "PNET");
        if r.take(4)? != PNET_MAGIC {
            return Err(r.fail(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != PNET_VERSION {
            return Err(r.fail(4, format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        if count == 0 {
            return Err(r.fail(8, "no layers"));
        }
        let mut params = ParamSet::new();
        let mut layers = Vec::with_capacity(count);
        let mut cin = 3;
        for i in 0..count {
            let at = r.pos;
            let mut ints = [0usize; 6];
            for v in &mut ints {
                *v = r.u32()? as usize;
            }
            let [inc, outc, k, stride, pad, tap] = ints;
            let spec = ConvSpec::new(inc, outc, k, stride, pad);
            if spec.validate().is_err() || tap > 1 {
                return Err(r.fail(at, format!("layer {i} has invalid spec {ints:?}")));
            }
            if inc != cin {
                return Err(r.fail(at, format!("layer {i} expects {inc} input channels, previous layer gives {cin}")));
            }
            let w = r.f64s(outc * inc * k * k)?;
            let b = r.f64s(outc)?;
            let weight = params.push(format!("layer{i}.conv.w"), Tensor4::from_vec(spec.conv_weight_shape(), w)?);
            let bias = params.push(format!("layer{i}.conv.b"), Tensor4::from_vec(Shape4::new(outc, 1, 1, 1), b)?);
            layers.push(PerceptionLayer {
                conv: ConvUnit {
                    spec,
                    transpose: false,
                    weight,
                    bias: Some(bias),
                },
                tap: tap == 1,
            });
            cin = outc;
        }
        if r.pos != bytes.len() {
            return Err(r.fail(r.pos, "trailing bytes"));
        }
        let net = PerceptionNet { params, layers };
        if net.tap_count() < 2 {
            return Err(Error::Parse {
                what: "PNET",
                offset: bytes.len(),
                message: "perception net needs at least 2 tap points".into(),
            });
        }
        Ok(net)
    }
}

pub struct BoundPerception<'a> {
    net: &'a PerceptionNet,
    pub ids: Vec<NodeId>,
}

impl BoundPerception<'_> {
    pub fn features(&self, g: &mut Graph, x: NodeId) -> Result<Vec<NodeId>> {
        Ok(self.trunk(g, x)?.0)
    }

    /// Returns `(taps, last activation)`.
    fn trunk(&self, g: &mut Graph, x: NodeId) -> Result<(Vec<NodeId>, NodeId)> {
        let mut taps = Vec::new();
        let mut h = x;
        for l in &self.net.layers {
            h = l.conv.forward(g, &self.ids, h)?;
            h = g.relu(h);
            if l.tap {
                taps.push(h);
            }
        }
        Ok((taps, h))
    }
}

pub fn build_perception_net(source: &PerceptionSource) -> Result<PerceptionNet> {
    match source {
        PerceptionSource::File(p) => PerceptionNet::load(p),
        PerceptionSource::FrozenRandom { seed } => Ok(PerceptionNet::frozen_random(*seed)),
        PerceptionSource::DeskTrained { seed } => {
            // Training is deterministic in the seed, so one copy per process suffices.
            static CACHE: OnceLock<Mutex<HashMap<u64, PerceptionNet>>> = OnceLock::new();
            let cache = CACHE.get_or_init(Default::default);
            if let Some(p) = cache.lock().unwrap().get(seed) {
                return Ok(p.clone());
            }
            let trunk = ConvClassifier::desk_trained(*seed)?.trunk;
            cache.lock().unwrap().insert(*seed, trunk.clone());
            Ok(trunk)
        }
    }
}

pub fn perception_features(p: &PerceptionNet, img: &Tensor4) -> Result<Vec<Tensor4>> {
    p.features(img)
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8], what: &'static str) -> Self {
        ByteReader { bytes, pos: 0, what }
    }

    pub fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            what: self.what,
            offset,
            message: message.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(self.pos, format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.fail(self.pos, "length overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.fail(at, "invalid utf-8"))
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Number of classes in the procedural labeled set.
pub const DESK_CLASSES: usize = 4;
const DESK_SIZE: usize = 32;
const DESK_PER_CLASS: usize = 12;
const DESK_STEPS: usize = 80;

/// Small convolutional classifier: perception trunk, global average pooling,
/// and a linear head. Its trunk doubles as a desk-scale perception network.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvClassifier {
    pub trunk: PerceptionNet,
    head: ParamSet,
    classes: usize,
    source_id: String,
}

impl ConvClassifier {
    pub fn untrained(seed: u64, classes: usize) -> ConvClassifier {
        let trunk = PerceptionNet::frozen_random(seed);
        let mut head = ParamSet::new();
        let spec = ConvSpec::new(trunk.out_channels(), classes, 1, 1, 0);
        ParamBuilder::new(&mut head, derive_rng(seed, "classifier.head"), he_std(&spec)).conv("head", spec, true);
        ConvClassifier {
            trunk,
            head,
            classes,
            source_id: format!("untrained:{seed}"),
        }
    }

    /// Trains on the procedural stripes/checker/disc set; fully deterministic in `seed`.
    pub fn desk_trained(seed: u64) -> Result<ConvClassifier> {
        let mut clf = Self::untrained(seed, DESK_CLASSES);
        let (images, labels) = procedural_labeled_set(seed, DESK_PER_CLASS);
        let mut trunk_opt = Adam::new(clf.trunk.params(), 5e-3, (0.9, 0.999));
        let mut head_opt = Adam::new(&clf.head, 5e-3, (0.9, 0.999));
        for _ in 0..DESK_STEPS {
            let mut g = Graph::new();
            let t_ids = clf.trunk.params.bind(&mut g, true);
            let h_ids = clf.head.bind(&mut g, true);
            let x = g.constant(images.clone());
            let logits = clf.logits_on(&mut g, &t_ids, &h_ids, x)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            let grads = g.backward(loss)?;
            let tg = clf.trunk.params.collect_grads(&grads, &t_ids);
            let hg = clf.head.collect_grads(&grads, &h_ids);
            trunk_opt.step(&mut clf.trunk.params, &tg)?;
            head_opt.step(&mut clf.head, &hg)?;
        }
        clf.source_id = format!("desk_trained:{seed}");
        Ok(clf)
    }

    fn logits_on(&self, g: &mut Graph, t_ids: &[NodeId], h_ids: &[NodeId], x: NodeId) -> Result<NodeId> {
        let bound = BoundPerception {
            net: &self.trunk,
            ids: t_ids.to_vec(),
        };
        let (_, last) = bound.trunk(g, x)?;
        let pooled = g.global_avg_pool(last);
        g.conv2d(pooled, h_ids[0], Some(h_ids[1]), ConvSpec::new(self.trunk.out_channels(), self.classes, 1, 1, 0))
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn checksum(&self) -> String {
        format!("{}{}", self.trunk.checksum(), self.head.checksum())
    }

    /// Class posteriors for each image in the batch.
    pub fn predict(&self, images: &Tensor4) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let t_ids = self.trunk.params.bind(&mut g, false);
        let h_ids = self.head.bind(&mut g, false);
        let x = g.constant(images.clone());
        let logits = self.logits_on(&mut g, &t_ids, &h_ids, x)?;
        Ok(crate::diffcore::ops::softmax_rows(g.value(logits)))
    }

    pub fn accuracy(&self, images: &Tensor4, labels: &[usize]) -> Result<f64> {
        let probs = self.predict(images)?;
        let hits = probs
            .iter()
            .zip(labels)
            .filter(|(p, &l)| {
                let best = p
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                best == l
            })
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// Four texture classes in [-1, 1]: horizontal stripes, vertical stripes,
/// checkerboard, centered disc. Colors, periods and phases are random.
pub fn procedural_labeled_set(seed: u64, per_class: usize) -> (Tensor4, Vec<usize>) {
    let mut rng = derive_rng(seed, "procedural-set");
    let s = DESK_SIZE;
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for i in 0..per_class * DESK_CLASSES {
        let class = i % DESK_CLASSES;
        let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let period = rng.random_range(4..9usize);
        let phase = rng.random_range(0..period);
        let radius = rng.random_range(6.0..12.0f64);
        let mut t = Tensor4::zeros(Shape4::new(1, 3, s, s));
        for y in 0..s {
            for x in 0..s {
                let on = match class {
                    0 => ((y + phase) / (period / 2).max(1)) % 2 == 0,
                    1 => ((x + phase) / (period / 2).max(1)) % 2 == 0,
                    2 => (((x + phase) / period) + ((y + phase) / period)) % 2 == 0,
                    _ => {
                        let c = s as f64 / 2.0;
                        ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt() < radius
                    }
                };
                for c in 0..3 {
                    t.set(0, c, y, x, if on { fg[c] } else { bg[c] });
                }
            }
        }
        samples.push(t);
        labels.push(class);
    }
    (Tensor4::stack(&samples).expect("uniform sample shapes"), labels)
}
