//! Finite-difference verification of every layer type and loss term on
//! small networks.

use crate::diffcore::{grad_check_report, ConvSpec, GradCheckConfig, Graph, NodeId, Shape4, Tensor4};
use crate::error::{Error, Result};
use crate::losses::{tape, LossWeights};
use crate::networks::{DiscriminatorKind, Generator, GeneratorConfig, PatchDiscriminator, PerceptionNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Weight scale of the check networks; large enough that no sampled
/// gradient sits near the relative-error floor.
const CHECK_STD: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentCheck {
    pub component: String,
    pub max_rel_error: f64,
    pub parameters: usize,
    pub checked: usize,
    /// Sampled coordinates excluded because the probe crossed a kink.
    pub skipped: usize,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    /// Spatial size of the check images; a multiple of 8, at least 8.
    pub size: usize,
    pub seed: u64,
    pub max_coords: usize,
    /// Central-difference half-width.
    pub eps: f64,
    /// One-sided slope disagreement that marks a kink crossing.
    pub kink_tol: f64,
    /// Components whose analytic gradient is deliberately perturbed
    /// (negative control). `"all"` perturbs every component.
    pub corrupt: Vec<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            size: 16,
            seed: 0,
            max_coords: 48,
            eps: 1e-6,
            kink_tol: 1e-4,
            corrupt: Vec::new(),
        }
    }
}

pub const COMPONENTS: [&str; 18] = [
    "conv2d",
    "conv2d_strided",
    "conv_transpose2d",
    "instance_norm2d",
    "leaky_relu",
    "relu",
    "tanh",
    "sigmoid",
    "global_avg_pool+softmax_cross_entropy",
    "generator",
    "discriminator_coarse",
    "discriminator_fine",
    "perception_net",
    "adversarial_loss_d",
    "adversarial_loss_g",
    "cycle_loss",
    "perceptual_loss",
    "total_generator_objective",
];

/// `(value, gradient)` of a scalar objective of a flat parameter vector.
type Objective<'a> = Box<dyn Fn(&[f64], bool) -> Result<(f64, Vec<f64>)> + 'a>;

fn split(flat: &[f64], shapes: &[Shape4]) -> Result<Vec<Tensor4>> {
    let mut off = 0;
    shapes
        .iter()
        .map(|&s| {
            let t = Tensor4::from_vec(s, flat[off..off + s.len()].to_vec());
            off += s.len();
            t
        })
        .collect()
}

/// Objective over freshly bound input tensors, projected to a scalar by `build`.
fn tensor_objective<'a>(
    shapes: Vec<Shape4>,
    build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'a,
) -> Objective<'a> {
    Box::new(move |flat, want_grad| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = split(flat, &shapes)?
            .into_iter()
            .map(|t| if want_grad { g.variable(t) } else { g.constant(t) })
            .collect();
        let out = build(&mut g, &ids)?;
        let v = g.scalar(out);
        if !want_grad {
            return Ok((v, Vec::new()));
        }
        let grads = g.backward(out)?;
        let flat_grad = ids
            .iter()
            .zip(&shapes)
            .flat_map(|(&id, s)| grads.get_or_zeros(id, s.len()))
            .collect();
        Ok((v, flat_grad))
    })
}

struct Ctx {
    rng: ChaCha8Rng,
    size: usize,
    seed: u64,
}

impl Ctx {
    fn randn(&mut self, shape: Shape4, std: f64) -> Tensor4 {
        Tensor4::randn(shape, std, &mut self.rng)
    }

    fn image(&mut self, n: usize) -> Tensor4 {
        let s = self.size;
        Tensor4::uniform(Shape4::new(n, 3, s, s), -0.9, 0.9, &mut self.rng)
    }

    fn generator(&mut self, label: u64) -> Result<Generator> {
        let cfg = GeneratorConfig {
            base_channels: 8,
            n_residual_blocks: 1,
            in_channels: 3,
            out_channels: 3,
        };
        Generator::with_std(cfg, self.seed ^ label, CHECK_STD)
    }

    fn discriminator(&mut self, fine: bool) -> Result<PatchDiscriminator> {
        let kind = if fine {
            DiscriminatorKind::fine().with_grid(self.size / 2)
        } else {
            DiscriminatorKind::coarse().with_grid(self.size / 4)
        };
        PatchDiscriminator::new(kind, self.size, 4, self.seed ^ 0xd15c ^ fine as u64, CHECK_STD)
    }

    fn perception(&self) -> PerceptionNet {
        PerceptionNet::random_with_widths(self.seed ^ 0xfeed, &[4, 8, 8])
    }
}

fn unit_spec(cin: usize, cout: usize, k: usize, s: usize, p: usize) -> ConvSpec {
    ConvSpec::new(cin, cout, k, s, p)
}

fn build_component<'a>(name: &str, cx: &mut Ctx) -> Result<(Vec<f64>, Objective<'a>)> {
    let s = cx.size;
    let flat = |ts: &[&Tensor4]| ts.iter().flat_map(|t| t.data().iter().copied()).collect::<Vec<f64>>();
    Ok(match name {
        "conv2d" | "conv2d_strided" => {
            let spec = if name == "conv2d" {
                unit_spec(3, 4, 3, 1, 1)
            } else {
                unit_spec(3, 4, 4, 2, 1)
            };
            let x = cx.image(2);
            let w = cx.randn(spec.conv_weight_shape(), 0.3);
            let b = cx.randn(Shape4::new(1, 4, 1, 1), 0.3);
            let oh = spec.conv_out(s).expect("valid geometry");
            let r = cx.randn(Shape4::new(2, 4, oh, oh), 1.0);
            let shapes = vec![x.shape(), w.shape(), b.shape()];
            let obj = tensor_objective(shapes, move |g, ids| {
                let y = g.conv2d(ids[0], ids[1], Some(ids[2]), spec)?;
                g.dot_const(y, r.clone())
            });
            (flat(&[&x, &w, &b]), obj)
        }
        "conv_transpose2d" => {
            let spec = unit_spec(4, 3, 4, 2, 1);
            let x = cx.randn(Shape4::new(2, 4, s / 2, s / 2), 1.0);
            let w = cx.randn(spec.transpose_weight_shape(), 0.3);
            let b = cx.randn(Shape4::new(1, 3, 1, 1), 0.3);
            let r = cx.randn(Shape4::new(2, 3, s, s), 1.0);
            let shapes = vec![x.shape(), w.shape(), b.shape()];
            let obj = tensor_objective(shapes, move |g, ids| {
                let y = g.conv_transpose2d(ids[0], ids[1], Some(ids[2]), spec)?;
                g.dot_const(y, r.clone())
            });
            (flat(&[&x, &w, &b]), obj)
        }
        "instance_norm2d" => {
            let x = cx.randn(Shape4::new(2, 3, s, s), 1.0);
            let scale = cx.randn(Shape4::new(1, 3, 1, 1), 1.0);
            let shift = cx.randn(Shape4::new(1, 3, 1, 1), 1.0);
            let r = cx.randn(x.shape(), 1.0);
            let shapes = vec![x.shape(), scale.shape(), shift.shape()];
            let obj = tensor_objective(shapes, move |g, ids| {
                let y = g.instance_norm2d(ids[0], ids[1], ids[2])?;
                g.dot_const(y, r.clone())
            });
            (flat(&[&x, &scale, &shift]), obj)
        }
        "leaky_relu" | "relu" | "tanh" | "sigmoid" => {
            let x = cx.randn(Shape4::new(2, 3, s, s), 1.0);
            let r = cx.randn(x.shape(), 1.0);
            let op = name.to_string();
            let obj = tensor_objective(vec![x.shape()], move |g, ids| {
                let y = match op.as_str() {
                    "leaky_relu" => g.leaky_relu(ids[0], 0.2)?,
                    "relu" => g.relu(ids[0]),
                    "tanh" => g.tanh(ids[0]),
                    _ => g.sigmoid(ids[0]),
                };
                g.dot_const(y, r.clone())
            });
            (x.data().to_vec(), obj)
        }
        "global_avg_pool+softmax_cross_entropy" => {
            let x = cx.randn(Shape4::new(3, 4, s / 2, s / 2), 1.0);
            let labels = vec![0, 3, 1];
            let obj = tensor_objective(vec![x.shape()], move |g, ids| {
                let p = g.global_avg_pool(ids[0]);
                g.softmax_cross_entropy(p, &labels)
            });
            (x.data().to_vec(), obj)
        }
        "generator" => {
            let net = cx.generator(1)?;
            let x = cx.image(1);
            let r = cx.randn(x.shape(), 1.0);
            (net.params().flatten(), network_objective(net, move |g, net_ids, net| {
                let xi = g.constant(x.clone());
                let y = net.bind_ids(g, net_ids).forward(g, xi)?;
                g.dot_const(y, r.clone())
            }))
        }
        "discriminator_coarse" | "discriminator_fine" => {
            let d = cx.discriminator(name.ends_with("fine"))?;
            let x = cx.image(2);
            let grid = d.kind().patch_grid;
            let r = cx.randn(Shape4::new(2, 1, grid, grid), 1.0);
            (d.params().flatten(), network_objective(d, move |g, ids, d| {
                let xi = g.constant(x.clone());
                let y = d.bind_ids(g, ids).forward(g, xi)?;
                g.dot_const(y, r.clone())
            }))
        }
        "perception_net" => {
            let p = cx.perception();
            let x = cx.image(1);
            let rs: Vec<Tensor4> = p
                .features(&x)?
                .iter()
                .map(|f| Tensor4::randn(f.shape(), 1.0, &mut cx.rng))
                .collect();
            let obj = tensor_objective(vec![x.shape()], move |g, ids| {
                let feats = p.bind(g).features(g, ids[0])?;
                let mut terms = Vec::new();
                for (f, r) in feats.into_iter().zip(&rs) {
                    terms.push((g.dot_const(f, r.clone())?, 1.0));
                }
                g.weighted_sum(&terms)
            });
            (x.data().to_vec(), obj)
        }
        "adversarial_loss_d" => {
            let d = cx.discriminator(false)?;
            let real = cx.image(2);
            let fake = cx.image(2);
            (d.params().flatten(), network_objective(d, move |g, ids, d| {
                let bd = d.bind_ids(g, ids);
                let r = g.constant(real.clone());
                let f = g.constant(fake.clone());
                let pr = bd.forward(g, r)?;
                let pf = bd.forward(g, f)?;
                tape::adversarial_d(g, pr, pf)
            }))
        }
        "adversarial_loss_g" => {
            let net = cx.generator(2)?;
            let d = cx.discriminator(true)?;
            let x = cx.image(2);
            (net.params().flatten(), network_objective(net, move |g, ids, net| {
                let xi = g.constant(x.clone());
                let fake = net.bind_ids(g, ids).forward(g, xi)?;
                let p = d.bind(g, false).forward(g, fake)?;
                Ok(tape::adversarial_g(g, p))
            }))
        }
        "cycle_loss" => {
            let g1 = cx.generator(3)?;
            let g2 = cx.generator(4)?;
            let x = cx.image(1);
            let y = cx.image(1);
            (g1.params().flatten(), network_objective(g1, move |g, ids, g1| {
                let b1 = g1.bind_ids(g, ids);
                let b2 = g2.bind(g, false);
                let (xi, yi) = (g.constant(x.clone()), g.constant(y.clone()));
                let fake_b = b1.forward(g, xi)?;
                let rec_a = b2.forward(g, fake_b)?;
                let fake_a = b2.forward(g, yi)?;
                let rec_b = b1.forward(g, fake_a)?;
                tape::cycle(g, xi, rec_a, yi, rec_b)
            }))
        }
        "perceptual_loss" => {
            let net = cx.generator(5)?;
            let p = cx.perception();
            let x = cx.image(1);
            let y = cx.image(1);
            let target = p.features(&y)?;
            let lambda: Vec<f64> = (0..p.tap_count()).map(|i| 1.0 + 0.5 * i as f64).collect();
            (net.params().flatten(), network_objective(net, move |g, ids, net| {
                let xi = g.constant(x.clone());
                let gx = net.bind_ids(g, ids).forward(g, xi)?;
                let t: Vec<NodeId> = target.iter().map(|f| g.constant(f.clone())).collect();
                let bp = p.bind(g);
                tape::perceptual(g, &bp, &t, gx, &lambda)
            }))
        }
        "total_generator_objective" => {
            let g1 = cx.generator(6)?;
            let g2 = cx.generator(7)?;
            let dc = cx.discriminator(false)?;
            let df = cx.discriminator(true)?;
            let p = cx.perception();
            let x = cx.image(1);
            let y = cx.image(1);
            let target = p.features(&y)?;
            let w = LossWeights {
                lambda_n: vec![1.0; p.tap_count()],
                ..LossWeights::default()
            };
            (g1.params().flatten(), network_objective(g1, move |g, ids, g1| {
                let b1 = g1.bind_ids(g, ids);
                let b2 = g2.bind(g, false);
                let (xi, yi) = (g.constant(x.clone()), g.constant(y.clone()));
                let fake_b = b1.forward(g, xi)?;
                let rec_a = b2.forward(g, fake_b)?;
                let fake_a = b2.forward(g, yi)?;
                let rec_b = b1.forward(g, fake_a)?;
                let pc = dc.bind(g, false).forward(g, fake_b)?;
                let pf = df.bind(g, false).forward(g, fake_b)?;
                let adv_c = tape::adversarial_g(g, pc);
                let adv_f = tape::adversarial_g(g, pf);
                let cyc = tape::cycle(g, xi, rec_a, yi, rec_b)?;
                let t: Vec<NodeId> = target.iter().map(|f| g.constant(f.clone())).collect();
                let bp = p.bind(g);
                let percep = tape::perceptual(g, &bp, &t, fake_b, &w.lambda_n)?;
                tape::total(g, adv_c, adv_f, cyc, percep, &w)
            }))
        }
        other => return Err(Error::invalid(format!("unknown gradcheck component `{other}`"))),
    })
}

/// A network whose flat parameter vector is the check variable.
trait Checkable: Clone {
    type Bound<'a>
    where
        Self: 'a;
    fn assign(&mut self, flat: &[f64]) -> Result<()>;
    fn bind_params(&self, g: &mut Graph, trainable: bool) -> Vec<NodeId>;
    fn bind_ids<'a>(&'a self, g: &mut Graph, ids: &[NodeId]) -> Self::Bound<'a>;
}

impl Checkable for Generator {
    type Bound<'a> = crate::networks::generator::BoundGenerator<'a>;
    fn assign(&mut self, flat: &[f64]) -> Result<()> {
        self.params_mut().assign_flat(flat)
    }
    fn bind_params(&self, g: &mut Graph, trainable: bool) -> Vec<NodeId> {
        self.params().bind(g, trainable)
    }
    fn bind_ids<'a>(&'a self, _g: &mut Graph, ids: &[NodeId]) -> Self::Bound<'a> {
        self.bound_with(ids.to_vec())
    }
}

impl Checkable for PatchDiscriminator {
    type Bound<'a> = crate::networks::discriminator::BoundDiscriminator<'a>;
    fn assign(&mut self, flat: &[f64]) -> Result<()> {
        self.params_mut().assign_flat(flat)
    }
    fn bind_params(&self, g: &mut Graph, trainable: bool) -> Vec<NodeId> {
        self.params().bind(g, trainable)
    }
    fn bind_ids<'a>(&'a self, _g: &mut Graph, ids: &[NodeId]) -> Self::Bound<'a> {
        self.bound_with(ids.to_vec())
    }
}

fn network_objective<'a, N: Checkable + 'a>(
    net: N,
    build: impl Fn(&mut Graph, &[NodeId], &N) -> Result<NodeId> + 'a,
) -> Objective<'a> {
    Box::new(move |flat, want_grad| {
        let mut n = net.clone();
        n.assign(flat)?;
        let mut g = Graph::new();
        let ids = n.bind_params(&mut g, want_grad);
        let out = build(&mut g, &ids, &n)?;
        let v = g.scalar(out);
        if !want_grad {
            return Ok((v, Vec::new()));
        }
        let grads = g.backward(out)?;
        let flat_grad = ids
            .iter()
            .zip(n_lengths(&g, &ids))
            .flat_map(|(&id, len)| grads.get_or_zeros(id, len))
            .collect();
        Ok((v, flat_grad))
    })
}

fn n_lengths(g: &Graph, ids: &[NodeId]) -> Vec<usize> {
    ids.iter().map(|&id| g.value(id).len()).collect()
}

/// Runs one component; perturbs its analytic gradient when `corrupt`.
pub fn check_component(name: &str, opts: &SuiteOptions) -> Result<ComponentCheck> {
    let mut cx = Ctx {
        rng: ChaCha8Rng::seed_from_u64(opts.seed ^ fxhash(name)),
        size: opts.size,
        seed: opts.seed,
    };
    let (params, objective) = build_component(name, &mut cx)?;
    let (_, mut analytic) = objective(&params, true)?;
    if opts.corrupt.iter().any(|c| c == name || c == "all") {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        for a in &mut analytic {
            *a = *a * 1.05 + r.random_range(-1e-3..1e-3);
        }
    }
    let cfg = GradCheckConfig {
        eps: opts.eps,
        max_coords: Some(opts.max_coords),
        seed: opts.seed,
        kink_tol: Some(opts.kink_tol),
    };
    let r = grad_check_report(|p| objective(p, false).map(|r| r.0).unwrap_or(f64::NAN), &params, &analytic, cfg)?;
    Ok(ComponentCheck {
        component: name.to_string(),
        max_rel_error: r.max_rel_error,
        parameters: params.len(),
        checked: r.checked,
        skipped: r.skipped,
    })
}

fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

pub fn gradcheck_suite(opts: &SuiteOptions) -> Result<Vec<ComponentCheck>> {
    if opts.size < 8 || opts.size % 8 != 0 {
        return Err(Error::invalid(format!("gradcheck size {} must be a multiple of 8, at least 8", opts.size)));
    }
    for c in &opts.corrupt {
        if c != "all" && !COMPONENTS.contains(&c.as_str()) {
            return Err(Error::invalid(format!("unknown gradcheck component `{c}`")));
        }
    }
    COMPONENTS.iter().map(|c| check_component(c, opts)).collect()
}
