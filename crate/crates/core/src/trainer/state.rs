use super::config::TrainConfig;
use super::optim::Adam;
use crate::data::{normalize_raw, UnpairedBatch};
use crate::diffcore::{Graph, NodeId, Tensor4};
use crate::error::{Error, Result};
use crate::losses::{tape, DirectionReport, LossReport};
use crate::networks::{
    build_perception_net, derive_rng, DiscriminatorScale, Generator, PatchDiscriminator, PerceptionNet, INIT_STD,
};
use crate::noisemix::{mix_with_field, noise_field};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// `A` holds photos, `B` caricatures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    A,
    B,
}

/// One discriminator with its optimizer. `domain` is the domain it judges.
#[derive(Clone, Debug)]
pub struct DiscSlot {
    pub name: &'static str,
    pub domain: Domain,
    pub scale: DiscriminatorScale,
    pub net: PatchDiscriminator,
    pub opt: Adam,
}

impl DiscSlot {
    /// One gradient step on `-log D(real) - log(1 - D(fake))`; returns the pre-step loss.
    fn update(&mut self, real: &Tensor4, fake: &Tensor4) -> Result<f64> {
        let mut g = Graph::new();
        let (loss, grads) = {
            let bound = self.net.bind(&mut g, true);
            let r = g.constant(real.clone());
            let f = g.constant(fake.clone());
            let pr = bound.forward(&mut g, r)?;
            let pf = bound.forward(&mut g, f)?;
            let loss = tape::adversarial_d(&mut g, pr, pf)?;
            let v = g.scalar(loss);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("discriminator {} loss {v}", self.name)));
            }
            let grads = g.backward(loss)?;
            (v, self.net.params().collect_grads(&grads, &bound.ids))
        };
        self.opt.step(self.net.params_mut(), &grads)?;
        Ok(loss)
    }
}

pub(crate) const DISC_LAYOUT: [(&str, Domain, DiscriminatorScale); 4] = [
    ("d_b_coarse", Domain::B, DiscriminatorScale::Coarse),
    ("d_b_fine", Domain::B, DiscriminatorScale::Fine),
    ("d_a_coarse", Domain::A, DiscriminatorScale::Coarse),
    ("d_a_fine", Domain::A, DiscriminatorScale::Fine),
];

fn net_seed(seed: u64, label: &str) -> u64 {
    derive_rng(seed, label).next_u64()
}

/// Everything a training run mutates, plus the frozen perception network.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub cfg: TrainConfig,
    /// Photo → caricature.
    pub g1: Generator,
    /// Caricature → photo.
    pub g2: Generator,
    pub g1_opt: Adam,
    pub g2_opt: Adam,
    /// Enabled discriminators in `d_b_coarse, d_b_fine, d_a_coarse, d_a_fine` order.
    pub discs: Vec<DiscSlot>,
    pub perception: PerceptionNet,
    /// Completed steps.
    pub step: u64,
    /// Drives the noise blend.
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: TrainConfig) -> Result<TrainState> {
        cfg.validate()?;
        let perception = build_perception_net(&cfg.perception)?;
        cfg.weights
            .validate(perception.tap_count())
            .map_err(|e| Error::config("loss.lambda_n", e.to_string()))?;
        let gcfg = cfg.generator_config();
        let g1 = Generator::with_std(gcfg.clone(), net_seed(cfg.seed, "g1"), INIT_STD)?;
        let g2 = Generator::with_std(gcfg, net_seed(cfg.seed, "g2"), INIT_STD)?;
        let (lr, betas) = (cfg.learning_rate, cfg.betas);
        let v = cfg.variant;
        let mut discs = Vec::new();
        for (name, domain, scale) in DISC_LAYOUT {
            let (enabled, kind) = match scale {
                DiscriminatorScale::Coarse => (v.use_coarse, v.coarse_kind()),
                DiscriminatorScale::Fine => (v.use_fine, v.fine_kind()),
            };
            if !enabled {
                continue;
            }
            let net = PatchDiscriminator::new(kind, cfg.resolution, cfg.disc_channels, net_seed(cfg.seed, name), INIT_STD)?;
            let opt = Adam::new(net.params(), lr, betas);
            discs.push(DiscSlot {
                name,
                domain,
                scale,
                net,
                opt,
            });
        }
        Ok(TrainState {
            g1_opt: Adam::new(g1.params(), lr, betas),
            g2_opt: Adam::new(g2.params(), lr, betas),
            rng: derive_rng(cfg.seed, "noise"),
            cfg,
            g1,
            g2,
            discs,
            perception,
            step: 0,
        })
    }

    pub fn disc(&self, domain: Domain, scale: DiscriminatorScale) -> Option<&PatchDiscriminator> {
        self.discs
            .iter()
            .find(|d| d.domain == domain && d.scale == scale)
            .map(|d| &d.net)
    }

    /// Normalized network input: each sample blended with its own noise field.
    fn noisy_input(&mut self, raw: &Tensor4) -> Result<Tensor4> {
        let mut samples = Vec::with_capacity(raw.shape().n());
        for i in 0..raw.shape().n() {
            let x = raw.slice_sample(i);
            let alpha = self.cfg.noise.draw_alpha(&mut self.rng);
            let seed = self.rng.next_u64();
            samples.push(if alpha == 1.0 {
                x
            } else {
                mix_with_field(&x, &noise_field(x.shape(), seed), alpha)?
            });
        }
        Ok(normalize_raw(&Tensor4::stack(&samples)?))
    }

    /// One alternating update: discriminators on detached translations, then
    /// both generators against the freshly updated discriminators.
    pub fn train_step(&mut self, batch: &UnpairedBatch) -> Result<LossReport> {
        let r = self.cfg.resolution;
        let s = batch.x.shape();
        if s.c() != 3 || s.h() != r || s.w() != r {
            return Err(Error::shape("train_step batch", format!("(n,3,{r},{r})"), s));
        }
        let x_in = self.noisy_input(&batch.x_raw)?;
        let y_in = self.noisy_input(&batch.y_raw)?;
        let step = self.step + 1;
        let v = self.cfg.variant;

        let mut g = Graph::new();
        let b1 = self.g1.bind(&mut g, true);
        let b2 = self.g2.bind(&mut g, true);
        let xn = g.constant(x_in);
        let yn = g.constant(y_in);
        let fake_b = b1.forward(&mut g, xn)?;
        let fake_a = b2.forward(&mut g, yn)?;
        let rec_a = b2.forward(&mut g, fake_b)?;
        let rec_b = b1.forward(&mut g, fake_a)?;

        let fake_b_val = g.value(fake_b).clone();
        let fake_a_val = g.value(fake_a).clone();
        let d_losses: Vec<f64> = self
            .discs
            .par_iter_mut()
            .map(|slot| match slot.domain {
                Domain::B => slot.update(&batch.y, &fake_b_val),
                Domain::A => slot.update(&batch.x, &fake_a_val),
            })
            .collect::<Result<_>>()
            .map_err(|e| Error::NonFinite(format!("step {step}: {e}")))?;
        let d_loss = |domain: Domain, scale: DiscriminatorScale| {
            self.discs
                .iter()
                .zip(&d_losses)
                .find(|(d, _)| d.domain == domain && d.scale == scale)
                .map_or(0.0, |(_, l)| *l)
        };

        let mut w = self.cfg.weights.clone();
        w.coarse_fine_mix = w.effective_mix(v.use_coarse, v.use_fine);
        if !v.use_cyc {
            w.gamma = 0.0;
        }
        if !v.use_percep {
            w.sigma = 0.0;
        }
        let zero = g.constant(Tensor4::scalar(0.0));
        let adv = |g: &mut Graph, domain: Domain, scale: DiscriminatorScale, fake: NodeId| -> Result<NodeId> {
            match self.discs.iter().find(|d| d.domain == domain && d.scale == scale) {
                Some(d) => {
                    let bd = d.net.bind(g, false);
                    let p = bd.forward(g, fake)?;
                    Ok(tape::adversarial_g(g, p))
                }
                None => Ok(zero),
            }
        };
        let adv_ab = (
            adv(&mut g, Domain::B, DiscriminatorScale::Coarse, fake_b)?,
            adv(&mut g, Domain::B, DiscriminatorScale::Fine, fake_b)?,
        );
        let adv_ba = (
            adv(&mut g, Domain::A, DiscriminatorScale::Coarse, fake_a)?,
            adv(&mut g, Domain::A, DiscriminatorScale::Fine, fake_a)?,
        );
        let x_clean = g.constant(batch.x.clone());
        let y_clean = g.constant(batch.y.clone());
        let cyc_ab = g.l1_mean(rec_a, x_clean)?;
        let cyc_ba = g.l1_mean(rec_b, y_clean)?;

        let bp = self.perception.bind(&mut g);
        let lambda = &self.cfg.weights.lambda_n;
        let target_feats = |g: &mut Graph, img: &Tensor4| -> Result<Vec<NodeId>> {
            Ok(self.perception.features(img)?.into_iter().map(|f| g.constant(f)).collect())
        };
        let ty = target_feats(&mut g, &batch.y)?;
        let percep_ab = tape::perceptual(&mut g, &bp, &ty, fake_b, lambda)?;
        let percep_ba = if self.cfg.symmetric_percep {
            let tx = target_feats(&mut g, &batch.x)?;
            tape::perceptual(&mut g, &bp, &tx, fake_a, lambda)?
        } else {
            zero
        };

        let total_ab = tape::total(&mut g, adv_ab.0, adv_ab.1, cyc_ab, percep_ab, &w)?;
        let total_ba = tape::total(&mut g, adv_ba.0, adv_ba.1, cyc_ba, percep_ba, &w)?;
        let total = g.weighted_sum(&[(total_ab, 1.0), (total_ba, 1.0)])?;

        let (mc, mf) = w.coarse_fine_mix;
        let direction = |adv: (NodeId, NodeId), dc: f64, df: f64, cyc: NodeId, percep: NodeId, t: NodeId| {
            DirectionReport {
                adv_g: mc * g.scalar(adv.0) + mf * g.scalar(adv.1),
                adv_d_coarse: dc,
                adv_d_fine: df,
                cyc: g.scalar(cyc),
                percep: g.scalar(percep),
                total_g: g.scalar(t),
            }
        };
        let report = LossReport {
            step,
            ab: direction(
                adv_ab,
                d_loss(Domain::B, DiscriminatorScale::Coarse),
                d_loss(Domain::B, DiscriminatorScale::Fine),
                cyc_ab,
                percep_ab,
                total_ab,
            ),
            ba: direction(
                adv_ba,
                d_loss(Domain::A, DiscriminatorScale::Coarse),
                d_loss(Domain::A, DiscriminatorScale::Fine),
                cyc_ba,
                percep_ba,
                total_ba,
            ),
        };
        if !report.all_finite() {
            return Err(Error::NonFinite(format!("step {step}: non-finite loss {report:?}")));
        }

        let grads = g.backward(total)?;
        let g1_grads = self.g1.params().collect_grads(&grads, &b1.ids);
        let g2_grads = self.g2.params().collect_grads(&grads, &b2.ids);
        drop((b1, b2, bp));
        self.g1_opt.step(self.g1.params_mut(), &g1_grads)?;
        self.g2_opt.step(self.g2.params_mut(), &g2_grads)?;
        self.step = step;
        Ok(report)
    }

    /// Photo → caricature translation of normalized images.
    pub fn translate(&self, x: &Tensor4) -> Result<Tensor4> {
        self.g1.forward(x)
    }

    /// Caricature → photo translation of normalized images.
    pub fn translate_back(&self, y: &Tensor4) -> Result<Tensor4> {
        self.g2.forward(y)
    }

    pub(crate) fn rng_from_parts(seed: [u8; 32], stream: u64, word_pos: u128) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        rng
    }
}
