//! Binary checkpoint: `DPTC` magic, version, config hash and text, named
//! parameter tensors, optimizer moments and counters, step, noise RNG state.
//! All integers and floats are little-endian.

use super::config::TrainConfig;
use super::optim::Adam;
use super::state::TrainState;
use crate::diffcore::{Shape4, Tensor4};
use crate::error::{Error, Result};
use crate::networks::perception::ByteReader;
use crate::networks::{NamedParam, ParamSet};
use std::fs;
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 4] = b"DPTC";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub config: TrainConfig,
    /// Network parameters, named `<network>/<param>`.
    pub params: Vec<NamedParam>,
    /// Adam moments, named `<network>/m/<param>` and `<network>/v/<param>`.
    pub moments: Vec<NamedParam>,
    /// Adam step counters per network.
    pub opt_steps: Vec<(String, u64)>,
    pub step: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

fn networks(state: &TrainState) -> Vec<(&str, &ParamSet, &Adam)> {
    let mut out = vec![
        ("g1", state.g1.params(), &state.g1_opt),
        ("g2", state.g2.params(), &state.g2_opt),
    ];
    out.extend(state.discs.iter().map(|d| (d.name, d.net.params(), &d.opt)));
    out
}

fn corrupt(message: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("corrupt checkpoint: {message}"))
}

impl Checkpoint {
    pub fn capture(state: &TrainState) -> Checkpoint {
        let mut params = Vec::new();
        let mut moments = Vec::new();
        let mut opt_steps = Vec::new();
        for (net, ps, opt) in networks(state) {
            for (i, p) in ps.iter().enumerate() {
                params.push(NamedParam {
                    name: format!("{net}/{}", p.name),
                    tensor: p.tensor.clone(),
                });
                for (tag, buf) in [("m", &opt.m[i]), ("v", &opt.v[i])] {
                    moments.push(NamedParam {
                        name: format!("{net}/{tag}/{}", p.name),
                        tensor: Tensor4::from_vec(p.tensor.shape(), buf.clone()).expect("moment matches parameter"),
                    });
                }
            }
            opt_steps.push((net.to_string(), opt.t));
        }
        Checkpoint {
            config_hash: state.cfg.config_hash(),
            config: state.cfg.clone(),
            params,
            moments,
            opt_steps,
            step: state.step,
            rng_seed: state.rng.get_seed(),
            rng_stream: state.rng.get_stream(),
            rng_word_pos: state.rng.get_word_pos(),
        }
    }

    /// Rebuilds the training state under `cfg`, which may differ from the
    /// stored config only in run length and output cadence.
    pub fn restore(&self, cfg: &TrainConfig) -> Result<TrainState> {
        if cfg.config_hash() != self.config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash {:016x} of the run does not match checkpoint hash {:016x}",
                cfg.config_hash(),
                self.config_hash
            )));
        }
        let mut state = TrainState::new(cfg.clone())?;
        let mut params = self.params.iter();
        let mut moments = self.moments.iter();
        let mut steps = self.opt_steps.iter();
        let mut load = |net: &str, ps: &mut ParamSet, opt: &mut Adam| -> Result<()> {
            let n = ps.len();
            let strip = |p: &NamedParam, prefix: &str| -> Result<NamedParam> {
                let name = p
                    .name
                    .strip_prefix(prefix)
                    .ok_or_else(|| Error::Checkpoint(format!("expected a `{prefix}` tensor, found `{}`", p.name)))?;
                Ok(NamedParam {
                    name: name.to_string(),
                    tensor: p.tensor.clone(),
                })
            };
            let mine: Vec<NamedParam> = params.by_ref().take(n).map(|p| strip(p, &format!("{net}/"))).collect::<Result<_>>()?;
            ps.load_from(&mine)?;
            for i in 0..n {
                for (tag, dst) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
                    let p = moments
                        .next()
                        .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moments for `{net}`")))?;
                    let p = strip(p, &format!("{net}/{tag}/"))?;
                    if p.tensor.len() != dst.len() {
                        return Err(Error::Checkpoint(format!("moment `{}` has the wrong size", p.name)));
                    }
                    dst.copy_from_slice(p.tensor.data());
                }
            }
            match steps.next() {
                Some((name, t)) if name == net => opt.t = *t,
                _ => return Err(Error::Checkpoint(format!("missing optimizer counter for `{net}`"))),
            }
            Ok(())
        };
        load("g1", state.g1.params_mut(), &mut state.g1_opt)?;
        load("g2", state.g2.params_mut(), &mut state.g2_opt)?;
        for d in &mut state.discs {
            load(d.name, d.net.params_mut(), &mut d.opt)?;
        }
        if params.next().is_some() || moments.next().is_some() || steps.next().is_some() {
            return Err(Error::Checkpoint("checkpoint holds networks the config does not build".into()));
        }
        state.step = self.step;
        state.rng = TrainState::rng_from_parts(self.rng_seed, self.rng_stream, self.rng_word_pos);
        Ok(state)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        fn string(out: &mut Vec<u8>, s: &str) {
            out.extend((s.len() as u32).to_le_bytes());
            out.extend(s.as_bytes());
        }
        fn tensors(out: &mut Vec<u8>, ts: &[NamedParam]) {
            out.extend((ts.len() as u32).to_le_bytes());
            for p in ts {
                string(out, &p.name);
                for d in p.tensor.shape().0 {
                    out.extend((d as u32).to_le_bytes());
                }
                for v in p.tensor.data() {
                    out.extend(v.to_le_bytes());
                }
            }
        }
        let mut out = Vec::new();
        out.extend(CKPT_MAGIC);
        out.extend(CKPT_VERSION.to_le_bytes());
        out.extend(self.config_hash.to_le_bytes());
        string(&mut out, &serde_json::to_string(&self.config).expect("config serializes"));
        tensors(&mut out, &self.params);
        tensors(&mut out, &self.moments);
        out.extend((self.opt_steps.len() as u32).to_le_bytes());
        for (name, t) in &self.opt_steps {
            string(&mut out, name);
            out.extend(t.to_le_bytes());
        }
        out.extend(self.step.to_le_bytes());
        out.extend(self.rng_seed);
        out.extend(self.rng_stream.to_le_bytes());
        out.extend(self.rng_word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        Self::parse(bytes).map_err(|e| match e {
            Error::Checkpoint(_) => e,
            other => corrupt(other),
        })
    }

    fn parse(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        if r.take(4)? != CKPT_MAGIC {
            return Err(corrupt("bad magic, not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let config_hash = r.u64()?;
        let at = r.pos;
        let text = r.string()?;
        let config: TrainConfig =
            serde_json::from_str(&text).map_err(|e| r.fail(at, format!("bad config text: {e}")))?;
        if config.config_hash() != config_hash {
            return Err(corrupt("stored config does not match its hash"));
        }
        let tensors = |r: &mut ByteReader| -> Result<Vec<NamedParam>> {
            let n = r.u32()? as usize;
            let mut out = Vec::new();
            for _ in 0..n {
                let name = r.string()?;
                let at = r.pos;
                let mut dims = [0usize; 4];
                for d in &mut dims {
                    *d = r.u32()? as usize;
                }
                let shape = Shape4(dims);
                let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
                let len = len.ok_or_else(|| r.fail(at, "tensor size overflows"))?;
                let data = r.f64s(len)?;
                let tensor = Tensor4::from_vec(shape, data).map_err(|e| r.fail(at, e.to_string()))?;
                out.push(NamedParam { name, tensor });
            }
            Ok(out)
        };
        let params = tensors(&mut r)?;
        let moments = tensors(&mut r)?;
        let n = r.u32()? as usize;
        let mut opt_steps = Vec::new();
        for _ in 0..n {
            let name = r.string()?;
            opt_steps.push((name, r.u64()?));
        }
        let step = r.u64()?;
        let rng_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let rng_stream = r.u64()?;
        let rng_word_pos = r.u128()?;
        if !r.at_end() {
            return Err(r.fail(r.pos, "trailing bytes"));
        }
        Ok(Checkpoint {
            config_hash,
            config,
            params,
            moments,
            opt_steps,
            step,
            rng_seed,
            rng_stream,
            rng_word_pos,
        })
    }

    /// Writes through a temporary file so a crash never leaves a half-written checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    Checkpoint::capture(state).save(path)
}

/// Loads `path` and rebuilds the state under `cfg`.
pub fn load_checkpoint(path: &Path, cfg: &TrainConfig) -> Result<TrainState> {
    Checkpoint::load(path)?.restore(cfg)
}
