//! Alternating generator/discriminator optimization with checkpointing,
//! loss traces, sample grids and ablation runs.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod state;
pub mod trace;

pub use ablate::{ablate, ablation_matrix, AblationRun, VariantSpec};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{TrainConfig, Variant};
pub use optim::Adam;
pub use state::{DiscSlot, Domain, TrainState};
pub use trace::LossTrace;

use crate::data::{export_grid_labeled, normalize_raw, Dataset, RawDomain, UnpairedSampler};
use crate::diffcore::Tensor4;
use crate::error::{Error, Result};
use crate::losses::LossReport;
use std::fs;
use std::path::{Path, PathBuf};

/// Raw `[0, 255]` training images of both domains.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub a: RawDomain,
    pub b: RawDomain,
}

impl TrainData {
    pub fn load(ds: &Dataset, resolution: usize) -> Result<TrainData> {
        Ok(TrainData {
            a: RawDomain::load(&ds.train_a, resolution)?,
            b: RawDomain::load(&ds.train_b, resolution)?,
        })
    }

    /// Normalized first `n` photos, used for sample grids.
    pub fn preview(&self, n: usize) -> Vec<Tensor4> {
        self.a.images.iter().take(n).map(normalize_raw).collect()
    }
}

/// Where a run writes its artifacts and how it reports progress.
#[derive(Default)]
pub struct RunOptions {
    /// Run directory holding `checkpoints/`, `samples/` and `trace.csv`.
    pub out_dir: Option<PathBuf>,
    pub progress: Option<Box<dyn Fn(&LossReport) + Send + Sync>>,
}

impl RunOptions {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        RunOptions {
            out_dir: Some(dir.into()),
            progress: None,
        }
    }
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:06}.dptc"))
}

pub fn trace_path(out_dir: &Path) -> PathBuf {
    out_dir.join("trace.csv")
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Rows of `x`, `G1(x)`, `G2(G1(x))` for each preview image.
pub fn sample_grid(state: &TrainState, preview: &[Tensor4], path: &Path) -> Result<()> {
    let mut cells = Vec::with_capacity(preview.len() * 3);
    for x in preview {
        let fake = state.translate(x)?;
        let rec = state.translate_back(&fake)?;
        cells.extend([x.clone(), fake, rec]);
    }
    let labels = vec![
        ("step".to_string(), state.step.to_string()),
        ("columns".to_string(), "input,translated,reconstructed".to_string()),
    ];
    export_grid_labeled(&cells, 3, &labels, path)
}

/// Trains until `state.step == until`, appending to `trace`.
pub fn run_until(
    state: &mut TrainState,
    data: &TrainData,
    until: u64,
    opts: &RunOptions,
    trace: &mut LossTrace,
) -> Result<()> {
    let cfg = state.cfg.clone();
    let sampler = UnpairedSampler::new(cfg.seed, data.a.len(), data.b.len())?;
    let preview = data.preview(4);
    let mut last_ckpt: Option<PathBuf> = None;
    if let Some(dir) = &opts.out_dir {
        ensure_dir(&dir.join("checkpoints"))?;
        ensure_dir(&dir.join("samples"))?;
    }
    while state.step < until {
        let batch = sampler.batch(&data.a, &data.b, state.step, cfg.batch_size)?;
        let report = match state.train_step(&batch) {
            Ok(r) => r,
            Err(e) => {
                let Some(dir) = &opts.out_dir else { return Err(e) };
                trace.write(&trace_path(dir))?;
                let ck = last_ckpt.as_ref().map_or("none".into(), |p| p.display().to_string());
                let msg = format!("{e}; trace written to {}, last checkpoint {ck}", trace_path(dir).display());
                return Err(match e {
                    Error::NonFinite(_) => Error::NonFinite(msg),
                    other => other,
                });
            }
        };
        if let Some(f) = &opts.progress {
            f(&report);
        }
        trace.push(report);
        let Some(dir) = &opts.out_dir else { continue };
        let step = state.step;
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != until {
            let p = checkpoint_path(dir, step);
            save_checkpoint(state, &p)?;
            last_ckpt = Some(p);
            trace.write(&trace_path(dir))?;
        }
        if cfg.sample_every > 0 && step % cfg.sample_every == 0 && step != until {
            sample_grid(state, &preview, &dir.join("samples").join(format!("step_{step:06}.png")))?;
        }
    }
    if let Some(dir) = &opts.out_dir {
        let step = state.step;
        save_checkpoint(state, &checkpoint_path(dir, step))?;
        trace.write(&trace_path(dir))?;
        sample_grid(state, &preview, &dir.join("samples").join(format!("step_{step:06}.png")))?;
    }
    Ok(())
}

/// Fresh run of `cfg.total_steps` steps.
pub fn train(cfg: &TrainConfig, data: &TrainData, opts: &RunOptions) -> Result<(TrainState, LossTrace)> {
    let mut state = TrainState::new(cfg.clone())?;
    let mut trace = LossTrace::default();
    run_until(&mut state, data, cfg.total_steps, opts, &mut trace)?;
    Ok((state, trace))
}

/// Continues from a checkpoint up to `cfg.total_steps`. An existing trace in
/// the run directory is kept up to the checkpoint's step.
pub fn resume(checkpoint: &Path, cfg: &TrainConfig, data: &TrainData, opts: &RunOptions) -> Result<(TrainState, LossTrace)> {
    let mut state = load_checkpoint(checkpoint, cfg)?;
    let mut trace = match &opts.out_dir {
        Some(dir) if trace_path(dir).exists() => LossTrace::read(&trace_path(dir))?,
        _ => LossTrace::default(),
    };
    trace.truncate_to(state.step);
    run_until(&mut state, data, cfg.total_steps, opts, &mut trace)?;
    Ok((state, trace))
}
