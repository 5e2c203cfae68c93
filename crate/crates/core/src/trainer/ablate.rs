use super::{train, RunOptions, TrainConfig, TrainData, Variant};
use crate::data::export_grid_labeled;
use crate::diffcore::Tensor4;
use crate::error::{Error, Result};
use crate::trainer::LossTrace;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariantSpec {
    pub id: String,
    pub variant: Variant,
}

pub const DEFAULT_GRID_PAIRS: [(usize, usize); 3] = [(4, 8), (4, 16), (4, 32)];

/// `{coarse, fine, dual} × ±cyc × ±percep`, then one dual run with all
/// losses per `(coarse_grid, fine_grid)` pair.
pub fn ablation_matrix(base: &Variant, grid_pairs: &[(usize, usize)]) -> Vec<VariantSpec> {
    let mut out = Vec::new();
    for (disc, use_coarse, use_fine) in [("coarse", true, false), ("fine", false, true), ("dual", true, true)] {
        for use_cyc in [true, false] {
            for use_percep in [true, false] {
                out.push(VariantSpec {
                    id: format!(
                        "{disc}_{}_{}",
                        if use_cyc { "cyc" } else { "nocyc" },
                        if use_percep { "percep" } else { "nopercep" }
                    ),
                    variant: Variant {
                        use_coarse,
                        use_fine,
                        use_cyc,
                        use_percep,
                        ..*base
                    },
                });
            }
        }
    }
    for &(c, f) in grid_pairs {
        out.push(VariantSpec {
            id: format!("grid_c{c}_f{f}"),
            variant: Variant {
                use_coarse: true,
                use_fine: true,
                use_cyc: true,
                use_percep: true,
                coarse_grid: c,
                fine_grid: f,
            },
        });
    }
    out
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub spec: VariantSpec,
    pub trace: LossTrace,
    /// Discriminators trained across both domains.
    pub discriminators: usize,
    /// Photo → caricature translations of the preview images.
    pub samples: Vec<Tensor4>,
    pub run_dir: Option<PathBuf>,
}

/// Rows are preview photos; column 0 is the input, then one column per run.
fn comparison_grid(preview: &[Tensor4], runs: &[&AblationRun], path: &Path) -> Result<()> {
    let mut cells = Vec::new();
    for (i, x) in preview.iter().enumerate() {
        cells.push(x.clone());
        cells.extend(runs.iter().map(|r| r.samples[i].clone()));
    }
    let mut labels = vec![("col0".to_string(), "input".to_string())];
    labels.extend(runs.iter().enumerate().map(|(k, r)| (format!("col{}", k + 1), r.spec.id.clone())));
    export_grid_labeled(&cells, runs.len() + 1, &labels, path)?;
    let sidecar: String = labels.iter().map(|(k, v)| format!("{k}\t{v}\n")).collect();
    let side = path.with_extension("labels.txt");
    fs::write(&side, sidecar).map_err(|e| Error::io(&side, e))
}

/// Trains every variant of the matrix from the same seed. With `out_dir`,
/// each variant gets its own run directory and two comparison grids are
/// written: `loss_variants.png` and `grid_sizes.png`.
pub fn ablate(
    base: &TrainConfig,
    data: &TrainData,
    grid_pairs: &[(usize, usize)],
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRun>> {
    let preview = data.preview(3);
    let specs = ablation_matrix(&base.variant, grid_pairs);
    for s in &specs {
        TrainConfig {
            variant: s.variant,
            ..base.clone()
        }
        .validate()
        .map_err(|e| Error::config("ablation.grid_pairs", format!("variant {}: {e}", s.id)))?;
    }
    let mut runs = Vec::with_capacity(specs.len());
    for spec in specs {
        let cfg = TrainConfig {
            variant: spec.variant,
            ..base.clone()
        };
        let run_dir = out_dir.map(|d| d.join(&spec.id));
        let opts = RunOptions {
            out_dir: run_dir.clone(),
            progress: None,
        };
        let (state, trace) = train(&cfg, data, &opts)?;
        let samples = preview.iter().map(|x| state.translate(x)).collect::<Result<_>>()?;
        runs.push(AblationRun {
            discriminators: state.discs.len(),
            spec,
            trace,
            samples,
            run_dir,
        });
    }
    if let Some(dir) = out_dir {
        let (loss, grid): (Vec<&AblationRun>, Vec<&AblationRun>) =
            runs.iter().partition(|r| !r.spec.id.starts_with("grid_"));
        comparison_grid(&preview, &loss, &dir.join("loss_variants.png"))?;
        if !grid.is_empty() {
            comparison_grid(&preview, &grid, &dir.join("grid_sizes.png"))?;
        }
        let mut summary = String::from("id,discriminators,steps,final_cyc,final_percep,final_total\n");
        for r in &runs {
            let last = r.trace.last().copied().unwrap_or_default();
            let _ = writeln!(
                summary,
                "{},{},{},{},{},{}",
                r.spec.id,
                r.discriminators,
                r.trace.len(),
                last.cyc(),
                last.ab.percep + last.ba.percep,
                last.total_g()
            );
        }
        let p = dir.join("ablation.csv");
        fs::write(&p, summary).map_err(|e| Error::io(&p, e))?;
    }
    Ok(runs)
}
