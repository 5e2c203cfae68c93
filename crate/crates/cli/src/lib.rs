//! Command layer of the `caricature` tool.

pub mod config;

use caricature_core::data::{
    export_grid_labeled, is_image_path, load_dataset, load_raw, normalize_raw, save_image, write_toy_corpus,
};
use caricature_core::diffcore::Tensor4;
use caricature_core::eval::{ClassifierHead, CyclingOneHotStub, ScoreReport, UniformStub};
use caricature_core::losses::LossReport;
use caricature_core::networks::ConvClassifier;
use caricature_core::noisemix::{alpha_sweep, check_alpha};
use caricature_core::trainer::{self, Checkpoint, RunOptions, TrainData, TrainState};
use caricature_core::verify::{gradcheck_suite, SuiteOptions, GRADCHECK_TOLERANCE};
use caricature_core::{Error, Result};
use clap::{Parser, Subcommand};
use config::RunConfig;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "caricature", version, about = "Unpaired photo to caricature translation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train both generators and their discriminators from a TOML config.
    Train {
        config: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides run.out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint up to train.steps.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Suppress per-step progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Translate one image or a folder of images with a trained checkpoint.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Blend weight of the input against uniform noise; 1 means no noise.
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        /// Noise seed; image i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Caricature to photo instead of photo to caricature.
        #[arg(long)]
        reverse: bool,
    },
    /// Translate inputs at several alphas into one labeled grid.
    SweepAlpha {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1.0,0.7,0.4")]
        alphas: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every ablation variant and write comparison grids.
    Ablate {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and numeric gradients of every differentiable component.
    Gradcheck {
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb the analytic gradient of a component (negative control).
        #[arg(long, hide = true)]
        corrupt: Vec<String>,
    },
    /// Inception-style score of translated test photos.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root (its testA/ is used) or a folder of photos.
        #[arg(long)]
        test_dir: PathBuf,
        /// desk_trained[:seed], stub-uniform:C or stub-onehot:C.
        #[arg(long, default_value = "desk_trained")]
        classifier: String,
        #[arg(long, default_value_t = 10)]
        splits: usize,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a procedural trainA/ trainB/ testA/ testB/ face corpus.
    ToyCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        train: usize,
        #[arg(long, default_value_t = 20)]
        test: usize,
        #[arg(long, default_value_t = 64)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Runs a parsed command; the returned value is the process exit code.
pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            resume,
            quiet,
        } => cmd_train(&config, seed, out, resume.as_deref(), quiet),
        Command::Translate {
            checkpoint,
            input,
            out,
            alpha,
            seed,
            reverse,
        } => cmd_translate(&checkpoint, &input, &out, alpha, seed, reverse),
        Command::SweepAlpha {
            checkpoint,
            input,
            alphas,
            seed,
            out,
        } => cmd_sweep(&checkpoint, &input, &alphas, seed, &out),
        Command::Ablate { config, seed, out } => cmd_ablate(&config, seed, out),
        Command::Gradcheck { size, seed, corrupt } => cmd_gradcheck(size, seed, corrupt),
        Command::Score {
            checkpoint,
            test_dir,
            classifier,
            splits,
            out,
        } => cmd_score(&checkpoint, &test_dir, &classifier, splits, out.as_deref()),
        Command::ToyCorpus {
            out,
            train,
            test,
            size,
            seed,
        } => {
            write_toy_corpus(&out, train, test, size, seed)?;
            println!("{}", load_dataset(&out)?.summary());
            Ok(0)
        }
    }
}

/// Single-line report for a failed command.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("error[{}]: {msg}", e.category())
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, bytes).map_err(|e| Error::io(p, e))
}

fn load_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = config::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if out.is_some() {
        cfg.out_dir = out;
    }
    Ok(cfg)
}

fn load_train_data(cfg: &RunConfig) -> Result<(TrainData, String)> {
    let ds = load_dataset(cfg.data_root()?)?;
    let summary = ds.summary().to_string();
    eprintln!("dataset {summary}");
    Ok((TrainData::load(&ds, cfg.train.resolution)?, summary))
}

/// Echoes the config text and writes `meta.json` into the run directory.
fn write_run_header(dir: &Path, cfg: &RunConfig, command: &str, dataset: &str, extra: serde_json::Value) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("config.toml"), &cfg.text)?;
    let mut meta = serde_json::json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": cfg.train.seed,
        "config_hash": format!("{:016x}", cfg.train.config_hash()),
        "perception": cfg.train.perception.id(),
        "dataset": dataset,
        "config": cfg.train,
    });
    if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
        m.extend(e);
    }
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::invalid(e.to_string()))?;
    write_file(&dir.join("meta.json"), text + "\n")
}

fn progress(total: u64) -> Box<dyn Fn(&LossReport) + Send + Sync> {
    let every = (total / 20).max(1);
    Box::new(move |r: &LossReport| {
        if r.step % every == 0 || r.step == total {
            eprintln!(
                "step {}/{total}  g_ab {:.4}  g_ba {:.4}  cyc {:.4}  percep {:.4}",
                r.step, r.ab.total_g, r.ba.total_g, r.ab.cyc, r.ab.percep
            );
        }
    })
}

fn cmd_train(path: &Path, seed: Option<u64>, out: Option<PathBuf>, resume: Option<&Path>, quiet: bool) -> Result<u8> {
    let cfg = load_config(path, seed, out)?;
    let dir = cfg.out_dir()?.to_path_buf();
    let (data, summary) = load_train_data(&cfg)?;
    let extra = serde_json::json!({ "resumed_from": resume.map(|p| p.display().to_string()) });
    write_run_header(&dir, &cfg, "train", &summary, extra)?;
    let opts = RunOptions {
        out_dir: Some(dir.clone()),
        progress: (!quiet).then(|| progress(cfg.train.total_steps)),
    };
    let (state, trace) = match resume {
        Some(ck) => trainer::resume(ck, &cfg.train, &data, &opts)?,
        None => trainer::train(&cfg.train, &data, &opts)?,
    };
    println!(
        "trained {} steps; checkpoint {}; trace {} ({} rows)",
        state.step,
        trainer::checkpoint_path(&dir, state.step).display(),
        trainer::trace_path(&dir).display(),
        trace.len()
    );
    Ok(0)
}

fn load_state(checkpoint: &Path) -> Result<TrainState> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = ck.config.clone();
    ck.restore(&cfg)
}

/// A single image file, or the image files of a folder in name order.
fn collect_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = fs::read_dir(input).map_err(|e| Error::io(input, e))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(input, e))?.path();
        if p.is_file() && is_image_path(&p) {
            files.push(p);
        }
    }
    if files.is_empty() {
        return Err(Error::invalid(format!("no images found in {}", input.display())));
    }
    files.sort();
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn cmd_translate(checkpoint: &Path, input: &Path, out: &Path, alpha: f64, seed: u64, reverse: bool) -> Result<u8> {
    check_alpha(alpha)?;
    let state = load_state(checkpoint)?;
    let g = if reverse { &state.g2 } else { &state.g1 };
    let files = collect_inputs(input)?;
    create_dir(out)?;
    for (i, f) in files.iter().enumerate() {
        let raw = load_raw(f, state.cfg.resolution)?;
        let y = if alpha == 1.0 {
            g.forward(&normalize_raw(&raw))?
        } else {
            alpha_sweep(g, &raw, &[alpha], seed.wrapping_add(i as u64))?.remove(0)
        };
        let dest = out.join(format!("{}.png", stem(f)));
        save_image(&y, &dest)?;
        println!("{}", dest.display());
    }
    Ok(0)
}

fn cmd_sweep(checkpoint: &Path, input: &Path, alphas: &[f64], seed: u64, out: &Path) -> Result<u8> {
    if alphas.is_empty() {
        return Err(Error::invalid("--alphas needs at least one value"));
    }
    let state = load_state(checkpoint)?;
    let files = collect_inputs(input)?;
    let mut cells: Vec<Tensor4> = Vec::with_capacity(files.len() * alphas.len());
    for (i, f) in files.iter().enumerate() {
        let raw = load_raw(f, state.cfg.resolution)?;
        cells.extend(alpha_sweep(&state.g1, &raw, alphas, seed.wrapping_add(i as u64))?);
    }
    let mut labels: Vec<(String, String)> = alphas
        .iter()
        .enumerate()
        .map(|(c, a)| (format!("col{c}"), format!("alpha={a}")))
        .collect();
    labels.push(("rows".into(), files.iter().map(|f| stem(f)).collect::<Vec<_>>().join(",")));
    labels.push(("seed".into(), seed.to_string()));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    export_grid_labeled(&cells, alphas.len(), &labels, out)?;
    println!("{}", out.display());
    Ok(0)
}

fn cmd_ablate(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<u8> {
    let cfg = load_config(path, seed, out)?;
    let dir = cfg.out_dir()?.to_path_buf();
    let (data, summary) = load_train_data(&cfg)?;
    let pairs: Vec<[usize; 2]> = cfg.grid_pairs.iter().map(|&(c, f)| [c, f]).collect();
    write_run_header(&dir, &cfg, "ablate", &summary, serde_json::json!({ "grid_pairs": pairs }))?;
    let runs = trainer::ablate(&cfg.train, &data, &cfg.grid_pairs, Some(&dir))?;
    println!("{:<28} {:>6} {:>12} {:>12}", "variant", "discs", "final_g_ab", "final_cyc");
    for r in &runs {
        let (g, c) = r.trace.reports.last().map_or((f64::NAN, f64::NAN), |l| (l.ab.total_g, l.ab.cyc));
        println!("{:<28} {:>6} {:>12.5} {:>12.5}", r.spec.id, r.discriminators, g, c);
    }
    println!("grids: {} {}", dir.join("loss_variants.png").display(), dir.join("grid_sizes.png").display());
    Ok(0)
}

fn cmd_gradcheck(size: usize, seed: u64, corrupt: Vec<String>) -> Result<u8> {
    let opts = SuiteOptions {
        size,
        seed,
        corrupt,
        ..SuiteOptions::default()
    };
    let checks = gradcheck_suite(&opts)?;
    println!("{:<28} {:>12} {:>9} {:>8}  result", "component", "max_rel_err", "checked", "skipped");
    for c in &checks {
        println!(
            "{:<28} {:>12.3e} {:>9} {:>8}  {}",
            c.component,
            c.max_rel_error,
            c.checked,
            c.skipped,
            if c.passed() { "PASS" } else { "FAIL" }
        );
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        eprintln!(
            "error[gradcheck]: {failed} of {} components exceed relative error {GRADCHECK_TOLERANCE:e}",
            checks.len()
        );
        return Ok(1);
    }
    println!("all {} components within {GRADCHECK_TOLERANCE:e}", checks.len());
    Ok(0)
}

/// Parses `desk_trained[:seed]`, `stub-uniform:C` or `stub-onehot:C`.
pub fn parse_classifier(spec: &str) -> Result<Box<dyn ClassifierHead>> {
    let (head, arg) = spec.split_once(':').map_or((spec, None), |(h, a)| (h, Some(a)));
    let num = |what: &str| -> Result<u64> {
        arg.ok_or_else(|| Error::invalid(format!("classifier `{spec}` needs {what}")))?
            .parse()
            .map_err(|_| Error::invalid(format!("bad {what} in classifier `{spec}`")))
    };
    let classes = || -> Result<usize> {
        let c = num("a class count")? as usize;
        if c < 2 {
            return Err(Error::invalid(format!("classifier `{spec}` needs at least 2 classes")));
        }
        Ok(c)
    };
    Ok(match head {
        "desk_trained" => Box::new(ConvClassifier::desk_trained(if arg.is_some() { num("a seed")? } else { 0 })?),
        "stub-uniform" => Box::new(UniformStub { classes: classes()? }),
        "stub-onehot" => Box::new(CyclingOneHotStub { classes: classes()? }),
        _ => {
            return Err(Error::invalid(format!(
                "unknown classifier `{spec}`; expected desk_trained[:seed], stub-uniform:C or stub-onehot:C"
            )))
        }
    })
}

fn cmd_score(checkpoint: &Path, test_dir: &Path, classifier: &str, splits: usize, out: Option<&Path>) -> Result<u8> {
    let clf = parse_classifier(classifier)?;
    let state = load_state(checkpoint)?;
    let photos = if test_dir.join("testA").is_dir() {
        test_dir.join("testA")
    } else {
        test_dir.to_path_buf()
    };
    let files = collect_inputs(&photos)?;
    if files.len() < splits {
        return Err(Error::invalid(format!(
            "{} test images cannot be divided into {splits} splits",
            files.len()
        )));
    }
    let translated = files
        .iter()
        .map(|f| state.translate(&normalize_raw(&load_raw(f, state.cfg.resolution)?)))
        .collect::<Result<Vec<_>>>()?;
    let report = ScoreReport::inception(clf.as_ref(), &translated, splits)?;
    eprintln!("{}", report.provenance_warning());
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::invalid(e.to_string()))?;
    if let Some(p) = out {
        write_file(p, format!("{json}\n"))?;
    }
    println!("{json}");
    Ok(0)
}
