//! TOML run configuration: dotted keys mapped onto [`TrainConfig`] plus the
//! data root, output directory and ablation grid pairs.

use caricature_core::networks::{GeneratorConfig, PerceptionSource};
use caricature_core::noisemix::NoiseSchedule;
use caricature_core::trainer::ablate::DEFAULT_GRID_PAIRS;
use caricature_core::trainer::TrainConfig;
use caricature_core::{Error, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use toml::Value;

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "data.root",
    "run.out_dir",
    "model.preset",
    "model.resolution",
    "model.base_channels",
    "model.residual_blocks",
    "model.disc_channels",
    "model.coarse_grid",
    "model.fine_grid",
    "model.use_coarse",
    "model.use_fine",
    "model.perception",
    "loss.gamma",
    "loss.sigma",
    "loss.lambda_n",
    "loss.coarse_fine_mix",
    "loss.use_cyc",
    "loss.use_percep",
    "loss.symmetric_percep",
    "noise.mode",
    "noise.alpha",
    "noise.alpha_max",
    "train.steps",
    "train.batch",
    "train.lr",
    "train.betas",
    "train.seed",
    "train.checkpoint_every",
    "train.sample_every",
    "ablation.grid_pairs",
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data_root: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub grid_pairs: Vec<(usize, usize)>,
    /// The file as written, echoed into run directories.
    pub text: String,
}

impl RunConfig {
    pub fn data_root(&self) -> Result<&Path> {
        self.data_root
            .as_deref()
            .ok_or_else(|| Error::config("data.root", "missing; set it to a directory holding trainA/ trainB/ testA/ testB/"))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| Error::config("run.out_dir", "missing; set it or pass --out"))
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

struct Keys(BTreeMap<String, Value>);

impl Keys {
    fn take(&mut self, key: &str) -> Option<Value> {
        self.0.remove(key)
    }

    fn float(&mut self, key: &str) -> Result<Option<f64>> {
        self.take(key).map(|v| as_float(key, &v)).transpose()
    }

    fn uint(&mut self, key: &str) -> Result<Option<u64>> {
        self.take(key).map(|v| as_uint(key, &v)).transpose()
    }

    fn usize(&mut self, key: &str) -> Result<Option<usize>> {
        Ok(self.uint(key)?.map(|v| v as usize))
    }

    fn bool(&mut self, key: &str) -> Result<Option<bool>> {
        self.take(key)
            .map(|v| v.as_bool().ok_or_else(|| Error::config(key, format!("expected true or false, found {v}"))))
            .transpose()
    }

    fn string(&mut self, key: &str) -> Result<Option<String>> {
        self.take(key)
            .map(|v| match v {
                Value::String(s) => Ok(s),
                other => Err(Error::config(key, format!("expected a string, found {other}"))),
            })
            .transpose()
    }

    fn floats(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        self.take(key)
            .map(|v| match v {
                Value::Array(a) => a.iter().map(|x| as_float(key, x)).collect(),
                other => Err(Error::config(key, format!("expected an array of numbers, found {other}"))),
            })
            .transpose()
    }

    fn pair(&mut self, key: &str) -> Result<Option<(f64, f64)>> {
        match self.floats(key)? {
            None => Ok(None),
            Some(v) if v.len() == 2 => Ok(Some((v[0], v[1]))),
            Some(v) => Err(Error::config(key, format!("expected 2 numbers, found {}", v.len()))),
        }
    }
}

fn as_float(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(Error::config(key, format!("expected a number, found {other}"))),
    }
}

fn as_uint(key: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        other => Err(Error::config(key, format!("expected a non-negative integer, found {other}"))),
    }
}

fn resolve(base: &Path, p: String) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

/// Parses `text`; relative paths are taken relative to `base_dir`.
pub fn parse(text: &str, base_dir: &Path) -> Result<RunConfig> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        let msg = e.message().to_string();
        let at = e.span().map(|s| line_of(text, s.start)).unwrap_or(0);
        Error::config("<file>", format!("line {at}: {msg}"))
    })?;
    let mut flat = BTreeMap::new();
    flatten("", &table, &mut flat);
    if let Some(unknown) = flat.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(Error::config(unknown.clone(), "unknown key"));
    }
    let mut k = Keys(flat);

    let preset = k.string("model.preset")?;
    let mut cfg = match preset.as_deref() {
        None | Some("full") => TrainConfig::default(),
        Some("toy") => TrainConfig::toy(),
        Some(other) => return Err(Error::config("model.preset", format!("expected \"full\" or \"toy\", found \"{other}\""))),
    };
    let blocks_given = k.0.contains_key("model.residual_blocks");
    if let Some(v) = k.usize("model.resolution")? {
        cfg.resolution = v;
        if !blocks_given && preset.as_deref() != Some("toy") {
            cfg.residual_blocks = GeneratorConfig::for_resolution(v).n_residual_blocks;
        }
    }
    if let Some(v) = k.usize("model.base_channels")? {
        cfg.base_channels = v;
    }
    if let Some(v) = k.usize("model.residual_blocks")? {
        cfg.residual_blocks = v;
    }
    if let Some(v) = k.usize("model.disc_channels")? {
        cfg.disc_channels = v;
    }
    if let Some(v) = k.usize("model.coarse_grid")? {
        cfg.variant.coarse_grid = v;
    }
    if let Some(v) = k.usize("model.fine_grid")? {
        cfg.variant.fine_grid = v;
    }
    if let Some(v) = k.bool("model.use_coarse")? {
        cfg.variant.use_coarse = v;
    }
    if let Some(v) = k.bool("model.use_fine")? {
        cfg.variant.use_fine = v;
    }
    if let Some(v) = k.string("model.perception")? {
        cfg.perception = match PerceptionSource::parse(&v).map_err(|e| Error::config("model.perception", e.to_string()))? {
            PerceptionSource::File(p) => PerceptionSource::File(resolve(base_dir, p.to_string_lossy().into_owned())),
            other => other,
        };
    }
    if let Some(v) = k.float("loss.gamma")? {
        cfg.weights.gamma = v;
    }
    if let Some(v) = k.float("loss.sigma")? {
        cfg.weights.sigma = v;
    }
    if let Some(v) = k.floats("loss.lambda_n")? {
        cfg.weights.lambda_n = v;
    }
    if let Some(v) = k.pair("loss.coarse_fine_mix")? {
        cfg.weights.coarse_fine_mix = v;
    }
    if let Some(v) = k.bool("loss.use_cyc")? {
        cfg.variant.use_cyc = v;
    }
    if let Some(v) = k.bool("loss.use_percep")? {
        cfg.variant.use_percep = v;
    }
    if let Some(v) = k.bool("loss.symmetric_percep")? {
        cfg.symmetric_percep = v;
    }
    if !(cfg.weights.gamma >= 0.0) {
        return Err(Error::config("loss.gamma", "must be non-negative"));
    }
    if !(cfg.weights.sigma >= 0.0) {
        return Err(Error::config("loss.sigma", "must be non-negative"));
    }
    let (mc, mf) = cfg.weights.coarse_fine_mix;
    if mc < 0.0 || mf < 0.0 || (mc + mf - 1.0).abs() > 1e-12 {
        return Err(Error::config("loss.coarse_fine_mix", "weights must be non-negative and sum to 1"));
    }

    let alpha = k.float("noise.alpha")?;
    let alpha_max = k.float("noise.alpha_max")?;
    let mode = k.string("noise.mode")?;
    cfg.noise = match (mode.as_deref(), alpha, alpha_max) {
        (Some("off"), _, _) => NoiseSchedule::Off,
        (None | Some("fixed"), Some(a), None) => NoiseSchedule::Fixed(a),
        (None | Some("fixed"), None, None) => cfg.noise,
        (None | Some("fixed"), _, Some(_)) => {
            return Err(Error::config("noise.alpha_max", "only used with noise.mode = \"range\""))
        }
        (Some("range"), Some(lo), Some(hi)) => NoiseSchedule::Range(lo, hi),
        (Some("range"), _, _) => {
            return Err(Error::config("noise.alpha", "range mode needs noise.alpha and noise.alpha_max"))
        }
        (Some(other), _, _) => {
            return Err(Error::config("noise.mode", format!("expected \"fixed\", \"range\" or \"off\", found \"{other}\"")))
        }
    };

    if let Some(v) = k.uint("train.steps")? {
        cfg.total_steps = v;
    }
    if let Some(v) = k.usize("train.batch")? {
        cfg.batch_size = v;
    }
    if let Some(v) = k.float("train.lr")? {
        cfg.learning_rate = v;
    }
    if let Some(v) = k.pair("train.betas")? {
        cfg.betas = v;
    }
    if let Some(v) = k.uint("train.seed")? {
        cfg.seed = v;
    }
    if let Some(v) = k.uint("train.checkpoint_every")? {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = k.uint("train.sample_every")? {
        cfg.sample_every = v;
    }

    let grid_pairs = match k.take("ablation.grid_pairs") {
        None => DEFAULT_GRID_PAIRS.to_vec(),
        Some(Value::Array(a)) => a
            .iter()
            .map(|p| match p {
                Value::Array(xy) if xy.len() == 2 => Ok((
                    as_uint("ablation.grid_pairs", &xy[0])? as usize,
                    as_uint("ablation.grid_pairs", &xy[1])? as usize,
                )),
                other => Err(Error::config("ablation.grid_pairs", format!("expected [coarse, fine] pairs, found {other}"))),
            })
            .collect::<Result<_>>()?,
        Some(other) => return Err(Error::config("ablation.grid_pairs", format!("expected an array, found {other}"))),
    };

    let data_root = k.string("data.root")?.map(|p| resolve(base_dir, p));
    let out_dir = k.string("run.out_dir")?.map(|p| resolve(base_dir, p));
    debug_assert!(k.0.is_empty(), "schema key not consumed: {:?}", k.0.keys());

    cfg.validate()?;
    Ok(RunConfig {
        train: cfg,
        data_root,
        out_dir,
        grid_pairs,
        text: text.to_string(),
    })
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path.parent().unwrap_or(Path::new(".")))
}

fn line_of(text: &str, byte: usize) -> usize {
    text[..byte.min(text.len())].matches('\n').count() + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_str(text: &str) -> Result<RunConfig> {
        parse(text, Path::new("/base"))
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_str("").unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert!(c.data_root().unwrap_err().to_string().contains("data.root"));
        assert!(c.out_dir().unwrap_err().to_string().contains("run.out_dir"));
        assert_eq!(c.grid_pairs, DEFAULT_GRID_PAIRS.to_vec());
    }

    #[test]
    fn keys_map_onto_the_config() {
        let c = parse_str(
            r#"
            [data]
            root = "faces"
            [run]
            out_dir = "/tmp/run"
            [model]
            preset = "toy"
            coarse_grid = 4
            fine_grid = 8
            use_coarse = false
            [loss]
            gamma = 5
            use_percep = false
            [noise]
            mode = "range"
            alpha = 0.6
            alpha_max = 1.0
            [train]
            steps = 12
            seed = 3
            betas = [0.5, 0.99]
            [ablation]
            grid_pairs = [[2, 8]]
            "#,
        )
        .unwrap();
        let t = &c.train;
        assert_eq!(c.data_root.as_deref(), Some(Path::new("/base/faces")));
        assert_eq!(c.out_dir.as_deref(), Some(Path::new("/tmp/run")));
        assert_eq!((t.resolution, t.variant.fine_grid, t.variant.use_coarse), (64, 8, false));
        assert_eq!((t.weights.gamma, t.variant.use_percep), (5.0, false));
        assert_eq!(t.noise, NoiseSchedule::Range(0.6, 1.0));
        assert_eq!((t.total_steps, t.seed, t.betas), (12, 3, (0.5, 0.99)));
        assert_eq!(c.grid_pairs, vec![(2, 8)]);
    }

    #[test]
    fn errors_name_the_key() {
        let cases = [
            ("[model]\ncolour = 1", "model.colour"),
            ("[train]\nbatch = 0", "train.batch"),
            ("[train]\nlr = \"fast\"", "train.lr"),
            ("[noise]\nalpha = 1.5", "noise.alpha"),
            ("[noise]\nmode = \"loud\"", "noise.mode"),
            ("[model]\nfine_grid = 48\npreset = \"toy\"", "model.fine_grid"),
            ("[loss]\ncoarse_fine_mix = [0.9, 0.9]", "loss.coarse_fine_mix"),
            ("[ablation]\ngrid_pairs = [1, 2]", "ablation.grid_pairs"),
            ("steps = 3", "steps"),
        ];
        for (text, key) in cases {
            let e = parse_str(text).unwrap_err();
            assert!(matches!(&e, Error::Config { key: k, .. } if k == key), "{text}: {e}");
        }
        assert!(parse_str("[model\n").unwrap_err().to_string().contains("line 1"));
    }

    #[test]
    fn resolution_sets_block_count_unless_given() {
        let c = parse_str("[model]\nresolution = 64").unwrap();
        assert_eq!(c.train.residual_blocks, 6);
        let c = parse_str("[model]\nresolution = 64\nresidual_blocks = 2").unwrap();
        assert_eq!(c.train.residual_blocks, 2);
    }

    #[test]
    fn shipped_example_parses() {
        let c = parse(include_str!("../../../configs/toy.toml"), Path::new("/repo/configs")).unwrap();
        assert_eq!(c.train.total_steps, 300);
        assert_eq!(c.data_root.as_deref(), Some(Path::new("/repo/configs/../toy_data")));
        assert_eq!(c.grid_pairs.len(), 3);
    }
}
