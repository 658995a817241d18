//! Flat `key = value` configuration files.
//!
//! `#` starts a comment. Keys are unique. Architecture constants may be
//! listed but only at their fixed values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoders::D_MODEL;
use crate::error::{Error, Result};
use crate::evaluation::DEFAULT_BANDWIDTH;
use crate::model::{GOAL_COMPONENTS, GOAL_LATENT, WAYPOINT_COMPONENTS, WAYPOINT_LATENT};
use crate::pipeline::TrainConfig;
use crate::synth::{Layout, Scenario, SynthSpec};
use crate::temporal::{FFN_WIDTH, HEADS};
use crate::types::{CROP_CELLS, CROP_METERS, DT, HISTORY_LEN, HORIZON, NEIGHBOR_RADIUS};

/// Keys that must equal the compiled-in value when present.
const FIXED: &[(&str, f64)] = &[
    ("dt", DT),
    ("history", HISTORY_LEN as f64),
    ("horizon", HORIZON as f64),
    ("neighbor_radius", NEIGHBOR_RADIUS),
    ("crop", CROP_METERS),
    ("crop_cells", CROP_CELLS as f64),
    ("d_model", D_MODEL as f64),
    ("heads", HEADS as f64),
    ("ffn_width", FFN_WIDTH as f64),
    ("gat_layers", 2.0),
    ("encoder_layers", 1.0),
    ("decoder_layers", 1.0),
    ("goal_latent", GOAL_LATENT as f64),
    ("waypoint_latent", WAYPOINT_LATENT as f64),
    ("goal_components", GOAL_COMPONENTS as f64),
    ("waypoint_components", WAYPOINT_COMPONENTS as f64),
];

const PATH_KEYS: &[&str] = &["data", "eval_data", "out", "ckpt"];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub train: TrainConfig,
    /// Risk-map kernel bandwidth, meters.
    pub bandwidth: f64,
    /// Seeds for multi-seed runs such as the ablation ladder.
    pub seeds: Vec<u64>,
    pub paths: BTreeMap<String, PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Config { train: TrainConfig::default(), bandwidth: DEFAULT_BANDWIDTH, seeds: vec![0], paths: BTreeMap::new() }
    }
}

/// Ordered `key -> value` pairs of one file.
fn entries(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::MalformedRow {
            path: origin.to_path_buf(),
            line: i + 1,
            reason: "expected `key = value`".into(),
        })?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(Error::InvalidConfigValue { key: k, value: format!("{v} (duplicate key)") });
        }
        out.push((k, v));
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::InvalidConfigValue { key: key.into(), value: value.into() })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::InvalidConfigValue { key: key.into(), value: value.into() }),
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse_str(&text, path)
    }

    pub fn parse_str(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Config::default();
        for (k, v) in entries(text, origin)? {
            cfg.set(&k, &v)?;
        }
        cfg.train.validate()?;
        if !(cfg.bandwidth > 0.0 && cfg.bandwidth.is_finite()) {
            return Err(Error::InvalidConfigValue { key: "bandwidth".into(), value: cfg.bandwidth.to_string() });
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let m = &mut t.model;
        match key {
            "lr0" => t.lr0 = parse(key, value)?,
            "lr_decay" => t.lr_decay = parse(key, value)?,
            "decay_every" => t.decay_every = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch" => t.batch = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "k" | "k_samples" => t.k_samples = parse(key, value)?,
            "kl_warmup_epochs" => t.kl_warmup_epochs = parse(key, value)?,
            "grad_clip" => t.grad_clip = parse(key, value)?,
            "workers" => t.workers = parse(key, value)?,
            "rg" => m.flags.rg = parse_bool(key, value)?,
            "goal" | "g" => m.flags.g = parse_bool(key, value)?,
            "neighbors" | "n" => m.flags.n = parse_bool(key, value)?,
            "map" | "s" => m.flags.s = parse_bool(key, value)?,
            "fusion" => m.fusion = parse(key, value)?,
            "max_neighbors" => m.max_neighbors = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "bandwidth" => self.bandwidth = parse(key, value)?,
            "seeds" => {
                self.seeds = value.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?;
                if self.seeds.is_empty() {
                    return Err(Error::InvalidConfigValue { key: key.into(), value: value.into() });
                }
            }
            _ if PATH_KEYS.contains(&key) => {
                self.paths.insert(key.to_string(), PathBuf::from(value));
            }
            _ => {
                let Some(&(_, fixed)) = FIXED.iter().find(|(k, _)| *k == key) else {
                    return Err(Error::UnknownConfigKey(key.to_string()));
                };
                let v: f64 = parse(key, value)?;
                if (v - fixed).abs() > 1e-9 {
                    return Err(Error::InvalidConfigValue { key: key.into(), value: format!("{value} (fixed at {fixed})") });
                }
            }
        }
        Ok(())
    }

    pub fn path(&self, key: &str) -> Option<&Path> {
        self.paths.get(key).map(PathBuf::as_path)
    }

    /// Every setting, in a form [`Config::parse_str`] reads back.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &t.model;
        let mut out = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "lr0 = {}\nlr_decay = {}\ndecay_every = {}", t.lr0, t.lr_decay, t.decay_every);
        let _ = writeln!(out, "epochs = {}\nbatch = {}\nseed = {}\nk_samples = {}", t.epochs, t.batch, t.seed, t.k_samples);
        let _ = writeln!(out, "kl_warmup_epochs = {}\ngrad_clip = {}\nworkers = {}", t.kl_warmup_epochs, t.grad_clip, t.workers);
        let _ = writeln!(out, "rg = {}\ngoal = {}\nneighbors = {}\nmap = {}", m.flags.rg, m.flags.g, m.flags.n, m.flags.s);
        let _ = writeln!(out, "fusion = {}\nmax_neighbors = {}\ndropout = {}", m.fusion, m.max_neighbors, m.dropout);
        let _ = writeln!(out, "bandwidth = {}\nseeds = {}", self.bandwidth, seeds.join(","));
        for (k, v) in FIXED {
            let _ = writeln!(out, "{k} = {v}");
        }
        for (k, p) in &self.paths {
            let _ = writeln!(out, "{k} = {}", p.display());
        }
        out
    }
}

/// Reads a synthetic-scene spec; `scenes` (default 1) is how many scenes
/// to generate from consecutive seeds.
pub fn parse_synth_spec(text: &str, origin: &Path) -> Result<(SynthSpec, usize)> {
    let mut spec = SynthSpec::default();
    let mut scenes = 1;
    for (k, v) in entries(text, origin)? {
        let key = k.as_str();
        match key {
            "scenario" => spec.scenario = parse::<Scenario>(key, &v)?,
            "layout" => spec.layout = parse::<Layout>(key, &v)?,
            "pedestrians" => spec.pedestrians = parse(key, &v)?,
            "bicycles" => spec.bicycles = parse(key, &v)?,
            "cars" => spec.cars = parse(key, &v)?,
            "trucks" => spec.trucks = parse(key, &v)?,
            "buses" => spec.buses = parse(key, &v)?,
            "noise" => spec.noise = parse(key, &v)?,
            "seed" => spec.seed = parse(key, &v)?,
            "extent" => spec.extent = parse(key, &v)?,
            "duration" => spec.duration = parse(key, &v)?,
            "separation" => spec.separation = parse(key, &v)?,
            "scenes" => scenes = parse(key, &v)?,
            _ => return Err(Error::UnknownConfigKey(k)),
        }
    }
    if scenes == 0 {
        return Err(Error::InvalidConfigValue { key: "scenes".into(), value: "0".into() });
    }
    Ok((spec, scenes))
}
