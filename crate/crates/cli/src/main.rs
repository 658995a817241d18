use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gsgformer::checkpoint::Checkpoint;
use gsgformer::config::{parse_synth_spec, Config};
use gsgformer::evaluation::{evaluate, goal_heatmap, risk_map};
use gsgformer::io::{load_mask, load_predictions, load_samples, load_scene, save_predictions, save_samples, save_scene, SceneFormat};
use gsgformer::pipeline::{ablation_ladder, ladder_table, predict_all, train_with};
use gsgformer::preprocess::{prepare_scene, window_samples};
use gsgformer::synth::generate_many;
use gsgformer::Error;

#[derive(Parser)]
#[command(name = "gsgformer", version, about = "Multimodal pedestrian trajectory prediction")]
struct Cli {
    /// Upper bound on worker threads (overrides the config).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic scenes (trajectory CSV plus mask) into a directory.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Turn scene CSV files (or directories of them) into a sample archive.
    Preprocess {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes the checkpoint and a per-epoch log next to it.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample K futures per sample.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Best-of-K ADE/FDE against ground-truth samples.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Risk map (and optionally a goal heatmap) on a scene mask grid.
    Riskmap {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = gsgformer::evaluation::DEFAULT_BANDWIDTH)]
        bandwidth: f64,
        /// Also write the goal heatmap of every prediction set.
        #[arg(long)]
        goals: bool,
        /// Output stem; `.grid` and `.png` are appended.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the five-row ablation ladder over the config's seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: 1, msg: e.to_string() }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 2, msg: msg.into() }
}

/// Config problems are usage errors.
fn load_config(path: &Path, workers: Option<usize>) -> Result<Config, Failure> {
    let mut cfg = Config::load(path).map_err(|e| match e {
        Error::Io { .. } => Failure::from(e),
        other => usage(other.to_string()),
    })?;
    if let Some(w) = workers {
        cfg.train.workers = w.max(1);
    }
    Ok(cfg)
}

fn path_from(flag: Option<PathBuf>, cfg: &Config, key: &str) -> Result<PathBuf, Failure> {
    flag.or_else(|| cfg.path(key).map(Path::to_path_buf))
        .ok_or_else(|| usage(format!("missing --{} (or `{key}` in the config)", key.replace('_', "-"))))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn scene_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "csv"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let workers = cli.workers;
    match cli.cmd {
        Cmd::Synth { spec, out } => {
            let text = fs::read_to_string(&spec).map_err(|e| Error::io(&spec, e))?;
            let (spec, scenes) = parse_synth_spec(&text, &spec).map_err(|e| usage(e.to_string()))?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut stats = String::from("scene\twindows\tclearance\tcv_floor\n");
            let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
            for s in generate_many(&spec, scenes)? {
                save_scene(&s.scene, &out.join(format!("{}.csv", s.scene.scene_id)))?;
                stats.push_str(&format!(
                    "{}\t{}\t{}\t{}\n",
                    s.scene.scene_id,
                    s.stats.windows,
                    opt(s.stats.clearance),
                    opt(s.stats.cv_floor)
                ));
            }
            write(&out.join("synth_stats.tsv"), &stats)?;
            print!("{stats}");
        }
        Cmd::Preprocess { inputs, out } => {
            let mut samples = Vec::new();
            for f in scene_files(&inputs)? {
                let scene = load_scene(&f, SceneFormat::Csv)?;
                samples.extend(window_samples(&prepare_scene(&scene)?));
            }
            save_samples(&samples, &out)?;
            println!("{} samples -> {}", samples.len(), out.display());
        }
        Cmd::Train { config, data, out } => {
            let cfg = load_config(&config, workers)?;
            let data = path_from(data, &cfg, "data")?;
            let out = path_from(out, &cfg, "out")?;
            let samples = load_samples(&data)?;
            let mut log = String::from("epoch\tlr\tkl_weight\tloss\twaypoint_nll\twaypoint_kl\tgoal_nll\tgoal_kl\tgrad_norm\n");
            let (ckpt, _) = train_with(&samples, &cfg.train, |l| {
                let line = format!(
                    "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                    l.epoch, l.lr, l.kl_weight, l.loss, l.waypoint_nll, l.waypoint_kl, l.goal_nll, l.goal_kl, l.grad_norm
                );
                eprintln!("{line}");
                log.push_str(&line);
                log.push('\n');
            })?;
            ckpt.save(&out)?;
            write(&out.with_extension("log"), &log)?;
            write(&out.with_extension("cfg"), &cfg.to_text())?;
        }
        Cmd::Predict { ckpt, data, k, seed, out } => {
            if k == 0 {
                return Err(usage("--k must be at least 1"));
            }
            let ckpt = Checkpoint::load(&ckpt)?;
            let samples = load_samples(&data)?;
            let preds = predict_all(&ckpt, &samples, k, seed, workers.unwrap_or(ckpt.config.workers))?;
            save_predictions(&preds, &out)?;
        }
        Cmd::Eval { pred, truth, out } => {
            let preds = load_predictions(&pred)?;
            let samples = load_samples(&truth)?;
            let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let report = evaluate(&preds, &samples, &stem(&truth), &stem(&pred))?;
            report.save(&out)?;
            print!("{}", report.to_kv());
        }
        Cmd::Riskmap { pred, mask, bandwidth, goals, out } => {
            if !(bandwidth > 0.0 && bandwidth.is_finite()) {
                return Err(usage(format!("--bandwidth must be positive, got {bandwidth}")));
            }
            let preds = load_predictions(&pred)?;
            let mask = load_mask(&mask)?;
            let stem = out.to_string_lossy().into_owned();
            let map = risk_map(&preds, &mask, bandwidth);
            map.save_grid(Path::new(&format!("{stem}.grid")))?;
            map.save_png(Path::new(&format!("{stem}.png")))?;
            println!("agents = {}\nmass = {:.6}\ntruncated = {:.6}", map.layers, map.total(), map.truncated);
            if goals {
                let all: Vec<[f64; 2]> = preds.iter().flat_map(|p| p.goals.iter().copied()).collect();
                let h = goal_heatmap(&all, &mask, bandwidth);
                h.save_grid(Path::new(&format!("{stem}_goals.grid")))?;
                h.save_png(Path::new(&format!("{stem}_goals.png")))?;
            }
        }
        Cmd::Ablate { config, data, eval_data, out } => {
            let cfg = load_config(&config, workers)?;
            let train_set = load_samples(&path_from(data, &cfg, "data")?)?;
            let eval_set = load_samples(&path_from(eval_data, &cfg, "eval_data")?)?;
            let rows = ablation_ladder(&train_set, &eval_set, &cfg.train, &cfg.seeds, |line| eprintln!("{line}"))?;
            let table = ladder_table(&rows);
            if let Some(out) = out {
                write(&out, &table)?;
            }
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
