//! The `ftn` command line: dataset generation, training, evaluation, visual
//! dumps and cost counting.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::cfa::{Cfa, CfaConfig, CostReport, PamCam};
use crate::data::{generate, write_dataset, Dataset, SyntheticSpec};
use crate::error::{arg_err, io_err, FtnError, Result};
use crate::eval::{evaluate, EvalOptions, RetrievalResult, Rows};
use crate::image::{write_pgm, write_ppm};
use crate::masks::{attention_to_mask, ReconStrategy, Spatialize};
use crate::model::{load_model, save_model, train, FtnModel, TrainConfig, BRANCHES};
use crate::nn::Mode;
use crate::tensor::{Graph, Tensor};

/// Environment variable consulted when `--seed` is absent.
pub const SEED_ENV: &str = "FTN_SEED";

#[derive(Debug, Parser)]
#[command(name = "ftn", version, about = "Foreground-guided texture-focused re-identification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (PPM images and manifest.json).
    GenData {
        /// SyntheticSpec as a JSON file or inline JSON.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the dataset's training rows and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// TrainConfig as a JSON file or inline JSON.
        #[arg(long, default_value = "{}")]
        config: String,
        /// Reconstruction target, `a` to `g`.
        #[arg(long, default_value = "g")]
        strategy: ReconStrategy,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank the gallery for every query and write CMC and mAP as JSON.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        max_rank: usize,
        /// L2-normalize embeddings first.
        #[arg(long)]
        normalize: bool,
    },
    /// Write masks, targets, reconstructions and branch activations.
    Dump {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Strategy used to build targets; defaults to `g`, or `a` without CFA.
        #[arg(long)]
        strategy: Option<ReconStrategy>,
        /// Number of images, taken in manifest order.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Print the parameter and mult-add count of an attention module.
    Count {
        #[arg(long, value_enum)]
        module: ModuleKind,
        #[arg(long)]
        channels: usize,
        /// Spatial extent as `HxW`.
        #[arg(long, value_parser = parse_hw)]
        hw: (usize, usize),
        #[arg(long, default_value_t = 2)]
        pool_factor: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModuleKind {
    Cfa,
    Pamcam,
}

fn parse_hw(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    match (h.parse(), w.parse()) {
        (Ok(h), Ok(w)) if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(format!("expected positive HxW, got {s:?}")),
    }
}

/// Inline JSON when the argument starts with `{`, otherwise a file path.
fn json_arg<T: serde::de::DeserializeOwned>(arg: &str) -> Result<T> {
    if arg.trim_start().starts_with('{') {
        return Ok(serde_json::from_str(arg)?);
    }
    let path = Path::new(arg);
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

/// `--seed`, else `FTN_SEED`, else 0.
pub fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| FtnError::InvalidArgument(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

/// Prints a line to stdout, tolerating a closed pipe.
fn emit(line: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(io_err(path))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn gen_data(spec: &SyntheticSpec, seed: u64, out: &Path) -> Result<()> {
    write_dataset(&generate(spec, seed)?, out)
}

/// Trains on `data` and writes `out`, `out.config.json` and the log
/// `out.log.jsonl`. The class count and image size come from the data and
/// CFA is switched on exactly when the strategy needs it.
pub fn train_cmd(data: &Path, cfg: &TrainConfig, strategy: ReconStrategy, seed: u64, out: &Path) -> Result<()> {
    let ds = Dataset::<f32>::load(data)?;
    let set = ds.train()?;
    let mut cfg = cfg.clone();
    cfg.model.num_classes = set.class_labels().1;
    cfg.model.image_size = set.image_size();
    cfg.model.use_cfa = strategy.uses_cfa();
    let (model, mut ps) = FtnModel::new::<f32>(cfg.model.clone(), seed)?;
    let log_path = with_suffix(out, ".log.jsonl");
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(io_err(&log_path))?);
    let mut write_err = None;
    train(&model, &mut ps, &set, &cfg, strategy, seed, |row| {
        let line = serde_json::to_string(row).expect("log rows serialize");
        if let Err(e) = writeln!(log, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(FtnError::Io { path: log_path, source: e });
    }
    log.flush().map_err(io_err(&log_path))?;
    save_model(out, &model, &ps)
}

pub fn eval_cmd(data: &Path, ckpt: &Path, max_rank: usize, opts: EvalOptions) -> Result<RetrievalResult> {
    let ds = Dataset::<f32>::load(data)?;
    let (model, mut ps) = load_model::<f32>(ckpt)?;
    let (q, g) = ds.query_gallery()?;
    let qe = model.embed(&mut ps, &q.images)?;
    let ge = model.embed(&mut ps, &g.images)?;
    evaluate(Rows { emb: &qe, ids: &q.ids, cams: &q.cams }, Rows { emb: &ge, ids: &g.ids, cams: &g.cams }, max_rank, opts)
}

/// Writes the dump files for the first `count` images and returns their
/// paths.
pub fn dump_cmd(data: &Path, ckpt: &Path, out: &Path, strategy: Option<ReconStrategy>, count: usize) -> Result<Vec<PathBuf>> {
    let ds = Dataset::<f32>::load(data)?;
    let (model, mut ps) = load_model::<f32>(ckpt)?;
    let strategy = strategy.unwrap_or(if model.cfg.use_cfa { ReconStrategy::GmPamCam } else { ReconStrategy::NoCfaGmOnly });
    let n = count.min(ds.all.len());
    if n == 0 {
        return arg_err("nothing to dump");
    }
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let images = ds.all.images.narrow_batch(0, n)?;
    let (h, w) = model.cfg.image_size;
    let mut written = Vec::new();
    let mut put = |name: String, img: &Tensor<f32>| -> Result<()> {
        let path = out.join(name);
        if img.shape()[0] == 3 {
            write_ppm(&path, img)?;
        } else {
            write_pgm(&path, img)?;
        }
        written.push(path);
        Ok(())
    };

    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let reid = model.forward_reid(&mut g, &mut ps, x, Mode::Eval)?;
    let acts: Vec<Tensor<f32>> = reid
        .features
        .iter()
        .map(|&f| attention_to_mask(g.value(f), h, w, Spatialize::ChannelMean))
        .collect::<Result<_>>()?;
    let recon = if model.decoder.is_some() {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let r = model.forward_recon(&mut g, &mut ps, x, Mode::Eval, strategy)?;
        Some((g.value(r.recon).clone(), r.masks, r.target))
    } else {
        None
    };

    let plane = |t: &Tensor<f32>, i: usize| t.narrow_batch(i, 1).and_then(|s| s.reshape(&[h, w]));
    let rgb = |t: &Tensor<f32>, i: usize| t.narrow_batch(i, 1).and_then(|s| s.reshape(&[3, h, w]));
    if let Some((_, masks, _)) = &recon {
        put("gm.pgm".into(), &masks.gm)?;
    }
    for i in 0..n {
        put(format!("{i:03}_input.ppm"), &rgb(&images, i)?)?;
        for (b, act) in BRANCHES.iter().zip(&acts) {
            let branch = if *b == "cfa" && !model.cfg.use_cfa { "stage4" } else { b };
            put(format!("{i:03}_act_{branch}.pgm"), &plane(act, i)?)?;
        }
        if let Some((rec, masks, target)) = &recon {
            if let Some(p) = &masks.pam {
                put(format!("{i:03}_pam.pgm"), &plane(p, i)?)?;
            }
            if let Some(c) = &masks.cam {
                put(format!("{i:03}_cam.pgm"), &plane(c, i)?)?;
            }
            put(format!("{i:03}_target.ppm"), &rgb(target, i)?)?;
            put(format!("{i:03}_recon.ppm"), &rgb(rec, i)?)?;
        }
    }
    Ok(written)
}

pub fn count_cmd(module: ModuleKind, channels: usize, hw: (usize, usize), pool_factor: usize) -> Result<CostReport> {
    if channels == 0 {
        return arg_err("channels must be positive");
    }
    let desc = match module {
        ModuleKind::Cfa => Cfa::descriptor(CfaConfig::with_pool_factor(channels, pool_factor)?),
        ModuleKind::Pamcam => PamCam::descriptor(channels),
    };
    Ok(CostReport::new(&desc, [1, channels, hw.0, hw.1]))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, seed, out } => gen_data(&json_arg(&spec)?, resolve_seed(seed)?, &out),
        Command::Train { data, config, strategy, seed, out } => train_cmd(&data, &json_arg(&config)?, strategy, resolve_seed(seed)?, &out),
        Command::Eval { data, ckpt, out, max_rank, normalize } => {
            let r = eval_cmd(&data, &ckpt, max_rank, EvalOptions { normalize })?;
            write_json(&out, &r)?;
            emit(&serde_json::to_string(&r)?);
            Ok(())
        }
        Command::Dump { data, ckpt, out, strategy, count } => {
            for p in dump_cmd(&data, &ckpt, &out, strategy, count)? {
                emit(&p.display().to_string());
            }
            Ok(())
        }
        Command::Count { module, channels, hw, pool_factor } => {
            emit(&serde_json::to_string_pretty(&count_cmd(module, channels, hw, pool_factor)?)?);
            Ok(())
        }
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 2 for usage errors, 1 otherwise.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return 0;
            }
            let text = e.render().to_string();
            eprint!("{text}");
            if !text.contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
