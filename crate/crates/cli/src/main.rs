//! `act`: inference, toy training, complexity reports, evaluation and
//! feature-map export for the hybrid super-resolution network.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use act_core::complexity::count_flops;
use act_core::image_io::{load_rgb, save_gray_normalized, save_rgb};
use act_core::model::{crop, load_weights, save_weights, ActModel, ModelConfig};
use act_core::train::{evaluate_image, list_corpus, self_ensemble, train_toy, TrainConfig};
use act_core::{ActError, Tensor};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "act", version, about = "Hybrid CNN/transformer super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Super-resolve one PNG.
    Forward {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Expected upscaling factor; must match the weights.
        #[arg(long)]
        scale: Option<usize>,
        /// Run config whose `[model]` table must match the weights.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Average predictions over the 8 flips and rotations.
        #[arg(long)]
        self_ensemble: bool,
    },
    /// Train on random crops of a PNG corpus.
    TrainToy {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print parameter and MAC counts.
    Count {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input canvas `HxW`.
        #[arg(long, value_parser = parse_geometry, default_value = "48x48")]
        geometry: (usize, usize),
        #[arg(long)]
        csv: bool,
        /// Comma-separated large-token strides to compare, e.g. `5,4,3`.
        #[arg(long, value_delimiter = ',')]
        sweep_stride: Vec<usize>,
    },
    /// Degrade, super-resolve and score every PNG of a directory.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        hr_dir: PathBuf,
        #[arg(long)]
        scale: usize,
        #[arg(long, value_delimiter = ',', default_value = "psnr,ssim")]
        metrics: Vec<Metric>,
        #[arg(long)]
        self_ensemble: bool,
        /// Also write the rows to this CSV file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Export the channel-mean absolute activation of one body stage.
    VizFeatures {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        branch: Branch,
        /// 1-based block index.
        #[arg(long)]
        block: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write freshly initialized weights for a config.
    Init {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "random")]
        kind: InitKind,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Metric {
    Psnr,
    Ssim,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Branch {
    Cnn,
    Transformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum InitKind {
    Random,
    /// Nearest-neighbour upscaler (identity for the restoration tail).
    Identity,
    Zero,
}

fn parse_geometry(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("geometry `{s}` is not of the form HxW"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("geometry `{s}` needs positive integer extents"))
    };
    Ok((parse(h)?, parse(w)?))
}

/// Run configuration file: optional `[model]` and `[train]` tables.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

impl RunConfig {
    fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| anyhow!("invalid config {}: {e}", path.display()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }
}

/// Provenance record written next to a command's outputs.
#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    config: Option<PathBuf>,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    tool_version: &'static str,
    wall_time_secs: f64,
}

/// Files a command has started writing. Unless committed, they are removed
/// when the guard drops.
struct Outputs {
    paths: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn new() -> Self {
        Outputs { paths: Vec::new(), committed: false }
    }

    fn claim(&mut self, path: PathBuf) -> PathBuf {
        self.paths.push(path.clone());
        path
    }

    fn finish(mut self, manifest_path: PathBuf, mut manifest: RunManifest, started: Instant) -> Result<()> {
        manifest.outputs = self.paths.clone();
        manifest.wall_time_secs = started.elapsed().as_secs_f64();
        let path = self.claim(manifest_path);
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.paths {
                let _ = fs::remove_file(p);
            }
        }
    }
}

fn manifest(command: &str, config: Option<&Path>, seed: Option<u64>, inputs: Vec<PathBuf>) -> RunManifest {
    RunManifest {
        command: command.into(),
        config: config.map(Path::to_path_buf),
        seed,
        inputs,
        outputs: Vec::new(),
        tool_version: env!("CARGO_PKG_VERSION"),
        wall_time_secs: 0.0,
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn check_scale(model: &ActModel, scale: usize) -> Result<()> {
    let own = model.config().output_scale();
    if own != scale {
        return Err(ActError::ConfigMismatch {
            field: "scale".into(),
            expected: own.to_string(),
            found: scale.to_string(),
        }
        .into());
    }
    Ok(())
}

fn super_resolve(model: &ActModel, lr: &Tensor, ensemble: bool) -> act_core::Result<Tensor> {
    if ensemble {
        self_ensemble(|x| model.forward(x), lr)
    } else {
        model.forward(lr)
    }
}

fn cmd_forward(
    weights: &Path,
    input: &Path,
    output: &Path,
    scale: Option<usize>,
    config: Option<&Path>,
    ensemble: bool,
) -> Result<()> {
    let started = Instant::now();
    let expected = config.map(RunConfig::load).transpose()?.map(|c| c.model);
    let model = load_weights(weights, expected.as_ref())?;
    if let Some(s) = scale {
        check_scale(&model, s)?;
    }
    let lr = load_rgb(input)?;
    let sr = super_resolve(&model, &lr, ensemble)?;
    let mut outputs = Outputs::new();
    save_rgb(&outputs.claim(output.to_path_buf()), &sr)?;
    let m = manifest("forward", config, Some(model.config().seed), vec![weights.into(), input.into()]);
    outputs.finish(sibling(output, ".manifest.json"), m, started)
}

fn cmd_train_toy(corpus: &Path, config: &Path, out: &Path) -> Result<()> {
    let started = Instant::now();
    let cfg = RunConfig::load(config)?;
    list_corpus(corpus)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut outputs = Outputs::new();
    let log_path = outputs.claim(out.join("metrics.csv"));
    let mut log = std::io::BufWriter::new(
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let mut model = ActModel::new(cfg.model.clone())?;
    let outcome = train_toy(&mut model, corpus, &cfg.train, Some(&mut log))?;
    log.flush()?;
    drop(log);
    save_weights(&model, &outputs.claim(out.join("weights.bin")))?;
    let resolved = toml::to_string(&cfg)?;
    fs::write(outputs.claim(out.join("config.toml")), resolved)?;
    let m = manifest("train-toy", Some(config), Some(cfg.train.seed), outcome.train_files.clone());
    if let Some(last) = outcome.records.last() {
        println!("trained {} steps, final loss {:.6e}", last.step, last.loss);
    }
    for held in &outcome.held_out {
        println!("held out {}", held.display());
    }
    outputs.finish(out.join("manifest.json"), m, started)
}

fn cmd_count(config: Option<&Path>, (h, w): (usize, usize), csv: bool, sweep: &[usize]) -> Result<()> {
    let base = RunConfig::load_or_default(config)?.model;
    if sweep.is_empty() {
        let report = count_flops(&base, h, w)?;
        print!("{}", if csv { report.to_csv() } else { report.to_table() });
        return Ok(());
    }
    let mut rows = Vec::new();
    for &stride in sweep {
        let cfg = ModelConfig { large_stride: stride, ..base.clone() };
        cfg.validate()?;
        let report = count_flops(&cfg, h, w)?;
        let n_large = act_core::tokenization::token_count(h, w, cfg.large_token(), stride);
        rows.push((stride, n_large, report.total_params(), report.total_macs().unwrap_or(0)));
    }
    if csv {
        println!("stride,large_tokens,params,macs");
        for (s, n, p, m) in rows {
            println!("{s},{n},{p},{m}");
        }
    } else {
        println!("{:>6} {:>12} {:>12} {:>10}", "stride", "large tokens", "params", "GMACs");
        for (s, n, p, m) in rows {
            println!("{s:>6} {n:>12} {p:>12} {:>10.3}", m as f64 / 1e9);
        }
    }
    Ok(())
}

fn format_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

fn cmd_eval(
    weights: &Path,
    hr_dir: &Path,
    scale: usize,
    metrics: &[Metric],
    ensemble: bool,
    report: Option<&Path>,
) -> Result<()> {
    let started = Instant::now();
    let model = load_weights(weights, None)?;
    check_scale(&model, scale)?;
    let files = list_corpus(hr_dir)?;
    let scores = files
        .par_iter()
        .map(|path| {
            let hr = load_rgb(path)?;
            evaluate_image(|lr| super_resolve(&model, lr, ensemble), &hr, scale)
        })
        .collect::<act_core::Result<Vec<_>>>()?;

    let wanted: Vec<Metric> = [Metric::Psnr, Metric::Ssim].into_iter().filter(|m| metrics.contains(m)).collect();
    if wanted.is_empty() {
        bail!("no metrics requested");
    }
    let pick = |s: &(f64, f64), m: Metric| if m == Metric::Psnr { s.0 } else { s.1 };
    let mut text = format!(
        "image,{}\n",
        wanted.iter().map(|m| format!("{m:?}").to_lowercase()).collect::<Vec<_>>().join(",")
    );
    for (path, s) in files.iter().zip(&scores) {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let cols: Vec<String> = wanted.iter().map(|&m| format_metric(pick(s, m))).collect();
        text += &format!("{name},{}\n", cols.join(","));
    }
    let n = scores.len() as f64;
    let means: Vec<String> = wanted
        .iter()
        .map(|&m| format_metric(scores.iter().map(|s| pick(s, m)).sum::<f64>() / n))
        .collect();
    text += &format!("mean,{}\n", means.join(","));
    print!("{text}");

    if let Some(path) = report {
        let mut outputs = Outputs::new();
        fs::write(outputs.claim(path.to_path_buf()), &text)?;
        let m = manifest("eval", None, Some(model.config().seed), std::iter::once(weights.into()).chain(files).collect());
        outputs.finish(sibling(path, ".manifest.json"), m, started)?;
    }
    Ok(())
}

fn cmd_viz(weights: &Path, input: &Path, branch: Branch, block: usize, out: &Path) -> Result<()> {
    let started = Instant::now();
    let model = load_weights(weights, None)?;
    let blocks = model.config().blocks;
    if block == 0 || block > blocks {
        return Err(ActError::Range(format!("block {block} outside 1..={blocks}")).into());
    }
    let lr = load_rgb(input)?;
    let (_, trace) = model.forward_traced(&lr)?;
    let stage = &trace.stages[block - 1];
    let feature = match branch {
        Branch::Cnn => &stage.cnn,
        Branch::Transformer => &stage.transformer,
    };
    let (h, w) = (lr.shape()[1], lr.shape()[2]);
    let feature = crop(feature, h, w);
    let c = feature.shape()[0];
    let plane: Vec<f64> = (0..h * w)
        .map(|p| (0..c).map(|ch| feature.data()[ch * h * w + p].abs()).sum::<f64>() / c as f64)
        .collect();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let name = format!("{}_block{block}.png", if branch == Branch::Cnn { "cnn" } else { "transformer" });
    let mut outputs = Outputs::new();
    let path = outputs.claim(out.join(&name));
    save_gray_normalized(&path, &plane, h, w)?;
    let m = manifest("viz-features", None, Some(model.config().seed), vec![weights.into(), input.into()]);
    outputs.finish(sibling(&path, ".manifest.json"), m, started)
}

fn cmd_init(config: Option<&Path>, out: &Path, kind: InitKind) -> Result<()> {
    let started = Instant::now();
    let cfg = RunConfig::load_or_default(config)?.model;
    let seed = cfg.seed;
    let model = match kind {
        InitKind::Random => ActModel::new(cfg)?,
        InitKind::Identity => ActModel::identity_stub(cfg)?,
        InitKind::Zero => {
            let mut m = ActModel::new(cfg)?;
            m.params_mut().zero_prefix("");
            m
        }
    };
    let mut outputs = Outputs::new();
    save_weights(&model, &outputs.claim(out.to_path_buf()))?;
    println!("{} parameters written to {}", model.param_count(), out.display());
    outputs.finish(sibling(out, ".manifest.json"), manifest("init", config, Some(seed), vec![]), started)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Forward { weights, input, output, scale, config, self_ensemble } => {
            cmd_forward(&weights, &input, &output, scale, config.as_deref(), self_ensemble)
        }
        Command::TrainToy { corpus, config, out } => cmd_train_toy(&corpus, &config, &out),
        Command::Count { config, geometry, csv, sweep_stride } => {
            cmd_count(config.as_deref(), geometry, csv, &sweep_stride)
        }
        Command::Eval { weights, hr_dir, scale, metrics, self_ensemble, report } => {
            cmd_eval(&weights, &hr_dir, scale, &metrics, self_ensemble, report.as_deref())
        }
        Command::VizFeatures { weights, input, branch, block, out } => cmd_viz(&weights, &input, branch, block, &out),
        Command::Init { config, out, kind } => cmd_init(config.as_deref(), &out, kind),
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
