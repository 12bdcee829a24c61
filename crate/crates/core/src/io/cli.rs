//! `stylenas` command-line interface. Results go to standard output as
//! `key=value` lines.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};

use crate::arch::{resolve_code, ArchCode, Encoder, NetworkGraph, SlotKind};
use crate::error::{Error, Result};
use crate::io::config::KeyValues;
use crate::io::image::{list_ppms, read_ppm, write_ppm};
use crate::io::weights::{load_weights, save_weights};
use crate::metrics::{gram_loss, ssim, ssim_edge};
use crate::nas::{configs_from_kv, random_search, search, DeskConfig, DeskEvaluator, Memoized, SearchConfig, SearchResult, SearchSpace};
use crate::tensor::Tensor;
use crate::train::{reconstruction_psnr, train_decoder, Corpus, TrainConfig};
use crate::transfer::{TransferConfig, TransferKind};

#[derive(Debug, Parser)]
#[command(name = "stylenas", version, about = "Photorealistic style transfer and architecture search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stylize a content photo with a style photo.
    Stylize(StylizeArgs),
    /// Train a decoder by image reconstruction.
    TrainDecoder(TrainArgs),
    /// Evolutionary architecture search.
    Search(SearchArgs),
    /// Random-search baseline at the same budget.
    RandomSearch(SearchArgs),
    /// SSIM-Whole, SSIM-Edge and Gram loss of a stylized result.
    EvalMetrics(EvalArgs),
    /// Describe an architecture code.
    DecodeArch(DecodeArgs),
    /// Median forward-pass wall time.
    Bench(BenchArgs),
    /// Stylize every frame in a directory with one style.
    Frames(FramesArgs),
}

#[derive(Debug, Args)]
pub struct NetArgs {
    /// Architecture: a 31-character code or a preset name.
    #[arg(long, default_value = "photonet")]
    pub arch: String,
    /// Weights file; encoder-only files get a freshly initialized decoder.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Encoder base width when no weights file provides one.
    #[arg(long, default_value_t = 8)]
    pub base_width: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long, default_value_t = 0.3)]
    pub epsilon: f32,
    #[arg(long, default_value_t = 1.0)]
    pub blend: f32,
    #[arg(long, default_value = "wct")]
    pub transfer: TransferKind,
}

impl TransferArgs {
    fn config(&self) -> Result<TransferConfig> {
        let c = TransferConfig {
            epsilon: self.epsilon,
            blend: self.blend,
            kind: self.transfer,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct StylizeArgs {
    #[arg(long)]
    pub content: PathBuf,
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub transfer: TransferArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub net: NetArgs,
    /// Directory of PPM training images; procedural images otherwise.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Number of procedural images.
    #[arg(long, default_value_t = 16)]
    pub images: usize,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f32,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    /// Output weights file (encoder and decoder).
    #[arg(long)]
    pub out: PathBuf,
    /// Optional CSV of the per-step loss.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// `key=value` file with search, `train.*`, `oracle.*` and `desk.*` keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub population: Option<usize>,
    #[arg(long)]
    pub budget: Option<usize>,
    /// Per-candidate telemetry CSV.
    #[arg(long)]
    pub telemetry: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub content: PathBuf,
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long)]
    pub result: PathBuf,
    /// Encoder weights for the Gram loss; seeded otherwise.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub base_width: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also append the metrics as a CSV row.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    pub code: String,
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    #[arg(long, default_value_t = 256)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub base_width: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Architectures to time (codes or preset names).
    #[arg(long = "arch", required = true)]
    pub archs: Vec<String>,
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    #[arg(long, default_value_t = 8)]
    pub base_width: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
}

#[derive(Debug, Args)]
pub struct FramesArgs {
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub transfer: TransferArgs,
}

/// Builds a graph, loading weights when given.
pub fn load_graph(code: ArchCode, weights: Option<&Path>, base_width: usize, seed: u64) -> Result<NetworkGraph> {
    let Some(path) = weights else {
        let encoder = Arc::new(Encoder::seeded(base_width, seed)?);
        return Ok(NetworkGraph::new(code, encoder, seed));
    };
    let tensors = load_weights(path)?;
    let encoder = Arc::new(Encoder::from_tensors(&tensors)?);
    let mut graph = NetworkGraph::new(code, encoder, seed);
    if tensors.keys().any(|k| k.starts_with("dec.")) {
        graph.load_tensors(&tensors)?;
    }
    Ok(graph)
}

impl NetArgs {
    fn graph(&self) -> Result<NetworkGraph> {
        load_graph(resolve_code(&self.arch)?, self.weights.as_deref(), self.base_width, self.seed)
    }
}

/// Wall time of `reps` stylizations of random `h × w` inputs.
pub fn time_forward(graph: &NetworkGraph, h: usize, w: usize, reps: usize) -> Result<Vec<Duration>> {
    let content = Tensor::from_fn(&[3, h, w], |i| ((i * 7919) % 251) as f32 / 250.0);
    let style = Tensor::from_fn(&[3, h, w], |i| ((i * 104_729) % 241) as f32 / 240.0);
    let cfg = TransferConfig::default();
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            graph.forward(&content, &style, &cfg)?;
            Ok(t.elapsed())
        })
        .collect()
}

pub fn median(times: &mut [Duration]) -> Duration {
    times.sort();
    times[times.len() / 2]
}

fn kv(out: &mut dyn Write, key: &str, value: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{key}={value}")?;
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            write!(out, "{e}")?;
            return Ok(());
        }
        Err(e) => return Err(Error::Input(e.to_string())),
    };
    dispatch(cli.command, out)
}

pub fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Stylize(a) => {
            let graph = a.net.graph()?;
            let content = read_ppm(&a.content)?;
            let style = read_ppm(&a.style)?;
            let result = graph.forward(&content, &style, &a.transfer.config()?)?;
            write_ppm(&result, &a.out)?;
            kv(out, "arch", graph.code())?;
            kv(out, "transfer_sites", graph.transfer_sites().len())?;
            kv(out, "out", a.out.display())?;
        }
        Command::TrainDecoder(a) => {
            let mut graph = a.net.graph()?;
            let corpus = match &a.corpus {
                Some(dir) => Corpus::from_dir(dir)?,
                None => Corpus::procedural(a.images, a.image_size, a.net.seed)?,
            };
            let cfg = TrainConfig {
                steps: a.steps,
                batch: a.batch,
                learning_rate: a.learning_rate,
                seed: a.net.seed,
                image_size: a.image_size,
            };
            let trace = train_decoder(&mut graph, &corpus, &cfg)?;
            save_weights(&graph.named_tensors(), &a.out)?;
            if let Some(path) = &a.trace {
                let mut w = csv::Writer::from_path(path).map_err(|e| Error::Input(e.to_string()))?;
                w.write_record(["step", "loss"]).map_err(|e| Error::Input(e.to_string()))?;
                for (i, l) in trace.iter().enumerate() {
                    w.write_record([i.to_string(), l.to_string()])
                        .map_err(|e| Error::Input(e.to_string()))?;
                }
                w.flush()?;
            }
            kv(out, "arch", graph.code())?;
            kv(out, "steps", trace.len())?;
            kv(out, "initial_loss", trace[0])?;
            kv(out, "final_loss", trace[trace.len() - 1])?;
            kv(out, "psnr_db", reconstruction_psnr(&graph, &corpus)?)?;
            kv(out, "out", a.out.display())?;
        }
        Command::Search(a) => run_search(&a, false, out)?,
        Command::RandomSearch(a) => run_search(&a, true, out)?,
        Command::EvalMetrics(a) => {
            let content = read_ppm(&a.content)?;
            let style = read_ppm(&a.style)?;
            let result = read_ppm(&a.result)?;
            let encoder = match &a.weights {
                Some(p) => Encoder::from_tensors(&load_weights(p)?)?,
                None => Encoder::seeded(a.base_width, a.seed)?,
            };
            let sw = ssim(&content, &result)?;
            let se = ssim_edge(&content, &result)?;
            let gl = gram_loss(&result, &style, &encoder)?;
            kv(out, "ssim_whole", sw)?;
            kv(out, "ssim_edge", se)?;
            kv(out, "gram_loss", gl)?;
            if let Some(path) = &a.csv {
                let fresh = !path.exists();
                let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
                let mut w = csv::Writer::from_writer(file);
                let err = |e: csv::Error| Error::Input(e.to_string());
                if fresh {
                    w.write_record(["content", "style", "result", "ssim_whole", "ssim_edge", "gram_loss"])
                        .map_err(err)?;
                }
                w.write_record([
                    a.content.display().to_string(),
                    a.style.display().to_string(),
                    a.result.display().to_string(),
                    sw.to_string(),
                    se.to_string(),
                    gl.to_string(),
                ])
                .map_err(err)?;
                w.flush()?;
            }
        }
        Command::DecodeArch(a) => {
            let code = resolve_code(&a.code)?;
            let encoder = Arc::new(Encoder::seeded(a.base_width, 0)?);
            let graph = NetworkGraph::new(code, encoder, 0);
            let active = code.active_slots();
            kv(out, "code", code)?;
            kv(out, "popcount", code.popcount())?;
            kv(out, "op_fraction", code.op_fraction())?;
            kv(out, "active_slots", join(active.iter().map(|s| format!("S{s}"))))?;
            kv(out, "active_ops", join(active.iter().map(|&s| SlotKind::of(s).to_string())))?;
            let inert: Vec<String> = active
                .iter()
                .filter(|&&s| SlotKind::of(s).parent().is_some_and(|p| !code.get(p)))
                .map(|s| format!("S{s}"))
                .collect();
            kv(out, "inert_slots", join(inert.into_iter()))?;
            kv(out, "transfer_sites", join(graph.transfer_sites().iter().map(|s| s.to_string())))?;
            let flops = graph.count_flops(a.height, a.width);
            kv(out, "size", format!("{}x{}", a.width, a.height))?;
            kv(out, "conv_macs", flops.conv)?;
            kv(out, "transfer_macs", flops.transfer)?;
            kv(out, "total_macs", flops.total())?;
        }
        Command::Bench(a) => {
            if a.reps == 0 {
                return Err(Error::Input("--reps must be >= 1".into()));
            }
            let encoder = Arc::new(Encoder::seeded(a.base_width, 0)?);
            for arch in &a.archs {
                let graph = NetworkGraph::new(resolve_code(arch)?, encoder.clone(), 0);
                let mut times = time_forward(&graph, a.height, a.width, a.reps)?;
                kv(out, &format!("{arch}.median_ms"), median(&mut times).as_secs_f64() * 1e3)?;
            }
        }
        Command::Frames(a) => {
            let graph = a.net.graph()?;
            let cfg = a.transfer.config()?;
            let style = read_ppm(&a.style)?;
            Encoder::check_image(&style)?;
            let cache = graph.style_cache(&style)?;
            std::fs::create_dir_all(&a.out)?;
            let frames = list_ppms(&a.frames)?;
            if frames.is_empty() {
                return Err(Error::Input(format!("no .ppm frames in {}", a.frames.display())));
            }
            for path in &frames {
                let frame = read_ppm(path)?;
                let taps = graph.encoder().forward(&frame)?;
                let result = graph.stylize(&taps, &cache, &cfg)?;
                write_ppm(&result, &a.out.join(path.file_name().expect("listed file")))?;
            }
            kv(out, "frames", frames.len())?;
            kv(out, "out", a.out.display())?;
        }
    }
    Ok(())
}

fn join(items: impl Iterator<Item = String>) -> String {
    items.collect::<Vec<_>>().join(",")
}

fn run_search(a: &SearchArgs, random: bool, out: &mut dyn Write) -> Result<()> {
    let (mut cfg, desk) = match &a.config {
        Some(path) => configs_from_kv(&KeyValues::load(path)?)?,
        None => (SearchConfig::with_population(8, 40), DeskConfig::default()),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    if let Some(p) = a.population {
        cfg.population = p;
        cfg.tournament_size = crate::nas::default_tournament(p);
    }
    if let Some(b) = a.budget {
        cfg.budget = b;
    }
    cfg.validate()?;
    let oracle = Arc::new(crate::nas::train_oracle(&desk)?);
    let evaluator = Memoized::new(DeskEvaluator::new(&desk, oracle, cfg.weights)?);
    let space = SearchSpace::full();
    let result: SearchResult = if random {
        random_search(&cfg, &space, &evaluator)?
    } else {
        search(&cfg, &space, &evaluator, None)?
    };
    if let Some(path) = &a.telemetry {
        result.write_telemetry(path)?;
    }
    let best = &result.best;
    let report = best.report.expect("best candidate is trained");
    kv(out, "evaluated", result.history.len())?;
    kv(out, "failed", result.history.iter().filter(|c| c.report.is_none()).count())?;
    kv(out, "best_loss", best.loss)?;
    kv(out, "best_recon_error", report.recon_error)?;
    kv(out, "best_perceptual", report.perceptual)?;
    kv(out, "best_op_fraction", report.op_fraction)?;
    kv(out, "best_flops", evaluator.inner().flops(best.code))?;
    kv(out, "best", best.code)?;
    Ok(())
}

/// Decoder weights only, keyed like [`NetworkGraph::decoder_tensors`].
pub fn decoder_only(tensors: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    tensors
        .iter()
        .filter(|(k, _)| k.starts_with("dec."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}
