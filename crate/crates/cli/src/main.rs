use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use amsp_core::amsp::{vconv_param_count, AMSPVConvBlock, DEFAULT_GROUPS, DEFAULT_KERNEL};
use amsp_core::fadcsp::{fad_csp_forward_var, FADCSPParams, DEFAULT_REDUCTION, DEFAULT_SPLITS};
use amsp_core::nms::jsonl;
use amsp_core::nms::synth::dense_corpus;
use amsp_core::nms::{DetBox, NMSSimilarConfig, SimilarMode, Variant};
use amsp_core::noise::{default_levels, noise_probe, NoiseProbeConfig};
use amsp_core::{bench, grad_check, init, io, Tensor};

const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "amsp", version, about = "AMSP-VConv / FAD-CSP kernels and similarity-gated NMS")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Suppress duplicate boxes in a JSON-lines detection file.
    Nms(NmsArgs),
    /// Run, gradient-check or size one of the convolution blocks.
    Block {
        #[command(subcommand)]
        mode: BlockMode,
    },
    /// Time hard, soft and similarity-gated NMS on one corpus.
    Bench(BenchArgs),
    /// Output deviation of the blocks under growing input noise.
    NoiseProbe(NoiseArgs),
}

#[derive(Args, Clone, Copy)]
struct Thresholds {
    /// IoU threshold N_t.
    #[arg(long, default_value_t = 0.5)]
    nt: f64,
    /// Aspect similarity threshold N_s.
    #[arg(long, default_value_t = 0.9)]
    ns: f64,
    /// Gaussian decay width.
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    /// Boxes scoring below this are discarded.
    #[arg(long, default_value_t = 0.001)]
    floor: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Literal)]
    mode: ModeArg,
}

impl Thresholds {
    fn config(&self) -> NMSSimilarConfig {
        NMSSimilarConfig {
            iou_threshold: self.nt,
            sim_threshold: self.ns,
            sigma: self.sigma,
            score_floor: self.floor,
            mode: match self.mode {
                ModeArg::Literal => SimilarMode::Literal,
                ModeArg::DensePreserve => SimilarMode::DensePreserve,
            },
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Literal,
    DensePreserve,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: amsp_core::Error| e.to_string())
}

#[derive(Args)]
struct NmsArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// hard, soft or similar (aliases: nms, soft-nms, nms-similar).
    #[arg(long, default_value = "similar", value_parser = parse_variant)]
    variant: Variant,
    #[command(flatten)]
    thresholds: Thresholds,
}

#[derive(Clone, Copy, ValueEnum)]
enum BlockKind {
    AmspVconv,
    FadCsp,
}

#[derive(Args)]
struct BlockShape {
    #[arg(long, value_enum, default_value_t = BlockKind::AmspVconv)]
    block: BlockKind,
    #[arg(long, default_value_t = 2)]
    b: usize,
    #[arg(long, default_value_t = 8)]
    c: usize,
    #[arg(long, default_value_t = 6)]
    h: usize,
    #[arg(long, default_value_t = 6)]
    w: usize,
    /// Vortex groups (default 4); alternatively give --t.
    #[arg(long)]
    g: Option<usize>,
    /// Channels per vortex group, c / (2g).
    #[arg(long)]
    t: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_KERNEL)]
    k: usize,
    /// Attention channel reduction.
    #[arg(long, default_value_t = DEFAULT_REDUCTION)]
    r: usize,
    /// Bottleneck splits.
    #[arg(long, default_value_t = DEFAULT_SPLITS)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum BlockMode {
    /// Evaluate the block and write the output tensor.
    Forward {
        #[command(flatten)]
        shape: BlockShape,
        /// Input tensor (binary container, or JSON if the name ends in .json).
        /// Defaults to seeded standard-normal data.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Also write the block weights as an archive directory.
        #[arg(long)]
        save_weights: Option<PathBuf>,
    },
    /// Compare tape gradients with central differences.
    Gradcheck {
        #[command(flatten)]
        shape: BlockShape,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Weight counts of the block against a standard convolution.
    Params {
        #[arg(long, default_value_t = 64)]
        c: usize,
        #[arg(long, default_value_t = DEFAULT_KERNEL)]
        k: usize,
        #[arg(long)]
        g: Option<usize>,
        #[arg(long)]
        t: Option<usize>,
    },
}

#[derive(Args)]
struct BenchArgs {
    /// JSON-lines corpus.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    input: Option<PathBuf>,
    /// Generate a dense synthetic corpus of this many boxes.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    thresholds: Thresholds,
}

#[derive(Args)]
struct NoiseArgs {
    #[arg(long, default_value_t = 2)]
    b: usize,
    #[arg(long, default_value_t = 16)]
    c: usize,
    #[arg(long, default_value_t = 16)]
    h: usize,
    #[arg(long, default_value_t = 16)]
    w: usize,
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_KERNEL)]
    k: usize,
    /// Noise standard deviations, comma separated (default 0..10).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    levels: Option<Vec<f64>>,
    /// Number of weight/input draws averaged per curve.
    #[arg(long, default_value_t = 16)]
    seeds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Vortex group count from `--g` or `--t`.
fn resolve_groups(c: usize, g: Option<usize>, t: Option<usize>) -> Result<usize> {
    let half = c / 2;
    match (g, t) {
        (Some(g), Some(t)) if g * t != half => bail!("--g {g} and --t {t} disagree: need g * t = c / 2 = {half}"),
        (Some(g), _) => Ok(g),
        (None, Some(t)) => {
            if t == 0 || half % t != 0 {
                bail!("--t {t} must divide c / 2 = {half}");
            }
            Ok(half / t)
        }
        (None, None) => Ok(DEFAULT_GROUPS),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn cmd_nms(a: &NmsArgs) -> Result<()> {
    let cfg = a.thresholds.config();
    let file = std::fs::File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let dets = jsonl::read_detections(std::io::BufReader::new(file))?;
    let (survivors, stats) = jsonl::suppress_detections(&dets, a.variant, &cfg)?;
    let mut buf = Vec::new();
    jsonl::write_survivors(&mut buf, &dets, &survivors)?;
    write_atomic(&a.output, &buf)?;
    let mut report = serde_json::to_value(stats)?;
    report["variant"] = json!(a.variant);
    report["boxes"] = json!(dets.len());
    report["survivors"] = json!(survivors.len());
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

enum Block {
    AmspVconv(AMSPVConvBlock),
    FadCsp(FADCSPParams),
}

impl Block {
    fn build(s: &BlockShape) -> Result<Self> {
        Ok(match s.block {
            BlockKind::AmspVconv => {
                if s.c % 2 != 0 {
                    bail!(amsp_core::Error::Divisibility {
                        op: "amsp_vconv",
                        what: "channels",
                        value: s.c,
                        divisor: 2,
                    });
                }
                let g = resolve_groups(s.c, s.g, s.t)?;
                Block::AmspVconv(AMSPVConvBlock::seeded(s.c, g, s.k, s.seed)?)
            }
            BlockKind::FadCsp => Block::FadCsp(FADCSPParams::seeded(s.c, s.r, s.n, s.seed)?),
        })
    }

    fn name(&self) -> &'static str {
        match self {
            Block::AmspVconv(_) => "amsp-vconv",
            Block::FadCsp(_) => "fad-csp",
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Block::AmspVconv(b) => b.forward(x)?,
            Block::FadCsp(p) => amsp_core::fad_csp_forward(x, p)?,
        })
    }

    fn archive(&self, seed: u64) -> amsp_core::Archive {
        match self {
            Block::AmspVconv(b) => b.to_archive(Some(seed)),
            Block::FadCsp(p) => p.to_archive(Some(seed)),
        }
    }
}

fn input_tensor(s: &BlockShape, input: Option<&Path>) -> Result<Tensor> {
    match input {
        None => Ok(Tensor::normal(
            [s.b, s.c, s.h, s.w],
            1.0,
            &mut init::rng(init::derive_seed(s.seed, "input")),
        )),
        Some(p) if p.extension().is_some_and(|e| e == "json") => {
            Ok(io::tensor_from_json(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?)
        }
        Some(p) => Ok(io::load_tensor(p).with_context(|| format!("reading {}", p.display()))?),
    }
}

fn cmd_forward(s: &BlockShape, input: Option<&Path>, output: &Path, save_weights: Option<&Path>) -> Result<()> {
    let block = Block::build(s)?;
    let x = input_tensor(s, input)?;
    let y = block.forward(&x)?;
    write_atomic(output, &io::to_bytes(&y))?;
    if let Some(dir) = save_weights {
        block.archive(s.seed).save(dir)?;
    }
    let n = y.len() as f64;
    let mean = y.sum() / n;
    let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    print_json(&json!({
        "block": block.name(),
        "input_shape": x.shape().dims(),
        "output_shape": y.shape().dims(),
        "output": output,
        "weights": save_weights,
        "mean": mean,
        "std": var.sqrt(),
        "min": y.data().iter().copied().fold(f64::INFINITY, f64::min),
        "max": y.data().iter().copied().fold(f64::NEG_INFINITY, f64::max),
        "l2": y.norm(),
    }))
}

fn cmd_gradcheck(s: &BlockShape, eps: f64) -> Result<()> {
    let block = Block::build(s)?;
    let x = input_tensor(s, None)?;
    let out_shape = block.forward(&x)?.shape();
    let weights = Tensor::normal(out_shape, 1.0, &mut init::rng(init::derive_seed(s.seed, "probe")));
    let err = match &block {
        Block::AmspVconv(b) => grad_check(|v| b.forward_var(v)?.weighted_sum(&weights), &x, eps)?,
        Block::FadCsp(p) => grad_check(|v| fad_csp_forward_var(v, p)?.weighted_sum(&weights), &x, eps)?,
    };
    let pass = err <= GRAD_TOLERANCE;
    print_json(&json!({
        "block": block.name(),
        "shape": x.shape().dims(),
        "eps": eps,
        "max_relative_error": err,
        "tolerance": GRAD_TOLERANCE,
        "pass": pass,
    }))?;
    if !pass {
        bail!("gradient check failed: {err:e} > {GRAD_TOLERANCE:e}");
    }
    Ok(())
}

fn cmd_params(c: usize, k: usize, g: Option<usize>, t: Option<usize>) -> Result<()> {
    let g = resolve_groups(c, g, t)?;
    let (vconv, standard) = vconv_param_count(c, k, g)?;
    print_json(&json!({
        "c": c,
        "k": k,
        "g": g,
        "vconv_params": vconv,
        "standard_params": standard,
        "ratio": vconv as f64 / standard as f64,
    }))
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let cfg = a.thresholds.config();
    let (corpus, source): (Vec<DetBox>, String) = match (&a.input, a.synthetic) {
        (Some(p), _) => {
            let file = std::fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
            let dets = jsonl::read_detections(std::io::BufReader::new(file))?;
            (dets.into_iter().map(|d| d.bbox).collect(), p.display().to_string())
        }
        (None, Some(n)) => (dense_corpus(n, a.seed)?, format!("synthetic:{n}:seed={}", a.seed)),
        (None, None) => bail!("give --input or --synthetic"),
    };
    let suite = bench::bench_all(&corpus, &cfg, a.reps)?;
    let mut report = serde_json::to_value(&suite)?;
    report["corpus"] = json!(source);
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &a.output {
        write_atomic(out, text.as_bytes())?;
    }
    println!("{text}");
    if !suite.economy_holds {
        bail!(
            "decay evaluations: similar {} > soft {}",
            suite.get(Variant::Similar).decay_evals,
            suite.get(Variant::Soft).decay_evals
        );
    }
    Ok(())
}

fn cmd_noise(a: &NoiseArgs) -> Result<()> {
    let cfg = NoiseProbeConfig {
        shape: [a.b, a.c, a.h, a.w],
        groups: resolve_groups(a.c, a.g, a.t)?,
        kernel: a.k,
        seeds: a.seeds,
        seed: a.seed,
        levels: a.levels.clone().unwrap_or_else(default_levels),
    };
    let report = noise_probe(&cfg)?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &a.output {
        write_atomic(out, text.as_bytes())?;
    }
    println!("{text}");
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("AMSP_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("AMSP_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Nms(a) => cmd_nms(a),
        Command::Block { mode } => match mode {
            BlockMode::Forward {
                shape,
                input,
                output,
                save_weights,
            } => cmd_forward(shape, input.as_deref(), output, save_weights.as_deref()),
            BlockMode::Gradcheck { shape, eps } => cmd_gradcheck(shape, *eps),
            BlockMode::Params { c, k, g, t } => cmd_params(*c, *k, *g, *t),
        },
        Command::Bench(a) => cmd_bench(a),
        Command::NoiseProbe(a) => cmd_noise(a),
    }
}

fn error_line(kind: &str, message: &str) -> String {
    let one_line = message.split_whitespace().collect::<Vec<_>>().join(" ");
    json!({ "error": one_line, "kind": kind }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.render().to_string();
            let msg = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", msg));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<amsp_core::Error>().map_or("error", amsp_core::Error::kind);
            eprintln!("{}", error_line(kind, &format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
