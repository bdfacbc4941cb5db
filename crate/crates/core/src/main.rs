use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser as ClapParser, Subcommand};

use refseg::backend::{BackendFactory, BackendSpec, BridgeFactory, MaskMode, SyntheticBackend, DEFAULT_TIMEOUT};
use refseg::dump;
use refseg::eval::config::{load_config, parse_bool};
use refseg::eval::fixtures::write_fixtures;
use refseg::eval::pipeline::load_predictions;
use refseg::eval::{aggregate_metrics, overlay, run_pipeline, write_outputs, Dataset, PipelineConfig};
use refseg::heatmap::Heatmap;
use refseg::igrs::RefinementConfig;
use refseg::parser::{Lexicon, Parser};
use refseg::rle::Rle;
use refseg::select::Connectivity;

const EXIT_PARTIAL: u8 = 1;
const EXIT_FATAL: u8 = 2;

#[derive(ClapParser)]
#[command(name = "refseg", version, about = "Referring-expression segmentation from Grad-CAM refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline over a dataset.
    Run(RunArgs),
    /// Score an existing predictions file.
    Eval(EvalArgs),
    /// Render a heatmap dump and a mask over an image.
    Overlay(OverlayArgs),
    /// Write the bundled scenes, datasets and tensor dumps.
    Fixtures {
        #[arg(long, default_value = "fixtures")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// key=value file; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// synth:SCENES.json | bridge:HOST:PORT | bridge:stdio
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    kappa: Option<usize>,
    #[arg(long)]
    nu: Option<usize>,
    #[arg(long)]
    mask_mode: Option<MaskMode>,
    #[arg(long)]
    connectivity: Option<Connectivity>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-iteration heatmaps, masks and overlays.
    #[arg(long)]
    trace: bool,
    /// Worker threads (one backend connection each).
    #[arg(long)]
    jobs: Option<usize>,
    /// Extra lexicon entries (lemma<TAB>TAG) layered over the bundled one.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Bridge timeout in seconds.
    #[arg(long)]
    timeout: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

#[derive(Args)]
struct OverlayArgs {
    /// Tensor dump holding one Y x X map.
    #[arg(long)]
    heat: PathBuf,
    /// JSON file with one RLE object.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Base PNG; mid-gray when omitted.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Flag value, else config value, else `None`.
fn pick<T: FromStr>(flag: Option<T>, file: &BTreeMap<String, String>, key: &str) -> anyhow::Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if flag.is_some() {
        return Ok(flag);
    }
    file.get(key)
        .map(|v| v.parse::<T>().map_err(|e| anyhow!("config {key}: {e}")))
        .transpose()
}

fn parser_with(lexicon: Option<&Path>) -> anyhow::Result<Parser> {
    Ok(match lexicon {
        Some(p) => Parser::new(Lexicon::bundled_with_overrides(p)?),
        None => Parser::default(),
    })
}

fn open_factory(spec: &str, timeout: Duration) -> anyhow::Result<Box<dyn BackendFactory>> {
    Ok(match spec.parse::<BackendSpec>()? {
        BackendSpec::Synthetic(path) => Box::new(
            SyntheticBackend::from_file(&path).with_context(|| format!("loading scenes {}", path.display()))?,
        ),
        BackendSpec::Tcp(addr) => Box::new(BridgeFactory::tcp(addr, timeout)),
        BackendSpec::Stdio => Box::new(BridgeFactory::stdio()),
    })
}

fn run(args: RunArgs) -> anyhow::Result<u8> {
    let file = match &args.config {
        Some(p) => load_config(p)?,
        None => BTreeMap::new(),
    };
    let defaults = RefinementConfig::default();
    let cfg = PipelineConfig {
        refinement: RefinementConfig {
            lambda: pick(args.lambda, &file, "lambda")?.unwrap_or(defaults.lambda),
            theta: pick(args.theta, &file, "theta")?.unwrap_or(defaults.theta),
            nu: pick(args.nu, &file, "nu")?.unwrap_or(defaults.nu),
            mask_mode: pick(args.mask_mode, &file, "mask-mode")?.unwrap_or(defaults.mask_mode),
        },
        kappa: pick(args.kappa, &file, "kappa")?.unwrap_or(refseg::select::DEFAULT_KAPPA),
        connectivity: pick(args.connectivity, &file, "connectivity")?.unwrap_or_default(),
        jobs: pick(args.jobs, &file, "jobs")?.unwrap_or(1),
        trace: args.trace || file.get("trace").map(|v| parse_bool(v)).transpose()?.unwrap_or(false),
        ..PipelineConfig::default()
    };
    let dataset_path: PathBuf = pick(args.dataset, &file, "dataset")?.context("--dataset is required")?;
    let backend: String = pick(args.backend, &file, "backend")?.context("--backend is required")?;
    let out_dir: PathBuf = pick(args.out, &file, "out")?.context("--out is required")?;
    let lexicon: Option<PathBuf> = pick(args.lexicon, &file, "lexicon")?;
    let timeout = pick(args.timeout, &file, "timeout")?.map_or(DEFAULT_TIMEOUT, Duration::from_secs);

    let parser = parser_with(lexicon.as_deref())?;
    let dataset = Dataset::load(&dataset_path)?;
    let factory = open_factory(&backend, timeout)?;
    let output = run_pipeline(&dataset, &cfg, factory.as_ref(), &parser)?;
    write_outputs(&output, &dataset, &out_dir, cfg.trace)?;

    let m = &output.report.metrics;
    eprintln!(
        "{} samples, {} failed; mIoU {} oIoU {}",
        dataset.records.len(),
        output.failures.len(),
        fmt_metric(m.miou),
        fmt_metric(m.oiou)
    );
    Ok(if output.is_complete() { 0 } else { EXIT_PARTIAL })
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn eval(args: EvalArgs) -> anyhow::Result<u8> {
    let parser = parser_with(args.lexicon.as_deref())?;
    let dataset = Dataset::load(&args.dataset)?;
    let mut predicted = BTreeMap::new();
    for p in load_predictions(&args.predictions)? {
        let mask = p.mask.decode().with_context(|| format!("prediction {}", p.sample_id))?;
        if predicted.insert(p.sample_id.clone(), mask).is_some() {
            bail!("duplicate prediction for {}", p.sample_id);
        }
    }
    let report = aggregate_metrics(&dataset.records, &predicted, &parser)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &args.out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    if !report.missing.is_empty() {
        eprintln!("{} samples have no prediction", report.missing.len());
        return Ok(EXIT_PARTIAL);
    }
    Ok(0)
}

fn overlay_cmd(args: OverlayArgs) -> anyhow::Result<u8> {
    let tensor = dump::read(&args.heat)?;
    let (t, h, w) = tensor.dims();
    if t != 1 {
        bail!("heat dump holds {t} maps, expected 1");
    }
    let heat = Heatmap::new(h, w, tensor.values().to_vec())?;
    let mask = match &args.mask {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<Rle>(&text)?.decode()?
        }
        None => refseg::heatmap::BinaryMask::zeros(h, w),
    };
    let base = args.image.as_deref().map(overlay::load_base).transpose()?;
    overlay::render_overlay(base.as_ref(), &heat, &mask, &args.out)?;
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::Overlay(a) => overlay_cmd(a),
        Command::Fixtures { out } => write_fixtures(&out).map(|p| {
            eprintln!("fixtures written to {}", p.dir.display());
            0
        }).map_err(Into::into),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}
