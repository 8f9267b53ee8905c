use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use mvfa_core::adaptation::{AdapterLayout, Architecture, FeedMode};
use mvfa_core::backbone::FrozenBackbone;
use mvfa_core::config::{Mode, RunConfig};
use mvfa_core::data::{gen_dataset, load_manifest, Sample, GrayImage};
use mvfa_core::data::pgm::heatmap;
use mvfa_core::data::synth::MANIFEST_NAME;
use mvfa_core::eval::{PixelAuc, Report};
use mvfa_core::formats::{self, AnomalyMap, Checkpoint};
use mvfa_core::inference::MemoryBank;
use mvfa_core::objective::LevelMask;
use mvfa_core::{fsutil, pipeline, Error};

/// Multi-level adapted anomaly detection on a frozen encoder.
#[derive(Parser, Debug)]
#[command(name = "mvfa", version)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Overrides {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, splits, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Held-out target modality.
    #[arg(long, global = true)]
    target: Option<String>,
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long, global = true)]
    beta1: Option<f64>,
    #[arg(long, global = true)]
    beta2: Option<f64>,
    /// Comma-separated 1-based levels, e.g. `1,2,3,4`.
    #[arg(long, global = true)]
    levels: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true, value_parser = parse_enum::<AdapterLayout>)]
    layout: Option<AdapterLayout>,
    #[arg(long, global = true, value_parser = parse_enum::<Architecture>)]
    architecture: Option<Architecture>,
    #[arg(long, global = true, value_parser = parse_enum::<FeedMode>)]
    feed: Option<FeedMode>,
    /// Min-max rescale few-shot maps before fusion.
    #[arg(long, global = true)]
    normalize_few: bool,
    #[arg(long, global = true, value_parser = parse_enum::<PixelAuc>)]
    pixel_auc: Option<PixelAuc>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train adapters; writes checkpoint.mvfa and loss.csv.
    Train {
        /// Manifest file, or a directory holding manifest.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the few-shot memory bank from the target's normal references.
    BuildBank {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the test split; writes maps, heatmaps and scores.csv.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the test split and write report.json and report.csv.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate adapter, single-adapter and projector variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    parse_enum(s)
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Bank(_) => 1,
        Error::NumericFailure { .. } => 3,
        _ => 2,
    }
}

fn resolve(o: &Overrides) -> CliResult<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg.data.seed = s;
        cfg.train.seed = s;
    }
    if let Some(k) = o.k {
        cfg.inference.k = k;
    }
    if let Some(t) = &o.target {
        cfg.inference.target = t.clone();
    }
    if let Some(m) = o.mode {
        cfg.inference.mode = m;
        if m == Mode::ZeroShot && o.beta1.is_none() && o.beta2.is_none() {
            cfg.inference.beta1 = 1.0;
            cfg.inference.beta2 = 0.0;
        }
    }
    if let Some(b) = o.beta1 {
        cfg.inference.beta1 = b;
    }
    if let Some(b) = o.beta2 {
        cfg.inference.beta2 = b;
    }
    if let Some(l) = &o.levels {
        cfg.ablation.levels = LevelMask::parse(l)?;
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = o.lr {
        cfg.train.lr = lr;
    }
    if let Some(v) = o.layout {
        cfg.ablation.layout = v;
    }
    if let Some(v) = o.architecture {
        cfg.ablation.architecture = v;
    }
    if let Some(v) = o.feed {
        cfg.ablation.feed = v;
    }
    if o.normalize_few {
        cfg.inference.normalize_few = true;
    }
    if let Some(v) = o.pixel_auc {
        cfg.inference.pixel_auc = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifest(data: &Path) -> CliResult<Vec<Sample>> {
    let path = if data.is_dir() { data.join(MANIFEST_NAME) } else { data.to_path_buf() };
    Ok(load_manifest(&path)?)
}

/// Adopts the backbone and model layout stored in a checkpoint.
fn with_checkpoint(mut cfg: RunConfig, path: &Path) -> CliResult<(RunConfig, mvfa_core::adaptation::MvfaParams)> {
    let ckpt = formats::load_checkpoint(path)?;
    let params = ckpt.params()?;
    cfg.backbone = ckpt.backbone;
    let opts = params.options();
    cfg.train.gamma = opts.gamma;
    cfg.ablation.architecture = opts.architecture;
    cfg.ablation.layout = opts.layout;
    cfg.ablation.feed = opts.feed;
    Ok((cfg, params))
}

fn load_bank(path: Option<&Path>) -> CliResult<Option<MemoryBank>> {
    Ok(match path {
        Some(p) => Some(formats::load_bank(p)?),
        None => None,
    })
}

fn out_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        Failure::Core(Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

fn write_report(dir: &Path, report: &Report) -> CliResult<()> {
    out_dir(dir)?;
    let json = report.to_json();
    fsutil::atomic_write(&dir.join("report.json"), json.as_bytes())?;
    let csv = format!("{}\n{}\n", Report::csv_header(), report.csv_line());
    fsutil::atomic_write(&dir.join("report.csv"), csv.as_bytes())?;
    emit(&format!("{json}\n"));
    Ok(())
}

/// Writes to stdout; a closed pipe (`mvfa eval ... | head`) is not an error.
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = resolve(&cli.overrides)?;
    match cli.command {
        Command::GenData { out } => {
            let samples = gen_dataset(&cfg.data, &out)?;
            info!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::Train { data, out } => {
            let samples = manifest(&data)?;
            let backbone = FrozenBackbone::new(&cfg.backbone)?;
            let prepared = pipeline::prepare(&cfg, &samples)?;
            info!("training on {} samples for {} epochs", prepared.train.len(), cfg.train.epochs);
            let outcome = pipeline::fit(&cfg, &backbone, &prepared, |epoch, loss| {
                info!("epoch {} loss {loss:.6}", epoch + 1)
            })?;
            out_dir(&out)?;
            let ckpt = Checkpoint::from_params(&cfg.backbone, &outcome.params)?;
            formats::save_checkpoint(&out.join("checkpoint.mvfa"), &ckpt)?;
            let mut csv = String::from("epoch,mean_loss\n");
            for (e, l) in outcome.epoch_losses.iter().enumerate() {
                csv += &format!("{},{l}\n", e + 1);
            }
            fsutil::atomic_write(&out.join("loss.csv"), csv.as_bytes())?;
            info!("wrote {}", out.join("checkpoint.mvfa").display());
        }
        Command::BuildBank { data, checkpoint, out } => {
            if cfg.inference.mode != Mode::FewShot {
                return Err(Failure::Usage("build-bank needs few-shot mode".into()));
            }
            let (cfg, params) = with_checkpoint(cfg, &checkpoint)?;
            let samples = manifest(&data)?;
            let backbone = FrozenBackbone::new(&cfg.backbone)?;
            let prepared = pipeline::prepare(&cfg, &samples)?;
            let bank = pipeline::bank(&cfg, &backbone, &params, &prepared)?.expect("few-shot mode builds a bank");
            formats::save_bank(&out, &bank)?;
            info!("wrote bank of {} references to {}", prepared.bank_images.len(), out.display());
        }
        Command::Predict {
            data,
            checkpoint,
            bank,
            out,
        } => {
            let (cfg, params) = with_checkpoint(cfg, &checkpoint)?;
            let bank = load_bank(bank.as_deref())?;
            let samples = manifest(&data)?;
            let backbone = FrozenBackbone::new(&cfg.backbone)?;
            let prepared = pipeline::prepare(&cfg, &samples)?;
            let results = pipeline::score(&cfg, &backbone, &params, bank.as_ref(), &prepared)?;
            let maps = out.join("maps");
            out_dir(&maps)?;
            let mut csv = String::from("image,modality,label,score\n");
            for (r, l) in results.iter().zip(&prepared.test) {
                let stem = l.sample.image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                let name = format!("{}_{stem}", l.sample.modality);
                let map = AnomalyMap {
                    height: r.height,
                    width: r.width,
                    scores: r.s_pred.clone(),
                };
                formats::save_map(&maps.join(format!("{name}.map")), &map)?;
                let img: GrayImage = heatmap(r.width, r.height, &r.s_pred)?;
                mvfa_core::data::write_pgm(&maps.join(format!("{name}.pgm")), &img)?;
                csv += &format!(
                    "{},{},{},{}\n",
                    l.sample.image.display(),
                    l.sample.modality,
                    l.sample.label,
                    r.c_pred
                );
            }
            fsutil::atomic_write(&out.join("scores.csv"), csv.as_bytes())?;
            info!("scored {} images into {}", results.len(), out.display());
        }
        Command::Eval {
            data,
            checkpoint,
            bank,
            out,
        } => {
            let (cfg, params) = with_checkpoint(cfg, &checkpoint)?;
            let bank = load_bank(bank.as_deref())?;
            let samples = manifest(&data)?;
            let backbone = FrozenBackbone::new(&cfg.backbone)?;
            let prepared = pipeline::prepare(&cfg, &samples)?;
            let results = pipeline::score(&cfg, &backbone, &params, bank.as_ref(), &prepared)?;
            let report = pipeline::report(&cfg, &results, &prepared)?;
            write_report(&out, &report)?;
        }
        Command::Ablate { data, out } => {
            let samples = manifest(&data)?;
            let rows = pipeline::ablate(&cfg, &samples, |v| {
                info!("variant {:?}/{:?}", v.ablation.architecture, v.ablation.layout)
            })?;
            out_dir(&out)?;
            let table = pipeline::ablation_table(&rows);
            fsutil::atomic_write(&out.join("ablation.csv"), table.as_bytes())?;
            let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
            fsutil::atomic_write(&out.join("ablation.json"), json.as_bytes())?;
            emit(&table);
        }
    }
    Ok(())
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("MVFA_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("MVFA_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot size the worker pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
