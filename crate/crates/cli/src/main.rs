use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use psdet::config::{Precision, RunConfig};
use psdet::detect::io::{parse_detections, render_detections, DetectionRecord};
use psdet::eval::{evaluate, ground_truth, EvalReport};
use psdet::gradcheck::{self, GradcheckConfig};
use psdet::inference::Detector;
use psdet::nn::{build_network, ParamStore};
use psdet::rng::{stream, STREAM_INIT};
use psdet::synth::{class_color, read_dataset, write_dataset, DatasetSpec, RgbImage, Split};
use psdet::train::{ablation_sweep, detect_scenes, parse_sweep, train_at_precision, CONFIG_FILE};
use psdet::{Error, Real, Result};

#[derive(Parser)]
#[command(name = "psdet", version, about = "Position-sensitive region detector experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset to disk.
    GenData {
        /// Dataset spec file (`data.*` keys); defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a detector and write checkpoint, metrics and config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `optim.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print per-class AP and mAP on a dataset split.
    Eval {
        #[arg(long, required_unless_present = "detections")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Run config; defaults to `config.txt` beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Score this detection file instead of running a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        detections: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Draw detections on a PPM image and print them.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference gradient checks per layer.
    Gradcheck {
        /// `all` or a comma-separated list of layer names.
        #[arg(long, default_value = "all")]
        layers: String,
        /// Scalar width of the analytic gradient: 64 or 32.
        #[arg(long, default_value = "64")]
        precision: Precision,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train several variants and tabulate their validation mAP.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// `k=1,3,7` or `variants=<block>/<dropout>,...`.
        #[arg(long)]
        sweep: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `optim.epochs` for every variant.
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("ERROR:usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("ERROR:{}: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenData { spec, out, seed } => gen_data(spec.as_deref(), &out, seed),
        Command::Train { config, data, out, epochs } => train(config.as_deref(), &data, &out, epochs),
        Command::Eval { checkpoint, data, config, detections, split } => {
            eval(checkpoint.as_deref(), &data, config.as_deref(), detections.as_deref(), &split)
        }
        Command::Detect { checkpoint, image, out, config } => detect(&checkpoint, &image, &out, config.as_deref()),
        Command::Gradcheck { layers, precision, instances, seed } => run_gradcheck(&layers, precision, instances, seed),
        Command::Ablate { config, data, sweep, out, epochs } => ablate(config.as_deref(), &data, &sweep, &out, epochs),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_owned(), source: e })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_owned(), source: e })
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

/// Explicit config, else the one saved beside the checkpoint, else defaults.
fn config_for_checkpoint(explicit: Option<&Path>, checkpoint: Option<&Path>) -> Result<RunConfig> {
    if explicit.is_some() {
        return load_config(explicit);
    }
    let sidecar = checkpoint.and_then(Path::parent).map(|d| d.join(CONFIG_FILE));
    match sidecar {
        Some(p) if p.is_file() => RunConfig::load(&p),
        _ => Ok(RunConfig::default()),
    }
}

/// Loads the checkpoint at the config's precision and checks it against the
/// network the config describes.
fn load_store<T: Real>(path: &Path, cfg: &RunConfig) -> Result<ParamStore<T>> {
    let store = ParamStore::<T>::load(path)?;
    let reference: ParamStore<T> = build_network(&cfg.net, &mut stream(0, STREAM_INIT))?;
    store.check_compatible(&reference)?;
    Ok(store)
}

fn gen_data(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<ExitCode> {
    let mut s = match spec {
        Some(p) => DatasetSpec::parse(&p.display().to_string(), &read_text(p)?)?,
        None => DatasetSpec::default(),
    };
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let m = write_dataset(&s, out)?;
    println!(
        "wrote {} train, {} val, {} test images to {}",
        m.splits[0].len(),
        m.splits[1].len(),
        m.splits[2].len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train(config: Option<&Path>, data: &Path, out: &Path, epochs: Option<usize>) -> Result<ExitCode> {
    let mut cfg = load_config(config)?;
    if let Some(e) = epochs {
        cfg.optim.epochs = e;
    }
    let ds = read_dataset(data)?;
    cfg.data = ds.spec.clone();
    let start = Instant::now();
    train_at_precision(&ds, &cfg, out, &mut |m| {
        println!("{}  ({:.1}s)", m.line(), start.elapsed().as_secs_f64());
    })?;
    println!("checkpoint written to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(
    checkpoint: Option<&Path>,
    data: &Path,
    config: Option<&Path>,
    detections: Option<&Path>,
    split: &str,
) -> Result<ExitCode> {
    let cfg = config_for_checkpoint(config, checkpoint)?;
    let split: Split = split.parse()?;
    let ds = read_dataset(data)?;
    let scenes = ds.split(split);
    let dets: Vec<DetectionRecord> = match (detections, checkpoint) {
        (Some(p), _) => parse_detections(&p.display().to_string(), &read_text(p)?)?,
        (None, Some(ckpt)) => match cfg.precision {
            Precision::F32 => detect_scenes(&load_store::<f32>(ckpt, &cfg)?, &cfg, scenes)?,
            Precision::F64 => detect_scenes(&load_store::<f64>(ckpt, &cfg)?, &cfg, scenes)?,
        },
        (None, None) => return Err(Error::Config("eval needs --checkpoint or --detections".into())),
    };
    let report: EvalReport = evaluate(&dets, &ground_truth(scenes), cfg.net.classes, cfg.eval_iou)?;
    print!("{}", report.render());
    Ok(ExitCode::SUCCESS)
}

fn detect(checkpoint: &Path, image: &Path, out: &Path, config: Option<&Path>) -> Result<ExitCode> {
    let cfg = config_for_checkpoint(config, Some(checkpoint))?;
    let img = RgbImage::read(image)?;
    let t = img.to_tensor::<f64>();
    let dets = match cfg.precision {
        Precision::F32 => Detector::new(load_store::<f32>(checkpoint, &cfg)?, cfg.clone()).detect(&t, &cfg.eval)?,
        Precision::F64 => Detector::new(load_store::<f64>(checkpoint, &cfg)?, cfg.clone()).detect(&t, &cfg.eval)?,
    };
    let id = image.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let shown: Vec<DetectionRecord> = dets
        .iter()
        .filter(|d| d.score >= cfg.detect_score_thresh)
        .map(|d| DetectionRecord { image_id: id.clone(), class_id: d.class_id, score: d.score, bbox: d.bbox })
        .collect();
    let mut canvas = img;
    for d in &shown {
        canvas.draw_box(&d.bbox, class_color(d.class_id), 2);
    }
    canvas.write(out)?;
    print!("{}", render_detections(&shown));
    Ok(ExitCode::SUCCESS)
}

fn run_gradcheck(layers: &str, precision: Precision, instances: Option<usize>, seed: Option<u64>) -> Result<ExitCode> {
    let names = gradcheck::resolve_layers(layers)?;
    let mut cfg = match precision {
        Precision::F64 => GradcheckConfig::f64_default(),
        Precision::F32 => GradcheckConfig::f32_default(),
    };
    if let Some(n) = instances {
        cfg.instances = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let start = Instant::now();
    let reports = match precision {
        Precision::F64 => gradcheck::run::<f64>(&names, &cfg)?,
        Precision::F32 => gradcheck::run::<f32>(&names, &cfg)?,
    };
    print!("{}", gradcheck::render_reports(&reports));
    println!("tolerance {:e}  elapsed {:.2}s", cfg.tolerance, start.elapsed().as_secs_f64());
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("ERROR:gradcheck: {} layer(s) failed: {}", failed.len(), failed.join(", "));
        Ok(ExitCode::FAILURE)
    }
}

fn ablate(config: Option<&Path>, data: &Path, sweep: &str, out: &Path, epochs: Option<usize>) -> Result<ExitCode> {
    let mut base = load_config(config)?;
    if let Some(e) = epochs {
        base.optim.epochs = e;
    }
    let ds = read_dataset(data)?;
    base.data = ds.spec.clone();
    let variants = parse_sweep(sweep, &base)?;
    let start = Instant::now();
    let table = ablation_sweep(&variants, &ds, out, &mut |name, m| {
        println!("[{name}] {}  ({:.1}s)", m.line(), start.elapsed().as_secs_f64());
    })?;
    let text = table.render();
    write_text(&out.join("table.txt"), &text)?;
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}
