use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dacn_core::config::KeyValues;
use dacn_core::data::{self, DatasetSplit, HyperCube, SynthParams, DEFAULT_PATCH_SIZE};
use dacn_core::gradcheck::{self, GradCheckConfig};
use dacn_core::trainer::{self, TrainConfig};
use dacn_core::{checkpoint, metrics, model, DacnConfig};

const SEED_ENV: &str = "DACN_SEED";
const DATA_KEYS: [&str; 3] = ["patch_size", "patch_stride", "normalize"];

#[derive(Parser)]
#[command(name = "dacn", version, about = "Hyperspectral image super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded low-rank synthetic cube.
    Synth(SynthArgs),
    /// Downsample a cube by block averaging.
    Degrade(DegradeArgs),
    /// Train on every .hsc cube in a directory.
    Train(TrainArgs),
    /// Compare a test cube against a reference.
    Eval(EvalArgs),
    /// Super-resolve a cube with a trained checkpoint.
    Sr(SrArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    bands: usize,
    #[arg(long, default_value_t = 4)]
    rank: usize,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = ["2", "4", "8"])]
    scale: String,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data_dir: PathBuf,
    /// `key = value` file with model, training and data keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_checkpoint: PathBuf,
    #[arg(long)]
    history: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct SrArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Model config; the micro config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value = "gradcheck.csv")]
    report: PathBuf,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Serialize)]
struct RunManifest {
    command: &'static str,
    config: BTreeMap<String, String>,
    inputs: BTreeMap<&'static str, String>,
    outputs: BTreeMap<&'static str, String>,
    seed: Option<u64>,
    duration_ms: u128,
}

impl RunManifest {
    fn new(command: &'static str) -> Self {
        RunManifest {
            command,
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seed: None,
            duration_ms: 0,
        }
    }

    fn input(mut self, name: &'static str, p: &Path) -> Self {
        self.inputs.insert(name, p.display().to_string());
        self
    }

    fn output(mut self, name: &'static str, p: &Path) -> Self {
        self.outputs.insert(name, p.display().to_string());
        self
    }

    fn config(mut self, kv: &KeyValues) -> Self {
        for k in kv.keys() {
            self.config.insert(k.to_string(), kv.raw(k).unwrap_or_default().to_string());
        }
        self
    }

    /// Written next to `primary` as `<name>.manifest.json`.
    fn write(mut self, primary: &Path, start: Instant) -> Result<()> {
        self.duration_ms = start.elapsed().as_millis();
        let mut name = primary.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        let path = primary.with_file_name(name);
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// `DACN_SEED` wins over any seed given by flag or config.
fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| dacn_core::Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")).into()),
        Err(_) => Ok(None),
    }
}

fn read_config(path: Option<&Path>) -> Result<KeyValues> {
    match path {
        None => Ok(KeyValues::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            Ok(KeyValues::parse(&text)?)
        }
    }
}

fn read_cube(p: &Path) -> Result<HyperCube> {
    data::read_cube(p).with_context(|| format!("reading {}", p.display()))
}

fn write_cube(c: &HyperCube, p: &Path) -> Result<()> {
    data::write_cube(c, p).with_context(|| format!("writing {}", p.display()))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).with_context(|| format!("writing {}", p.display()))
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let start = Instant::now();
    let p = SynthParams {
        height: a.height,
        width: a.width,
        bands: a.bands,
        rank: a.rank,
        noise: a.noise,
        seed: seed_override()?.unwrap_or(a.seed),
    };
    let cube = data::synth_cube(&p)?;
    write_cube(&cube, &a.out)?;
    let mut kv = KeyValues::default();
    kv.set("height", p.height);
    kv.set("width", p.width);
    kv.set("bands", p.bands);
    kv.set("rank", p.rank);
    kv.set("noise", p.noise);
    let mut m = RunManifest::new("synth").config(&kv).output("cube", &a.out);
    m.seed = Some(p.seed);
    m.write(&a.out, start)
}

fn cmd_degrade(a: &DegradeArgs) -> Result<()> {
    let start = Instant::now();
    let scale: usize = a.scale.parse()?;
    let lr = data::degrade_area(&read_cube(&a.input)?, scale)?;
    write_cube(&lr, &a.out)?;
    let mut kv = KeyValues::default();
    kv.set("scale", scale);
    RunManifest::new("degrade")
        .config(&kv)
        .input("cube", &a.input)
        .output("cube", &a.out)
        .write(&a.out, start)
}

fn cube_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading data dir {}", dir.display()))? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "hsc") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(dacn_core::Error::Config(format!("no .hsc cubes in {}", dir.display())).into());
    }
    Ok(files)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let start = Instant::now();
    let mut kv = read_config(a.config.as_deref())?;
    let known: Vec<&str> = DacnConfig::KEYS
        .iter()
        .chain(TrainConfig::KEYS)
        .chain(&DATA_KEYS)
        .copied()
        .collect();
    kv.reject_unknown(&known)?;
    if let Some(s) = seed_override()? {
        kv.set("seed", s);
    }
    let model_cfg = DacnConfig::from_kv(&kv)?;
    let mut train_cfg = TrainConfig::from_kv(&kv)?;
    // One seed drives init, shuffling and the split.
    train_cfg.seed = model_cfg.seed;
    let patch_size: usize = kv.get_or("patch_size", DEFAULT_PATCH_SIZE)?;
    let patch_stride: usize = kv.get_or("patch_stride", patch_size)?;
    let normalize: bool = kv.get_or("normalize", true)?;

    let files = cube_files(&a.data_dir)?;
    let mut patches = Vec::new();
    for f in &files {
        let mut cube = read_cube(f)?;
        if normalize {
            cube = data::normalize(&cube).with_context(|| format!("normalizing {}", f.display()))?;
        }
        patches.extend(data::extract_patches(&cube, patch_size, patch_stride)?);
    }
    let split = DatasetSplit::new(patches, patch_size, model_cfg.scale, model_cfg.seed)?;
    let out = trainer::train(&model_cfg, &split, &train_cfg)?;
    checkpoint::save(&out.params, &model_cfg, &a.out_checkpoint)
        .with_context(|| format!("writing {}", a.out_checkpoint.display()))?;
    write_text(&a.history, &trainer::history_csv(&out.history))?;

    let mut snapshot = model_cfg.to_kv();
    snapshot.merge(&train_cfg.to_kv());
    snapshot.set("patch_size", patch_size);
    snapshot.set("patch_stride", patch_stride);
    snapshot.set("normalize", normalize);
    let mut m = RunManifest::new("train")
        .config(&snapshot)
        .input("data_dir", &a.data_dir)
        .output("checkpoint", &a.out_checkpoint)
        .output("history", &a.history);
    if let Some(c) = &a.config {
        m = m.input("config", c);
    }
    m.seed = Some(model_cfg.seed);
    m.write(&a.out_checkpoint, start)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let start = Instant::now();
    let report = metrics::evaluate(&read_cube(&a.reference)?, &read_cube(&a.test)?)?;
    write_text(&a.report, &report.to_csv())?;
    RunManifest::new("eval")
        .input("reference", &a.reference)
        .input("test", &a.test)
        .output("report", &a.report)
        .write(&a.report, start)
}

fn cmd_sr(a: &SrArgs) -> Result<()> {
    let start = Instant::now();
    let (params, cfg) = checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let hr = model::super_resolve(&read_cube(&a.input)?, &params, &cfg)?;
    write_cube(&hr, &a.out)?;
    let mut m = RunManifest::new("sr")
        .config(&cfg.to_kv())
        .input("cube", &a.input)
        .input("checkpoint", &a.checkpoint)
        .output("cube", &a.out);
    m.seed = Some(cfg.seed);
    m.write(&a.out, start)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let start = Instant::now();
    let mut kv = read_config(a.config.as_deref())?;
    kv.reject_unknown(DacnConfig::KEYS)?;
    if let Some(s) = seed_override()? {
        kv.set("seed", s);
    }
    let model_cfg = if a.config.is_some() {
        DacnConfig::from_kv(&kv)?
    } else {
        DacnConfig {
            seed: kv.get_or("seed", DacnConfig::micro().seed)?,
            ..DacnConfig::micro()
        }
    };
    if !(a.tolerance > 0.0) || !a.tolerance.is_finite() {
        return Err(dacn_core::Error::Config(format!("tolerance {} must be > 0", a.tolerance)).into());
    }
    let gc = GradCheckConfig {
        tolerance: a.tolerance,
        seed: model_cfg.seed,
        inject_fault: a.inject_fault,
        ..GradCheckConfig::default()
    };
    let report = gradcheck::run_suite(&model_cfg, &gc)?;
    let csv = report.to_csv();
    print!("{csv}");
    write_text(&a.report, &csv)?;

    let mut snapshot = model_cfg.to_kv();
    snapshot.set("tolerance", a.tolerance);
    snapshot.set("inject_fault", a.inject_fault);
    let mut m = RunManifest::new("gradcheck").config(&snapshot).output("report", &a.report);
    if let Some(c) = &a.config {
        m = m.input("config", c);
    }
    m.seed = Some(model_cfg.seed);
    m.write(&a.report, start)?;
    Ok(report.passed())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Degrade(a) => cmd_degrade(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sr(a) => cmd_sr(a),
        Command::Gradcheck(a) => match cmd_gradcheck(a)? {
            true => Ok(()),
            false => Err(anyhow!("gradient check failed at tolerance {:e}", a.tolerance)),
        },
    }
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain()
        .any(|c| c.downcast_ref::<dacn_core::Error>().is_some_and(|d| d.is_config()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        // Usage errors exit with 2; help and version with 0.
        Err(e) => e.exit(),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { 2 } else { 1 })
        }
    }
}
