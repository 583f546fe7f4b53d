use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dressing_core::diffusion::{GuidanceConfig, DEFAULT_GUIDANCE, DEFAULT_SAMPLING_STEPS};
use dressing_core::enrich::{Enricher, ENDPOINT_ENV};
use dressing_core::eval::{run_benchmark, BenchmarkOptions, PromptMode};
use dressing_core::model::RgbImage;
use dressing_core::pipeline::Generator;
use dressing_core::synth::{gen_dataset, load_dataset, write_dataset, Dataset, GenOptions};
use dressing_core::train::{
    report_params, AblationMode, Checkpoint, LoadedModel, TrainConfig, Trainer,
};
use dressing_core::{Error, Result};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_THRESHOLD: u8 = 3;

/// Garment-conditioned toy diffusion: data, training, sampling, evaluation.
#[derive(Parser, Debug)]
#[command(name = "dressing", version, about, long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic garment/person dataset.
    GenData {
        /// Number of samples.
        #[arg(long)]
        n: usize,
        /// Seed for the data stream.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Share of free-form mosaic garments in [0, 1].
        #[arg(long, default_value_t = 0.0)]
        free_patch_fraction: f64,
        /// Output directory (replaced atomically).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base prior or the reference-conditioning stage.
    Train {
        /// JSON training configuration.
        #[arg(long)]
        config: PathBuf,
        /// Override the configured trainability mode.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Override the configured number of steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory (replaced atomically).
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate one image from a reference garment and a prompt.
    Sample {
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reference garment image (binary PPM).
        #[arg(long = "ref")]
        reference: PathBuf,
        /// User prompt.
        #[arg(long, default_value = "a person wearing a shirt")]
        prompt: String,
        /// Seed for the initial noise.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// DDIM steps.
        #[arg(long, default_value_t = DEFAULT_SAMPLING_STEPS)]
        steps: usize,
        /// Classifier-free guidance scale.
        #[arg(long, default_value_t = DEFAULT_GUIDANCE)]
        guidance: f64,
        /// Prompt rewriting; `external` reads the service URL from DRESSING_REWRITE_URL.
        #[arg(long, value_enum, default_value_t = EnrichArg::Template)]
        enrich: EnrichArg,
        /// Output image (binary PPM).
        #[arg(long)]
        out: PathBuf,
    },
    /// Benchmark a checkpoint on a dataset and write report.json / report.txt.
    Eval {
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Number of seeded generations per reference (seeds 0..N).
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Prompt given with each reference.
        #[arg(long, value_enum, default_value_t = PromptArg::Rich)]
        prompts: PromptArg,
        /// DDIM steps.
        #[arg(long, default_value_t = DEFAULT_SAMPLING_STEPS)]
        steps: usize,
        /// Classifier-free guidance scale.
        #[arg(long, default_value_t = DEFAULT_GUIDANCE)]
        guidance: f64,
        /// Exit with status 3 when conditioned minus baseline texture similarity is below this.
        #[arg(long)]
        min_texture_gap: Option<f64>,
        /// Output directory (replaced atomically).
        #[arg(long)]
        out: PathBuf,
    },
    /// Print parameter counts per group and the trainable total for a mode.
    InspectParams {
        /// JSON training configuration (defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Trainability mode.
        #[arg(long, value_enum, default_value_t = ModeArg::Full)]
        mode: ModeArg,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Finetuning,
    OnlyLora,
    OnlyAdapter,
    Full,
}

impl From<ModeArg> for AblationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Finetuning => AblationMode::Finetuning,
            ModeArg::OnlyLora => AblationMode::OnlyLora,
            ModeArg::OnlyAdapter => AblationMode::OnlyAdapter,
            ModeArg::Full => AblationMode::Full,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EnrichArg {
    Template,
    External,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PromptArg {
    Enriched,
    Fixed,
    Simple,
    Rich,
}

impl From<PromptArg> for PromptMode {
    fn from(p: PromptArg) -> Self {
        match p {
            PromptArg::Enriched => PromptMode::Enriched,
            PromptArg::Fixed => PromptMode::Fixed,
            PromptArg::Simple => PromptMode::Simple,
            PromptArg::Rich => PromptMode::Rich,
        }
    }
}

enum Outcome {
    Done,
    BelowThreshold(String),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::BelowThreshold(msg)) => {
            eprintln!("threshold not met: {msg}");
            ExitCode::from(EXIT_THRESHOLD)
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) => ExitCode::from(EXIT_USAGE),
                _ => ExitCode::from(EXIT_RUNTIME),
            }
        }
    }
}

/// Builds `out` in a sibling temporary directory, then swaps it in.
fn atomic_dir(out: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = out
        .file_name()
        .ok_or_else(|| Error::Usage(format!("bad output path {}", out.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
    if let Err(e) = fill(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if out.exists() {
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    fs::rename(&tmp, out).map_err(|e| Error::io(out, e))
}

fn atomic_file(out: &Path, bytes: &[u8]) -> Result<()> {
    let name = out
        .file_name()
        .ok_or_else(|| Error::Usage(format!("bad output path {}", out.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp = out.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, out).map_err(|e| Error::io(out, e))
}

fn training_data(cfg: &TrainConfig) -> Result<Dataset> {
    match &cfg.data_dir {
        Some(dir) => load_dataset(dir),
        None => gen_dataset(cfg.dataset_size, cfg.seed, &GenOptions::default()),
    }
}

fn run(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::GenData { n, seed, free_patch_fraction, out } => {
            if n == 0 {
                return Err(Error::Usage("--n must be positive".into()));
            }
            if !(0.0..=1.0).contains(&free_patch_fraction) {
                return Err(Error::Usage("--free-patch-fraction must lie in [0, 1]".into()));
            }
            let ds = gen_dataset(n, seed, &GenOptions { free_patch_fraction })?;
            atomic_dir(&out, |dir| write_dataset(&ds, dir))?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Train { config, mode, steps, resume, out } => {
            if !config.is_file() {
                return Err(Error::Usage(format!("config {} not found", config.display())));
            }
            let mut cfg = TrainConfig::load_unchecked(&config)?;
            if let Some(m) = mode {
                cfg.mode = m.into();
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            cfg.validate()?;
            let data = training_data(&cfg)?;
            let mut trainer = match &resume {
                Some(path) => {
                    if !path.is_file() {
                        return Err(Error::Usage(format!("checkpoint {} not found", path.display())));
                    }
                    Trainer::resume(cfg.clone(), &Checkpoint::load(path)?, &data)?
                }
                None => Trainer::new(cfg.clone(), &data)?,
            };
            let start = trainer.step();
            let mut log = Vec::new();
            trainer.run(|step, loss| {
                eprintln!("step {step:>6}  loss {loss:.5}");
                log.push(serde_json::json!({ "step": step, "loss": loss }));
            })?;
            let losses: Vec<serde_json::Value> = trainer
                .losses()
                .iter()
                .enumerate()
                .map(|(i, l)| serde_json::json!({ "step": start + i as u64 + 1, "loss": l }))
                .collect();
            let ck = trainer.checkpoint()?;
            atomic_dir(&out, |dir| {
                ck.save(&dir.join("checkpoint.dfck"))?;
                let write = |name: &str, text: String| -> Result<()> {
                    let p = dir.join(name);
                    fs::write(&p, text).map_err(|e| Error::io(&p, e))
                };
                write("config.json", serde_json::to_string_pretty(&cfg)?)?;
                write(
                    "losses.jsonl",
                    losses.iter().map(|v| format!("{v}\n")).collect::<String>(),
                )?;
                write("log.jsonl", log.iter().map(|v| format!("{v}\n")).collect::<String>())
            })?;
            println!("trained to step {} -> {}", trainer.step(), out.display());
        }
        Command::Sample { checkpoint, reference, prompt, seed, steps, guidance, enrich, out } => {
            if steps == 0 {
                return Err(Error::Usage("--steps must be positive".into()));
            }
            let enricher = match enrich {
                EnrichArg::Template => Enricher::Template,
                EnrichArg::Off => Enricher::Off,
                EnrichArg::External => match std::env::var(ENDPOINT_ENV) {
                    Ok(endpoint) if !endpoint.is_empty() => Enricher::External { endpoint },
                    _ => {
                        return Err(Error::Usage(format!(
                            "--enrich external needs {ENDPOINT_ENV} to be set"
                        )))
                    }
                },
            };
            if !reference.is_file() {
                return Err(Error::Usage(format!("reference {} not found", reference.display())));
            }
            let model = LoadedModel::load(&checkpoint)?;
            let reference = RgbImage::load(&reference)?;
            let generator = Generator::new(&model);
            let guidance = GuidanceConfig { w: guidance, num_steps: steps, ..GuidanceConfig::default() };
            let (img, used) = generator.sample(&reference, &prompt, &enricher, seed, &guidance)?;
            if let Some(w) = &used.warning {
                eprintln!("note: {w}");
            }
            atomic_file(&out, &img.to_ppm())?;
            println!("prompt: {}", used.text);
            println!("wrote {}", out.display());
        }
        Command::Eval { checkpoint, data, seeds, prompts, steps, guidance, min_texture_gap, out } => {
            if seeds == 0 || steps == 0 {
                return Err(Error::Usage("--seeds and --steps must be positive".into()));
            }
            if !data.is_dir() {
                return Err(Error::Usage(format!("dataset {} not found", data.display())));
            }
            let model = LoadedModel::load(&checkpoint)?;
            let ds = load_dataset(&data)?;
            let opts = BenchmarkOptions {
                seeds: (0..seeds).collect(),
                prompt_mode: prompts.into(),
                guidance: GuidanceConfig { w: guidance, num_steps: steps, ..GuidanceConfig::default() },
                baseline: true,
            };
            let report = run_benchmark(&model, &ds, &opts)?;
            atomic_dir(&out, |dir| report.write(dir))?;
            print!("{}", report.to_text());
            if let Some(min) = min_texture_gap {
                let gap = report.aggregates.texture_gap.unwrap_or(f64::NEG_INFINITY);
                if gap < min {
                    return Ok(Outcome::BelowThreshold(format!(
                        "texture gap {gap:.4} < required {min}"
                    )));
                }
            }
        }
        Command::InspectParams { config, mode, json } => {
            let cfg = match config {
                Some(p) if !p.is_file() => {
                    return Err(Error::Usage(format!("config {} not found", p.display())))
                }
                Some(p) => TrainConfig::load_unchecked(&p)?,
                None => TrainConfig::default(),
            };
            cfg.model_config().validate()?;
            let (unet, store) = dressing_core::train::build_model(&cfg, 0)?;
            let report = report_params(&unet, &store, mode.into())?;
            if json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_table());
            }
        }
    }
    Ok(Outcome::Done)
}
