use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use disc_core::converter::Task;

use crate::commands::{self, ConvertFlags, Input, OnError, CACHE_ENV};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;

#[derive(Parser, Debug)]
#[command(name = "disc-vc", version, about = "F0- and timbre-controllable voice conversion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Sectioned key = value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct CacheArg {
    /// Feature cache directory.
    #[arg(long, env = CACHE_ENV, default_value = "cache")]
    pub cache: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Extract log-mel and log-F0 features for a manifest into the cache.
    Preprocess {
        /// CSV manifest with columns speaker,index,path,split.
        manifest: PathBuf,
        #[command(flatten)]
        cache: CacheArg,
        #[command(flatten)]
        config: ConfigArgs,
        /// What to do when a file cannot be read or analysed.
        #[arg(long, value_enum, default_value = "abort")]
        on_error: OnError,
    },
    /// Train on the cached training split.
    Train {
        #[command(flatten)]
        cache: CacheArg,
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for checkpoints and the loss log.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Reconstruction loss only (auxiliary weights zero).
        #[arg(long)]
        no_aux: bool,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Convert one utterance.
    Convert {
        checkpoint: PathBuf,
        #[command(flatten)]
        cache: CacheArg,
        /// Cache id of the source utterance.
        #[arg(long, conflicts_with = "input")]
        id: Option<String>,
        /// Source WAV file (needs --speaker).
        #[arg(long, requires = "speaker")]
        input: Option<PathBuf>,
        /// Source speaker of --input, by name or index.
        #[arg(long)]
        speaker: Option<String>,
        #[command(flatten)]
        flags: ConvertArgs,
        /// Output WAV; the feature file is written next to it.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Convert and score the pairs of a pairs manifest.
    Evaluate {
        checkpoint: PathBuf,
        /// CSV with columns pair,task,reference,source,target,beta,converted.
        pairs: PathBuf,
        #[command(flatten)]
        cache: CacheArg,
        #[arg(long, default_value = "report")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        gl_iters: Option<usize>,
    },
    /// Print the contents of a checkpoint, cache file or cache directory.
    Inspect { path: PathBuf },
    /// Write the bundled synthetic corpus with manifests.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        speakers: usize,
        #[arg(long, default_value_t = 8)]
        train: usize,
        #[arg(long, default_value_t = 8)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug, Clone)]
pub struct ConvertArgs {
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    /// Log-F0 shift; accepts `log1.5` and `-log1.5`.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_beta)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub pitch_speaker: Option<String>,
    #[arg(long)]
    pub timbre_speaker: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub gl_iters: Option<usize>,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: disc_core::Error| e.to_string())
}

pub fn parse_beta(s: &str) -> Result<f64, String> {
    let (sign, rest) = match s.strip_prefix('-') {
        Some(r) => (-1.0, r),
        None => (1.0, s),
    };
    let v = match rest.strip_prefix("log").or_else(|| rest.strip_prefix("ln")) {
        Some(arg) => arg
            .trim_matches(|c| c == '(' || c == ')')
            .parse::<f64>()
            .map(f64::ln)
            .map_err(|e| e.to_string())?,
        None => rest.parse::<f64>().map_err(|e| e.to_string())?,
    };
    if !v.is_finite() {
        return Err(format!("beta {s:?} is not finite"));
    }
    Ok(sign * v)
}

pub fn load_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &args.config {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
        cfg.apply_text(&text)?;
    }
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

impl From<ConvertArgs> for ConvertFlags {
    fn from(a: ConvertArgs) -> Self {
        ConvertFlags {
            task: a.task,
            beta: a.beta,
            pitch_speaker: a.pitch_speaker,
            timbre_speaker: a.timbre_speaker,
            seed: a.seed,
            gl_iters: a.gl_iters,
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Preprocess { manifest, cache, config, on_error } => {
            let cfg = load_config(&config)?;
            cfg.audio.validate()?;
            commands::print_config(out, &cfg)?;
            let m = Manifest::load(&manifest)?;
            commands::preprocess(&m, &cfg, &cache.cache, on_error, out)?;
        }
        Command::Train { cache, config, out: dir, no_aux, steps, seed, resume } => {
            let mut cfg = load_config(&config)?;
            if no_aux {
                cfg.train.no_aux = true;
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            commands::train(&cache.cache, &mut cfg, &dir, resume.as_deref(), out)?;
        }
        Command::Convert { checkpoint, cache, id, input, speaker, flags, out: wav } => {
            let source = match (&id, &input) {
                (Some(id), None) => Input::CacheId(id),
                (None, Some(path)) => Input::Wav { path, speaker: speaker.as_deref().unwrap_or_default() },
                _ => return Err(CliError::usage("give exactly one of --id and --input")),
            };
            commands::convert(&checkpoint, &cache.cache, source, &flags.into(), &wav, out)?;
        }
        Command::Evaluate { checkpoint, pairs, cache, out: dir, seed, gl_iters } => {
            let flags = ConvertFlags { seed, gl_iters, ..Default::default() };
            commands::evaluate(&checkpoint, &cache.cache, &pairs, &dir, &flags, out)?;
        }
        Command::Inspect { path } => commands::inspect(Path::new(&path), out)?,
        Command::Synth { out: dir, speakers, train, test, seed } => {
            commands::synth(&dir, speakers, train, test, seed, out)?;
        }
    }
    Ok(())
}
