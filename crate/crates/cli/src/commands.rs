use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use disc_core::audio::{read_wav, write_wav, AudioClip};
use disc_core::container::Container;
use disc_core::converter::{Converter, Request, Task, DEFAULT_GL_ITERS};
use disc_core::evaluator::{evaluate_pair, Report};
use disc_core::f0::{estimate_f0, SpeakerId};
use disc_core::features::{
    extract_features, fit_corpus_stats, read_cache, training_set, write_cache, CacheEntry, CorpusStats, Split,
    CACHE_EXT,
};
use disc_core::synth::{synth_corpus, SynthSpeaker};
use disc_core::trainer::{self, Trainer};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{load_pairs, Manifest};

pub const SPEAKERS_FILE: &str = "speakers.txt";
pub const LOG_FILE: &str = "train_log.csv";
pub const CACHE_ENV: &str = "DISC_CACHE_DIR";
const RUN_PREFIX: &str = "run.";
const NAMES_KEY: &str = "speakers.names";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum OnError {
    Abort,
    Continue,
}

pub fn print_config(out: &mut dyn Write, cfg: &RunConfig) -> CliResult<()> {
    writeln!(out, "# effective config")?;
    write!(out, "{}", cfg.to_text())?;
    writeln!(out)?;
    Ok(())
}

pub fn read_speaker_names(cache: &Path) -> CliResult<Vec<String>> {
    let text = fs::read_to_string(cache.join(SPEAKERS_FILE))
        .map_err(|e| CliError::data(format!("{}: {e}", cache.join(SPEAKERS_FILE).display())))?;
    Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
}

/// A speaker given by name or by 1-based index.
pub fn resolve_speaker(spec: &str, names: &[String]) -> CliResult<SpeakerId> {
    if let Some(i) = names.iter().position(|n| n == spec) {
        return Ok(SpeakerId::from_index(i));
    }
    match spec.parse::<usize>() {
        Ok(i) => Ok(SpeakerId::new(i, names.len())?),
        Err(_) => Err(CliError::usage(format!("unknown speaker {spec:?}; known: {}", names.join(", ")))),
    }
}

/// Extracts features for every manifest row and writes the cache. Files that
/// fail are reported and skipped under `OnError::Continue`.
pub fn preprocess(
    manifest: &Manifest,
    cfg: &RunConfig,
    cache: &Path,
    on_error: OnError,
    out: &mut dyn Write,
) -> CliResult<usize> {
    let names = manifest.speaker_names();
    if let Some(bad) = names.iter().find(|n| n.contains([',', '\n'])) {
        return Err(CliError::data(format!("speaker name {bad:?} may not contain commas or newlines")));
    }
    let speakers = names.len();
    let mut entries = Vec::new();
    let mut skipped = 0;
    for row in &manifest.rows {
        let path = manifest.wav_path(row);
        let result = read_wav(&path).and_then(|clip| {
            clip.check(&cfg.audio)?;
            extract_features(&clip, &cfg.audio)
        });
        match result {
            Ok(features) => entries.push(CacheEntry {
                id: row.id(),
                speaker: SpeakerId::new(row.index, speakers)?,
                speakers,
                split: row.split,
                features,
            }),
            Err(e) => match on_error {
                OnError::Abort => return Err(CliError::data(format!("{}: {e}", path.display()))),
                OnError::Continue => {
                    writeln!(out, "skipping {}: {e}", path.display())?;
                    skipped += 1;
                }
            },
        }
    }
    let stats = fit_corpus_stats(&entries, speakers)?;
    if cache.is_dir() {
        for e in fs::read_dir(cache)? {
            let p = e?.path();
            if p.extension().is_some_and(|x| x == CACHE_EXT) {
                fs::remove_file(p)?;
            }
        }
    }
    write_cache(cache, &entries, &stats)?;
    fs::write(cache.join(SPEAKERS_FILE), names.join("\n") + "\n")?;
    writeln!(out, "cached {} utterances ({} skipped) in {}", entries.len(), skipped, cache.display())?;
    Ok(skipped)
}

/// The run configuration embedded in a checkpoint.
pub fn checkpoint_config(tr: &Trainer) -> CliResult<RunConfig> {
    let mut cfg = RunConfig { model: tr.model_cfg.clone(), train: tr.cfg.clone(), ..RunConfig::default() };
    for (k, v) in &tr.extra {
        if let Some(path) = k.strip_prefix(RUN_PREFIX) {
            cfg.set(path, v).map_err(|e| CliError::data(format!("checkpoint config: {e}")))?;
        }
    }
    Ok(cfg)
}

pub fn checkpoint_speakers(tr: &Trainer) -> Vec<String> {
    tr.extra
        .iter()
        .find(|(k, _)| k == NAMES_KEY)
        .map(|(_, v)| v.split(',').map(str::to_string).collect())
        .unwrap_or_else(|| (1..=tr.model_cfg.speakers).map(|i| i.to_string()).collect())
}

fn embed(tr: &mut Trainer, cfg: &RunConfig, names: &[String]) {
    tr.extra.clear();
    for (k, v) in cfg.to_pairs() {
        if k.starts_with("audio.") || k.starts_with("eval.") {
            tr.extra.push((format!("{RUN_PREFIX}{k}"), v));
        }
    }
    tr.extra.push((NAMES_KEY.to_string(), names.join(",")));
}

/// Trains on the cached training split, writing checkpoints and the loss log
/// into `out_dir`. With `resume`, continues that checkpoint up to
/// `cfg.train.steps`.
pub fn train(
    cache: &Path,
    cfg: &mut RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult<PathBuf> {
    let (entries, stats) = read_cache(cache)?;
    let names = read_speaker_names(cache)?;
    if names.len() != stats.speakers() {
        return Err(CliError::data(format!(
            "{} lists {} speakers but the statistics cover {}",
            SPEAKERS_FILE,
            names.len(),
            stats.speakers()
        )));
    }
    let mut tr = match resume {
        Some(p) => {
            let mut tr = Trainer::load(p)?;
            tr.cfg.steps = cfg.train.steps;
            *cfg = RunConfig { train: tr.cfg.clone(), ..checkpoint_config(&tr)? };
            tr
        }
        None => {
            cfg.model.speakers = stats.speakers();
            cfg.validate()?;
            Trainer::new(cfg.model.clone(), cfg.train.clone())?
        }
    };
    print_config(out, cfg)?;
    embed(&mut tr, cfg, &names);
    let dataset = training_set(&entries, &stats)?;
    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log = if tr.step_count() == 0 {
        fs::File::create(&log_path)?
    } else {
        fs::OpenOptions::new().append(true).create(true).open(&log_path)?
    };
    let start = tr.step_count();
    let losses = trainer::train(&mut tr, &dataset, Some(out_dir), &mut log)?;
    if let Some(last) = losses.last() {
        writeln!(out, "trained steps {}..{}: final total loss {:.6}", start, tr.step_count(), last.total)?;
    }
    Ok(out_dir.join("final.disc"))
}

/// What to convert: a cache entry, or a WAV with its source speaker.
pub enum Input<'a> {
    CacheId(&'a str),
    Wav { path: &'a Path, speaker: &'a str },
}

/// Flags of the `convert` command.
#[derive(Clone, Debug, Default)]
pub struct ConvertFlags {
    pub task: Option<Task>,
    pub beta: Option<f64>,
    pub pitch_speaker: Option<String>,
    pub timbre_speaker: Option<String>,
    pub seed: u64,
    pub gl_iters: Option<usize>,
}

/// Resolves the conversion flags for `source`. A task fixes which flags are
/// allowed; without one, the flags set (β, š_P, š_T) directly.
pub fn request(flags: &ConvertFlags, source: SpeakerId, names: &[String]) -> CliResult<Request> {
    let pitch = flags.pitch_speaker.as_deref().map(|s| resolve_speaker(s, names)).transpose()?;
    let timbre = flags.timbre_speaker.as_deref().map(|s| resolve_speaker(s, names)).transpose()?;
    let Some(task) = flags.task else {
        return Ok(Request {
            beta: flags.beta.unwrap_or(0.0),
            pitch_speaker: pitch.unwrap_or(source),
            timbre_speaker: timbre.unwrap_or(source),
        });
    };
    let target = match task {
        Task::P => {
            if pitch.is_some() || timbre.is_some() {
                return Err(CliError::usage("--task P takes --beta only"));
            }
            None
        }
        Task::T => {
            if pitch.is_some() {
                return Err(CliError::usage("--task T keeps the source pitch; drop --pitch-speaker"));
            }
            timbre
        }
        Task::PT => match (pitch, timbre) {
            (Some(p), Some(t)) if p != t => {
                return Err(CliError::usage("--task PT needs the same pitch and timbre speaker"))
            }
            (p, t) => p.or(t),
        },
    };
    Ok(Request::for_task(task, source, flags.beta, target)?)
}

pub struct Loaded {
    pub trainer: Trainer,
    pub config: RunConfig,
    pub names: Vec<String>,
    pub stats: CorpusStats,
}

pub fn load_model(checkpoint: &Path, cache: &Path) -> CliResult<Loaded> {
    let trainer = Trainer::load(checkpoint)?;
    let config = checkpoint_config(&trainer)?;
    let names = checkpoint_speakers(&trainer);
    let stats = CorpusStats::load(cache.join(disc_core::features::STATS_FILE))?;
    if stats.speakers() != trainer.model_cfg.speakers {
        return Err(CliError::data(format!(
            "cache has {} speakers, checkpoint {}",
            stats.speakers(),
            trainer.model_cfg.speakers
        )));
    }
    Ok(Loaded { trainer, config, names, stats })
}

fn converter<'a>(m: &'a Loaded, flags: &ConvertFlags) -> Converter<'a> {
    let mut c = Converter::new(&m.trainer.model_cfg, &m.trainer.params, &m.stats, m.trainer.cfg.tau_end);
    c.audio = m.config.audio.clone();
    c.seed = flags.seed;
    c.gl_iters = flags.gl_iters.unwrap_or(DEFAULT_GL_ITERS);
    c
}

fn source_entry(m: &Loaded, cache: &Path, input: &Input) -> CliResult<CacheEntry> {
    match *input {
        Input::CacheId(id) => {
            let path = cache.join(format!("{id}.{CACHE_EXT}"));
            if !path.is_file() {
                return Err(CliError::data(format!("no cache entry {id:?} in {}", cache.display())));
            }
            Ok(CacheEntry::load(path)?)
        }
        Input::Wav { path, speaker } => {
            let speaker = resolve_speaker(speaker, &m.names)?;
            let clip = read_wav(path)?;
            clip.check(&m.config.audio)?;
            Ok(CacheEntry {
                id: path.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                speaker,
                speakers: m.names.len(),
                split: Split::Test,
                features: extract_features(&clip, &m.config.audio)?,
            })
        }
    }
}

/// Converts one utterance, writing `out_wav` and a feature file next to it
/// holding the converted log-mel and log-F0 pattern.
pub fn convert(
    checkpoint: &Path,
    cache: &Path,
    input: Input,
    flags: &ConvertFlags,
    out_wav: &Path,
    out: &mut dyn Write,
) -> CliResult<()> {
    let m = load_model(checkpoint, cache)?;
    print_config(out, &m.config)?;
    let entry = source_entry(&m, cache, &input)?;
    let req = request(flags, entry.speaker, &m.names)?;
    let conv = converter(&m, flags);
    let u = entry.utterance(&m.stats.mel)?;
    let result = conv.convert(&u.x, &u.lambda, entry.speaker, &req)?;
    let clip = result.clip.as_ref().expect("convert synthesizes audio");
    if let Some(dir) = out_wav.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_wav(out_wav, clip)?;
    let mut c = Container::new();
    c.set("source", &entry.id);
    c.set("beta", req.beta);
    c.set("pitch_speaker", req.pitch_speaker);
    c.set("timbre_speaker", req.timbre_speaker);
    c.push("logmel", conv.log_mel(&result.mu)?);
    c.push("f0", disc_core::Tensor::from_vec(result.lambda.clone()));
    let feat = out_wav.with_extension(CACHE_EXT);
    c.save(&feat)?;
    writeln!(
        out,
        "converted {} (speaker {}) with beta={} pitch={} timbre={} -> {}",
        entry.id, entry.speaker, req.beta, req.pitch_speaker, req.timbre_speaker, out_wav.display()
    )?;
    Ok(())
}

/// Scores every pair and writes `report.csv` and `report.json` into `out_dir`.
pub fn evaluate(
    checkpoint: &Path,
    cache: &Path,
    pairs: &Path,
    out_dir: &Path,
    flags: &ConvertFlags,
    out: &mut dyn Write,
) -> CliResult<Report> {
    let m = load_model(checkpoint, cache)?;
    print_config(out, &m.config)?;
    let conv = converter(&m, flags);
    let audio = &m.config.audio;
    let mut report = Report::default();
    for row in load_pairs(pairs)? {
        let reference = read_wav(&row.reference)?;
        let (converted, target): (AudioClip, Vec<f32>) = match (&row.source, &row.converted) {
            (Some(id), _) => {
                let entry = source_entry(&m, cache, &Input::CacheId(id))?;
                let target = row.target.as_deref().map(|t| resolve_speaker(t, &m.names)).transpose()?;
                let req = Request::for_task(row.task, entry.speaker, row.beta, target)
                    .map_err(|e| CliError::data(format!("pair {}: {e}", row.pair)))?;
                let u = entry.utterance(&m.stats.mel)?;
                let r = conv.convert(&u.x, &u.lambda, entry.speaker, &req)?;
                (r.clip.expect("convert synthesizes audio"), r.lambda)
            }
            (None, Some(path)) => {
                let lambda = estimate_f0(&reference, audio, audio.frames(reference.len()))?;
                (read_wav(path)?, lambda)
            }
            (None, None) => unreachable!("rejected when loading pairs"),
        };
        let metrics = evaluate_pair(&reference, &converted, &target, audio, &m.config.eval)
            .map_err(|e| CliError::from(e).with_context(&row.pair))?;
        report.push(row.pair.clone(), row.task, metrics);
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.csv"), report.to_csv())?;
    fs::write(out_dir.join("report.json"), report.to_json())?;
    write!(out, "{}", report.summary())?;
    Ok(report)
}

/// Summarizes a container file, or a cache directory.
pub fn inspect(path: &Path, out: &mut dyn Write) -> CliResult<()> {
    if path.is_dir() {
        let (entries, stats) = read_cache(path)?;
        let names = read_speaker_names(path).unwrap_or_default();
        writeln!(out, "cache {}: {} utterances, {} speakers", path.display(), entries.len(), stats.speakers())?;
        for s in 0..stats.speakers() {
            let id = SpeakerId::from_index(s);
            let count = |split| entries.iter().filter(|e| e.speaker == id && e.split == split).count();
            let f0 = stats.speaker(id)?;
            writeln!(
                out,
                "  {} {}: train {}, test {}, log-F0 mean {:.4} std {:.4}",
                id,
                names.get(s).map_or("", String::as_str),
                count(Split::Train),
                count(Split::Test),
                f0.mean,
                f0.std
            )?;
        }
        return Ok(());
    }
    let c = Container::load(path)?;
    writeln!(out, "{}", path.display())?;
    for (k, v) in &c.config {
        writeln!(out, "  {k} = {v}")?;
    }
    for (name, t) in &c.tensors {
        writeln!(out, "  tensor {name} {:?}", t.shape())?;
    }
    Ok(())
}

/// Writes a synthetic parallel corpus: WAVs, `manifest.csv`, `pairs.csv`
/// (tasks P with β = ±ln 1.5, T and PT on every test utterance) and a small
/// model configuration `toy.cfg`.
pub fn synth(dir: &Path, speakers: usize, train: usize, test: usize, seed: u64, out: &mut dyn Write) -> CliResult<()> {
    if !(2..=4).contains(&speakers) {
        return Err(CliError::usage("--speakers must be between 2 and 4"));
    }
    let cfg = RunConfig::default();
    let voices = SynthSpeaker::presets(speakers);
    let items = synth_corpus(&voices, train, test, seed, cfg.audio.sample_rate);
    let mut manifest = String::from("speaker,index,path,split\n");
    let mut order: Vec<Vec<String>> = vec![Vec::new(); speakers];
    for (n, item) in items.iter().enumerate() {
        let name = &voices[item.speaker].name;
        let split = if item.test { "test" } else { "train" };
        let rel = format!("wav/{name}/{split}{:03}.wav", n % (train + test));
        let path = dir.join(&rel);
        fs::create_dir_all(path.parent().unwrap())?;
        write_wav(&path, &item.clip)?;
        manifest.push_str(&format!("{name},{},{rel},{split}\n", item.speaker + 1));
        if item.test {
            order[item.speaker].push(rel);
        }
    }
    fs::write(dir.join("manifest.csv"), manifest)?;
    let id = |rel: &str| rel.trim_end_matches(".wav").replace('/', "_");
    let mut pairs = String::from("pair,task,reference,source,target,beta,converted\n");
    let beta = 1.5f64.ln();
    for s in 0..speakers {
        let t = (s + 1) % speakers;
        let target = &voices[t].name;
        for (u, rel) in order[s].iter().enumerate() {
            let src = id(rel);
            pairs.push_str(&format!("{src}-p+,P,{rel},{src},,{beta},\n"));
            pairs.push_str(&format!("{src}-p-,P,{rel},{src},,{},\n", -beta));
            pairs.push_str(&format!("{src}-t,T,{},{src},{target},,\n", order[t][u]));
            pairs.push_str(&format!("{src}-pt,PT,{},{src},{target},,\n", order[t][u]));
        }
    }
    fs::write(dir.join("pairs.csv"), pairs)?;
    fs::write(dir.join("toy.cfg"), TOY_CONFIG)?;
    writeln!(out, "wrote {} clips of {} speakers to {}", items.len(), speakers, dir.display())?;
    Ok(())
}

/// Desk-scale model and schedule for the synthetic corpus.
pub const TOY_CONFIG: &str = "\
[model]
codebook = 32
enc_channels = 32
dec_channels = 48
speaker_dim = 16
pext_channels = 32
cls_channels = 32

[train]
batch_size = 4
t_crop = 64
steps = 2000
checkpoint_every = 500
";

impl CliError {
    fn with_context(self, pair: &str) -> Self {
        match self {
            CliError::Usage(m) => CliError::Usage(format!("pair {pair}: {m}")),
            CliError::Data(m) => CliError::Data(format!("pair {pair}: {m}")),
            CliError::Numeric(m) => CliError::Numeric(format!("pair {pair}: {m}")),
        }
    }
}
