//! Run configuration: a flat, sectioned `key = value` file.
//!
//! ```text
//! [train]
//! steps = 2000
//! lr = 2e-4
//! ```

use disc_core::audio::AudioConfig;
use disc_core::evaluator::EvalConfig;
use disc_core::model::ModelConfig;
use disc_core::trainer::TrainConfig;

use crate::error::{CliError, CliResult};

pub const SECTIONS: [&str; 4] = ["audio", "model", "train", "eval"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub audio: AudioConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            audio: AudioConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> CliResult<V> {
    value
        .parse()
        .map_err(|_| CliError::usage(format!("{key}: cannot parse {value:?}")))
}

fn audio_pairs(a: &AudioConfig) -> Vec<(String, String)> {
    [
        ("sample_rate", a.sample_rate.to_string()),
        ("n_fft", a.n_fft.to_string()),
        ("hop", a.hop.to_string()),
        ("n_mels", a.n_mels.to_string()),
        ("fmin", a.fmin.to_string()),
        ("fmax", a.fmax.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn set_audio(a: &mut AudioConfig, key: &str, value: &str) -> CliResult<()> {
    let full = format!("audio.{key}");
    match key {
        "sample_rate" => a.sample_rate = parse(&full, value)?,
        "n_fft" => a.n_fft = parse(&full, value)?,
        "hop" => a.hop = parse(&full, value)?,
        "n_mels" => a.n_mels = parse(&full, value)?,
        "fmin" => a.fmin = parse(&full, value)?,
        "fmax" => a.fmax = parse(&full, value)?,
        _ => return Err(CliError::usage(format!("unknown key {full}"))),
    }
    Ok(())
}

fn eval_pairs(e: &EvalConfig) -> Vec<(String, String)> {
    let margin = e.margin.map_or("none".to_string(), |m| m.to_string());
    vec![("margin".into(), margin), ("mcd_order".into(), e.mcd_order.to_string())]
}

fn set_eval(e: &mut EvalConfig, key: &str, value: &str) -> CliResult<()> {
    match key {
        "margin" => {
            e.margin = if value == "none" {
                None
            } else {
                Some(parse("eval.margin", value)?)
            }
        }
        "mcd_order" => e.mcd_order = parse("eval.mcd_order", value)?,
        _ => return Err(CliError::usage(format!("unknown key eval.{key}"))),
    }
    Ok(())
}

impl RunConfig {
    /// Sets `section.key`.
    pub fn set(&mut self, path: &str, value: &str) -> CliResult<()> {
        let (section, key) = path
            .split_once('.')
            .ok_or_else(|| CliError::usage(format!("expected section.key, got {path:?}")))?;
        match section {
            "audio" => set_audio(&mut self.audio, key, value),
            "model" => Ok(self.model.set(key, value)?),
            "train" => Ok(self.train.set(key, value)?),
            "eval" => set_eval(&mut self.eval, key, value),
            _ => Err(CliError::usage(format!("unknown section {section:?}"))),
        }
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> CliResult<()> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("expected section.key=value, got {assignment:?}")))?;
        self.set(path.trim(), value.trim())
    }

    /// Applies the contents of a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> CliResult<()> {
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: CliError| match e {
                CliError::Usage(m) => CliError::Usage(format!("line {}: {m}", n + 1)),
                other => other,
            };
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(at(CliError::usage(format!("unknown section [{name}]"))));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(CliError::usage(format!("expected key = value, got {line:?}"))))?;
            let section = section
                .as_deref()
                .ok_or_else(|| at(CliError::usage("key before any [section]")))?;
            self.set(&format!("{section}.{}", key.trim()), value.trim()).map_err(at)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> CliResult<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Every key with its resolved value, as `section.key` pairs.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let sections = [
            ("audio", audio_pairs(&self.audio)),
            ("model", self.model.to_pairs()),
            ("train", self.train.to_pairs()),
            ("eval", eval_pairs(&self.eval)),
        ];
        sections
            .into_iter()
            .flat_map(|(s, kv)| kv.into_iter().map(move |(k, v)| (format!("{s}.{k}"), v)))
            .collect()
    }

    /// The file form of the full configuration; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (path, value) in self.to_pairs() {
            let (section, key) = path.split_once('.').unwrap();
            if section != current {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = SECTIONS.iter().find(|s| **s == section).unwrap();
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn validate(&self) -> CliResult<()> {
        self.audio.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.n_mels != self.audio.n_mels {
            return Err(CliError::usage(format!(
                "model.n_mels = {} but audio.n_mels = {}",
                self.model.n_mels, self.audio.n_mels
            )));
        }
        if self.eval.mcd_order == 0 || self.eval.mcd_order > self.audio.n_mels {
            return Err(CliError::usage(format!(
                "eval.mcd_order must be in 1..={}",
                self.audio.n_mels
            )));
        }
        Ok(())
    }
}
