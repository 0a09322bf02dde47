//! Corpus preprocessing: log-mel and log-F0 extraction, corpus statistics
//! and the on-disk feature cache.

use std::path::Path;

use crate::audio::{
    fit_standardization, log_compress, mel_spectrogram, standardize, AudioClip, AudioConfig, StandardizationStats,
};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::f0::{estimate_f0, speaker_stats, SpeakerF0Stats, SpeakerId};
use crate::tensor::Tensor;
use crate::trainer::{Dataset, Utterance};

/// Unstandardized features of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    /// `[F, T]` log-mel spectrogram.
    pub log_mel: Tensor,
    /// Length-`T` log-F0, zero where unvoiced.
    pub lambda: Vec<f32>,
}

pub fn extract_features(clip: &AudioClip, cfg: &AudioConfig) -> Result<Features> {
    let log_mel = log_compress(&mel_spectrogram(clip, cfg)?)?;
    let frames = log_mel.shape()[1];
    let lambda = estimate_f0(clip, cfg, frames)?;
    Ok(Features { log_mel, lambda })
}

/// Training-corpus statistics needed at conversion time.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub mel: StandardizationStats,
    /// Indexed by 0-based speaker index.
    pub f0: Vec<SpeakerF0Stats>,
}

impl CorpusStats {
    pub fn speakers(&self) -> usize {
        self.f0.len()
    }

    pub fn speaker(&self, s: SpeakerId) -> Result<&SpeakerF0Stats> {
        self.f0
            .get(s.index())
            .ok_or_else(|| Error::input(format!("speaker {s} outside 1..={}", self.f0.len())))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set("stats.speakers", self.f0.len());
        for (i, s) in self.f0.iter().enumerate() {
            c.set(format!("f0.{}.mean", i + 1), format!("{:?}", s.mean));
            c.set(format!("f0.{}.std", i + 1), format!("{:?}", s.std));
        }
        c.push("mel.mean", Tensor::from_vec(self.mel.mean.clone()));
        c.push("mel.std", Tensor::from_vec(self.mel.std.clone()));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let speakers: usize = c.parse("stats.speakers")?;
        let f0 = (1..=speakers)
            .map(|i| {
                Ok(SpeakerF0Stats {
                    mean: c.parse(&format!("f0.{i}.mean"))?,
                    std: c.parse(&format!("f0.{i}.std"))?,
                })
            })
            .collect::<Result<_>>()?;
        let mean = c.tensor("mel.mean")?.data().to_vec();
        let std = c.tensor("mel.std")?.data().to_vec();
        if mean.len() != std.len() {
            return Err(Error::Checkpoint("mel.mean and mel.std lengths differ".into()));
        }
        Ok(CorpusStats {
            mel: StandardizationStats { mean, std },
            f0,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::input(format!("split must be train or test, got {s:?}"))),
        }
    }
}

/// A labelled clip awaiting preprocessing.
#[derive(Clone, Debug)]
pub struct LabelledClip {
    pub id: String,
    pub speaker: SpeakerId,
    pub split: Split,
    pub clip: AudioClip,
}

/// One feature-cache record: unstandardized features plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub id: String,
    pub speaker: SpeakerId,
    pub speakers: usize,
    pub split: Split,
    pub features: Features,
}

impl CacheEntry {
    /// Standardized training utterance.
    pub fn utterance(&self, stats: &StandardizationStats) -> Result<Utterance> {
        Ok(Utterance {
            id: self.id.clone(),
            x: standardize(&self.features.log_mel, stats)?,
            lambda: self.features.lambda.clone(),
            speaker: self.speaker,
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set("id", &self.id);
        c.set("speaker", self.speaker.get());
        c.set("speakers", self.speakers);
        c.set("split", self.split);
        c.push("logmel", self.features.log_mel.clone());
        c.push("f0", Tensor::from_vec(self.features.lambda.clone()));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let speakers: usize = c.parse("speakers")?;
        let speaker = SpeakerId::new(c.parse("speaker")?, speakers)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let log_mel = c.tensor("logmel")?.clone();
        let lambda = c.tensor("f0")?.data().to_vec();
        if log_mel.rank() != 2 || log_mel.shape()[1] != lambda.len() {
            return Err(Error::Checkpoint(format!(
                "logmel {:?} does not match {} F0 frames",
                log_mel.shape(),
                lambda.len()
            )));
        }
        Ok(CacheEntry {
            id: c.parse("id")?,
            speaker,
            speakers,
            split: c.parse("split")?,
            features: Features { log_mel, lambda },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

pub fn extract_entries(clips: &[LabelledClip], speakers: usize, cfg: &AudioConfig) -> Result<Vec<CacheEntry>> {
    clips
        .iter()
        .map(|c| {
            Ok(CacheEntry {
                id: c.id.clone(),
                speaker: c.speaker,
                speakers,
                split: c.split,
                features: extract_features(&c.clip, cfg)?,
            })
        })
        .collect()
}

/// Fits mel standardization and per-speaker F0 statistics on the training
/// split only.
pub fn fit_corpus_stats(entries: &[CacheEntry], speakers: usize) -> Result<CorpusStats> {
    let train: Vec<&CacheEntry> = entries.iter().filter(|e| e.split == Split::Train).collect();
    let mel = fit_standardization(train.iter().map(|e| &e.features.log_mel))?;
    let mut f0 = Vec::with_capacity(speakers);
    for s in 0..speakers {
        let patterns: Vec<&[f32]> = train
            .iter()
            .filter(|e| e.speaker.index() == s)
            .map(|e| e.features.lambda.as_slice())
            .collect();
        if patterns.is_empty() {
            return Err(Error::Dataset(format!("speaker {} has no training utterances", s + 1)));
        }
        f0.push(speaker_stats(&patterns).map_err(|e| Error::Dataset(format!("speaker {}: {e}", s + 1)))?);
    }
    Ok(CorpusStats { mel, f0 })
}

/// Standardized training dataset from cache entries.
pub fn training_set(entries: &[CacheEntry], stats: &CorpusStats) -> Result<Dataset> {
    let utts = entries
        .iter()
        .filter(|e| e.split == Split::Train)
        .map(|e| e.utterance(&stats.mel))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(utts, stats.speakers())
}

pub const CACHE_EXT: &str = "feat";
pub const STATS_FILE: &str = "stats.disc";

/// Writes one file per entry plus the statistics file into `dir`.
pub fn write_cache(dir: impl AsRef<Path>, entries: &[CacheEntry], stats: &CorpusStats) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for e in entries {
        e.save(dir.join(format!("{}.{CACHE_EXT}", e.id)))?;
    }
    stats.save(dir.join(STATS_FILE))
}

/// Reads every entry of a cache directory, sorted by file name, and its
/// statistics.
pub fn read_cache(dir: impl AsRef<Path>) -> Result<(Vec<CacheEntry>, CorpusStats)> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|x| x == CACHE_EXT));
    paths.sort();
    let entries = paths.iter().map(CacheEntry::load).collect::<Result<Vec<_>>>()?;
    let stats = CorpusStats::load(dir.join(STATS_FILE))?;
    Ok((entries, stats))
}
