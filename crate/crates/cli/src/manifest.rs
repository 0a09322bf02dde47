//! Dataset and evaluation manifests (CSV with a header row).

use std::path::{Path, PathBuf};

use disc_core::converter::Task;
use disc_core::features::Split;
use serde::Deserialize;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub speaker: String,
    /// 1-based speaker index.
    pub index: usize,
    /// WAV path relative to the manifest directory.
    pub path: PathBuf,
    pub split: Split,
}

impl ManifestRow {
    /// Cache id: the relative path without extension, separators replaced.
    pub fn id(&self) -> String {
        self.path
            .with_extension("")
            .to_string_lossy()
            .replace(['/', '\\'], "_")
    }
}

#[derive(Deserialize)]
struct RawRow {
    speaker: String,
    index: usize,
    path: String,
    split: String,
}

/// Rows `speaker,index,path,split`. Speaker indices are dense from 1 and
/// each index has exactly one name.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

fn reader(path: &Path) -> CliResult<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let root = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let mut rows = Vec::new();
        for (n, rec) in reader(path)?.deserialize::<RawRow>().enumerate() {
            let r = rec.map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
            let split = r
                .split
                .parse()
                .map_err(|e| CliError::data(format!("{} row {}: {e}", path.display(), n + 1)))?;
            rows.push(ManifestRow { speaker: r.speaker, index: r.index, path: r.path.into(), split });
        }
        let m = Manifest { root, rows };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> CliResult<()> {
        if self.rows.is_empty() {
            return Err(CliError::data("manifest has no rows"));
        }
        let names = self.speaker_names_unchecked();
        for (i, name) in names.iter().enumerate() {
            if name.is_none() {
                return Err(CliError::data(format!("speaker index {} is missing; indices must be dense from 1", i + 1)));
            }
        }
        let mut ids = std::collections::BTreeSet::new();
        for r in &self.rows {
            if r.index == 0 {
                return Err(CliError::data("speaker indices start at 1"));
            }
            if names[r.index - 1].as_deref() != Some(r.speaker.as_str()) {
                return Err(CliError::data(format!("speaker index {} has more than one name", r.index)));
            }
            if names.iter().filter(|n| n.as_deref() == Some(r.speaker.as_str())).count() > 1 {
                return Err(CliError::data(format!("speaker {:?} has more than one index", r.speaker)));
            }
            if !ids.insert(r.id()) {
                return Err(CliError::data(format!("duplicate utterance {}", r.path.display())));
            }
            if !self.root.join(&r.path).is_file() {
                return Err(CliError::data(format!("{} does not exist", self.root.join(&r.path).display())));
            }
        }
        Ok(())
    }

    fn speaker_names_unchecked(&self) -> Vec<Option<String>> {
        let s = self.rows.iter().map(|r| r.index).max().unwrap_or(0);
        let mut names = vec![None; s];
        for r in &self.rows {
            if r.index > 0 && names[r.index - 1].is_none() {
                names[r.index - 1] = Some(r.speaker.clone());
            }
        }
        names
    }

    /// Speaker names ordered by index.
    pub fn speaker_names(&self) -> Vec<String> {
        self.speaker_names_unchecked().into_iter().flatten().collect()
    }

    pub fn wav_path(&self, row: &ManifestRow) -> PathBuf {
        self.root.join(&row.path)
    }
}

/// One evaluation pair. `source` names a cache entry to convert; a
/// `converted` WAV is scored as-is against the pitch of `reference`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRow {
    pub pair: String,
    pub task: Task,
    pub reference: PathBuf,
    pub source: Option<String>,
    pub target: Option<String>,
    pub beta: Option<f64>,
    pub converted: Option<PathBuf>,
}

#[derive(Deserialize)]
struct RawPair {
    pair: String,
    task: String,
    reference: String,
    #[serde(default)]
    source: Option<String>,
    #[serde(default)]
    target: Option<String>,
    #[serde(default)]
    beta: Option<f64>,
    #[serde(default)]
    converted: Option<String>,
}

fn non_empty(s: Option<String>) -> Option<String> {
    s.filter(|v| !v.is_empty())
}

/// Rows `pair,task,reference,source,target,beta,converted`; paths are
/// relative to the pairs file.
pub fn load_pairs(path: impl AsRef<Path>) -> CliResult<Vec<PairRow>> {
    let path = path.as_ref();
    let root = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for rec in reader(path)?.deserialize::<RawPair>() {
        let r = rec.map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let task: Task = r.task.parse().map_err(|e: disc_core::Error| CliError::data(e.to_string()))?;
        let row = PairRow {
            pair: r.pair,
            task,
            reference: root.join(r.reference),
            source: non_empty(r.source),
            target: non_empty(r.target),
            beta: r.beta,
            converted: non_empty(r.converted).map(|c| root.join(c)),
        };
        if row.source.is_some() == row.converted.is_some() {
            return Err(CliError::data(format!("pair {}: give exactly one of source and converted", row.pair)));
        }
        out.push(row);
    }
    if out.is_empty() {
        return Err(CliError::data(format!("{}: no pairs", path.display())));
    }
    Ok(out)
}
