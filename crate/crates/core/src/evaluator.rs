//! Objective metrics: silence trimming, endpoint-free DTW, log-F0 RMSE and
//! mel-cepstral distortion.

use std::f64::consts::LN_10;

use serde::Serialize;

use crate::audio::{log_compress, mel_cepstra, mel_spectrogram, AudioClip, AudioConfig};
use crate::error::{Error, Result};
use crate::f0::estimate_f0_forced;
use crate::tensor::Tensor;

pub const TRIM_WINDOW_SECONDS: f64 = 0.025;
pub const TRIM_DB: f64 = 40.0;
pub const MCD_ORDER: usize = 13;

/// `10·√2 / ln 10`.
pub fn mcd_factor() -> f64 {
    10.0 * 2f64.sqrt() / LN_10
}

/// Drops leading and trailing 25 ms windows whose RMS lies more than 40 dB
/// below the loudest window.
pub fn trim_silence(clip: &AudioClip) -> Result<AudioClip> {
    let win = ((TRIM_WINDOW_SECONDS * clip.sample_rate as f64).round() as usize).max(1);
    let rms: Vec<f64> = clip
        .samples
        .chunks(win)
        .map(|c| (c.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / c.len() as f64).sqrt())
        .collect();
    let max = rms.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::input("clip is entirely silent"));
    }
    let floor = max * 10f64.powf(-TRIM_DB / 20.0);
    let first = rms.iter().position(|&r| r >= floor).unwrap();
    let last = rms.iter().rposition(|&r| r >= floor).unwrap();
    let end = ((last + 1) * win).min(clip.len());
    Ok(AudioClip::new(clip.samples[first * win..end].to_vec(), clip.sample_rate))
}

/// Result of [`dtw_align`].
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    /// `(i, j)` index pairs, monotone in both.
    pub path: Vec<(usize, usize)>,
    /// Summed frame distance along the path.
    pub cost: f64,
}

impl Alignment {
    pub fn mean_cost(&self) -> f64 {
        self.cost / self.path.len() as f64
    }
}

/// Endpoint-free dynamic time warping with steps (1,0), (0,1), (1,1).
///
/// The path covers every frame of the shorter sequence; on the longer one
/// it may start within the first `margin` frames and end within the last
/// `margin` (`None` = anywhere). With equal lengths both orientations are
/// tried.
pub fn dtw_align<A, D>(a: &[A], b: &[A], dist: D, margin: Option<usize>) -> Result<Alignment>
where
    D: Fn(&A, &A) -> f64,
{
    if a.is_empty() || b.is_empty() {
        return Err(Error::input("dtw_align needs two non-empty sequences"));
    }
    let (n, m) = (a.len(), b.len());
    let d: Vec<f64> = (0..n)
        .flat_map(|i| b.iter().map(move |bj| (i, bj)))
        .map(|(i, bj)| dist(&a[i], bj))
        .collect();
    let mut best: Option<Alignment> = None;
    if n <= m {
        best = Some(subsequence(n, m, |i, j| d[i * m + j], margin));
    }
    if m <= n {
        let t = subsequence(m, n, |j, i| d[i * m + j], margin);
        let t = Alignment {
            path: t.path.into_iter().map(|(j, i)| (i, j)).collect(),
            cost: t.cost,
        };
        if best.as_ref().map_or(true, |b| t.cost < b.cost) {
            best = Some(t);
        }
    }
    Ok(best.unwrap())
}

/// DTW spanning all `n` rows, free start/end columns within `margin`.
fn subsequence(n: usize, m: usize, d: impl Fn(usize, usize) -> f64, margin: Option<usize>) -> Alignment {
    let margin = margin.unwrap_or(m).min(m - 1);
    let mut acc = vec![f64::INFINITY; n * m];
    // 0 diagonal, 1 from above (i−1), 2 from left (j−1), 3 start
    let mut from = vec![3u8; n * m];
    for i in 0..n {
        for j in 0..m {
            let here = d(i, j);
            let mut best = f64::INFINITY;
            let mut dir = 3u8;
            if i == 0 && j <= margin {
                best = 0.0;
            }
            if i > 0 && j > 0 && acc[(i - 1) * m + j - 1] < best {
                best = acc[(i - 1) * m + j - 1];
                dir = 0;
            }
            if i > 0 && acc[(i - 1) * m + j] < best {
                best = acc[(i - 1) * m + j];
                dir = 1;
            }
            if j > 0 && acc[i * m + j - 1] < best {
                best = acc[i * m + j - 1];
                dir = 2;
            }
            acc[i * m + j] = best + here;
            from[i * m + j] = dir;
        }
    }
    let last = n - 1;
    let j_end = (m - 1 - margin..m)
        .min_by(|&x, &y| acc[last * m + x].total_cmp(&acc[last * m + y]))
        .unwrap();
    let cost = acc[last * m + j_end];
    let (mut i, mut j) = (last, j_end);
    let mut path = vec![(i, j)];
    loop {
        match from[i * m + j] {
            0 => {
                i -= 1;
                j -= 1;
            }
            1 => i -= 1,
            2 => j -= 1,
            _ => break,
        }
        path.push((i, j));
    }
    path.reverse();
    Alignment { path, cost }
}

fn voiced(pattern: &[f32]) -> Vec<f64> {
    pattern.iter().filter(|&&v| v != 0.0).map(|&v| v as f64).collect()
}

/// RMSE between two log-F0 patterns over their DTW-aligned voiced frames.
pub fn delta_f0(target: &[f32], converted: &[f32], margin: Option<usize>) -> Result<f64> {
    let (a, b) = (voiced(target), voiced(converted));
    if a.is_empty() || b.is_empty() {
        return Err(Error::input("delta_f0 needs voiced frames in both patterns"));
    }
    let al = dtw_align(&a, &b, |x, y| (x - y).abs(), margin)?;
    let sq: f64 = al.path.iter().map(|&(i, j)| (a[i] - b[j]).powi(2)).sum();
    Ok((sq / al.path.len() as f64).sqrt())
}

fn columns(c: &Tensor) -> Vec<Vec<f64>> {
    let [k, t] = *c.shape() else { unreachable!() };
    (0..t)
        .map(|j| (0..k).map(|i| c.data()[i * t + j] as f64).collect())
        .collect()
}

fn euclidean(x: &Vec<f64>, y: &Vec<f64>) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

/// Mel-cepstral distortion between two `[F, T]` log-mel spectrograms.
pub fn mcd(a: &Tensor, b: &Tensor, order: usize, margin: Option<usize>) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] == 0 || b.shape()[1] == 0 {
        return Err(Error::input("mcd needs two non-empty F×T spectrograms"));
    }
    let ca = columns(&mel_cepstra(a, order)?);
    let cb = columns(&mel_cepstra(b, order)?);
    let al = dtw_align(&ca, &cb, euclidean, margin)?;
    Ok(mcd_factor() * al.mean_cost())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub margin: Option<usize>,
    pub mcd_order: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            margin: None,
            mcd_order: MCD_ORDER,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PairMetrics {
    pub delta_f0: f64,
    pub mcd: f64,
}

/// ΔF0 of `converted` against the target pattern and MCD of the trimmed
/// clips.
///
/// ΔF0 covers the frames voiced in `target_lambda`. On those frames the
/// converted pitch is read without a voicing decision, so a conversion that
/// lost its periodicity scores a large error instead of no score. Unvoiced
/// frames never enter ΔF0, so silence trimming only affects MCD.
pub fn evaluate_pair(
    reference: &AudioClip,
    converted: &AudioClip,
    target_lambda: &[f32],
    audio: &AudioConfig,
    eval: &EvalConfig,
) -> Result<PairMetrics> {
    let frames = audio.frames(converted.len());
    let forced = estimate_f0_forced(converted, audio, frames)?;
    let lambda: Vec<f32> = (0..frames)
        .map(|i| match target_lambda.get(i) {
            Some(&v) if v != 0.0 => forced[i],
            _ => 0.0,
        })
        .collect();
    let delta_f0 = delta_f0(target_lambda, &lambda, eval.margin)?;
    let log_mel = |c: &AudioClip| -> Result<Tensor> { log_compress(&mel_spectrogram(&trim_silence(c)?, audio)?) };
    let mcd = mcd(&log_mel(reference)?, &log_mel(converted)?, eval.mcd_order, eval.margin)?;
    Ok(PairMetrics { delta_f0, mcd })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub pair: String,
    pub task: String,
    pub delta_f0: f64,
    pub mcd: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub task: String,
    pub pairs: usize,
    pub delta_f0: MeanStd,
    pub mcd: MeanStd,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn push(&mut self, pair: impl Into<String>, task: impl ToString, m: PairMetrics) {
        self.rows.push(ReportRow {
            pair: pair.into(),
            task: task.to_string(),
            delta_f0: m.delta_f0,
            mcd: m.mcd,
        });
    }

    /// One aggregate per task, in order of first appearance.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut tasks: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !tasks.contains(&r.task.as_str()) {
                tasks.push(&r.task);
            }
        }
        tasks
            .into_iter()
            .map(|task| {
                let rows: Vec<&ReportRow> = self.rows.iter().filter(|r| r.task == task).collect();
                let f0: Vec<f64> = rows.iter().map(|r| r.delta_f0).collect();
                let mcd: Vec<f64> = rows.iter().map(|r| r.mcd).collect();
                Aggregate {
                    task: task.to_string(),
                    pairs: rows.len(),
                    delta_f0: MeanStd::of(&f0),
                    mcd: MeanStd::of(&mcd),
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("pair,task,delta_f0,mcd\n");
        for r in &self.rows {
            s += &format!("{},{},{:.6},{:.6}\n", r.pair, r.task, r.delta_f0, r.mcd);
        }
        s
    }

    /// Aggregate table, one line per task: `task  ΔF0 mean ± std  MCD mean ± std`.
    pub fn summary(&self) -> String {
        let mut s = format!("{:<6}{:>6}  {:>20}  {:>20}\n", "task", "pairs", "dF0", "MCD [dB]");
        for a in self.aggregates() {
            s += &format!(
                "{:<6}{:>6}  {:>9.4} ± {:<8.4}  {:>9.4} ± {:<8.4}\n",
                a.task, a.pairs, a.delta_f0.mean, a.delta_f0.std, a.mcd.mean, a.mcd.std
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            rows: &'a [ReportRow],
            aggregates: Vec<Aggregate>,
        }
        serde_json::to_string_pretty(&Out {
            rows: &self.rows,
            aggregates: self.aggregates(),
        })
        .expect("report serializes")
    }
}
