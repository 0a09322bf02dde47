//! Pitch estimation, the log-F0 representation, per-speaker statistics,
//! random resampling and the affine target-pitch transform.
//!
//! A log-F0 pattern is a per-frame `[f32]` holding `ln(F0 / 1 Hz)` on voiced
//! frames and exactly `0.0` on unvoiced ones.

use crate::audio::{AudioClip, AudioConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Lower bound of the pitch search range, Hz.
pub const F0_MIN_HZ: f64 = 50.0;
/// Upper bound of the pitch search range, Hz.
pub const F0_MAX_HZ: f64 = 500.0;
/// Analysis window of the pitch detector, samples.
pub const YIN_WINDOW: usize = 1024;
/// Voicing threshold on the cumulative-mean-normalized difference.
pub const YIN_THRESHOLD: f64 = 0.15;
/// Half-open range of the random-resampling pitch shift.
pub const RR_BETA_RANGE: (f64, f64) = (0.3, 3.0);
/// Lower bound on per-speaker log-F0 deviations.
pub const F0_STD_FLOOR: f64 = 1e-4;

/// 1-based speaker index in `1..=S`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpeakerId(usize);

impl SpeakerId {
    /// Checks `id` against `1..=speakers`.
    pub fn new(id: usize, speakers: usize) -> Result<Self> {
        if id == 0 || id > speakers {
            return Err(Error::config(format!(
                "speaker {id} outside 1..={speakers}"
            )));
        }
        Ok(SpeakerId(id))
    }

    /// From a 0-based index.
    pub fn from_index(index: usize) -> Self {
        SpeakerId(index + 1)
    }

    pub fn get(self) -> usize {
        self.0
    }

    /// 0-based index.
    pub fn index(self) -> usize {
        self.0 - 1
    }
}

impl std::fmt::Display for SpeakerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Per-frame log-F0 via a YIN-style detector. Frame `t` is centered on
/// sample `t·hop`, matching the spectrogram framing; the result is padded
/// with unvoiced frames or truncated to `frames`.
pub fn estimate_f0(clip: &AudioClip, cfg: &AudioConfig, frames: usize) -> Result<Vec<f32>> {
    yin(clip, cfg, frames, false)
}

/// Like [`estimate_f0`], but frames without a dip below the voicing
/// threshold take the period of the deepest dip instead of being unvoiced.
/// Only silent frames are left at `0.0`.
pub fn estimate_f0_forced(clip: &AudioClip, cfg: &AudioConfig, frames: usize) -> Result<Vec<f32>> {
    yin(clip, cfg, frames, true)
}

fn yin(clip: &AudioClip, cfg: &AudioConfig, frames: usize, forced: bool) -> Result<Vec<f32>> {
    if clip.samples.len() < YIN_WINDOW {
        return Err(Error::input(format!(
            "clip of {} samples is shorter than the {YIN_WINDOW}-sample pitch window",
            clip.samples.len()
        )));
    }
    let sr = clip.sample_rate as f64;
    let tau_min = (sr / F0_MAX_HZ).floor() as usize;
    let tau_max = (sr / F0_MIN_HZ).ceil() as usize;
    if tau_max + 2 >= YIN_WINDOW {
        return Err(Error::config(format!(
            "sample rate {sr} too high for the {YIN_WINDOW}-sample pitch window"
        )));
    }
    let x = &clip.samples;
    let natural = cfg.frames(x.len());
    let integration = YIN_WINDOW - tau_max - 1;
    let mut frame = vec![0.0f64; YIN_WINDOW];
    let mut d = vec![0.0f64; tau_max + 2];
    let mut out = vec![0.0f32; frames];
    for (t, slot) in out.iter_mut().enumerate().take(natural.min(frames)) {
        let start = (t * cfg.hop) as isize - (YIN_WINDOW / 2) as isize;
        for (i, v) in frame.iter_mut().enumerate() {
            let j = start + i as isize;
            *v = if j >= 0 && (j as usize) < x.len() {
                x[j as usize] as f64
            } else {
                0.0
            };
        }
        if let Some(f0) = yin_frame(&frame, integration, tau_min, tau_max, &mut d, sr, forced) {
            *slot = f0.ln() as f32;
        }
    }
    Ok(out)
}

fn yin_frame(
    x: &[f64],
    w: usize,
    tau_min: usize,
    tau_max: usize,
    d: &mut [f64],
    sr: f64,
    forced: bool,
) -> Option<f64> {
    let energy: f64 = x[..w].iter().map(|v| v * v).sum();
    if energy < 1e-12 {
        return None;
    }
    d[0] = 0.0;
    for tau in 1..=tau_max + 1 {
        d[tau] = (0..w).map(|j| (x[j] - x[j + tau]).powi(2)).sum();
    }
    // cumulative-mean normalized difference
    let mut running = 0.0;
    let mut cmnd = vec![1.0f64; tau_max + 2];
    for tau in 1..=tau_max + 1 {
        running += d[tau];
        cmnd[tau] = if running > 0.0 {
            d[tau] * tau as f64 / running
        } else {
            1.0
        };
    }
    let mut tau = tau_min;
    while tau <= tau_max {
        if cmnd[tau] < YIN_THRESHOLD {
            while tau < tau_max && cmnd[tau + 1] < cmnd[tau] {
                tau += 1;
            }
            break;
        }
        tau += 1;
    }
    if tau > tau_max {
        if !forced {
            return None;
        }
        tau = (tau_min..=tau_max)
            .min_by(|&i, &j| cmnd[i].total_cmp(&cmnd[j]))
            .unwrap();
    }
    let (a, b, c) = (cmnd[tau - 1], cmnd[tau], cmnd[tau + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-12 {
        (0.5 * (a - c) / denom).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let lag = (tau as f64 + shift).clamp(tau_min as f64, tau_max as f64);
    Some(sr / lag)
}

/// Fraction of frames that are voiced.
pub fn voiced_fraction(pattern: &[f32]) -> f64 {
    if pattern.is_empty() {
        return 0.0;
    }
    pattern.iter().filter(|&&v| v != 0.0).count() as f64 / pattern.len() as f64
}

/// Binary voiced mask of a pattern.
pub fn voiced_mask(pattern: &[f32]) -> Vec<f32> {
    pattern.iter().map(|&v| if v != 0.0 { 1.0 } else { 0.0 }).collect()
}

/// Sample mean and sample deviation of a speaker's log-F0 over voiced frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeakerF0Stats {
    pub mean: f64,
    pub std: f64,
}

/// Mean and `n − 1` deviation over every nonzero entry of `patterns`,
/// deviation floored at [`F0_STD_FLOOR`].
pub fn speaker_stats<P: AsRef<[f32]>>(patterns: &[P]) -> Result<SpeakerF0Stats> {
    let voiced: Vec<f64> = patterns
        .iter()
        .flat_map(|p| p.as_ref().iter())
        .filter(|&&v| v != 0.0)
        .map(|&v| v as f64)
        .collect();
    if voiced.len() < 2 {
        return Err(Error::input(format!(
            "speaker statistics need at least 2 voiced frames, found {}",
            voiced.len()
        )));
    }
    let n = voiced.len() as f64;
    let mean = voiced.iter().sum::<f64>() / n;
    let var = voiced.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(SpeakerF0Stats {
        mean,
        std: var.sqrt().max(F0_STD_FLOOR),
    })
}

/// Adds `beta` to every voiced entry.
pub fn shift_voiced(pattern: &[f32], beta: f64) -> Vec<f32> {
    pattern
        .iter()
        .map(|&v| if v != 0.0 { (v as f64 + beta) as f32 } else { 0.0 })
        .collect()
}

/// Random resampling of a pattern: one `β ~ U[0.3, 3)` added to every voiced entry.
pub fn random_resample_f0(pattern: &[f32], rng: &mut Rng) -> Vec<f32> {
    let beta = rng.uniform_range(RR_BETA_RANGE.0, RR_BETA_RANGE.1);
    shift_voiced(pattern, beta)
}

/// Uniform draw from `1..=speakers`.
pub fn random_resample_speaker(speakers: usize, rng: &mut Rng) -> Result<SpeakerId> {
    if speakers == 0 {
        return Err(Error::config("speaker count must be at least 1"));
    }
    Ok(SpeakerId(rng.below(speakers) + 1))
}

/// `λ̌ᵢ = (σ_tgt / σ_src)(λᵢ − μ_src) + μ_tgt + β` on voiced entries, 0 elsewhere.
pub fn target_f0(pattern: &[f32], src: &SpeakerF0Stats, tgt: &SpeakerF0Stats, beta: f64) -> Vec<f32> {
    pattern
        .iter()
        .map(|&v| {
            if v != 0.0 {
                target_f0_value(v as f64, src, tgt, beta) as f32
            } else {
                0.0
            }
        })
        .collect()
}

/// The affine map of [`target_f0`] applied to one voiced value.
pub fn target_f0_value(v: f64, src: &SpeakerF0Stats, tgt: &SpeakerF0Stats, beta: f64) -> f64 {
    tgt.std / src.std * (v - src.mean) + tgt.mean + beta
}

/// Pads with unvoiced frames or truncates to `frames`.
pub fn fit_length(pattern: &[f32], frames: usize) -> Vec<f32> {
    let mut out = pattern[..pattern.len().min(frames)].to_vec();
    out.resize(frames, 0.0);
    out
}
