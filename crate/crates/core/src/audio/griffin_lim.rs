use rustfft::num_complex::Complex64;

use super::mel::{destandardize, mel_filterbank, StandardizationStats, LOG_FLOOR};
use super::stft::{istft, stft_real, Stft};
use super::{AudioClip, AudioConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `‖|S| − A‖_F / ‖A‖_F` for target magnitudes `A` (bin-major).
pub fn spectral_convergence(target: &[f64], spec: &Stft) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, s) in target.iter().zip(&spec.data) {
        num += (s.norm() - a).powi(2);
        den += a * a;
    }
    if den == 0.0 {
        return num.sqrt();
    }
    (num / den).sqrt()
}

/// Multiplicative-update iterations of the non-negative mel inversion.
pub const MEL_INVERSION_ITERS: usize = 300;

/// Nonzero span of one filterbank row.
struct Band {
    start: usize,
    weights: Vec<f64>,
}

fn sparse_filterbank(cfg: &AudioConfig) -> Vec<Band> {
    let bins = cfg.n_fft / 2 + 1;
    mel_filterbank(cfg)
        .chunks(bins)
        .map(|row| {
            let start = row.iter().position(|&w| w > 0.0).unwrap_or(0);
            let end = row.iter().rposition(|&w| w > 0.0).map_or(start, |e| e + 1);
            Band {
                start,
                weights: row[start..end].to_vec(),
            }
        })
        .collect()
}

/// Non-negative least-squares power spectrum `P` with `M ≈ W·P` for one
/// frame of mel power `mel`, by multiplicative updates.
fn invert_frame(bands: &[Band], bins: usize, mel: &[f64]) -> Vec<f64> {
    let mut num = vec![0.0; bins];
    let mut covered = vec![false; bins];
    for (b, &m) in bands.iter().zip(mel) {
        for (i, &w) in b.weights.iter().enumerate() {
            num[b.start + i] += w * m;
            covered[b.start + i] = true;
        }
    }
    let mut p: Vec<f64> = covered.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
    let scale = mel.iter().sum::<f64>() / bands.len().max(1) as f64;
    for v in &mut p {
        *v *= scale.max(1e-12);
    }
    let mut approx = vec![0.0; bands.len()];
    let mut den = vec![0.0; bins];
    for _ in 0..MEL_INVERSION_ITERS {
        for (a, b) in approx.iter_mut().zip(bands) {
            *a = b.weights.iter().enumerate().map(|(i, w)| w * p[b.start + i]).sum();
        }
        den.iter_mut().for_each(|d| *d = 0.0);
        for (b, &a) in bands.iter().zip(&approx) {
            for (i, &w) in b.weights.iter().enumerate() {
                den[b.start + i] += w * a;
            }
        }
        for k in 0..bins {
            if den[k] > 0.0 {
                p[k] *= num[k] / den[k];
            }
        }
    }
    p
}

/// Linear-frequency magnitudes recovered from a standardized log-mel
/// spectrogram by non-negative inversion of the filterbank.
fn linear_magnitudes(x: &Tensor, stats: &StandardizationStats, cfg: &AudioConfig) -> Result<Vec<f64>> {
    let x0 = destandardize(x, stats)?;
    let [f, t] = *x0.shape() else { unreachable!() };
    if f != cfg.n_mels {
        return Err(Error::dim(format!("{f} bands, config has {}", cfg.n_mels)));
    }
    let bins = cfg.n_fft / 2 + 1;
    let bands = sparse_filterbank(cfg);
    let mut mag = vec![0.0; bins * t];
    let mut column = vec![0.0; f];
    for j in 0..t {
        for (m, c) in column.iter_mut().enumerate() {
            *c = ((x0.data()[m * t + j] as f64).exp() - LOG_FLOOR).max(0.0);
        }
        for (k, p) in invert_frame(&bands, bins, &column).into_iter().enumerate() {
            mag[k * t + j] = p.sqrt();
        }
    }
    Ok(mag)
}

/// Griffin-Lim waveform estimate from a standardized log-mel spectrogram.
pub fn griffin_lim(
    x: &Tensor,
    stats: &StandardizationStats,
    cfg: &AudioConfig,
    iters: usize,
) -> Result<AudioClip> {
    griffin_lim_traced(x, stats, cfg, iters).map(|(clip, _)| clip)
}

/// As [`griffin_lim`], also returning the spectral convergence measured at
/// every iteration.
pub fn griffin_lim_traced(
    x: &Tensor,
    stats: &StandardizationStats,
    cfg: &AudioConfig,
    iters: usize,
) -> Result<(AudioClip, Vec<f64>)> {
    cfg.validate()?;
    if iters == 0 {
        return Err(Error::config("griffin_lim needs at least one iteration"));
    }
    let target = linear_magnitudes(x, stats, cfg)?;
    let frames = x.shape()[1];
    if (frames - 1) * cfg.hop < cfg.n_fft {
        return Err(Error::input(format!(
            "{frames} frames are too few to synthesize a full window"
        )));
    }
    let bins = cfg.n_fft / 2 + 1;
    let mut spec = Stft {
        bins,
        frames,
        data: target.iter().map(|&a| Complex64::new(a, 0.0)).collect(),
    };
    let mut trace = Vec::with_capacity(iters);
    let mut y = istft(&spec, cfg.n_fft, cfg.hop)?;
    for _ in 0..iters {
        let rebuilt = stft_real(&y, cfg.n_fft, cfg.hop)?;
        trace.push(spectral_convergence(&target, &rebuilt));
        for ((dst, s), &a) in spec.data.iter_mut().zip(&rebuilt.data).zip(&target) {
            let n = s.norm();
            *dst = if n > 1e-12 {
                s * (a / n)
            } else {
                Complex64::new(a, 0.0)
            };
        }
        y = istft(&spec, cfg.n_fft, cfg.hop)?;
    }
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    let samples = y.iter().map(|v| (v * gain) as f32).collect();
    Ok((AudioClip::new(samples, cfg.sample_rate), trace))
}
