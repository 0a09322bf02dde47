use super::{stft, AudioClip, AudioConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Additive floor inside the log compression.
pub const LOG_FLOOR: f64 = 1e-5;
/// Lower bound on standardization deviations.
pub const STD_FLOOR: f64 = 1e-8;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the mel scale, `n_mels × (n_fft/2 + 1)`, row-major.
/// Each triangle peaks at 1 on its center frequency.
pub fn mel_filterbank(cfg: &AudioConfig) -> Vec<f64> {
    let bins = cfg.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut fb = vec![0.0f64; cfg.n_mels * bins];
    for m in 0..cfg.n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
            let w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            fb[m * bins + k] = w;
        }
    }
    fb
}

/// Power mel spectrogram, `n_mels × T`.
pub fn mel_spectrogram(clip: &AudioClip, cfg: &AudioConfig) -> Result<Tensor> {
    cfg.validate()?;
    clip.check(cfg)?;
    let spec = stft(clip, cfg.n_fft, cfg.hop)?;
    let power = spec.power();
    let fb = mel_filterbank(cfg);
    Ok(apply_filterbank(&fb, cfg.n_mels, &power, spec.bins, spec.frames))
}

pub(crate) fn apply_filterbank(
    fb: &[f64],
    n_mels: usize,
    power: &[f64],
    bins: usize,
    frames: usize,
) -> Tensor {
    let mut out = vec![0.0f32; n_mels * frames];
    for m in 0..n_mels {
        let row = &fb[m * bins..(m + 1) * bins];
        for t in 0..frames {
            let mut s = 0.0f64;
            for (k, &w) in row.iter().enumerate() {
                if w != 0.0 {
                    s += w * power[k * frames + t];
                }
            }
            out[m * frames + t] = s as f32;
        }
    }
    Tensor::new(vec![n_mels, frames], out).expect("positive mel shape")
}

/// `ln(mel + LOG_FLOOR)`.
pub fn log_compress(mel: &Tensor) -> Result<Tensor> {
    if let Some(v) = mel.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain(format!("log_compress of negative energy {v}")));
    }
    let data = mel
        .data()
        .iter()
        .map(|&v| (v as f64 + LOG_FLOOR).ln() as f32)
        .collect();
    Tensor::new(mel.shape().to_vec(), data)
}

/// Per-frequency mean and deviation pooled over every frame of a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardizationStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl StandardizationStats {
    pub fn bands(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, x: &Tensor) -> Result<usize> {
        match *x.shape() {
            [f, t] if f == self.mean.len() => Ok(t),
            _ => Err(Error::dim(format!(
                "spectrogram {:?} against stats for {} bands",
                x.shape(),
                self.mean.len()
            ))),
        }
    }
}

/// Pooled population mean and deviation (floored at [`STD_FLOOR`]).
pub fn fit_standardization<'a, I>(corpus: I) -> Result<StandardizationStats>
where
    I: IntoIterator<Item = &'a Tensor>,
{
    let mut sum: Vec<f64> = Vec::new();
    let mut sq: Vec<f64> = Vec::new();
    let mut frames = 0usize;
    for x in corpus {
        let [f, t] = *x.shape() else {
            return Err(Error::dim(format!("expected F×T, got {:?}", x.shape())));
        };
        if sum.is_empty() {
            sum = vec![0.0; f];
            sq = vec![0.0; f];
        } else if sum.len() != f {
            return Err(Error::dim(format!("band count {f} vs {}", sum.len())));
        }
        for i in 0..f {
            for &v in &x.data()[i * t..(i + 1) * t] {
                let v = v as f64;
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        frames += t;
    }
    if frames < 2 {
        return Err(Error::input(format!(
            "standardization needs at least 2 frames, corpus has {frames}"
        )));
    }
    let n = frames as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| ((q / n - m * m).max(0.0).sqrt().max(STD_FLOOR)) as f32)
        .collect();
    Ok(StandardizationStats {
        mean: mean.iter().map(|&m| m as f32).collect(),
        std,
    })
}

/// `(x0 − mean) / std` per frequency row.
pub fn standardize(x0: &Tensor, stats: &StandardizationStats) -> Result<Tensor> {
    let t = stats.check(x0)?;
    let mut out = x0.clone();
    for (i, row) in out.data_mut().chunks_mut(t).enumerate() {
        let (m, s) = (stats.mean[i] as f64, stats.std[i] as f64);
        for v in row {
            *v = ((*v as f64 - m) / s) as f32;
        }
    }
    Ok(out)
}

/// Inverse of [`standardize`].
pub fn destandardize(x: &Tensor, stats: &StandardizationStats) -> Result<Tensor> {
    let t = stats.check(x)?;
    let mut out = x.clone();
    for (i, row) in out.data_mut().chunks_mut(t).enumerate() {
        let (m, s) = (stats.mean[i] as f64, stats.std[i] as f64);
        for v in row {
            *v = (*v as f64 * s + m) as f32;
        }
    }
    Ok(out)
}
