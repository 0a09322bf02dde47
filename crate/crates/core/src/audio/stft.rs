use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::AudioClip;
use crate::error::{Error, Result};

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Complex short-time spectrum, `bins × frames`, stored bin-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Stft {
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<Complex64>,
}

impl Stft {
    pub fn at(&self, bin: usize, frame: usize) -> Complex64 {
        self.data[bin * self.frames + frame]
    }

    /// `|X|` as a bin-major `bins × frames` buffer.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }

    pub fn power(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm_sqr()).collect()
    }
}

fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

/// Hann-windowed STFT over reflect-padded, centered frames.
/// Yields `n_fft/2 + 1` bins and `1 + floor(len / hop)` frames.
pub fn stft(clip: &AudioClip, n_fft: usize, hop: usize) -> Result<Stft> {
    let x: Vec<f64> = clip.samples.iter().map(|&v| v as f64).collect();
    stft_real(&x, n_fft, hop)
}

pub(crate) fn stft_real(x: &[f64], n_fft: usize, hop: usize) -> Result<Stft> {
    if x.len() < n_fft {
        return Err(Error::input(format!(
            "clip of {} samples is shorter than n_fft {n_fft}",
            x.len()
        )));
    }
    if hop == 0 {
        return Err(Error::config("hop must be positive"));
    }
    let window = hann_window(n_fft);
    let frames = 1 + x.len() / hop;
    let bins = n_fft / 2 + 1;
    let half = (n_fft / 2) as isize;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let mut data = vec![Complex64::new(0.0, 0.0); bins * frames];
    for t in 0..frames {
        let start = (t * hop) as isize - half;
        for (i, b) in buf.iter_mut().enumerate() {
            let s = x[reflect(start + i as isize, x.len())];
            *b = Complex64::new(s * window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            data[k * frames + t] = buf[k];
        }
    }
    Ok(Stft { bins, frames, data })
}

/// Least-squares inverse of [`stft`]: windowed overlap-add normalized by the
/// summed squared window. Output has `(frames − 1) · hop` samples.
pub fn istft(spec: &Stft, n_fft: usize, hop: usize) -> Result<Vec<f64>> {
    if spec.bins != n_fft / 2 + 1 {
        return Err(Error::dim(format!(
            "istft: {} bins for n_fft {n_fft}",
            spec.bins
        )));
    }
    let window = hann_window(n_fft);
    let half = n_fft / 2;
    let padded_len = (spec.frames - 1) * hop + n_fft;
    let mut acc = vec![0.0f64; padded_len];
    let mut norm = vec![0.0f64; padded_len];
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n_fft);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for t in 0..spec.frames {
        for k in 0..spec.bins {
            buf[k] = spec.at(k, t);
        }
        for k in spec.bins..n_fft {
            buf[k] = buf[n_fft - k].conj();
        }
        buf[0].im = 0.0;
        if n_fft % 2 == 0 {
            buf[half].im = 0.0;
        }
        ifft.process(&mut buf);
        let start = t * hop;
        for i in 0..n_fft {
            let w = window[i];
            acc[start + i] += buf[i].re / n_fft as f64 * w;
            norm[start + i] += w * w;
        }
    }
    let len = (spec.frames - 1) * hop;
    Ok((0..len)
        .map(|i| {
            let j = i + half;
            if norm[j] > 1e-10 {
                acc[j] / norm[j]
            } else {
                0.0
            }
        })
        .collect())
}
