//! Waveform and spectral feature transforms.

mod cepstra;
mod griffin_lim;
mod mel;
mod stft;
mod wav;

pub use cepstra::{dct_matrix, mel_cepstra};
pub use griffin_lim::{griffin_lim, griffin_lim_traced, spectral_convergence};
pub use mel::{
    destandardize, fit_standardization, hz_to_mel, log_compress, mel_filterbank, mel_spectrogram,
    mel_to_hz, standardize, StandardizationStats, LOG_FLOOR, STD_FLOOR,
};
pub use stft::{hann_window, istft, stft, Stft};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        AudioConfig {
            sample_rate: 16_000,
            n_fft: 1024,
            hop: 256,
            n_mels: 80,
            fmin: 40.0,
            fmax: 7600.0,
        }
    }
}

impl AudioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.n_fft < 2 || self.hop == 0 || self.n_mels == 0 {
            return Err(Error::config(format!("invalid audio config {self:?}")));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= nyquist) {
            return Err(Error::config(format!(
                "mel range [{}, {}] must lie within [0, {nyquist}]",
                self.fmin, self.fmax
            )));
        }
        Ok(())
    }

    /// Number of frames `1 + floor(len / hop)` for a clip of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        1 + len / self.hop
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        AudioClip {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Checks the rate against `cfg` and the length against one analysis window.
    pub fn check(&self, cfg: &AudioConfig) -> Result<()> {
        if self.sample_rate != cfg.sample_rate {
            return Err(Error::input(format!(
                "clip sampled at {} Hz, expected {} Hz",
                self.sample_rate, cfg.sample_rate
            )));
        }
        if self.samples.len() < cfg.n_fft {
            return Err(Error::input(format!(
                "clip of {} samples is shorter than one {}-sample window",
                self.samples.len(),
                cfg.n_fft
            )));
        }
        Ok(())
    }
}
