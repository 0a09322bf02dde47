use crate::error::{Error, Result};

/// Sizes of the four networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_mels: usize,
    pub speakers: usize,
    /// Codebook size K.
    pub codebook: usize,
    /// Content embedding dimension N_C.
    pub content_dim: usize,
    pub enc_channels: usize,
    pub enc_layers: usize,
    pub dec_channels: usize,
    pub dec_layers: usize,
    pub speaker_dim: usize,
    pub pext_channels: usize,
    pub pext_layers: usize,
    pub cls_channels: usize,
    pub cls_layers: usize,
    pub cls_stride: usize,
    pub kernel: usize,
    /// Lower and upper clamp of the decoder log-deviation head.
    pub log_sigma_range: (f64, f64),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_mels: 80,
            speakers: 2,
            codebook: 128,
            content_dim: 16,
            enc_channels: 256,
            enc_layers: 3,
            dec_channels: 256,
            dec_layers: 4,
            speaker_dim: 64,
            pext_channels: 128,
            pext_layers: 3,
            cls_channels: 128,
            cls_layers: 2,
            cls_stride: 4,
            kernel: 5,
            log_sigma_range: (-7.0, 2.0),
        }
    }
}

impl ModelConfig {
    /// Reduced widths for single-core desk-scale runs.
    pub fn toy(speakers: usize) -> Self {
        ModelConfig {
            speakers,
            codebook: 32,
            enc_channels: 32,
            dec_channels: 48,
            speaker_dim: 16,
            pext_channels: 32,
            cls_channels: 32,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.n_mels,
            self.speakers,
            self.codebook,
            self.content_dim,
            self.enc_channels,
            self.enc_layers,
            self.dec_channels,
            self.dec_layers,
            self.speaker_dim,
            self.pext_channels,
            self.pext_layers,
            self.cls_channels,
            self.cls_layers,
            self.cls_stride,
        ];
        if positive.contains(&0) {
            return Err(Error::config(format!("model sizes must be positive: {self:?}")));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.log_sigma_range.0 >= self.log_sigma_range.1 {
            return Err(Error::config("log-sigma clamp range is empty"));
        }
        Ok(())
    }

    /// Classifier segments for `frames` input frames.
    pub fn cls_frames(&self, frames: usize) -> usize {
        let pad = self.kernel / 2;
        (0..self.cls_layers).fold(frames, |t, _| (t + 2 * pad - self.kernel) / self.cls_stride + 1)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut v = vec![
            ("n_mels", self.n_mels.to_string()),
            ("speakers", self.speakers.to_string()),
            ("codebook", self.codebook.to_string()),
            ("content_dim", self.content_dim.to_string()),
            ("enc_channels", self.enc_channels.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("dec_channels", self.dec_channels.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("speaker_dim", self.speaker_dim.to_string()),
            ("pext_channels", self.pext_channels.to_string()),
            ("pext_layers", self.pext_layers.to_string()),
            ("cls_channels", self.cls_channels.to_string()),
            ("cls_layers", self.cls_layers.to_string()),
            ("cls_stride", self.cls_stride.to_string()),
            ("kernel", self.kernel.to_string()),
            ("log_sigma_min", self.log_sigma_range.0.to_string()),
            ("log_sigma_max", self.log_sigma_range.1.to_string()),
        ];
        v.drain(..).map(|(k, x)| (k.to_string(), x)).collect()
    }

    /// Sets one field by key; unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let int = || {
            value
                .parse::<usize>()
                .map_err(|_| Error::config(format!("model.{key}: expected integer, got {value:?}")))
        };
        let real = || {
            value
                .parse::<f64>()
                .map_err(|_| Error::config(format!("model.{key}: expected number, got {value:?}")))
        };
        match key {
            "n_mels" => self.n_mels = int()?,
            "speakers" => self.speakers = int()?,
            "codebook" => self.codebook = int()?,
            "content_dim" => self.content_dim = int()?,
            "enc_channels" => self.enc_channels = int()?,
            "enc_layers" => self.enc_layers = int()?,
            "dec_channels" => self.dec_channels = int()?,
            "dec_layers" => self.dec_layers = int()?,
            "speaker_dim" => self.speaker_dim = int()?,
            "pext_channels" => self.pext_channels = int()?,
            "pext_layers" => self.pext_layers = int()?,
            "cls_channels" => self.cls_channels = int()?,
            "cls_layers" => self.cls_layers = int()?,
            "cls_stride" => self.cls_stride = int()?,
            "kernel" => self.kernel = int()?,
            "log_sigma_min" => self.log_sigma_range.0 = real()?,
            "log_sigma_max" => self.log_sigma_range.1 = real()?,
            _ => return Err(Error::config(format!("unknown key model.{key}"))),
        }
        Ok(())
    }
}
