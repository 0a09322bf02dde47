//! Conversion: build the target log-F0 pattern, decode with the target
//! timbre and vocode with Griffin-Lim.

use std::fmt;
use std::str::FromStr;

use crate::audio::{destandardize, griffin_lim, AudioClip, AudioConfig};
use crate::error::{Error, Result};
use crate::f0::{target_f0, SpeakerId};
use crate::features::CorpusStats;
use crate::model::{bind, ContentSampling, ModelConfig, ParameterStore};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor};

/// Which factors a conversion changes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    /// Pitch only.
    P,
    /// Timbre only.
    T,
    /// Both.
    PT,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::P => "P",
            Task::T => "T",
            Task::PT => "PT",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P" | "p" => Ok(Task::P),
            "T" | "t" => Ok(Task::T),
            "PT" | "pt" => Ok(Task::PT),
            _ => Err(Error::Usage(format!("task must be P, T or PT, got {s:?}"))),
        }
    }
}

/// Resolved conversion settings `(β, š_P, š_T)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Request {
    pub beta: f64,
    pub pitch_speaker: SpeakerId,
    pub timbre_speaker: SpeakerId,
}

impl Request {
    /// Leaves every factor of `source` untouched.
    pub fn identity(source: SpeakerId) -> Self {
        Request {
            beta: 0.0,
            pitch_speaker: source,
            timbre_speaker: source,
        }
    }

    /// Task P shifts by `beta` and keeps both speakers; T and PT move the
    /// respective factors to `target` with `beta = 0`.
    pub fn for_task(task: Task, source: SpeakerId, beta: Option<f64>, target: Option<SpeakerId>) -> Result<Self> {
        match task {
            Task::P => {
                if target.is_some() {
                    return Err(Error::Usage("task P takes --beta, not a target speaker".into()));
                }
                let beta = beta.ok_or_else(|| Error::Usage("task P needs --beta".into()))?;
                Ok(Request {
                    beta,
                    ..Request::identity(source)
                })
            }
            Task::T | Task::PT => {
                if beta.is_some_and(|b| b != 0.0) {
                    return Err(Error::Usage(format!("task {task} does not take --beta")));
                }
                let target = target.ok_or_else(|| Error::Usage(format!("task {task} needs a target speaker")))?;
                Ok(Request {
                    beta: 0.0,
                    pitch_speaker: if task == Task::PT { target } else { source },
                    timbre_speaker: target,
                })
            }
        }
    }
}

/// Output of one conversion.
#[derive(Clone, Debug)]
pub struct Conversion {
    /// Target log-F0 pattern.
    pub lambda: Vec<f32>,
    /// `[F, T]` standardized decoder mean.
    pub mu: Tensor,
    /// `[F, T]` decoder deviation.
    pub sigma: Tensor,
    pub clip: Option<AudioClip>,
}

/// Read-only conversion front end over trained parameters.
#[derive(Clone, Debug)]
pub struct Converter<'a> {
    pub model: &'a ModelConfig,
    pub params: &'a ParameterStore,
    pub stats: &'a CorpusStats,
    pub audio: AudioConfig,
    pub sampling: ContentSampling,
    pub seed: u64,
    pub gl_iters: usize,
}

pub const DEFAULT_GL_ITERS: usize = 60;

impl<'a> Converter<'a> {
    /// Gumbel sampling at `tau` with seed 0.
    pub fn new(model: &'a ModelConfig, params: &'a ParameterStore, stats: &'a CorpusStats, tau: f64) -> Self {
        Converter {
            model,
            params,
            stats,
            audio: AudioConfig::default(),
            sampling: ContentSampling::Gumbel { tau },
            seed: 0,
            gl_iters: DEFAULT_GL_ITERS,
        }
    }

    fn check_speaker(&self, s: SpeakerId) -> Result<()> {
        let n = self.model.speakers.min(self.stats.speakers());
        if s.get() == 0 || s.get() > n {
            return Err(Error::config(format!("speaker {s} outside 1..={n}")));
        }
        Ok(())
    }

    /// Decodes `x` `[F, T]` with an explicit log-F0 pattern and timbre.
    pub fn decode(&self, x: &Tensor, lambda: &[f32], timbre: SpeakerId) -> Result<(Tensor, Tensor)> {
        self.check_speaker(timbre)?;
        let [f, t] = *x.shape() else {
            return Err(Error::dim(format!("spectrogram must be F×T, got {:?}", x.shape())));
        };
        if lambda.len() != t {
            return Err(Error::dim(format!("{t} frames but {} log-F0 values", lambda.len())));
        }
        let mut g = Graph::<f32>::new();
        let bound = bind(&mut g, self.model, self.params, false)?;
        let xv = g.constant(x.clone().reshape(vec![1, f, t])?)?;
        let mut rng = Rng::seed_from_u64(self.seed);
        let code = bound.enc_c(&mut g, xv, self.sampling, &mut rng)?;
        let lam = Tensor::new(vec![1, t], lambda.to_vec())?;
        let out = bound.dec(&mut g, code.embeddings, &lam, &[timbre])?;
        let mu = g.value(out.mu).clone().reshape(vec![f, t])?;
        let sigma = g.value(out.sigma).clone().reshape(vec![f, t])?;
        if !mu.is_finite() {
            return Err(Error::NonFinite("decoder mean".into()));
        }
        Ok((mu, sigma))
    }

    /// Converts without vocoding.
    pub fn convert_features(&self, x: &Tensor, lambda: &[f32], source: SpeakerId, req: &Request) -> Result<Conversion> {
        self.check_speaker(source)?;
        self.check_speaker(req.pitch_speaker)?;
        let target = target_f0(
            lambda,
            self.stats.speaker(source)?,
            self.stats.speaker(req.pitch_speaker)?,
            req.beta,
        );
        let (mu, sigma) = self.decode(x, &target, req.timbre_speaker)?;
        Ok(Conversion {
            lambda: target,
            mu,
            sigma,
            clip: None,
        })
    }

    /// Full conversion including Griffin-Lim synthesis.
    pub fn convert(&self, x: &Tensor, lambda: &[f32], source: SpeakerId, req: &Request) -> Result<Conversion> {
        let mut out = self.convert_features(x, lambda, source, req)?;
        out.clip = Some(griffin_lim(&out.mu, &self.stats.mel, &self.audio, self.gl_iters)?);
        Ok(out)
    }

    /// Identity conversion mean.
    pub fn reconstruct(&self, x: &Tensor, lambda: &[f32], source: SpeakerId) -> Result<Tensor> {
        Ok(self.convert_features(x, lambda, source, &Request::identity(source))?.mu)
    }

    /// Unstandardized log-mel of a conversion mean.
    pub fn log_mel(&self, mu: &Tensor) -> Result<Tensor> {
        destandardize(mu, &self.stats.mel)
    }

    /// Log-F0 the trained extractor reads from a standardized spectrogram.
    pub fn extract_pitch(&self, x: &Tensor) -> Result<Vec<f32>> {
        let [f, t] = *x.shape() else {
            return Err(Error::dim(format!("spectrogram must be F×T, got {:?}", x.shape())));
        };
        let mut g = Graph::<f32>::new();
        let bound = bind(&mut g, self.model, self.params, false)?;
        let xv = g.constant(x.clone().reshape(vec![1, f, t])?)?;
        let p = bound.p_ext(&mut g, xv)?;
        Ok(g.value(p).data().to_vec())
    }
}
