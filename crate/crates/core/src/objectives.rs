//! Reconstruction and auxiliary loss terms and their weighted total.

use std::f64::consts::{LN_2, PI};
use std::fmt;

use crate::error::{Error, Result};
use crate::f0::{random_resample_speaker, SpeakerId, RR_BETA_RANGE};
use crate::model::{Bound, ContentSampling};
use crate::rng::Rng;
use crate::tensor::{Graph, Real, Tensor, Var};

/// A batch of aligned `(x, λ, s)` tuples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T: Real = f32> {
    /// `[B, F, T]` standardized log-mel spectrograms.
    pub x: Tensor<T>,
    /// `[B, T]` log-F0 patterns.
    pub lambda: Tensor<T>,
    pub speakers: Vec<SpeakerId>,
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.x.shape()[2]
    }

    pub fn bands(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn cast<U: Real>(&self) -> Batch<U> {
        Batch {
            x: self.x.cast(),
            lambda: self.lambda.cast(),
            speakers: self.speakers.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [b, _, t] = *self.x.shape() else {
            return Err(Error::dim(format!("batch x must be [B, F, T], got {:?}", self.x.shape())));
        };
        if self.lambda.shape() != [b, t] || self.speakers.len() != b {
            return Err(Error::dim(format!(
                "batch parts disagree: x {:?}, λ {:?}, {} speakers",
                self.x.shape(),
                self.lambda.shape(),
                self.speakers.len()
            )));
        }
        Ok(())
    }
}

/// Per-term loss values, each averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub like: f64,
    pub p: f64,
    pub p0: f64,
    pub p1: f64,
    pub p2: f64,
    pub t: f64,
    pub t1: f64,
    pub t2: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const NAMES: [&'static str; 9] = ["like", "p", "p0", "p1", "p2", "t", "t1", "t2", "total"];

    pub fn values(&self) -> [f64; 9] {
        [
            self.like, self.p, self.p0, self.p1, self.p2, self.t, self.t1, self.t2, self.total,
        ]
    }

    /// `η·like + η_P·(p + p0 + p1 + p2) + η_T·(t + ½t1 + ½t2)`.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        w.eta * self.like
            + w.eta_p * (self.p + self.p0 + self.p1 + self.p2)
            + w.eta_t * (self.t + 0.5 * self.t1 + 0.5 * self.t2)
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::NAMES
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (n, v)) in Self::NAMES.iter().zip(self.values()).enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{n}={v:.6}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub eta: f64,
    pub eta_p: f64,
    pub eta_t: f64,
}

impl LossWeights {
    /// `η = 1/(F·T)`, `η_P = 1/(4T)`, `η_T = 1/(2T_S)`.
    pub fn standard(bands: usize, frames: usize, cls_frames: usize) -> Self {
        LossWeights {
            eta: 1.0 / (bands * frames) as f64,
            eta_p: 1.0 / (4 * frames) as f64,
            eta_t: 1.0 / (2 * cls_frames) as f64,
        }
    }

    /// Reconstruction only.
    pub fn no_aux(bands: usize, frames: usize) -> Self {
        LossWeights {
            eta: 1.0 / (bands * frames) as f64,
            eta_p: 0.0,
            eta_t: 0.0,
        }
    }
}

/// `Σ [½ln(2π) + ln σ + (x − μ)² / (2σ²)]` over every entry.
pub fn gaussian_nll<T: Real>(g: &mut Graph<T>, x: Var, mu: Var, sigma: Var) -> Result<Var> {
    if let Some(s) = g.value(sigma).data().iter().find(|s| !(**s > T::zero())) {
        return Err(Error::Domain(format!("gaussian_nll: non-positive sigma {s}")));
    }
    let n = g.value(x).len() as f64;
    let r = g.sub(x, mu)?;
    let z = g.div(r, sigma)?;
    let z2 = g.square(z)?;
    let quad = g.sum(z2)?;
    let ls = g.log(sigma)?;
    let ls = g.sum(ls)?;
    let c = g.constant(Tensor::scalar(T::one()))?;
    g.weighted_sum(&[(quad, 0.5), (ls, 1.0), (c, 0.5 * (2.0 * PI).ln() * n)])
}

/// `Σᵢ [ln 2 + |targetᵢ − predᵢ|]`.
pub fn laplace_nll<T: Real>(g: &mut Graph<T>, target: Var, pred: Var) -> Result<Var> {
    let n = g.value(pred).len() as f64;
    let d = g.sub(target, pred)?;
    let a = g.abs(d)?;
    let s = g.sum(a)?;
    let c = g.constant(Tensor::scalar(T::one()))?;
    g.weighted_sum(&[(s, 1.0), (c, LN_2 * n)])
}

/// `Σ_j −log softmax(logits[b, :, j])[s_b]` over segments and batch items.
pub fn categorical_nll<T: Real>(g: &mut Graph<T>, speakers: &[SpeakerId], logits: Var) -> Result<Var> {
    let classes = g.value(logits).shape().get(1).copied().unwrap_or(0);
    let mut idx = Vec::with_capacity(speakers.len());
    for s in speakers {
        if s.get() > classes {
            return Err(Error::Domain(format!("speaker {s} outside 1..={classes}")));
        }
        idx.push(s.index());
    }
    let ls = g.log_softmax_channels(logits)?;
    let picked = g.gather_channels(ls, &idx)?;
    let s = g.sum(picked)?;
    g.weighted_sum(&[(s, -1.0)])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub tau: f64,
    /// Overrides the standard weights.
    pub weights: Option<LossWeights>,
    /// Evaluate the F0-extractor and classifier terms.
    pub aux: bool,
}

impl LossOptions {
    pub fn disc(tau: f64) -> Self {
        LossOptions { tau, weights: None, aux: true }
    }

    pub fn no_aux(tau: f64) -> Self {
        LossOptions { tau, weights: None, aux: false }
    }

    pub fn weights(&self, bands: usize, frames: usize, cls_frames: usize) -> LossWeights {
        self.weights.unwrap_or(if self.aux {
            LossWeights::standard(bands, frames, cls_frames)
        } else {
            LossWeights::no_aux(bands, frames)
        })
    }
}

/// Random draws consumed by one evaluation of [`disc_losses`].
#[derive(Clone, Debug, PartialEq)]
pub struct ResampleDraws {
    pub betas: Vec<f64>,
    pub speakers: Vec<SpeakerId>,
}

/// Graph nodes and values of one loss evaluation.
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub weights: LossWeights,
    pub draws: ResampleDraws,
}

fn term<V>(name: &str, r: Result<V>) -> Result<V> {
    r.map_err(|e| match e {
        Error::NonFinite(op) => Error::NonFinite(format!("{name} ({op})")),
        other => other,
    })
}

/// Builds every loss term for `batch` on `g`.
///
/// Draw order on `rng`: Gumbel noise for the shared content sample, then
/// one pitch shift per item, then one random speaker per item. The same
/// draws are made when `opts.aux` is false.
pub fn disc_losses<T: Real>(
    g: &mut Graph<T>,
    model: &Bound,
    batch: &Batch<T>,
    opts: &LossOptions,
    rng: &mut Rng,
) -> Result<LossGraph> {
    batch.validate()?;
    let cfg = model.config();
    let (b, f, t) = (batch.len(), batch.bands(), batch.frames());
    let t_s = cfg.cls_frames(t);
    let weights = opts.weights(f, t, t_s);
    let per_item = 1.0 / b as f64;

    let x = g.constant(batch.x.clone())?;
    let code = term("content", model.enc_c(g, x, ContentSampling::Gumbel { tau: opts.tau }, rng))?;
    let c = code.embeddings;

    let betas: Vec<f64> = (0..b)
        .map(|_| rng.uniform_range(RR_BETA_RANGE.0, RR_BETA_RANGE.1))
        .collect();
    let rr_speakers = (0..b)
        .map(|_| random_resample_speaker(cfg.speakers, rng))
        .collect::<Result<Vec<_>>>()?;
    let draws = ResampleDraws { betas, speakers: rr_speakers };

    let rec = term("like", model.dec(g, c, &batch.lambda, &batch.speakers))?;
    let like = term("like", gaussian_nll(g, x, rec.mu, rec.sigma))?;

    let mut breakdown = LossBreakdown::default();
    let mut parts = vec![(like, weights.eta * per_item)];
    breakdown.like = g.scalar(like)? * per_item;

    if opts.aux {
        let mut lambda_r = batch.lambda.clone();
        for (row, &beta) in lambda_r.data_mut().chunks_mut(t).zip(&draws.betas) {
            for v in row {
                if *v != T::zero() {
                    *v = T::of(v.as_f64() + beta);
                }
            }
        }
        let lambda_0 = Tensor::<T>::zeros(&[b, t]);
        let lam = g.constant(batch.lambda.clone())?;
        let lam_r = g.constant(lambda_r.clone())?;
        let lam_0 = g.constant(lambda_0.clone())?;

        let rr = term("p", model.dec(g, c, &lambda_r, &draws.speakers))?;
        let zero = term("p0", model.dec(g, c, &lambda_0, &batch.speakers))?;

        let pred = term("p", model.p_ext(g, rr.mu))?;
        let p = term("p", laplace_nll(g, lam_r, pred))?;
        let pred = term("p0", model.p_ext(g, zero.mu))?;
        let p0 = term("p0", laplace_nll(g, lam_0, pred))?;
        let pred = term("p1", model.p_ext(g, x))?;
        let p1 = term("p1", laplace_nll(g, lam, pred))?;
        let pred = term("p2", model.p_ext(g, rec.mu))?;
        let p2 = term("p2", laplace_nll(g, lam, pred))?;

        let logits = term("t", model.cls(g, rr.mu))?;
        let tt = term("t", categorical_nll(g, &draws.speakers, logits))?;
        let logits = term("t1", model.cls(g, x))?;
        let t1 = term("t1", categorical_nll(g, &batch.speakers, logits))?;
        let logits = term("t2", model.cls(g, rec.mu))?;
        let t2 = term("t2", categorical_nll(g, &batch.speakers, logits))?;

        breakdown.p = g.scalar(p)? * per_item;
        breakdown.p0 = g.scalar(p0)? * per_item;
        breakdown.p1 = g.scalar(p1)? * per_item;
        breakdown.p2 = g.scalar(p2)? * per_item;
        breakdown.t = g.scalar(tt)? * per_item;
        breakdown.t1 = g.scalar(t1)? * per_item;
        breakdown.t2 = g.scalar(t2)? * per_item;
        let wp = weights.eta_p * per_item;
        let wt = weights.eta_t * per_item;
        parts.extend([
            (p, wp),
            (p0, wp),
            (p1, wp),
            (p2, wp),
            (tt, wt),
            (t1, 0.5 * wt),
            (t2, 0.5 * wt),
        ]);
    }
    let total = term("total", g.weighted_sum(&parts))?;
    breakdown.total = g.scalar(total)?;
    Ok(LossGraph {
        total,
        breakdown,
        weights,
        draws,
    })
}
