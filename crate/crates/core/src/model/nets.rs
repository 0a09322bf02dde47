use super::{ModelConfig, ParameterStore};
use crate::error::{Error, Result};
use crate::f0::SpeakerId;
use crate::rng::Rng;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug)]
struct ConvVars {
    w: Var,
    b: Var,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct BlockVars {
    conv: ConvVars,
    gain: Var,
    bias: Var,
}

/// Encoder output: soft assignments over the codebook and their embeddings.
#[derive(Clone, Copy, Debug)]
pub struct ContentCode {
    /// `[B, N_C, T]`
    pub embeddings: Var,
    /// `[B, K, T]`, columns on the simplex.
    pub assignments: Var,
    /// `[B, K, T]`
    pub logits: Var,
}

/// Decoder mean and deviation, both `[B, F, T]`.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    pub mu: Var,
    pub log_sigma: Var,
    pub sigma: Var,
}

/// How the encoder turns logits into assignments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ContentSampling {
    Gumbel { tau: f64 },
    Argmax,
}

/// Parameters of all four networks placed on a graph, with weight
/// normalization already applied.
#[derive(Clone, Debug)]
pub struct Bound {
    /// Leaf for every store entry, in store order.
    pub params: Vec<Var>,
    cfg: ModelConfig,
    enc: Vec<BlockVars>,
    enc_out: ConvVars,
    codebook: Var,
    speaker: Var,
    dec: Vec<BlockVars>,
    dec_mu: ConvVars,
    dec_logsigma: ConvVars,
    pext: Vec<BlockVars>,
    pext_out: ConvVars,
    cls: Vec<BlockVars>,
    cls_out: ConvVars,
}

struct Binder<'a, T: Real> {
    g: &'a mut Graph<T>,
    store: &'a ParameterStore<T>,
    params: &'a [Var],
}

impl<T: Real> Binder<'_, T> {
    fn var(&self, name: &str) -> Result<Var> {
        self.store
            .position(name)
            .map(|i| self.params[i])
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    fn conv(&mut self, name: &str, stride: usize, pad: usize) -> Result<ConvVars> {
        let v = self.var(&format!("{name}.v"))?;
        let gain = self.var(&format!("{name}.g"))?;
        let b = self.var(&format!("{name}.b"))?;
        let w = self.g.weight_norm(v, gain)?;
        Ok(ConvVars { w, b, stride, pad })
    }

    fn blocks(&mut self, net: &str, layers: usize, stride: usize, pad: usize) -> Result<Vec<BlockVars>> {
        (0..layers)
            .map(|i| {
                Ok(BlockVars {
                    conv: self.conv(&format!("{net}.conv{i}"), stride, pad)?,
                    gain: self.var(&format!("{net}.ln{i}.gain"))?,
                    bias: self.var(&format!("{net}.ln{i}.bias"))?,
                })
            })
            .collect()
    }
}

/// Places every parameter on `g` (trainable leaves when `trainable`).
pub fn bind<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    store: &ParameterStore<T>,
    trainable: bool,
) -> Result<Bound> {
    cfg.validate()?;
    let params = store
        .tensors()
        .iter()
        .map(|t| g.leaf(t.clone(), trainable))
        .collect::<Result<Vec<_>>>()?;
    let pad = cfg.kernel / 2;
    let mut b = Binder { g, store, params: &params };
    let enc = b.blocks("enc", cfg.enc_layers, 1, pad)?;
    let enc_out = b.conv("enc.out", 1, 0)?;
    let cb = b.var("enc.codebook")?;
    let codebook = b.g.reshape(cb, &[cfg.content_dim, cfg.codebook, 1])?;
    let speaker = b.var("dec.speaker")?;
    let dec = b.blocks("dec", cfg.dec_layers, 1, pad)?;
    let dec_mu = b.conv("dec.mu", 1, 0)?;
    let dec_logsigma = b.conv("dec.logsigma", 1, 0)?;
    let pext = b.blocks("pext", cfg.pext_layers, 1, pad)?;
    let pext_out = b.conv("pext.out", 1, 0)?;
    let cls = b.blocks("cls", cfg.cls_layers, cfg.cls_stride, pad)?;
    let cls_out = b.conv("cls.out", 1, 0)?;
    Ok(Bound {
        params,
        cfg: cfg.clone(),
        enc,
        enc_out,
        codebook,
        speaker,
        dec,
        dec_mu,
        dec_logsigma,
        pext,
        pext_out,
        cls,
        cls_out,
    })
}

fn conv<T: Real>(g: &mut Graph<T>, x: Var, c: &ConvVars) -> Result<Var> {
    let y = g.conv1d(x, c.w, c.stride, c.pad)?;
    g.channel_bias(y, c.b)
}

fn blocks<T: Real>(g: &mut Graph<T>, mut x: Var, layers: &[BlockVars]) -> Result<Var> {
    for l in layers {
        let y = conv(g, x, &l.conv)?;
        let y = g.layer_norm(y, l.gain, l.bias)?;
        x = g.relu(y)?;
    }
    Ok(x)
}

impl Bound {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// `(B, T)` of a `[B, F, T]` spectrogram-domain input.
    fn spectral_input<T: Real>(&self, g: &Graph<T>, m: Var) -> Result<(usize, usize)> {
        match *g.value(m).shape() {
            [b, f, t] if f == self.cfg.n_mels => Ok((b, t)),
            ref s => Err(Error::dim(format!(
                "expected [B, {}, T] spectrogram, got {s:?}",
                self.cfg.n_mels
            ))),
        }
    }

    /// Codebook logits `[B, K, T]`.
    pub fn enc_logits<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.spectral_input(g, x)?;
        let h = blocks(g, x, &self.enc)?;
        conv(g, h, &self.enc_out)
    }

    /// Content code for a `[B, F, T]` standardized spectrogram.
    pub fn enc_c<T: Real>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        sampling: ContentSampling,
        rng: &mut Rng,
    ) -> Result<ContentCode> {
        let logits = self.enc_logits(g, x)?;
        let assignments = match sampling {
            ContentSampling::Gumbel { tau } => g.gumbel_softmax(logits, tau, rng)?,
            ContentSampling::Argmax => {
                let l = g.value(logits);
                let [b, k, t] = *l.shape() else { unreachable!() };
                let mut onehot = Tensor::<T>::zeros(&[b, k, t]);
                for bi in 0..b {
                    for ti in 0..t {
                        let best = (0..k)
                            .max_by(|&i, &j| {
                                l.at3(bi, i, ti)
                                    .partial_cmp(&l.at3(bi, j, ti))
                                    .unwrap()
                                    .then(j.cmp(&i))
                            })
                            .unwrap();
                        onehot.data_mut()[(bi * k + best) * t + ti] = T::one();
                    }
                }
                g.constant(onehot)?
            }
        };
        let embeddings = g.conv1d(assignments, self.codebook, 1, 0)?;
        Ok(ContentCode {
            embeddings,
            assignments,
            logits,
        })
    }

    /// Decoder conditioned on `[B, T]` log-F0 patterns and one speaker per item.
    pub fn dec<T: Real>(
        &self,
        g: &mut Graph<T>,
        c: Var,
        lambda: &Tensor<T>,
        speakers: &[SpeakerId],
    ) -> Result<DecoderOutput> {
        let [b, nc, t] = *g.value(c).shape() else {
            return Err(Error::dim(format!("content must be [B, N_C, T], got {:?}", g.value(c).shape())));
        };
        if nc != self.cfg.content_dim {
            return Err(Error::dim(format!("content has {nc} channels, expected {}", self.cfg.content_dim)));
        }
        if lambda.shape() != [b, t] {
            return Err(Error::dim(format!(
                "log-F0 {:?} does not match content [B={b}, T={t}]",
                lambda.shape()
            )));
        }
        if speakers.len() != b {
            return Err(Error::dim(format!("{} speakers for batch {b}", speakers.len())));
        }
        let mut idx = Vec::with_capacity(b);
        for s in speakers {
            if s.get() > self.cfg.speakers {
                return Err(Error::config(format!(
                    "speaker {s} outside 1..={}",
                    self.cfg.speakers
                )));
            }
            idx.push(s.index());
        }
        let mask: Vec<T> = lambda
            .data()
            .iter()
            .map(|&v| if v != T::zero() { T::one() } else { T::zero() })
            .collect();
        let lam = g.constant(lambda.clone().reshape(vec![b, 1, t])?)?;
        let mask = g.constant(Tensor::new(vec![b, 1, t], mask)?)?;
        let emb = g.embedding(self.speaker, &idx)?;
        let emb = g.repeat_time(emb, t)?;
        let h = g.concat_channels(&[c, lam, mask, emb])?;
        let h = blocks(g, h, &self.dec)?;
        let mu = conv(g, h, &self.dec_mu)?;
        let raw = conv(g, h, &self.dec_logsigma)?;
        let (lo, hi) = self.cfg.log_sigma_range;
        let log_sigma = g.clamp(raw, lo, hi)?;
        let sigma = g.exp(log_sigma)?;
        Ok(DecoderOutput { mu, log_sigma, sigma })
    }

    /// Per-frame log-F0 estimate `[B, T]`.
    pub fn p_ext<T: Real>(&self, g: &mut Graph<T>, m: Var) -> Result<Var> {
        let (b, t) = self.spectral_input(g, m)?;
        let h = blocks(g, m, &self.pext)?;
        let y = conv(g, h, &self.pext_out)?;
        g.reshape(y, &[b, t])
    }

    /// Speaker logits `[B, S, T_S]`.
    pub fn cls<T: Real>(&self, g: &mut Graph<T>, m: Var) -> Result<Var> {
        self.spectral_input(g, m)?;
        let h = blocks(g, m, &self.cls)?;
        conv(g, h, &self.cls_out)
    }
}
