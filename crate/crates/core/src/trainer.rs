//! Minibatch construction, optimization, checkpointing and telemetry.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::f0::SpeakerId;
use crate::model::{bind, config_from, init_params, store_from, store_into, ModelConfig, ParameterStore};
use crate::objectives::{disc_losses, Batch, LossBreakdown, LossOptions};
use crate::rng::{Rng, RngState};
use crate::tensor::{Graph, Tensor};

/// One preprocessed utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[F, T]` standardized log-mel spectrogram.
    pub x: Tensor,
    /// Length-`T` log-F0 pattern.
    pub lambda: Vec<f32>,
    pub speaker: SpeakerId,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.x.shape()[1]
    }
}

/// Training utterances grouped by speaker.
#[derive(Clone, Debug)]
pub struct Dataset {
    by_speaker: Vec<Vec<Utterance>>,
    bands: usize,
}

impl Dataset {
    pub fn new(utterances: Vec<Utterance>, speakers: usize) -> Result<Self> {
        let mut by_speaker = vec![Vec::new(); speakers];
        let mut bands = None;
        for u in utterances {
            let [f, t] = *u.x.shape() else {
                return Err(Error::Dataset(format!("{}: spectrogram must be F×T", u.id)));
            };
            if u.lambda.len() != t {
                return Err(Error::Dataset(format!(
                    "{}: {t} frames but {} log-F0 values",
                    u.id,
                    u.lambda.len()
                )));
            }
            if *bands.get_or_insert(f) != f {
                return Err(Error::Dataset(format!("{}: {f} bands, expected {}", u.id, bands.unwrap())));
            }
            let s = u.speaker.index();
            if s >= speakers {
                return Err(Error::Dataset(format!("{}: speaker {} outside 1..={speakers}", u.id, u.speaker)));
            }
            by_speaker[s].push(u);
        }
        if let Some(s) = by_speaker.iter().position(|v| v.is_empty()) {
            return Err(Error::Dataset(format!("speaker {} has no utterances", s + 1)));
        }
        Ok(Dataset {
            by_speaker,
            bands: bands.unwrap_or(0),
        })
    }

    pub fn speakers(&self) -> usize {
        self.by_speaker.len()
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn utterances(&self, speaker: SpeakerId) -> &[Utterance] {
        &self.by_speaker[speaker.index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Training samples per batch; each holds one utterance per speaker.
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub tau_steps: u64,
    pub seed: u64,
    pub t_crop: usize,
    /// Save a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    /// Reconstruction-only ablation.
    pub no_aux: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            steps: 2000,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            tau_start: 2.0,
            tau_end: 0.5,
            tau_steps: 5000,
            seed: 0,
            t_crop: 128,
            checkpoint_every: 0,
            no_aux: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.t_crop < 16 {
            return Err(Error::config(format!("t_crop {} must be at least 16", self.t_crop)));
        }
        if !(self.lr > 0.0) || !(self.tau_start > 0.0) || !(self.tau_end > 0.0) {
            return Err(Error::config("lr and temperatures must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::config("Adam betas must lie in [0, 1) and eps be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be positive"));
        }
        Ok(())
    }

    /// Gumbel temperature at `step`: linear from `tau_start` to `tau_end`
    /// over `tau_steps`, then held.
    pub fn tau(&self, step: u64) -> f64 {
        if self.tau_steps == 0 || step >= self.tau_steps {
            return self.tau_end;
        }
        let a = step as f64 / self.tau_steps as f64;
        self.tau_start + (self.tau_end - self.tau_start) * a
    }

    pub fn loss_options(&self, step: u64) -> LossOptions {
        if self.no_aux {
            LossOptions::no_aux(self.tau(step))
        } else {
            LossOptions::disc(self.tau(step))
        }
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("tau_start", self.tau_start.to_string()),
            ("tau_end", self.tau_end.to_string()),
            ("tau_steps", self.tau_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("t_crop", self.t_crop.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("no_aux", self.no_aux.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::config(format!("train.{key}: cannot parse {value:?}")))
        }
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "tau_start" => self.tau_start = parse(key, value)?,
            "tau_end" => self.tau_end = parse(key, value)?,
            "tau_steps" => self.tau_steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "t_crop" => self.t_crop = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "no_aux" => self.no_aux = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown key train.{key}"))),
        }
        Ok(())
    }
}

/// Copies `len` frames of `u` starting at `offset`, zero-padding past its end
/// (padded frames are unvoiced).
fn crop(u: &Utterance, offset: usize, len: usize, x: &mut [f32], lambda: &mut [f32]) {
    let (f, t) = (u.x.shape()[0], u.frames());
    let avail = t.saturating_sub(offset).min(len);
    for band in 0..f {
        let src = &u.x.data()[band * t + offset..band * t + offset + avail];
        x[band * len..band * len + avail].copy_from_slice(src);
    }
    lambda[..avail].copy_from_slice(&u.lambda[offset..offset + avail]);
}

/// One batch of `batch_size` training samples, each holding one random
/// utterance per speaker, jointly cropped to `t_crop` frames. Items are
/// ordered sample-major, speaker-minor.
pub fn make_batch(dataset: &Dataset, batch_size: usize, t_crop: usize, rng: &mut Rng) -> Result<Batch> {
    let s = dataset.speakers();
    let f = dataset.bands();
    let b = batch_size * s;
    let mut x = vec![0.0f32; b * f * t_crop];
    let mut lambda = vec![0.0f32; b * t_crop];
    let mut speakers = Vec::with_capacity(b);
    for sample in 0..batch_size {
        for (si, utts) in dataset.by_speaker.iter().enumerate() {
            let item = sample * s + si;
            let u = &utts[rng.below(utts.len())];
            let offset = rng.below(u.frames().saturating_sub(t_crop) + 1);
            crop(
                u,
                offset,
                t_crop,
                &mut x[item * f * t_crop..(item + 1) * f * t_crop],
                &mut lambda[item * t_crop..(item + 1) * t_crop],
            );
            speakers.push(SpeakerId::from_index(si));
        }
    }
    Ok(Batch {
        x: Tensor::new(vec![b, f, t_crop], x)?,
        lambda: Tensor::new(vec![b, t_crop], lambda)?,
        speakers,
    })
}

/// Endless stream of batches drawn with [`make_batch`].
pub struct BatchSampler<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    t_crop: usize,
    rng: &'a mut Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(dataset: &'a Dataset, cfg: &TrainConfig, rng: &'a mut Rng) -> Self {
        BatchSampler {
            dataset,
            batch_size: cfg.batch_size,
            t_crop: cfg.t_crop,
            rng,
        }
    }
}

impl Iterator for BatchSampler<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(make_batch(self.dataset, self.batch_size, self.t_crop, self.rng))
    }
}

/// Adam moments for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParameterStore) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// One Adam update with global-norm clipping. Returns the pre-clip norm.
pub fn adam_update(params: &mut ParameterStore, grads: &mut [Tensor], state: &mut AdamState, cfg: &TrainConfig) -> f64 {
    let norm = grad_norm(grads);
    let scale = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..g.len() {
            let gj = g[j] as f64 * scale;
            let mj = cfg.beta1 * m[j] as f64 + (1.0 - cfg.beta1) * gj;
            let vj = cfg.beta2 * v[j] as f64 + (1.0 - cfg.beta2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = cfg.lr * (mj / bc1) / ((vj / bc2).sqrt() + cfg.eps);
            let w = &mut p.data_mut()[j];
            *w = (*w as f64 - update) as f32;
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

/// Forward, backward and one optimizer update on `batch`. Returns the
/// loss values from before the update.
pub fn train_step(
    batch: &Batch,
    model_cfg: &ModelConfig,
    params: &mut ParameterStore,
    opt: &mut AdamState,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<StepReport> {
    let mut g = Graph::<f32>::new();
    let bound = bind(&mut g, model_cfg, params, true)?;
    let losses = disc_losses(&mut g, &bound, batch, &cfg.loss_options(opt.step), rng)?;
    if let Some(name) = losses.breakdown.first_non_finite() {
        return Err(Error::NonFinite(format!("loss term {name}")));
    }
    let mut grads = g.backward(losses.total)?;
    let mut flat = Vec::with_capacity(params.len());
    for (i, &v) in bound.params.iter().enumerate() {
        let t = grads
            .take(v)
            .unwrap_or_else(|| Tensor::zeros(params.tensors()[i].shape()));
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", params.names()[i])));
        }
        flat.push(t);
    }
    let norm = adam_update(params, &mut flat, opt, cfg);
    Ok(StepReport {
        loss: losses.breakdown,
        grad_norm: norm,
    })
}

/// Full training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model_cfg: ModelConfig,
    pub cfg: TrainConfig,
    pub params: ParameterStore,
    pub opt: AdamState,
    pub batch_rng: Rng,
    pub model_rng: Rng,
    /// Extra `key=value` entries carried into every checkpoint.
    pub extra: Vec<(String, String)>,
}

const INIT_STREAM: u64 = 0;
const BATCH_STREAM: u64 = 1;
const MODEL_STREAM: u64 = 2;

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model_cfg.validate()?;
        let root = Rng::seed_from_u64(cfg.seed);
        let params = init_params(&model_cfg, &mut root.with_stream(INIT_STREAM))?;
        let opt = AdamState::new(&params);
        Ok(Trainer {
            model_cfg,
            batch_rng: root.with_stream(BATCH_STREAM),
            model_rng: root.with_stream(MODEL_STREAM),
            cfg,
            params,
            opt,
            extra: Vec::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step
    }

    /// Draws a batch and applies one update.
    pub fn step(&mut self, dataset: &Dataset) -> Result<StepReport> {
        if dataset.speakers() != self.model_cfg.speakers {
            return Err(Error::Dataset(format!(
                "dataset has {} speakers, model expects {}",
                dataset.speakers(),
                self.model_cfg.speakers
            )));
        }
        let batch = make_batch(dataset, self.cfg.batch_size, self.cfg.t_crop, &mut self.batch_rng)?;
        train_step(
            &batch,
            &self.model_cfg,
            &mut self.params,
            &mut self.opt,
            &self.cfg,
            &mut self.model_rng,
        )
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        for (k, v) in self.model_cfg.to_pairs() {
            c.set(format!("model.{k}"), v);
        }
        for (k, v) in self.cfg.to_pairs() {
            c.set(format!("train.{k}"), v);
        }
        c.set("state.step", self.opt.step);
        c.set("state.batch_rng", self.batch_rng.state().to_text());
        c.set("state.model_rng", self.model_rng.state().to_text());
        for (k, v) in &self.extra {
            c.set(k.clone(), v);
        }
        store_into(&mut c, &self.params, "");
        for (i, name) in self.params.names().iter().enumerate() {
            c.push(format!("adam.m/{name}"), self.opt.m[i].clone());
            c.push(format!("adam.v/{name}"), self.opt.v[i].clone());
        }
        c
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let model_cfg = config_from(c)?;
        let mut cfg = TrainConfig::default();
        let mut extra = Vec::new();
        for (k, v) in &c.config {
            if let Some(key) = k.strip_prefix("train.") {
                cfg.set(key, v).map_err(|e| Error::Checkpoint(e.to_string()))?;
            } else if !k.starts_with("model.") && !k.starts_with("state.") {
                extra.push((k.clone(), v.clone()));
            }
        }
        let params = store_from(c, &model_cfg, "")?;
        let mut opt = AdamState::new(&params);
        opt.step = c.parse("state.step")?;
        for (i, name) in params.names().iter().enumerate() {
            for (prefix, slot) in [("adam.m/", &mut opt.m[i]), ("adam.v/", &mut opt.v[i])] {
                let t = c.tensor(&format!("{prefix}{name}"))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!("{prefix}{name}: shape {:?}", t.shape())));
                }
                *slot = t.clone();
            }
        }
        let rng = |key: &str| -> Result<Rng> {
            let text: String = c.parse(key)?;
            Ok(Rng::from_state(&RngState::from_text(&text)?))
        };
        Ok(Trainer {
            model_cfg,
            batch_rng: rng("state.batch_rng")?,
            model_rng: rng("state.model_rng")?,
            cfg,
            params,
            opt,
            extra,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

pub const LOG_HEADER: &str = "step,like,p,p0,p1,p2,t,t1,t2,total,ms";

/// Runs until `trainer.cfg.steps` updates have been applied, writing one
/// CSV row per step to `log` (header first when starting from step 0) and
/// checkpoints into `out_dir`.
pub fn train(
    trainer: &mut Trainer,
    dataset: &Dataset,
    out_dir: Option<&Path>,
    log: &mut dyn Write,
) -> Result<Vec<LossBreakdown>> {
    if trainer.step_count() == 0 {
        writeln!(log, "{LOG_HEADER}")?;
    }
    let mut history = Vec::new();
    while trainer.step_count() < trainer.cfg.steps {
        let start = Instant::now();
        let step = trainer.step_count();
        let report = trainer.step(dataset)?;
        let ms = start.elapsed().as_millis();
        let values: Vec<String> = report.loss.values().iter().map(|v| format!("{v:.9e}")).collect();
        writeln!(log, "{step},{},{ms}", values.join(","))?;
        history.push(report.loss);
        let done = trainer.step_count();
        if let Some(dir) = out_dir {
            if trainer.cfg.checkpoint_every > 0 && done % trainer.cfg.checkpoint_every == 0 {
                trainer.save(checkpoint_path(dir, done))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        trainer.save(dir.join("final.disc"))?;
    }
    Ok(history)
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint-{step:06}.disc"))
}
