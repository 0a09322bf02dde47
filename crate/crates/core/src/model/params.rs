use std::collections::HashMap;
use std::path::Path;

use super::ModelConfig;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Scale of the initial weight-normalization direction draw.
pub const INIT_SCALE: f64 = 0.05;

/// Named trainable tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParameterStore<T> {
    fn default() -> Self {
        ParameterStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> ParameterStore<T> {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(&self.tensors)
    }

    /// Network a parameter belongs to: `enc`, `dec`, `pext` or `cls`.
    pub fn group(name: &str) -> &str {
        name.split('.').next().unwrap_or("")
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }
}

type Layout = Vec<(String, Vec<usize>)>;

fn conv_entry(out: &mut Layout, name: &str, c_out: usize, c_in: usize, kernel: usize) {
    out.push((format!("{name}.v"), vec![c_out, c_in, kernel]));
    out.push((format!("{name}.g"), vec![c_out]));
    out.push((format!("{name}.b"), vec![c_out]));
}

fn block_entries(out: &mut Layout, net: &str, c_in: usize, ch: usize, layers: usize, kernel: usize) {
    for i in 0..layers {
        conv_entry(out, &format!("{net}.conv{i}"), ch, if i == 0 { c_in } else { ch }, kernel);
        out.push((format!("{net}.ln{i}.gain"), vec![ch]));
        out.push((format!("{net}.ln{i}.bias"), vec![ch]));
    }
}

/// Expected parameter names and shapes for a configuration, in store order.
pub fn parameter_layout(cfg: &ModelConfig) -> Layout {
    let k = cfg.kernel;
    let mut out = Vec::new();
    block_entries(&mut out, "enc", cfg.n_mels, cfg.enc_channels, cfg.enc_layers, k);
    conv_entry(&mut out, "enc.out", cfg.codebook, cfg.enc_channels, 1);
    out.push(("enc.codebook".into(), vec![cfg.content_dim, cfg.codebook]));

    out.push(("dec.speaker".into(), vec![cfg.speakers, cfg.speaker_dim]));
    let dec_in = cfg.content_dim + 2 + cfg.speaker_dim;
    block_entries(&mut out, "dec", dec_in, cfg.dec_channels, cfg.dec_layers, k);
    conv_entry(&mut out, "dec.mu", cfg.n_mels, cfg.dec_channels, 1);
    conv_entry(&mut out, "dec.logsigma", cfg.n_mels, cfg.dec_channels, 1);

    block_entries(&mut out, "pext", cfg.n_mels, cfg.pext_channels, cfg.pext_layers, k);
    conv_entry(&mut out, "pext.out", 1, cfg.pext_channels, 1);

    block_entries(&mut out, "cls", cfg.n_mels, cfg.cls_channels, cfg.cls_layers, k);
    conv_entry(&mut out, "cls.out", cfg.speakers, cfg.cls_channels, 1);
    out
}

/// Deterministic initialization: weight-norm directions `v ~ 0.05·N(0,1)`
/// with gains `g = ‖v‖` (so the effective weight starts equal to `v`),
/// zero biases, unit layer-norm gains, `N(0,1)` codebook and speaker table.
pub fn init_params(cfg: &ModelConfig, rng: &mut Rng) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut store = ParameterStore::default();
    let mut last_v: Option<Tensor> = None;
    for (name, shape) in parameter_layout(cfg) {
        let numel: usize = shape.iter().product();
        let normal = |rng: &mut Rng, scale: f64| -> Vec<f32> {
            (0..numel).map(|_| (rng.standard_normal() * scale) as f32).collect()
        };
        let t = if name.ends_with(".v") {
            let v = Tensor::new(shape, normal(rng, INIT_SCALE))?;
            last_v = Some(v.clone());
            v
        } else if name.ends_with(".g") {
            let v = last_v.take().expect("direction precedes gain");
            let inner = v.len() / shape[0];
            let norms = v
                .data()
                .chunks(inner)
                .map(|row| row.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt() as f32)
                .collect();
            Tensor::new(shape, norms)?
        } else if name.ends_with(".gain") {
            Tensor::full(&shape, 1.0)
        } else if name.ends_with(".b") || name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            Tensor::new(shape, normal(rng, 1.0))?
        };
        store.insert(name, t)?;
    }
    Ok(store)
}

/// Writes parameters into a container, optionally under a name prefix.
pub fn store_into(container: &mut Container, store: &ParameterStore, prefix: &str) {
    for (name, t) in store.iter() {
        container.push(format!("{prefix}{name}"), t.clone());
    }
}

/// Reads the parameters a configuration expects, checking every shape.
pub fn store_from(container: &Container, cfg: &ModelConfig, prefix: &str) -> Result<ParameterStore> {
    let mut store = ParameterStore::default();
    for (name, shape) in parameter_layout(cfg) {
        let t = container.tensor(&format!("{prefix}{name}"))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {:?}, configuration expects {shape:?}",
                t.shape()
            )));
        }
        store.insert(name, t.clone())?;
    }
    Ok(store)
}

fn config_container(cfg: &ModelConfig) -> Container {
    let mut c = Container::new();
    for (k, v) in cfg.to_pairs() {
        c.set(format!("model.{k}"), v);
    }
    c
}

/// Reads `model.*` keys of a container into a configuration.
pub fn config_from(container: &Container) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    for (k, v) in &container.config {
        if let Some(key) = k.strip_prefix("model.") {
            cfg.set(key, v)
                .map_err(|e| Error::Checkpoint(format!("{e}")))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_params(path: impl AsRef<Path>, cfg: &ModelConfig, store: &ParameterStore) -> Result<()> {
    let mut c = config_container(cfg);
    store_into(&mut c, store, "");
    c.save(path)
}

pub fn load_params(path: impl AsRef<Path>) -> Result<(ModelConfig, ParameterStore)> {
    let c = Container::load(path)?;
    let cfg = config_from(&c)?;
    let store = store_from(&c, &cfg, "")?;
    if c.tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, configuration has {}",
            c.tensors.len(),
            store.len()
        )));
    }
    Ok((cfg, store))
}
