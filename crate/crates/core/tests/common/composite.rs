use super::{rel_err, GradCheck};
use disc_core::f0::SpeakerId;
use disc_core::model::{bind, init_params, ModelConfig, ParameterStore};
use disc_core::objectives::{disc_losses, Batch, LossGraph, LossOptions};
use disc_core::{Graph, Rng, Tensor};

/// Central-difference step for the full objective.
pub const COMPOSITE_STEP: f64 = 1e-6;
pub const COMPOSITE_FLOOR: f64 = 1e-6;

/// Small enough that every parameter entry can be checked.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_mels: 6,
        speakers: 3,
        codebook: 5,
        content_dim: 3,
        enc_channels: 4,
        enc_layers: 2,
        dec_channels: 5,
        dec_layers: 2,
        speaker_dim: 2,
        pext_channels: 4,
        pext_layers: 1,
        cls_channels: 4,
        cls_layers: 2,
        cls_stride: 2,
        kernel: 3,
        log_sigma_range: (-7.0, 2.0),
    }
}

/// Initialized parameters with every entry perturbed, so zero biases and
/// unit gains do not hide mistakes.
pub fn random_store(cfg: &ModelConfig, seed: u64) -> ParameterStore<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut store = init_params(cfg, &mut rng).unwrap().cast::<f64>();
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.standard_normal();
        }
    }
    store
}

/// Random standardized spectrograms and log-F0 patterns with unvoiced gaps.
pub fn random_batch(cfg: &ModelConfig, items: usize, frames: usize, seed: u64) -> Batch<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    let x = (0..items * cfg.n_mels * frames).map(|_| rng.standard_normal()).collect();
    let lambda = (0..items * frames)
        .map(|_| if rng.uniform() < 0.3 { 0.0 } else { 4.5 + 0.3 * rng.standard_normal() })
        .collect();
    let speakers = (0..items).map(|i| SpeakerId::from_index(i % cfg.speakers)).collect();
    Batch {
        x: Tensor::new(vec![items, cfg.n_mels, frames], x).unwrap(),
        lambda: Tensor::new(vec![items, frames], lambda).unwrap(),
        speakers,
    }
}

pub fn evaluate(
    g: &mut Graph<f64>,
    cfg: &ModelConfig,
    store: &ParameterStore<f64>,
    batch: &Batch<f64>,
    opts: &LossOptions,
    seed: u64,
    trainable: bool,
) -> (LossGraph, Vec<disc_core::Var>) {
    let bound = bind(g, cfg, store, trainable).unwrap();
    let mut rng = Rng::seed_from_u64(seed);
    let losses = disc_losses(g, &bound, batch, opts, &mut rng).unwrap();
    (losses, bound.params)
}

/// Autodiff gradient of the total objective against central differences,
/// over every parameter entry.
pub fn composite_check(opts: &LossOptions, seed: u64) -> GradCheck {
    let cfg = tiny_config();
    let store = random_store(&cfg, seed);
    let batch = random_batch(&cfg, 3, 9, seed + 1);
    let draw_seed = seed + 2;

    let mut g = Graph::new();
    let (losses, params) = evaluate(&mut g, &cfg, &store, &batch, opts, draw_seed, true);
    let grads = g.backward(losses.total).unwrap();

    let total = |s: &ParameterStore<f64>| -> f64 {
        let mut g = Graph::new();
        let (l, _) = evaluate(&mut g, &cfg, s, &batch, opts, draw_seed, false);
        l.breakdown.total
    };

    let mut result = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
    for (i, &p) in params.iter().enumerate() {
        let ad = grads
            .get(p)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.tensors()[i].shape()));
        for j in 0..ad.len() {
            let mut plus = store.clone();
            plus.tensors_mut()[i].data_mut()[j] += COMPOSITE_STEP;
            let mut minus = store.clone();
            minus.tensors_mut()[i].data_mut()[j] -= COMPOSITE_STEP;
            let fd = (total(&plus) - total(&minus)) / (2.0 * COMPOSITE_STEP);
            let a = ad.data()[j];
            result.max_rel_err = result.max_rel_err.max(rel_err(a, fd, COMPOSITE_FLOOR));
            result.max_abs_err = result.max_abs_err.max((a - fd).abs());
            result.checked += 1;
        }
    }
    result
}
