mod common;

use std::f64::consts::{LN_2, PI};

use common::composite::{composite_check, evaluate, random_batch, random_store, tiny_config};
use disc_core::f0::SpeakerId;
use disc_core::model::{ModelConfig, ParameterStore};
use disc_core::objectives::{
    categorical_nll, gaussian_nll, laplace_nll, Batch, LossBreakdown, LossOptions, LossWeights,
};
use disc_core::{Graph, Rng, Tensor};

fn t64(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn gauss(x: f64, mu: f64, sigma: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t64(&[1], vec![x])).unwrap();
    let mu = g.constant(t64(&[1], vec![mu])).unwrap();
    let s = g.constant(t64(&[1], vec![sigma])).unwrap();
    let l = gaussian_nll(&mut g, x, mu, s).unwrap();
    g.scalar(l).unwrap()
}

fn laplace(a: f64, b: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t64(&[1], vec![a])).unwrap();
    let b = g.constant(t64(&[1], vec![b])).unwrap();
    let l = laplace_nll(&mut g, a, b).unwrap();
    g.scalar(l).unwrap()
}

fn categorical(logits: Vec<f64>, speaker: usize) -> f64 {
    let s = logits.len();
    let mut g = Graph::<f64>::new();
    let l = g.constant(t64(&[1, s, 1], logits)).unwrap();
    let v = categorical_nll(&mut g, &[SpeakerId::from_index(speaker)], l).unwrap();
    g.scalar(v).unwrap()
}

#[test]
fn closed_forms() {
    assert!((gauss(0.3, 0.3, 1.0) - 0.918939).abs() < 1e-5);
    assert!((gauss(1.0, 0.0, 1.0) - 1.418939).abs() < 1e-5);
    assert!((laplace(2.5, 2.5) - LN_2).abs() < 1e-5);
    assert!((laplace(1.0, 2.0) - 1.693147).abs() < 1e-5);
    assert!((categorical(vec![0.7; 4], 2) - 4f64.ln()).abs() < 1e-5);
    assert!((categorical(vec![0.0; 2], 0) - LN_2).abs() < 1e-12);
    assert!(categorical(vec![-40.0, 40.0, -40.0], 1) < 1e-6);
}

#[test]
fn gaussian_scale_law_and_minimizer() {
    let base = gauss(0.0, 0.0, 1.0);
    for c in [-2.0, -0.5, 0.7, 1.5] {
        assert!((gauss(0.0, 0.0, f64::exp(c)) - (base + c)).abs() < 1e-12);
    }
    let r = 0.37;
    let at = gauss(r, 0.0, r);
    for s in [0.2, 0.3, 0.36, 0.38, 0.5, 1.0] {
        assert!(gauss(r, 0.0, s) > at);
    }
}

#[test]
fn sigma_must_be_positive() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t64(&[2], vec![0.0, 1.0])).unwrap();
    let s = g.constant(t64(&[2], vec![1.0, 0.0])).unwrap();
    assert!(matches!(gaussian_nll(&mut g, x, x, s), Err(disc_core::Error::Domain(_))));
}

#[test]
fn sums_match_plain_loops() {
    let mut rng = Rng::seed_from_u64(5);
    let n = 2 * 3 * 7;
    let x: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
    let mu: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
    let sigma: Vec<f64> = (0..n).map(|_| 0.2 + rng.uniform()).collect();
    let expect: f64 = (0..n)
        .map(|i| 0.5 * (2.0 * PI).ln() + sigma[i].ln() + (x[i] - mu[i]).powi(2) / (2.0 * sigma[i].powi(2)))
        .sum();
    let mut g = Graph::<f64>::new();
    let xv = g.constant(t64(&[2, 3, 7], x.clone())).unwrap();
    let mv = g.constant(t64(&[2, 3, 7], mu.clone())).unwrap();
    let sv = g.constant(t64(&[2, 3, 7], sigma)).unwrap();
    let l = gaussian_nll(&mut g, xv, mv, sv).unwrap();
    assert!((g.scalar(l).unwrap() - expect).abs() < 1e-9 * expect.abs());

    let expect: f64 = (0..n).map(|i| LN_2 + (x[i] - mu[i]).abs()).sum();
    let l = laplace_nll(&mut g, xv, mv).unwrap();
    assert!((g.scalar(l).unwrap() - expect).abs() < 1e-9 * expect.abs());

    let (b, s, ts) = (2, 3, 4);
    let logits: Vec<f64> = (0..b * s * ts).map(|_| 2.0 * rng.standard_normal()).collect();
    let speakers = [2usize, 0];
    let mut expect = 0.0;
    for bi in 0..b {
        for j in 0..ts {
            let col: Vec<f64> = (0..s).map(|c| logits[(bi * s + c) * ts + j]).collect();
            let lse = col.iter().map(|v| v.exp()).sum::<f64>().ln();
            expect += lse - col[speakers[bi]];
        }
    }
    let lv = g.constant(t64(&[b, s, ts], logits)).unwrap();
    let ids: Vec<SpeakerId> = speakers.iter().map(|&i| SpeakerId::from_index(i)).collect();
    let l = categorical_nll(&mut g, &ids, lv).unwrap();
    assert!((g.scalar(l).unwrap() - expect).abs() < 1e-9 * expect.abs());
}

#[test]
fn standard_weights() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.cls_frames(128), 8);
    let w = LossWeights::standard(80, 128, cfg.cls_frames(128));
    assert_eq!(w.eta, 1.0 / 10240.0);
    assert_eq!(w.eta_p, 1.0 / 512.0);
    assert_eq!(w.eta_t, 1.0 / 16.0);
    let n = LossWeights::no_aux(80, 128);
    assert_eq!((n.eta, n.eta_p, n.eta_t), (w.eta, 0.0, 0.0));
}

/// Plain-loop forward pass of the whole objective.
mod oracle {
    use super::*;

    pub type Mat = Vec<Vec<f64>>;

    fn p<'a>(s: &'a ParameterStore<f64>, name: &str) -> &'a [f64] {
        s.get(name).unwrap_or_else(|| panic!("{name}")).data()
    }

    fn conv(s: &ParameterStore<f64>, name: &str, x: &Mat, stride: usize, pad: usize) -> Mat {
        let shape = s.get(&format!("{name}.v")).unwrap().shape().to_vec();
        let (o, i, k) = (shape[0], shape[1], shape[2]);
        let v = p(s, &format!("{name}.v"));
        let gain = p(s, &format!("{name}.g"));
        let bias = p(s, &format!("{name}.b"));
        let mut w = vec![0.0; o * i * k];
        for oc in 0..o {
            let row = &v[oc * i * k..(oc + 1) * i * k];
            let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            for j in 0..i * k {
                w[oc * i * k + j] = gain[oc] * row[j] / norm;
            }
        }
        let t_in = x[0].len();
        let t_out = (t_in + 2 * pad - k) / stride + 1;
        let mut y = vec![vec![0.0; t_out]; o];
        for oc in 0..o {
            for to in 0..t_out {
                let mut acc = bias[oc];
                for ic in 0..i {
                    for kk in 0..k {
                        let src = (to * stride + kk) as isize - pad as isize;
                        if src >= 0 && (src as usize) < t_in {
                            acc += w[(oc * i + ic) * k + kk] * x[ic][src as usize];
                        }
                    }
                }
                y[oc][to] = acc;
            }
        }
        y
    }

    fn net(s: &ParameterStore<f64>, prefix: &str, layers: usize, stride: usize, pad: usize, x: &Mat) -> Mat {
        let mut h = x.clone();
        for l in 0..layers {
            let y = conv(s, &format!("{prefix}.conv{l}"), &h, stride, pad);
            let gain = p(s, &format!("{prefix}.ln{l}.gain"));
            let bias = p(s, &format!("{prefix}.ln{l}.bias"));
            let (c, t) = (y.len(), y[0].len());
            let mut out = vec![vec![0.0; t]; c];
            for j in 0..t {
                let mean = (0..c).map(|i| y[i][j]).sum::<f64>() / c as f64;
                let var = (0..c).map(|i| (y[i][j] - mean).powi(2)).sum::<f64>() / c as f64;
                for i in 0..c {
                    let v = gain[i] * (y[i][j] - mean) / (var + 1e-5).sqrt() + bias[i];
                    out[i][j] = v.max(0.0);
                }
            }
            h = out;
        }
        h
    }

    struct Model<'a> {
        cfg: &'a ModelConfig,
        s: &'a ParameterStore<f64>,
    }

    impl Model<'_> {
        fn pad(&self) -> usize {
            self.cfg.kernel / 2
        }

        fn logits(&self, x: &Mat) -> Mat {
            let h = net(self.s, "enc", self.cfg.enc_layers, 1, self.pad(), x);
            conv(self.s, "enc.out", &h, 1, 0)
        }

        fn dec(&self, c: &Mat, lambda: &[f64], speaker: usize) -> (Mat, Mat) {
            let t = lambda.len();
            let mut input = c.clone();
            input.push(lambda.to_vec());
            input.push(lambda.iter().map(|&v| if v != 0.0 { 1.0 } else { 0.0 }).collect());
            let d = self.cfg.speaker_dim;
            let table = p(self.s, "dec.speaker");
            for k in 0..d {
                input.push(vec![table[speaker * d + k]; t]);
            }
            let h = net(self.s, "dec", self.cfg.dec_layers, 1, self.pad(), &input);
            let mu = conv(self.s, "dec.mu", &h, 1, 0);
            let (lo, hi) = self.cfg.log_sigma_range;
            let sigma = conv(self.s, "dec.logsigma", &h, 1, 0)
                .into_iter()
                .map(|r| r.into_iter().map(|v| v.clamp(lo, hi).exp()).collect())
                .collect();
            (mu, sigma)
        }

        fn pext(&self, m: &Mat) -> Vec<f64> {
            let h = net(self.s, "pext", self.cfg.pext_layers, 1, self.pad(), m);
            conv(self.s, "pext.out", &h, 1, 0).remove(0)
        }

        fn cls(&self, m: &Mat) -> Mat {
            let h = net(self.s, "cls", self.cfg.cls_layers, self.cfg.cls_stride, self.pad(), m);
            conv(self.s, "cls.out", &h, 1, 0)
        }
    }

    fn gaussian(x: &Mat, mu: &Mat, sigma: &Mat) -> f64 {
        let mut acc = 0.0;
        for i in 0..x.len() {
            for j in 0..x[0].len() {
                let s = sigma[i][j];
                acc += 0.5 * (2.0 * PI).ln() + s.ln() + (x[i][j] - mu[i][j]).powi(2) / (2.0 * s * s);
            }
        }
        acc
    }

    fn laplace(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| LN_2 + (x - y).abs()).sum()
    }

    fn categorical(logits: &Mat, speaker: usize) -> f64 {
        (0..logits[0].len())
            .map(|j| {
                let lse = logits.iter().map(|r| r[j].exp()).sum::<f64>().ln();
                lse - logits[speaker][j]
            })
            .sum()
    }

    /// Same draw order as the library: all Gumbel noise, then one shift per
    /// item, then one random speaker per item.
    pub fn losses(
        cfg: &ModelConfig,
        s: &ParameterStore<f64>,
        batch: &Batch<f64>,
        tau: f64,
        weights: &LossWeights,
        rng: &mut Rng,
    ) -> LossBreakdown {
        let m = Model { cfg, s };
        let (b, f, t) = (batch.len(), batch.bands(), batch.frames());
        let xs: Vec<Mat> = (0..b)
            .map(|bi| {
                (0..f)
                    .map(|i| batch.x.data()[(bi * f + i) * t..(bi * f + i + 1) * t].to_vec())
                    .collect()
            })
            .collect();
        let lams: Vec<Vec<f64>> = (0..b).map(|bi| batch.lambda.data()[bi * t..(bi + 1) * t].to_vec()).collect();
        let logits: Vec<Mat> = xs.iter().map(|x| m.logits(x)).collect();
        let k = cfg.codebook;
        let noise: Vec<Mat> = (0..b)
            .map(|_| (0..k).map(|_| (0..t).map(|_| rng.gumbel()).collect()).collect())
            .collect();
        let book = p(s, "enc.codebook");
        let cs: Vec<Mat> = (0..b)
            .map(|bi| {
                let mut a = vec![vec![0.0; t]; k];
                for j in 0..t {
                    let z: Vec<f64> = (0..k).map(|i| (logits[bi][i][j] + noise[bi][i][j]) / tau).collect();
                    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
                    let sum: f64 = e.iter().sum();
                    for i in 0..k {
                        a[i][j] = e[i] / sum;
                    }
                }
                (0..cfg.content_dim)
                    .map(|n| (0..t).map(|j| (0..k).map(|i| book[n * k + i] * a[i][j]).sum()).collect())
                    .collect()
            })
            .collect();
        let betas: Vec<f64> = (0..b).map(|_| rng.uniform_range(0.3, 3.0)).collect();
        let rr: Vec<usize> = (0..b).map(|_| rng.below(cfg.speakers)).collect();

        let mut out = LossBreakdown::default();
        for bi in 0..b {
            let sp = batch.speakers[bi].index();
            let x = &xs[bi];
            let lam = &lams[bi];
            let (mu, sigma) = m.dec(&cs[bi], lam, sp);
            out.like += gaussian(x, &mu, &sigma);
            let lam_r: Vec<f64> = lam.iter().map(|&v| if v != 0.0 { v + betas[bi] } else { 0.0 }).collect();
            let zeros = vec![0.0; t];
            let (mu_r, _) = m.dec(&cs[bi], &lam_r, rr[bi]);
            let (mu_0, _) = m.dec(&cs[bi], &zeros, sp);
            out.p += laplace(&lam_r, &m.pext(&mu_r));
            out.p0 += laplace(&zeros, &m.pext(&mu_0));
            out.p1 += laplace(lam, &m.pext(x));
            out.p2 += laplace(lam, &m.pext(&mu));
            out.t += categorical(&m.cls(&mu_r), rr[bi]);
            out.t1 += categorical(&m.cls(x), sp);
            out.t2 += categorical(&m.cls(&mu), sp);
        }
        let n = b as f64;
        for v in [
            &mut out.like,
            &mut out.p,
            &mut out.p0,
            &mut out.p1,
            &mut out.p2,
            &mut out.t,
            &mut out.t1,
            &mut out.t2,
        ] {
            *v /= n;
        }
        out.total = weights.eta * out.like
            + weights.eta_p * (out.p + out.p0 + out.p1 + out.p2)
            + weights.eta_t * (out.t + 0.5 * out.t1 + 0.5 * out.t2);
        out
    }
}

#[test]
fn forward_matches_plain_loop_oracle() {
    let cfg = tiny_config();
    for seed in [1u64, 2, 3] {
        let store = random_store(&cfg, seed);
        let batch = random_batch(&cfg, 4, 11, seed + 10);
        let opts = LossOptions::disc(0.8);
        let mut g = Graph::new();
        let (l, _) = evaluate(&mut g, &cfg, &store, &batch, &opts, seed + 20, false);
        let mut rng = Rng::seed_from_u64(seed + 20);
        let want = oracle::losses(&cfg, &store, &batch, 0.8, &l.weights, &mut rng);
        for ((name, a), b) in LossBreakdown::NAMES.iter().zip(l.breakdown.values()).zip(want.values()) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{name}: {a} vs {b}");
        }
    }
}

#[test]
fn total_is_weighted_recombination() {
    let cfg = tiny_config();
    for seed in 0..5u64 {
        let store = random_store(&cfg, seed);
        let batch = random_batch(&cfg, 3, 16, seed + 100);
        let mut g = Graph::new();
        let (l, _) = evaluate(&mut g, &cfg, &store, &batch, &LossOptions::disc(1.0), seed, false);
        let w = LossWeights::standard(cfg.n_mels, 16, cfg.cls_frames(16));
        assert_eq!(l.weights, w);
        let b = &l.breakdown;
        let manual = w.eta * b.like + w.eta_p * (b.p + b.p0 + b.p1 + b.p2) + w.eta_t * (b.t + 0.5 * b.t1 + 0.5 * b.t2);
        assert!((b.total - manual).abs() < 1e-6);
        assert!((b.recombine(&w) - b.total).abs() < 1e-6);
    }
}

#[test]
fn recombination_in_single_precision() {
    let cfg = tiny_config();
    let store = random_store(&cfg, 9).cast::<f32>();
    let batch: Batch<f32> = random_batch(&cfg, 4, 20, 10).cast();
    let mut g = Graph::<f32>::new();
    let bound = disc_core::model::bind(&mut g, &cfg, &store, true).unwrap();
    let mut rng = Rng::seed_from_u64(3);
    let l = disc_core::objectives::disc_losses(&mut g, &bound, &batch, &LossOptions::disc(1.0), &mut rng).unwrap();
    assert!((l.breakdown.recombine(&l.weights) - l.breakdown.total).abs() < 1e-6);
}

#[test]
fn no_aux_consumes_identical_draws() {
    let cfg = tiny_config();
    let store = random_store(&cfg, 4);
    let batch = random_batch(&cfg, 3, 10, 5);
    let after = |opts: LossOptions| {
        let mut g = Graph::new();
        let (l, _) = evaluate(&mut g, &cfg, &store, &batch, &opts, 6, false);
        let mut rng = Rng::seed_from_u64(6);
        let bound = disc_core::model::bind(&mut g, &cfg, &store, false).unwrap();
        disc_core::objectives::disc_losses(&mut g, &bound, &batch, &opts, &mut rng).unwrap();
        (l, rng.next_u64())
    };
    let (disc, r1) = after(LossOptions::disc(1.0));
    let (noaux, r2) = after(LossOptions::no_aux(1.0));
    assert_eq!(r1, r2);
    assert_eq!(disc.draws, noaux.draws);
    assert_eq!(disc.breakdown.like, noaux.breakdown.like);
    assert_eq!(noaux.breakdown.p, 0.0);
    assert_eq!(noaux.breakdown.t2, 0.0);
    assert!((noaux.breakdown.total - noaux.weights.eta * noaux.breakdown.like).abs() < 1e-12);
}

#[test]
fn zero_aux_weights_reduce_to_reconstruction_gradient() {
    let cfg = tiny_config();
    let store = random_store(&cfg, 12);
    let batch = random_batch(&cfg, 2, 12, 13);
    let grads = |opts: LossOptions| -> Vec<Option<Tensor<f64>>> {
        let mut g = Graph::new();
        let (l, params) = evaluate(&mut g, &cfg, &store, &batch, &opts, 14, true);
        let gr = g.backward(l.total).unwrap();
        params.iter().map(|&p| gr.get(p).cloned()).collect()
    };
    let w = LossWeights { eta: 1.0 / (cfg.n_mels * 12) as f64, eta_p: 0.0, eta_t: 0.0 };
    let zeroed = grads(LossOptions { weights: Some(w), ..LossOptions::disc(1.0) });
    let like_only = grads(LossOptions::no_aux(1.0));
    for (i, (a, b)) in zeroed.iter().zip(&like_only).enumerate() {
        let name = &store.names()[i];
        match (a, b) {
            (Some(a), Some(b)) => {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert!((x - y).abs() <= 1e-12 * y.abs().max(1e-6), "{name}");
                }
            }
            (Some(a), None) => assert!(a.data().iter().all(|&v| v == 0.0), "{name}"),
            (None, Some(_)) => panic!("{name} lost its gradient"),
            (None, None) => {}
        }
    }
}

#[test]
fn composite_gradient_disc() {
    let r = composite_check(&LossOptions::disc(0.9), 31);
    assert!(r.checked > 500, "{r:?}");
    assert!(r.max_rel_err < 1e-3, "{r:?}");
}

#[test]
fn composite_gradient_no_aux() {
    let r = composite_check(&LossOptions::no_aux(1.3), 32);
    assert!(r.max_rel_err < 1e-3, "{r:?}");
}

#[test]
fn non_finite_input_is_rejected() {
    let cfg = tiny_config();
    let store = random_store(&cfg, 1);
    let mut batch = random_batch(&cfg, 2, 8, 2);
    batch.x.data_mut()[3] = f64::NAN;
    let mut g = Graph::new();
    let bound = disc_core::model::bind(&mut g, &cfg, &store, false).unwrap();
    let mut rng = Rng::seed_from_u64(0);
    let err = disc_core::objectives::disc_losses(&mut g, &bound, &batch, &LossOptions::disc(1.0), &mut rng).unwrap_err();
    assert!(matches!(err, disc_core::Error::NonFinite(_) | disc_core::Error::Input(_)), "{err}");
}
