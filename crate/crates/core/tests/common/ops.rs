use super::{grad_check, project, random_tensor, GradCheck};
use disc_core::{Rng, Tensor};

/// Floor for near-zero gradient entries in the relative-error measure.
pub const FLOOR: f64 = 1e-6;

fn rand(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    random_tensor(shape, 1.0, rng)
}

/// Random values pushed at least `margin` away from every kink in `kinks`.
fn away_from(shape: &[usize], kinks: &[f64], margin: f64, rng: &mut Rng) -> Tensor<f64> {
    let mut t = rand(shape, rng);
    for v in t.data_mut() {
        while kinks.iter().any(|k| (*v - k).abs() < margin) {
            *v = rng.standard_normal() * 2.0;
        }
    }
    t
}

fn positive(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let mut t = rand(shape, rng);
    for v in t.data_mut() {
        *v = 0.5 + v.abs();
    }
    t
}

/// Finite-difference checks of every differentiable op, in 64-bit.
pub fn op_cases() -> Vec<(&'static str, GradCheck)> {
    let mut rng = Rng::seed_from_u64(2024);
    let mut out = Vec::new();
    let both = [true, true];

    let (a, b) = (rand(&[3, 4], &mut rng), rand(&[4, 2], &mut rng));
    out.push(("matmul", grad_check(&[a, b], &both, FLOOR, |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        project(g, y, 1)
    })));

    let (x, w) = (rand(&[2, 8], &mut rng), rand(&[3, 2, 3], &mut rng));
    out.push(("conv1d", grad_check(&[x, w], &both, FLOOR, |g, v| {
        let y = g.conv1d(v[0], v[1], 1, 1).unwrap();
        project(g, y, 2)
    })));

    let (x, w) = (rand(&[2, 3, 9], &mut rng), rand(&[4, 3, 5], &mut rng));
    out.push(("conv1d_strided", grad_check(&[x, w], &both, FLOOR, |g, v| {
        let y = g.conv1d(v[0], v[1], 4, 2).unwrap();
        project(g, y, 3)
    })));

    let x = rand(&[4, 3], &mut rng);
    let gain = rand(&[4], &mut rng);
    let bias = rand(&[4], &mut rng);
    out.push(("layer_norm", grad_check(&[x, gain, bias], &[true; 3], FLOOR, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
        project(g, y, 4)
    })));

    let x = away_from(&[3, 5], &[-0.7, 0.4], 0.05, &mut rng);
    out.push(("clamp", grad_check(&[x], &[true], FLOOR, |g, v| {
        let y = g.clamp(v[0], -0.7, 0.4).unwrap();
        project(g, y, 5)
    })));

    let (a, b) = (rand(&[2, 3], &mut rng), rand(&[2, 3], &mut rng));
    out.push(("add", grad_check(&[a.clone(), b.clone()], &both, FLOOR, |g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        project(g, y, 6)
    })));
    out.push(("sub", grad_check(&[a.clone(), b.clone()], &both, FLOOR, |g, v| {
        let y = g.sub(v[0], v[1]).unwrap();
        project(g, y, 7)
    })));
    out.push(("mul", grad_check(&[a.clone(), b], &both, FLOOR, |g, v| {
        let y = g.mul(v[0], v[1]).unwrap();
        project(g, y, 8)
    })));
    let d = positive(&[2, 3], &mut rng);
    out.push(("div", grad_check(&[a.clone(), d.clone()], &both, FLOOR, |g, v| {
        let y = g.div(v[0], v[1]).unwrap();
        project(g, y, 9)
    })));
    out.push(("scale", grad_check(&[a.clone()], &[true], FLOOR, |g, v| {
        let y = g.scale(v[0], -1.7).unwrap();
        let y = g.add_scalar(y, 0.3).unwrap();
        project(g, y, 10)
    })));
    out.push(("exp", grad_check(&[a.clone()], &[true], FLOOR, |g, v| {
        let y = g.exp(v[0]).unwrap();
        project(g, y, 11)
    })));
    out.push(("log", grad_check(&[d], &[true], FLOOR, |g, v| {
        let y = g.log(v[0]).unwrap();
        project(g, y, 12)
    })));
    let k = away_from(&[2, 3], &[0.0], 0.05, &mut rng);
    out.push(("abs", grad_check(&[k.clone()], &[true], FLOOR, |g, v| {
        let y = g.abs(v[0]).unwrap();
        project(g, y, 13)
    })));
    out.push(("relu", grad_check(&[k], &[true], FLOOR, |g, v| {
        let y = g.relu(v[0]).unwrap();
        project(g, y, 14)
    })));
    out.push(("square", grad_check(&[a.clone()], &[true], FLOOR, |g, v| {
        let y = g.square(v[0]).unwrap();
        project(g, y, 15)
    })));

    let s = rand(&[2, 4, 3], &mut rng);
    out.push(("softmax", grad_check(&[s.clone()], &[true], FLOOR, |g, v| {
        let y = g.softmax_channels(v[0]).unwrap();
        project(g, y, 16)
    })));
    out.push(("log_softmax", grad_check(&[s.clone()], &[true], FLOOR, |g, v| {
        let y = g.log_softmax_channels(v[0]).unwrap();
        project(g, y, 17)
    })));
    out.push(("gumbel_softmax", grad_check(&[s.clone()], &[true], FLOOR, |g, v| {
        let mut noise = Rng::seed_from_u64(99);
        let y = g.gumbel_softmax(v[0], 0.8, &mut noise).unwrap();
        project(g, y, 18)
    })));
    out.push(("gather_channels", grad_check(&[s.clone()], &[true], FLOOR, |g, v| {
        let y = g.gather_channels(v[0], &[3, 1]).unwrap();
        project(g, y, 19)
    })));

    out.push(("sum", grad_check(&[a.clone()], &[true], FLOOR, |g, v| {
        let y = g.square(v[0]).unwrap();
        g.sum(y).unwrap()
    })));
    out.push(("mean", grad_check(&[a.clone()], &[true], FLOOR, |g, v| {
        let y = g.square(v[0]).unwrap();
        g.mean(y).unwrap()
    })));
    out.push(("weighted_sum", grad_check(&[a.clone(), s.clone()], &both, FLOOR, |g, v| {
        let p = project(g, v[0], 20);
        let q = project(g, v[1], 21);
        g.weighted_sum(&[(p, 0.25), (q, -1.5)]).unwrap()
    })));

    let (c1, c2) = (rand(&[2, 2, 3], &mut rng), rand(&[2, 3, 3], &mut rng));
    out.push(("concat_channels", grad_check(&[c1, c2], &both, FLOOR, |g, v| {
        let y = g.concat_channels(&[v[0], v[1]]).unwrap();
        project(g, y, 22)
    })));

    let (x, bias) = (rand(&[2, 3, 4], &mut rng), rand(&[3], &mut rng));
    out.push(("channel_bias", grad_check(&[x, bias], &both, FLOOR, |g, v| {
        let y = g.channel_bias(v[0], v[1]).unwrap();
        project(g, y, 23)
    })));

    let table = rand(&[5, 3], &mut rng);
    out.push(("embedding", grad_check(&[table.clone()], &[true], FLOOR, |g, v| {
        let y = g.embedding(v[0], &[4, 0, 4, 2]).unwrap();
        project(g, y, 24)
    })));
    out.push(("repeat_time", grad_check(&[table], &[true], FLOOR, |g, v| {
        let y = g.repeat_time(v[0], 4).unwrap();
        project(g, y, 25)
    })));

    let (wv, wg) = (rand(&[3, 2, 3], &mut rng), rand(&[3], &mut rng));
    out.push(("weight_norm", grad_check(&[wv, wg], &both, FLOOR, |g, v| {
        let y = g.weight_norm(v[0], v[1]).unwrap();
        project(g, y, 26)
    })));

    let r = rand(&[2, 6], &mut rng);
    out.push(("reshape", grad_check(&[r], &[true], FLOOR, |g, v| {
        let y = g.reshape(v[0], &[3, 4]).unwrap();
        let y = g.square(y).unwrap();
        project(g, y, 27)
    })));
    out
}
