#![allow(dead_code)]

pub mod composite;
pub mod dtw;
pub mod ops;

use disc_core::tensor::Real;
use disc_core::{Graph, Rng, Tensor, Var};

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-3;

pub fn random_tensor<T: Real>(shape: &[usize], scale: f64, rng: &mut Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.standard_normal() * scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Worst elementwise disagreement between autodiff and central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Relative error of one gradient entry. Entries whose magnitude is below
/// `floor` are compared against `floor` instead.
pub fn rel_err(ad: f64, fd: f64, floor: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(floor)
}

/// Checks `d loss / d inputs[i]` for every input flagged in `check`.
///
/// `build` must construct the same graph from the given leaves every time
/// it is called and return a scalar loss.
pub fn grad_check<T, F>(inputs: &[Tensor<T>], check: &[bool], floor: f64, build: F) -> GradCheck
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Var,
{
    let eval = |values: &[Tensor<T>]| -> f64 {
        let mut g = Graph::<T>::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone()).unwrap()).collect();
        let loss = build(&mut g, &vars);
        g.scalar(loss).unwrap()
    };

    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(check)
        .map(|(t, &c)| g.leaf(t.clone(), c).unwrap())
        .collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();

    let h = T::of(FD_STEP);
    let mut result = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
    for (i, input) in inputs.iter().enumerate() {
        if !check[i] {
            continue;
        }
        let ad = grads.get(vars[i]).expect("input influences loss");
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] = plus[i].data()[j] + h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] = minus[i].data()[j] - h;
            let step = (plus[i].data()[j].as_f64() - minus[i].data()[j].as_f64()) / 2.0;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let a = ad.data()[j].as_f64();
            result.max_rel_err = result.max_rel_err.max(rel_err(a, fd, floor));
            result.max_abs_err = result.max_abs_err.max((a - fd).abs());
            result.checked += 1;
        }
    }
    result
}

/// Reduces a tensor to a scalar through a fixed random projection so every
/// output entry carries a distinct weight.
pub fn project<T: Real>(g: &mut Graph<T>, x: Var, seed: u64) -> Var {
    let shape = g.value(x).shape().to_vec();
    let mut rng = Rng::seed_from_u64(seed);
    let w = g.constant(random_tensor(&shape, 1.0, &mut rng)).unwrap();
    let prod = g.mul(x, w).unwrap();
    g.sum(prod).unwrap()
}
