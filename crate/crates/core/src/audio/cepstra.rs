use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Orthonormal DCT-II matrix, `n × n`, row `k` holding basis vector `k`.
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let s = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            m[k * n + i] = s * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos();
        }
    }
    m
}

/// DCT-II coefficients `1..=order` of every log-mel column (`c0` dropped),
/// giving `order × T`.
pub fn mel_cepstra(x0: &Tensor, order: usize) -> Result<Tensor> {
    let [f, t] = *x0.shape() else {
        return Err(Error::dim(format!("mel_cepstra needs F×T, got {:?}", x0.shape())));
    };
    if order == 0 || order >= f {
        return Err(Error::config(format!(
            "cepstral order {order} outside 1..{f} for {f} bands"
        )));
    }
    let basis = dct_matrix(f);
    let mut out = vec![0.0f32; order * t];
    let x = x0.data();
    for k in 1..=order {
        let row = &basis[k * f..(k + 1) * f];
        for j in 0..t {
            let s: f64 = (0..f).map(|i| row[i] * x[i * t + j] as f64).sum();
            out[(k - 1) * t + j] = s as f32;
        }
    }
    Tensor::new(vec![order, t], out)
}
