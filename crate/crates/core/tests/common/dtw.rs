//! Exhaustive DTW by enumerating every monotone path.

/// Exhaustive minimum over monotone paths covering all rows of an
/// `n × m` cost matrix (`n ≤ m`), starting in row 0 within `margin` of the
/// first column and ending in the last row within `margin` of the last.
pub fn brute_rows(d: &dyn Fn(usize, usize) -> f64, n: usize, m: usize, margin: usize) -> f64 {
    fn walk(d: &dyn Fn(usize, usize) -> f64, i: usize, j: usize, acc: f64, n: usize, m: usize, margin: usize, best: &mut f64) {
        let acc = acc + d(i, j);
        if i == n - 1 && j + 1 + margin >= m && acc < *best {
            *best = acc;
        }
        if i + 1 < n && j + 1 < m {
            walk(d, i + 1, j + 1, acc, n, m, margin, best);
        }
        if i + 1 < n {
            walk(d, i + 1, j, acc, n, m, margin, best);
        }
        if j + 1 < m {
            walk(d, i, j + 1, acc, n, m, margin, best);
        }
    }
    let mut best = f64::INFINITY;
    for j0 in 0..=margin.min(m - 1) {
        walk(d, 0, j0, 0.0, n, m, margin, &mut best);
    }
    best
}

pub fn brute_dtw(a: &[f64], b: &[f64], margin: Option<usize>) -> f64 {
    let (n, m) = (a.len(), b.len());
    let mut best = f64::INFINITY;
    if n <= m {
        best = best.min(brute_rows(&|i, j| (a[i] - b[j]).abs(), n, m, margin.unwrap_or(m)));
    }
    if m <= n {
        best = best.min(brute_rows(&|j, i| (a[i] - b[j]).abs(), m, n, margin.unwrap_or(n)));
    }
    best
}
