//! Small dense least-squares solver used by the model fits.

/// Solves `min ||A x - y||` by Householder QR.
///
/// `rows` holds the design matrix row-major with `cols` columns. Returns
/// `None` when the design is rank deficient relative to `rel_tol`.
pub fn least_squares(rows: &[f64], cols: usize, y: &[f64], rel_tol: f64) -> Option<Vec<f64>> {
    let m = y.len();
    if cols == 0 || m < cols || rows.len() != m * cols {
        return None;
    }
    let mut a = rows.to_vec();
    let mut b = y.to_vec();
    let at = |a: &[f64], i: usize, j: usize| a[i * cols + j];

    let mut diag_max: f64 = 0.0;
    for k in 0..cols {
        let norm: f64 = (k..m).map(|i| at(&a, i, k).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return None;
        }
        let alpha = if at(&a, k, k) > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..m).map(|i| at(&a, i, k)).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for j in k..cols {
                let dot: f64 = (k..m).map(|i| v[i - k] * at(&a, i, j)).sum();
                let f = 2.0 * dot / vnorm2;
                for i in k..m {
                    a[i * cols + j] -= f * v[i - k];
                }
            }
            let dot: f64 = (k..m).map(|i| v[i - k] * b[i]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..m {
                b[i] -= f * v[i - k];
            }
        }
        diag_max = diag_max.max(at(&a, k, k).abs());
    }
    for k in 0..cols {
        if at(&a, k, k).abs() <= rel_tol * diag_max {
            return None;
        }
    }
    let mut x = vec![0.0; cols];
    for k in (0..cols).rev() {
        let s: f64 = ((k + 1)..cols).map(|j| at(&a, k, j) * x[j]).sum();
        x[k] = (b[k] - s) / at(&a, k, k);
    }
    Some(x)
}

/// Ordinary least-squares line through `(x, y)`; returns `(intercept, slope)`.
pub fn fit_line(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some((my - slope * mx, slope))
}
