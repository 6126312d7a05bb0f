//! Plain numeric kernels shared by the tape and the gradient-free fast paths.
//!
//! Both paths must call the same kernels so that sampling-time statistics and
//! teacher-forced re-evaluations agree bit for bit.

/// Smallest argument fed to `ln`; keeps `0 * ln 0` at zero instead of NaN.
pub const LOG_FLOOR: f64 = f64::MIN_POSITIVE;

/// `out[m, n] = a[m, k] * b[k, n]`, row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[inline]
pub fn floored_ln(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

/// `-sum p ln p`, accumulated in index order exactly like the tape's
/// `mul -> sum -> scale(-1)` chain.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().map(|&p| p * floored_ln(p)).sum::<f64>()
}

/// Log-sum-exp with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
