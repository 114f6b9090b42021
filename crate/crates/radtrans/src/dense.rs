//! Small row-major dense kernels for per-cell work, where per-call overhead of a
//! general linear-algebra library would dominate.

/// In-place lower Cholesky factor of the `n×n` row-major SPD matrix `a`.
/// Returns `false` if a pivot is not positive.
pub fn cholesky(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for k in (j + 1)..n {
            a[j * n + k] = 0.0;
        }
    }
    true
}

/// Solves `L X = B` in place, `B` being `n×k` row-major.
pub fn forward(l: &[f64], n: usize, b: &mut [f64], k: usize) {
    for i in 0..n {
        for j in 0..i {
            let lij = l[i * n + j];
            if lij != 0.0 {
                for c in 0..k {
                    b[i * k + c] -= lij * b[j * k + c];
                }
            }
        }
        let d = l[i * n + i];
        for c in 0..k {
            b[i * k + c] /= d;
        }
    }
}

/// Solves `Lᵀ X = B` in place, `B` being `n×k` row-major.
pub fn backward_t(l: &[f64], n: usize, b: &mut [f64], k: usize) {
    for i in (0..n).rev() {
        for j in (i + 1)..n {
            let lji = l[j * n + i];
            if lji != 0.0 {
                for c in 0..k {
                    b[i * k + c] -= lji * b[j * k + c];
                }
            }
        }
        let d = l[i * n + i];
        for c in 0..k {
            b[i * k + c] /= d;
        }
    }
}

/// `AᵀB` for row-major `A: r×p`, `B: r×q`, returned `p×q`.
pub fn at_b(a: &[f64], b: &[f64], r: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    for row in 0..r {
        let ar = &a[row * p..(row + 1) * p];
        let br = &b[row * q..(row + 1) * q];
        for (i, ai) in ar.iter().enumerate() {
            if *ai != 0.0 {
                for (j, bj) in br.iter().enumerate() {
                    out[i * q + j] += ai * bj;
                }
            }
        }
    }
    out
}

/// `A x` for row-major `A: r×c`.
pub fn mat_vec(a: &[f64], x: &[f64], r: usize, c: usize) -> Vec<f64> {
    (0..r)
        .map(|i| {
            a[i * c..(i + 1) * c]
                .iter()
                .zip(x)
                .map(|(p, q)| p * q)
                .sum()
        })
        .collect()
}
