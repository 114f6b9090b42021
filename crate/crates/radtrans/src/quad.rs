//! Gauss–Legendre rules, orthonormal Legendre polynomials on the unit interval,
//! and adaptive one-dimensional integration.

use std::f64::consts::PI;

/// Legendre polynomial `P_n(t)` and its derivative.
fn legendre_with_derivative(n: usize, t: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, t);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 1..n {
        let k = k as f64;
        let p2 = ((2.0 * k + 1.0) * t * p1 - k * p0) / (k + 1.0);
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (t * p1 - p0) / (t * t - 1.0);
    (p1, d)
}

/// A quadrature rule with nodes and weights.
#[derive(Clone, Debug)]
pub struct Rule {
    pub x: Vec<f64>,
    pub w: Vec<f64>,
}

impl Rule {
    /// `n`-point Gauss–Legendre rule on `[-1, 1]`.
    pub fn gauss(n: usize) -> Rule {
        assert!(n > 0, "a Gauss rule needs at least one node");
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, z);
                let dz = p / d;
                z -= dz;
                if dz.abs() < 1e-15 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, z);
            let wi = 2.0 / ((1.0 - z * z) * d * d);
            x[i] = -z;
            x[n - 1 - i] = z;
            w[i] = wi;
            w[n - 1 - i] = wi;
        }
        if n % 2 == 1 {
            x[n / 2] = 0.0;
        }
        Rule { x, w }
    }

    /// `n`-point Gauss–Legendre rule on `[a, b]`.
    pub fn gauss_on(n: usize, a: f64, b: f64) -> Rule {
        let r = Rule::gauss(n);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        Rule {
            x: r.x.iter().map(|t| mid + half * t).collect(),
            w: r.w.iter().map(|w| half * w).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Values of the orthonormal Legendre polynomials `p_0..=p_deg` on `[0, 1]`
/// (`p_k(x) = sqrt(2k+1) P_k(2x-1)`), written into `out`.
pub fn legendre_unit(deg: usize, x: f64, out: &mut [f64]) {
    let t = 2.0 * x - 1.0;
    let (mut p0, mut p1) = (1.0, t);
    out[0] = 1.0;
    if deg >= 1 {
        out[1] = 3f64.sqrt() * t;
    }
    for k in 1..deg {
        let kf = k as f64;
        let p2 = ((2.0 * kf + 1.0) * t * p1 - kf * p0) / (kf + 1.0);
        out[k + 1] = (2.0 * kf + 3.0).sqrt() * p2;
        p0 = p1;
        p1 = p2;
    }
}

/// Values and first derivatives of the orthonormal Legendre polynomials on `[0, 1]`.
pub fn legendre_unit_d(deg: usize, x: f64, val: &mut [f64], der: &mut [f64]) {
    let t = 2.0 * x - 1.0;
    // raw P_k and P_k' in t, using P'_{k+1} = P'_{k-1} + (2k+1) P_k
    let mut p = vec![0.0; deg + 2];
    let mut dp = vec![0.0; deg + 2];
    p[0] = 1.0;
    if deg >= 1 {
        p[1] = t;
        dp[1] = 1.0;
    }
    for k in 1..deg {
        let kf = k as f64;
        p[k + 1] = ((2.0 * kf + 1.0) * t * p[k] - kf * p[k - 1]) / (kf + 1.0);
        dp[k + 1] = dp[k - 1] + (2.0 * kf + 1.0) * p[k];
    }
    for k in 0..=deg {
        let s = (2.0 * k as f64 + 1.0).sqrt();
        val[k] = s * p[k];
        der[k] = 2.0 * s * dp[k];
    }
}

/// Lagrange basis on the `deg + 1` equispaced nodes `c / deg` of `[0, 1]`.
pub fn lagrange_equispaced(deg: usize, x: f64, val: &mut [f64], der: &mut [f64]) {
    if deg == 0 {
        val[0] = 1.0;
        der[0] = 0.0;
        return;
    }
    let nodes: Vec<f64> = (0..=deg).map(|c| c as f64 / deg as f64).collect();
    for a in 0..=deg {
        let mut v = 1.0;
        let mut d = 0.0;
        for b in 0..=deg {
            if b == a {
                continue;
            }
            let denom = nodes[a] - nodes[b];
            // product rule accumulated on the fly
            d = d * (x - nodes[b]) / denom + v / denom;
            v *= (x - nodes[b]) / denom;
        }
        val[a] = v;
        der[a] = d;
    }
}

/// Coefficients expressing the orthonormal degree-`deg` Legendre basis of a parent
/// interval on one dyadic descendant, `depth` levels down at position `offset`.
/// Entry `[child_k * (deg+1) + parent_i]` is `∫ p_i^parent p_k^child` in the
/// length-normalized sense, so a parent expansion `c` restricts to `R c`.
pub fn restriction_1d(deg: usize, depth: u32, offset: u64) -> Vec<f64> {
    let n = deg + 1;
    let scale = (0.5f64).powi(depth as i32);
    let rule = Rule::gauss_on(n, 0.0, 1.0);
    let mut out = vec![0.0; n * n];
    let mut pc = vec![0.0; n];
    let mut pp = vec![0.0; n];
    for (t, w) in rule.x.iter().zip(&rule.w) {
        legendre_unit(deg, *t, &mut pc);
        legendre_unit(deg, (offset as f64 + t) * scale, &mut pp);
        for k in 0..n {
            for i in 0..n {
                out[k * n + i] += w * pc[k] * pp[i];
            }
        }
    }
    let norm = scale.sqrt();
    out.iter_mut().for_each(|v| *v *= norm);
    out
}

/// Adaptive Gauss integration of a vector-valued integrand over `[a, b]`.
/// Each panel is compared against its two halves; panels are accepted once the
/// difference drops below `tol` scaled by the panel's share of the interval.
pub fn adaptive_vec<F>(f: &mut F, a: f64, b: f64, dim: usize, tol: f64, out: &mut [f64])
where
    F: FnMut(f64, &mut [f64]),
{
    let rule = Rule::gauss(10);
    let mut buf = vec![0.0; dim];
    let mut panel = |lo: f64, hi: f64, acc: &mut [f64], buf: &mut [f64]| {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        for (x, w) in rule.x.iter().zip(&rule.w) {
            f(mid + half * x, buf);
            for (s, v) in acc.iter_mut().zip(buf.iter()) {
                *s += half * w * v;
            }
        }
    };
    out.iter_mut().for_each(|v| *v = 0.0);
    let total = b - a;
    let mut whole = vec![0.0; dim];
    panel(a, b, &mut whole, &mut buf);
    let mut stack = vec![(a, b, whole, 0u32)];
    let mut left = vec![0.0; dim];
    let mut right = vec![0.0; dim];
    while let Some((lo, hi, est, depth)) = stack.pop() {
        let mid = 0.5 * (lo + hi);
        panel(lo, mid, &mut left, &mut buf);
        panel(mid, hi, &mut right, &mut buf);
        let diff = est
            .iter()
            .zip(left.iter().zip(&right))
            .map(|(e, (l, r))| (e - l - r).abs())
            .fold(0.0, f64::max);
        if diff <= tol * ((hi - lo) / total).max(1e-3) || depth >= 48 {
            for (o, (l, r)) in out.iter_mut().zip(left.iter().zip(&right)) {
                *o += l + r;
            }
        } else {
            stack.push((lo, mid, left.clone(), depth + 1));
            stack.push((mid, hi, right.clone(), depth + 1));
        }
    }
}

/// Scalar adaptive Gauss integration.
pub fn adaptive<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let mut out = [0.0];
    adaptive_vec(&mut |x, o: &mut [f64]| o[0] = f(x), a, b, 1, tol, &mut out);
    out[0]
}
