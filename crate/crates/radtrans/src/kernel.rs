//! Scattering kernels on the circle, their Alpert-wavelet matrices, certified
//! compression and low-rank factorization, and error-controlled application.

use std::f64::consts::PI;
use std::fmt::Write as _;

use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::angular::{scaling_values, AlpertBasis, AngularField, AngularPartition, Arc, Repr};
use crate::error::{input, Error, Result};
use crate::quad::{adaptive_vec, legendre_unit, Rule};

const TWO_PI: f64 = 2.0 * PI;

/// Angular shape of the scattering phase function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum KernelKind {
    HenyeyGreenstein { gamma: f64 },
    Isotropic,
    Rayleigh,
}

/// Scattering kernel `K = κ K₀` with `K₀ v(θ) = ∫ G(θ-θ') v(θ') dθ'`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// Spatial scattering density, constant over the domain.
    pub kappa: f64,
}

impl KernelSpec {
    pub fn henyey_greenstein(gamma: f64) -> Result<KernelSpec> {
        let s = KernelSpec {
            kind: KernelKind::HenyeyGreenstein { gamma },
            kappa: 1.0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn isotropic() -> KernelSpec {
        KernelSpec {
            kind: KernelKind::Isotropic,
            kappa: 1.0,
        }
    }

    pub fn rayleigh() -> KernelSpec {
        KernelSpec {
            kind: KernelKind::Rayleigh,
            kappa: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let KernelKind::HenyeyGreenstein { gamma } = self.kind {
            if !(0.0..1.0).contains(&gamma) {
                return Err(Error::Domain(format!(
                    "Henyey–Greenstein needs 0 <= gamma < 1, got {gamma}"
                )));
            }
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return input("kappa must be finite and nonnegative");
        }
        Ok(())
    }

    /// Density `G` as a function of the angle difference.
    pub fn density(&self, t: f64) -> f64 {
        match self.kind {
            KernelKind::HenyeyGreenstein { gamma } => {
                (1.0 - gamma * gamma) / (1.0 + gamma * gamma - 2.0 * gamma * t.cos()) / TWO_PI
            }
            KernelKind::Isotropic => 1.0 / TWO_PI,
            KernelKind::Rayleigh => (1.0 + t.cos().powi(2)) / (3.0 * PI),
        }
    }

    pub fn eval(&self, theta: f64, theta_p: f64) -> Result<f64> {
        self.validate()?;
        Ok(self.density(theta - theta_p))
    }

    /// Eigenvalue of `K₀` on the Fourier mode `e^{inθ}`.
    pub fn fourier(&self, n: i64) -> f64 {
        match self.kind {
            KernelKind::HenyeyGreenstein { gamma } => gamma.powi(n.unsigned_abs() as i32),
            KernelKind::Isotropic => (n == 0) as i32 as f64,
            KernelKind::Rayleigh => match n.abs() {
                0 => 1.0,
                2 => 1.0 / 6.0,
                _ => 0.0,
            },
        }
    }

    /// Bound on `‖(I - P_L) K₀‖` where `P_L` projects onto degree-`m` pieces
    /// on the uniform level-`level` partition, from the Fourier multipliers and
    /// Taylor bounds on each mode.
    pub fn truncation_floor(&self, m: usize, level: u8) -> f64 {
        let h = TWO_PI / (1u64 << level) as f64;
        let fact: f64 = (1..=m + 1).map(|k| k as f64).product();
        let mut sum = 0.0;
        for n in 1..200_000i64 {
            let lam = self.fourier(n);
            let eps = ((n as f64 * h / 2.0).powi(m as i32 + 1) / fact).min(1.0);
            let term = lam * lam * eps * eps;
            sum += 2.0 * term;
            if lam.abs() < 1e-20 && n > 4 {
                break;
            }
        }
        sum.sqrt()
    }
}

/// Wavelet-coordinate layout for a uniform level-`level` tree: block 0 holds the
/// root scaling functions, block `b ≥ 1` the wavelets of the node with heap number `b`.
pub fn wavelet_dim(m: usize, level: u8) -> usize {
    (m + 1) << level
}

/// In-place forward wavelet transform of scaling coefficients on the uniform
/// level-`level` partition.
pub fn fwt_uniform(basis: &AlpertBasis, level: u8, x: &mut [f64]) {
    let n = basis.n();
    let mut s = x.to_vec();
    let mut cur = 1usize << level;
    let mut ps = vec![0.0; n];
    let mut d = vec![0.0; n];
    while cur > 1 {
        let half = cur / 2;
        let mut next = vec![0.0; half * n];
        for k in 0..half {
            basis.analyze(&s[2 * k * n..(2 * k + 2) * n], &mut ps, &mut d);
            next[k * n..(k + 1) * n].copy_from_slice(&ps);
            x[(half + k) * n..(half + k + 1) * n].copy_from_slice(&d);
        }
        s = next;
        cur = half;
    }
    x[..n].copy_from_slice(&s[..n]);
}

/// Inverse of [`fwt_uniform`].
pub fn ifwt_uniform(basis: &AlpertBasis, level: u8, x: &mut [f64]) {
    let n = basis.n();
    let mut s = x[..n].to_vec();
    let mut cur = 1usize;
    let mut buf = vec![0.0; 2 * n];
    while cur < (1usize << level) {
        let mut next = vec![0.0; 2 * cur * n];
        for k in 0..cur {
            basis.synthesize(
                &s[k * n..(k + 1) * n],
                &x[(cur + k) * n..(cur + k + 1) * n],
                &mut buf,
            );
            next[2 * k * n..(2 * k + 2) * n].copy_from_slice(&buf);
        }
        s = next;
        cur *= 2;
    }
    x.copy_from_slice(&s);
}

/// Dense symmetric matrix of `K₀` in the Alpert wavelet basis up to a level.
#[derive(Clone, Debug)]
pub struct KernelMatrix {
    pub spec: KernelSpec,
    pub m: usize,
    pub level: u8,
    /// Row-major `dim × dim`.
    pub data: Vec<f64>,
}

/// `Q_ik(t) = ∫ p_i(x) p_k(x - t) dx` over the overlap of `[0,1]` and `[t, 1+t]`.
fn overlap_moments(m: usize, t: f64, rule: &Rule, out: &mut [f64]) {
    let n = m + 1;
    let lo = t.max(0.0);
    let hi = (1.0 + t).min(1.0);
    out.iter_mut().for_each(|v| *v = 0.0);
    if hi <= lo {
        return;
    }
    let mut pi = vec![0.0; n];
    let mut pk = vec![0.0; n];
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    for (x, w) in rule.x.iter().zip(&rule.w) {
        let xx = mid + half * x;
        legendre_unit(m, xx, &mut pi);
        legendre_unit(m, xx - t, &mut pk);
        for i in 0..n {
            for k in 0..n {
                out[i * n + k] += half * w * pi[i] * pk[k];
            }
        }
    }
}

/// Scaling-basis blocks `B_d[i][k] = ∫∫ G φ_{a,i} φ_{a-d,k}` for every offset `d`.
fn scaling_blocks(spec: &KernelSpec, m: usize, level: u8) -> Vec<Vec<f64>> {
    let n = m + 1;
    let nb = 1usize << level;
    let h = TWO_PI / nb as f64;
    let rule = Rule::gauss(n);
    let mut q = vec![0.0; n * n];
    (0..nb)
        .map(|d| {
            let mut f = |t: f64, out: &mut [f64]| {
                overlap_moments(m, t, &rule, &mut q);
                let g = spec.density(h * (d as f64 + t));
                for (o, qv) in out.iter_mut().zip(&q) {
                    *o = g * qv;
                }
            };
            let mut left = vec![0.0; n * n];
            let mut right = vec![0.0; n * n];
            adaptive_vec(&mut f, -1.0, 0.0, n * n, 1e-14, &mut left);
            adaptive_vec(&mut f, 0.0, 1.0, n * n, 1e-14, &mut right);
            left.iter().zip(&right).map(|(a, b)| h * (a + b)).collect()
        })
        .collect()
}

impl KernelMatrix {
    /// Assembles the wavelet matrix by exact reduction of the double integral to
    /// one adaptive integral per offset (the kernel is a convolution), followed by
    /// a two-sided fast wavelet transform.
    pub fn assemble(spec: &KernelSpec, m: usize, level: u8) -> Result<KernelMatrix> {
        spec.validate()?;
        let n = m + 1;
        let nb = 1usize << level;
        let dim = n * nb;
        let blocks = scaling_blocks(spec, m, level);
        let mut data = vec![0.0; dim * dim];
        for a in 0..nb {
            for b in 0..nb {
                let blk = &blocks[(a + nb - b) % nb];
                for i in 0..n {
                    for k in 0..n {
                        data[(a * n + i) * dim + b * n + k] = blk[i * n + k];
                    }
                }
            }
        }
        let basis = AlpertBasis::new(m);
        // rows, then columns
        for r in 0..dim {
            fwt_uniform(&basis, level, &mut data[r * dim..(r + 1) * dim]);
        }
        let mut col = vec![0.0; dim];
        for c in 0..dim {
            for r in 0..dim {
                col[r] = data[r * dim + c];
            }
            fwt_uniform(&basis, level, &mut col);
            for r in 0..dim {
                data[r * dim + c] = col[r];
            }
        }
        for r in 0..dim {
            for c in (r + 1)..dim {
                let v = 0.5 * (data[r * dim + c] + data[c * dim + r]);
                data[r * dim + c] = v;
                data[c * dim + r] = v;
            }
        }
        Ok(KernelMatrix {
            spec: *spec,
            m,
            level,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        wavelet_dim(self.m, self.level)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.dim() + c]
    }

    pub fn to_faer(&self) -> Mat<f64> {
        let d = self.dim();
        Mat::from_fn(d, d, |i, j| self.data[i * d + j])
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        crate::dense::mat_vec(&self.data, x, self.dim(), self.dim())
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Singular values in decreasing order.
    pub fn singular_values(&self) -> Result<Vec<f64>> {
        let ev = self
            .to_faer()
            .self_adjoint_eigenvalues(Side::Lower)
            .map_err(|e| Error::Numerical(format!("eigenvalues failed: {e:?}")))?;
        let mut s: Vec<f64> = ev.iter().map(|v| v.abs()).collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        Ok(s)
    }

    /// Coordinate dump: header `level M gamma`, then `<row> <col> <value>` for nonzero entries.
    pub fn dump(&self, min_abs: f64) -> String {
        let gamma = match self.spec.kind {
            KernelKind::HenyeyGreenstein { gamma } => gamma,
            _ => 0.0,
        };
        let mut s = format!("{} {} {}\n", self.level, self.m, gamma);
        let d = self.dim();
        for r in 0..d {
            for c in 0..d {
                let v = self.data[r * d + c];
                if v.abs() > min_abs {
                    let _ = writeln!(s, "{r} {c} {v:e}");
                }
            }
        }
        s
    }

    /// Measured tail `‖K_L - K_{L-1}‖₂` between this matrix and the next-coarser one.
    pub fn tail_against(&self, coarser: &KernelMatrix) -> Result<f64> {
        if coarser.level + 1 != self.level || coarser.m != self.m {
            return input("tail needs consecutive levels");
        }
        let d = self.dim();
        let dc = coarser.dim();
        let mut diff = Mat::<f64>::zeros(d, d);
        for r in 0..d {
            for c in 0..d {
                let cv = if r < dc && c < dc {
                    coarser.data[r * dc + c]
                } else {
                    0.0
                };
                diff[(r, c)] = self.data[r * d + c] - cv;
            }
        }
        spectral_norm(&diff)
    }
}

/// Largest singular value of a dense matrix.
pub fn spectral_norm(a: &Mat<f64>) -> Result<f64> {
    let s = a
        .singular_values()
        .map_err(|e| Error::Numerical(format!("svd failed: {e:?}")))?;
    Ok(s.iter().cloned().fold(0.0, f64::max))
}

/// Compressed sparse row storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<u32>,
    pub vals: Vec<f64>,
}

impl Csr {
    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.n {
            let mut acc = 0.0;
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[p] * x[self.cols[p] as usize];
            }
            y[r] = acc;
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n * self.n];
        for r in 0..self.n {
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                d[r * self.n + self.cols[p] as usize] = self.vals[p];
            }
        }
        d
    }
}

/// Thresholded kernel matrix with a Frobenius certificate on the dropped part.
#[derive(Clone, Debug)]
pub struct CompressedKernel {
    pub csr: Csr,
    /// Frobenius norm of the dropped entries; bounds the spectral deviation.
    pub certificate: f64,
    pub m: usize,
    pub level: u8,
}

impl CompressedKernel {
    pub fn nnz(&self) -> usize {
        self.csr.nnz()
    }

    pub fn fill_fraction(&self) -> f64 {
        self.nnz() as f64 / (self.csr.n * self.csr.n) as f64
    }
}

/// Drops the smallest entries (in symmetric pairs) while their Frobenius norm
/// stays within `eta`. The root scaling block is always kept.
pub fn compress(matrix: &KernelMatrix, eta: f64) -> Result<CompressedKernel> {
    if !(eta > 0.0) {
        return input(format!("compression tolerance must be positive, got {eta}"));
    }
    let d = matrix.dim();
    let n = matrix.m + 1;
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for r in 0..d {
        for c in r..d {
            if r < n && c < n {
                continue;
            }
            cand.push((matrix.data[r * d + c].abs(), r, c));
        }
    }
    cand.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then((a.1, a.2).cmp(&(b.1, b.2)))
    });
    let budget = eta * eta;
    let mut dropped = 0.0;
    let mut keep = vec![true; d * d];
    for (v, r, c) in cand {
        let w = if r == c { v * v } else { 2.0 * v * v };
        if dropped + w > budget {
            break;
        }
        dropped += w;
        keep[r * d + c] = false;
        keep[c * d + r] = false;
    }
    let mut row_ptr = Vec::with_capacity(d + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    row_ptr.push(0);
    for r in 0..d {
        for c in 0..d {
            if keep[r * d + c] && matrix.data[r * d + c] != 0.0 {
                cols.push(c as u32);
                vals.push(matrix.data[r * d + c]);
            }
        }
        row_ptr.push(vals.len());
    }
    Ok(CompressedKernel {
        csr: Csr {
            n: d,
            row_ptr,
            cols,
            vals,
        },
        certificate: dropped.sqrt(),
        m: matrix.m,
        level: matrix.level,
    })
}

/// Sparse vector in wavelet coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseVec {
    pub idx: Vec<u32>,
    pub val: Vec<f64>,
}

impl SparseVec {
    pub fn dot(&self, x: &[f64]) -> f64 {
        self.idx
            .iter()
            .zip(&self.val)
            .map(|(i, v)| v * x[*i as usize])
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.val.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Truncated eigen/singular expansion `Σ λ_k g_k g_kᵀ`, `σ_k = |λ_k|`.
#[derive(Clone, Debug)]
pub struct LowRankKernel {
    pub dim: usize,
    pub sigma: Vec<f64>,
    pub sign: Vec<f64>,
    pub vecs: Vec<SparseVec>,
    /// First discarded singular value.
    pub tail: f64,
    /// Deviation bound added by thresholding the vectors.
    pub vector_bound: f64,
    pub m: usize,
    pub level: u8,
}

impl LowRankKernel {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// Bound on the spectral deviation from the dense matrix.
    pub fn certificate(&self) -> f64 {
        self.tail + self.vector_bound
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..self.rank() {
            let c = self.sign[k] * self.sigma[k] * self.vecs[k].dot(x);
            if c != 0.0 {
                for (i, v) in self.vecs[k].idx.iter().zip(&self.vecs[k].val) {
                    y[*i as usize] += c * v;
                }
            }
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.dim * self.dim];
        for k in 0..self.rank() {
            let g = &self.vecs[k];
            for (i, vi) in g.idx.iter().zip(&g.val) {
                for (j, vj) in g.idx.iter().zip(&g.val) {
                    d[*i as usize * self.dim + *j as usize] +=
                        self.sign[k] * self.sigma[k] * vi * vj;
                }
            }
        }
        d
    }

    /// Thresholds each vector so that `‖g_k - g_{k,η}‖ ≤ γ_k η / (2σ_k)`.
    pub fn threshold_vectors(&self, eta: f64, weights: &[f64]) -> Result<LowRankKernel> {
        if !(eta > 0.0) {
            return input("threshold tolerance must be positive");
        }
        if weights.len() != self.rank() || weights.iter().any(|w| *w < 0.0) {
            return input("one nonnegative weight per retained vector is required");
        }
        let total: f64 = weights.iter().sum();
        if total > 1.0 + 1e-12 {
            return input(format!("weights sum to {total} > 1"));
        }
        let mut vecs = Vec::with_capacity(self.rank());
        for k in 0..self.rank() {
            let budget = if self.sigma[k] > 0.0 {
                weights[k] * eta / (2.0 * self.sigma[k])
            } else {
                f64::INFINITY
            };
            let g = &self.vecs[k];
            let mut order: Vec<usize> = (0..g.idx.len()).collect();
            order.sort_by(|a, b| {
                g.val[*a]
                    .abs()
                    .partial_cmp(&g.val[*b].abs())
                    .unwrap()
                    .then(g.idx[*a].cmp(&g.idx[*b]))
            });
            let mut dropped = 0.0;
            let mut keep = vec![true; g.idx.len()];
            for p in order {
                let w = g.val[p] * g.val[p];
                if dropped + w > budget * budget {
                    break;
                }
                dropped += w;
                keep[p] = false;
            }
            let (idx, val) = g
                .idx
                .iter()
                .zip(&g.val)
                .zip(&keep)
                .filter(|(_, k)| **k)
                .map(|((i, v), _)| (*i, *v))
                .unzip();
            vecs.push(SparseVec { idx, val });
        }
        Ok(LowRankKernel {
            dim: self.dim,
            sigma: self.sigma.clone(),
            sign: self.sign.clone(),
            vecs,
            tail: self.tail,
            vector_bound: self.vector_bound + total * eta,
            m: self.m,
            level: self.level,
        })
    }
}

/// Symmetric eigendecomposition, keeping terms with `|λ_k| > τ`.
pub fn factorize(matrix: &KernelMatrix, tau: f64) -> Result<LowRankKernel> {
    if !(tau >= 0.0) {
        return input("cutoff must be nonnegative");
    }
    let d = matrix.dim();
    let eig = matrix
        .to_faer()
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Numerical(format!("eigendecomposition failed: {e:?}")))?;
    let vals: Vec<f64> = (0..d).map(|k| eig.S()[k]).collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|a, b| {
        vals[*b]
            .abs()
            .partial_cmp(&vals[*a].abs())
            .unwrap()
            .then(a.cmp(b))
    });
    let u = eig.U();
    let mut sigma = Vec::new();
    let mut sign = Vec::new();
    let mut vecs = Vec::new();
    let mut tail = 0.0;
    for &k in &order {
        let s = vals[k].abs();
        if s <= tau {
            tail = s;
            break;
        }
        sigma.push(s);
        sign.push(if vals[k] < 0.0 { -1.0 } else { 1.0 });
        vecs.push(SparseVec {
            idx: (0..d as u32).collect(),
            val: (0..d).map(|i| u[(i, k)]).collect(),
        });
    }
    Ok(LowRankKernel {
        dim: d,
        sigma,
        sign,
        vecs,
        tail,
        vector_bound: 0.0,
        m: matrix.m,
        level: matrix.level,
    })
}

/// Which approximate operator realizes `K₀`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    Auto,
    Compressed,
    LowRank,
}

/// An approximation of the wavelet matrix with a certified spectral deviation.
#[derive(Clone, Debug)]
pub enum ScatterOperator {
    Compressed(CompressedKernel),
    LowRank(LowRankKernel),
}

impl ScatterOperator {
    pub fn certificate(&self) -> f64 {
        match self {
            ScatterOperator::Compressed(c) => c.certificate,
            ScatterOperator::LowRank(l) => l.certificate(),
        }
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        match self {
            ScatterOperator::Compressed(c) => c.csr.apply(x, y),
            ScatterOperator::LowRank(l) => l.apply(x, y),
        }
    }

    pub fn m(&self) -> usize {
        match self {
            ScatterOperator::Compressed(c) => c.m,
            ScatterOperator::LowRank(l) => l.m,
        }
    }

    pub fn level(&self) -> u8 {
        match self {
            ScatterOperator::Compressed(c) => c.level,
            ScatterOperator::LowRank(l) => l.level,
        }
    }
}

/// Holds the assembled matrix and its exact eigendecomposition, and builds
/// operators for requested accuracies.
#[derive(Clone, Debug)]
pub struct Scatterer {
    pub matrix: KernelMatrix,
    pub basis: AlpertBasis,
    pub route: Route,
    /// Bound on the distance between `K₀` and its level-`L` Galerkin matrix
    /// acting on arbitrary inputs.
    pub floor: f64,
    full: LowRankKernel,
}

impl Scatterer {
    pub fn new(spec: &KernelSpec, m: usize, level: u8, route: Route) -> Result<Scatterer> {
        let matrix = KernelMatrix::assemble(spec, m, level)?;
        let full = factorize(&matrix, 0.0)?;
        // two-sided Galerkin truncation plus an allowance for assembly quadrature
        let floor = 2.0 * spec.truncation_floor(m, level) + 1e-11 * matrix.dim() as f64;
        Ok(Scatterer {
            basis: AlpertBasis::new(m),
            matrix,
            route,
            floor,
            full,
        })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.matrix.spec
    }

    pub fn m(&self) -> usize {
        self.matrix.m
    }

    pub fn level(&self) -> u8 {
        self.matrix.level
    }

    /// Low-rank operator with deviation at most `delta` from the matrix.
    pub fn low_rank(&self, delta: f64) -> Result<LowRankKernel> {
        let r = self
            .full
            .sigma
            .iter()
            .position(|s| *s <= 0.5 * delta)
            .unwrap_or(self.full.rank());
        let tail = self.full.sigma.get(r).copied().unwrap_or(0.0);
        let lr = LowRankKernel {
            dim: self.full.dim,
            sigma: self.full.sigma[..r].to_vec(),
            sign: self.full.sign[..r].to_vec(),
            vecs: self.full.vecs[..r].to_vec(),
            tail,
            vector_bound: 0.0,
            m: self.m(),
            level: self.level(),
        };
        if r == 0 {
            return Ok(lr);
        }
        // weights ∝ √σ_k keep the budget on the dominant, smooth vectors small
        let roots: Vec<f64> = lr.sigma.iter().map(|s| s.sqrt()).collect();
        let total: f64 = roots.iter().sum();
        let weights: Vec<f64> = roots.iter().map(|s| s / total).collect();
        lr.threshold_vectors((delta - tail).max(0.0) * (1.0 - 1e-12), &weights)
    }

    /// Operator realizing the matrix within `delta` in spectral norm.
    pub fn operator(&self, delta: f64) -> Result<ScatterOperator> {
        if !(delta > 0.0) {
            return input("operator accuracy must be positive");
        }
        let use_low_rank = match self.route {
            Route::LowRank => true,
            Route::Compressed => false,
            Route::Auto => {
                let r = self
                    .full
                    .sigma
                    .iter()
                    .position(|s| *s <= 0.5 * delta)
                    .unwrap_or(self.full.rank());
                r <= 2 * (self.level() as usize + 1)
            }
        };
        if use_low_rank {
            Ok(ScatterOperator::LowRank(self.low_rank(delta)?))
        } else {
            Ok(ScatterOperator::Compressed(compress(&self.matrix, delta)?))
        }
    }

    /// Wavelet coordinates (level-`L` layout) of a scaling-form field. Arcs deeper
    /// than `L` are first projected onto their level-`L` ancestors.
    pub fn to_wavelet(&self, v: &AngularField) -> Result<Vec<f64>> {
        if v.repr != Repr::Scaling {
            return input("expected scaling representation");
        }
        let n = self.m() + 1;
        let mut out = vec![0.0; self.matrix.dim()];
        for (li, arc) in v.partition.leaves().iter().enumerate() {
            self.add_scaling(arc, &v.coeffs[li * n..(li + 1) * n], &mut out);
        }
        Ok(out)
    }

    /// Accumulates the wavelet expansion of `c` (scaling coefficients on `arc`).
    fn add_scaling(&self, arc: &Arc, c: &[f64], out: &mut [f64]) {
        let n = self.m() + 1;
        let mut s = c.to_vec();
        let mut a = *arc;
        let mut x = vec![0.0; 2 * n];
        let mut d = vec![0.0; n];
        let mut ps = vec![0.0; n];
        while let Some(p) = a.parent() {
            x.iter_mut().for_each(|v| *v = 0.0);
            let off = (a.k % 2) as usize * n;
            x[off..off + n].copy_from_slice(&s);
            self.basis.analyze(&x, &mut ps, &mut d);
            if p.level < self.level() {
                for r in 0..n {
                    out[p.heap() * n + r] += d[r];
                }
            }
            s.copy_from_slice(&ps);
            a = p;
        }
        for r in 0..n {
            out[r] += s[r];
        }
    }

    /// `K₀ v` within `eta` (plus nothing else: the truncation floor is included).
    pub fn apply_k0(&self, v: &AngularField, eta: f64) -> Result<AngularField> {
        let nv = v.norm();
        if nv == 0.0 {
            return Ok(AngularField::zeros(AngularPartition::root(), self.m()));
        }
        let delta = eta / nv - self.floor;
        if delta <= 0.0 {
            return input(format!(
                "tolerance {eta:e} below the level-{} floor; assemble at a larger level",
                self.level()
            ));
        }
        let op = self.operator(delta)?;
        let x = self.to_wavelet(v)?;
        let mut y = vec![0.0; x.len()];
        op.apply(&x, &mut y);
        self.from_wavelet_support(&y)
    }

    /// Scaling-form field on the smallest partition carrying the nonzero blocks of `y`.
    pub fn from_wavelet_support(&self, y: &[f64]) -> Result<AngularField> {
        let n = self.m() + 1;
        let nblocks = y.len() / n;
        let heaps = (1..nblocks).filter(|b| y[b * n..(b + 1) * n].iter().any(|v| *v != 0.0));
        let partition = AngularPartition::from_internal(heaps);
        self.from_wavelet_on(y, &partition)
    }

    pub fn from_wavelet_on(&self, y: &[f64], partition: &AngularPartition) -> Result<AngularField> {
        let n = self.m() + 1;
        let internal = partition.internal_nodes();
        let mut coeffs = Vec::with_capacity(n * (internal.len() + 1));
        coeffs.extend_from_slice(&y[..n]);
        for a in &internal {
            if a.level >= self.level() {
                coeffs.extend(std::iter::repeat_n(0.0, n));
            } else {
                coeffs.extend_from_slice(&y[a.heap() * n..(a.heap() + 1) * n]);
            }
        }
        AngularField {
            partition: partition.clone(),
            m: self.m(),
            repr: Repr::Wavelet,
            coeffs,
        }
        .ifwt(&self.basis)
    }
}

/// A linear map between scaling coefficients of two partitions realizing `κK₀`
/// within `certificate` (relative to the input norm).
#[derive(Clone, Debug)]
pub struct AngularOperator {
    pub input: AngularPartition,
    pub output: AngularPartition,
    pub m: usize,
    /// Row-major `n_in × n_out`: row `j` is the image of input basis function `j`.
    pub matrix: Vec<f64>,
    pub certificate: f64,
}

impl AngularOperator {
    pub fn n_in(&self) -> usize {
        (self.m + 1) * self.input.len()
    }

    pub fn n_out(&self) -> usize {
        (self.m + 1) * self.output.len()
    }

    /// Images of the input basis functions evaluated at `theta`, times `κ`.
    pub fn images_at(&self, theta: f64, kappa: f64) -> Vec<f64> {
        let n = self.m + 1;
        let leaf = self.output.locate(theta);
        let arc = self.output.leaves()[leaf];
        let mut psi = vec![0.0; n];
        scaling_values(self.m, arc.len(), arc.local(theta), &mut psi);
        let no = self.n_out();
        (0..self.n_in())
            .map(|j| {
                kappa
                    * (0..n)
                        .map(|i| self.matrix[j * no + leaf * n + i] * psi[i])
                        .sum::<f64>()
            })
            .collect()
    }
}

impl Scatterer {
    /// Restricted operator from scaling functions on `input` to the output
    /// partition generated by the approximate operator's support.
    pub fn restricted(&self, partition: &AngularPartition, delta: f64) -> Result<AngularOperator> {
        let kappa = self.spec().kappa;
        let n = self.m() + 1;
        let op_delta = delta - self.floor;
        if op_delta <= 0.0 {
            return input(format!(
                "relative accuracy {delta:e} below the level-{} floor",
                self.level()
            ));
        }
        let op = self.operator(op_delta)?;
        let dim = self.matrix.dim();
        let n_in = n * partition.len();
        let mut images = Vec::with_capacity(n_in);
        let mut support = vec![false; dim / n];
        let mut x = vec![0.0; dim];
        for arc in partition.leaves() {
            for i in 0..n {
                x.iter_mut().for_each(|v| *v = 0.0);
                let mut c = vec![0.0; n];
                c[i] = 1.0;
                self.add_scaling(arc, &c, &mut x);
                let mut y = vec![0.0; dim];
                op.apply(&x, &mut y);
                for (b, s) in support.iter_mut().enumerate() {
                    if y[b * n..(b + 1) * n].iter().any(|v| *v != 0.0) {
                        *s = true;
                    }
                }
                images.push(y);
            }
        }
        let output = AngularPartition::from_internal((1..support.len()).filter(|b| support[*b]));
        let n_out = n * output.len();
        let mut matrix = vec![0.0; n_in * n_out];
        for (j, y) in images.iter().enumerate() {
            let f = self.from_wavelet_on(y, &output)?;
            matrix[j * n_out..(j + 1) * n_out].copy_from_slice(&f.coeffs);
        }
        Ok(AngularOperator {
            input: partition.clone(),
            output,
            m: self.m(),
            matrix: matrix.iter().map(|v| v * kappa).collect(),
            certificate: kappa * (op.certificate() + self.floor),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        let k = KernelSpec::henyey_greenstein(0.5).unwrap();
        assert!((k.eval(1.0, 1.0).unwrap() - 3.0 / TWO_PI).abs() < 1e-14);
        assert!((k.eval(PI, 0.0).unwrap() - 1.0 / (6.0 * PI)).abs() < 1e-14);
        let k0 = KernelSpec::henyey_greenstein(0.0).unwrap();
        assert!((k0.eval(0.3, 2.0).unwrap() - 1.0 / TWO_PI).abs() < 1e-15);
        assert!(KernelSpec::henyey_greenstein(1.0).is_err());
    }

    #[test]
    fn kernels_are_normalized() {
        for spec in [
            KernelSpec::henyey_greenstein(0.9).unwrap(),
            KernelSpec::isotropic(),
            KernelSpec::rayleigh(),
        ] {
            let v = crate::quad::adaptive(|t| spec.density(t), -PI, PI, 1e-13);
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn uniform_transform_roundtrip_and_matches_tree_version() {
        let basis = AlpertBasis::new(2);
        let part = AngularPartition::uniform(4);
        let f = AngularField::project(part, 2, 4, |t| (3.0 * t).sin() + t);
        let mut x = f.coeffs.clone();
        fwt_uniform(&basis, 4, &mut x);
        let w = f.fwt(&basis).unwrap();
        assert!(x.iter().zip(&w.coeffs).all(|(a, b)| (a - b).abs() < 1e-12));
        ifwt_uniform(&basis, 4, &mut x);
        assert!(x.iter().zip(&f.coeffs).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn isotropic_matrix_is_rank_one() {
        let k = KernelMatrix::assemble(&KernelSpec::henyey_greenstein(0.0).unwrap(), 1, 3).unwrap();
        assert!((k.get(0, 0) - 1.0).abs() < 1e-12);
        let d = k.dim();
        for r in 0..d {
            for c in 0..d {
                if (r, c) != (0, 0) {
                    assert!(k.get(r, c).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn compression_extremes() {
        let k = KernelMatrix::assemble(&KernelSpec::henyey_greenstein(0.5).unwrap(), 1, 3).unwrap();
        let all = compress(&k, k.frobenius() * 2.0).unwrap();
        assert!(all.csr.cols.iter().all(|c| *c < 2));
        let none = compress(&k, 1e-15).unwrap();
        let dense = none.csr.to_dense();
        let dev: f64 = dense
            .iter()
            .zip(&k.data)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dev <= 1e-15);
        assert!(compress(&k, 0.0).is_err());
    }

    #[test]
    fn low_rank_of_isotropic_is_rank_one() {
        let k = KernelMatrix::assemble(&KernelSpec::isotropic(), 2, 3).unwrap();
        let lr = factorize(&k, 1e-8).unwrap();
        assert_eq!(lr.rank(), 1);
        assert!((lr.sigma[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn full_rank_reconstruction() {
        let k = KernelMatrix::assemble(&KernelSpec::henyey_greenstein(0.3).unwrap(), 1, 3).unwrap();
        let lr = factorize(&k, 0.0).unwrap();
        let d = lr.to_dense();
        assert!(d.iter().zip(&k.data).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn threshold_weights_are_checked() {
        let k = KernelMatrix::assemble(&KernelSpec::henyey_greenstein(0.5).unwrap(), 1, 3).unwrap();
        let lr = factorize(&k, 1e-3).unwrap();
        let too_big = vec![1.0; lr.rank()];
        assert!(lr.threshold_vectors(1e-2, &too_big).is_err());
        let tiny = vec![1.0 / lr.rank() as f64; lr.rank()];
        let same = lr.threshold_vectors(1e-14, &tiny).unwrap();
        let dev: f64 = same
            .to_dense()
            .iter()
            .zip(&lr.to_dense())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev < 1e-13);
    }

    #[test]
    fn apply_constant_returns_constant() {
        let sc = Scatterer::new(
            &KernelSpec::henyey_greenstein(0.5).unwrap(),
            2,
            5,
            Route::Compressed,
        )
        .unwrap();
        let v = AngularField::project(AngularPartition::uniform(3), 2, 3, |_| 1.0);
        assert!(sc.apply_k0(&v, 1e-8 * v.norm()).is_err());
        let out = sc.apply_k0(&v, 1e-2 * v.norm()).unwrap();
        for th in [0.2, 1.7, 4.4] {
            assert!((out.eval(th).unwrap() - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn truncation_floor_decreases_with_level() {
        let s = KernelSpec::henyey_greenstein(0.5).unwrap();
        let f6 = s.truncation_floor(2, 6);
        let f8 = s.truncation_floor(2, 8);
        assert!(f8 < f6 && f8 < 1e-5);
        assert_eq!(KernelSpec::isotropic().truncation_floor(2, 3), 0.0);
    }
}
