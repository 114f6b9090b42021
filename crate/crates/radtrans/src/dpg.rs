//! Discontinuous Petrov–Galerkin solver for the transport equation with one
//! frozen direction `s`:  `s·∇u + σu = F` in the domain, `u = g` on the inflow boundary.
//!
//! Trial pair `(u, w)`: broken tensor polynomials of degree `m-1` (orthonormal
//! Legendre, physical L2) and a continuous degree-`m` Lagrange field whose
//! boundary values act as the interface trace. Test search space: broken degree
//! `m+1` on the cell or on `4^depth` subcells, with the graph norm
//! `‖v‖² + ‖s·∇v‖²`. The discrete problem minimizes the lifted residual, which
//! gives a symmetric positive definite system; cell unknowns other than trace
//! values on cell edges are condensed out before the global solve.

use std::collections::hash_map::Entry;
use std::fmt::Write as _;
use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side as FaerSide};
use rustc_hash::FxHashMap;

use crate::dense;
use crate::error::{input, Error, Result};
use crate::grid::GridField;
use crate::mesh::{
    dorfler_mark, Cell, CellIndicatorMap, Domain, Side, SpatialMesh, CHARACTERISTIC_TOL,
};
use crate::quad::{lagrange_equispaced, legendre_unit, legendre_unit_d, Rule};

/// Finest level representable by trace-node keys.
pub const KEY_LEVEL: u8 = 30;

/// A right-hand side term that can be projected onto cell polynomials.
pub trait SpatialLoad: Send + Sync {
    /// Coefficients of the L2 projection onto degree-`deg` tensor polynomials on
    /// `cell` (physically orthonormal Legendre basis, index `b*(deg+1)+a`) and the
    /// oscillation `‖F - ΠF‖_cell`.
    fn project(&self, domain: &Domain, cell: &Cell, deg: usize) -> (Vec<f64>, f64);
    fn eval(&self, p: [f64; 2]) -> f64;
}

impl SpatialLoad for GridField {
    fn project(&self, domain: &Domain, cell: &Cell, deg: usize) -> (Vec<f64>, f64) {
        let bx = domain.cell_box(cell);
        if let Some(v) = self.constant_on(bx) {
            let mut c = vec![0.0; (deg + 1) * (deg + 1)];
            c[0] = v * ((bx[2] - bx[0]) * (bx[3] - bx[1])).sqrt();
            return (c, 0.0);
        }
        let (c, sq) = GridField::project(self, bx, deg);
        let e: f64 = c.iter().map(|v| v * v).sum();
        (c, (sq - e).max(0.0).sqrt())
    }

    fn eval(&self, p: [f64; 2]) -> f64 {
        GridField::eval(self, p)
    }
}

/// A smooth load given by a closure, projected by tensor Gauss quadrature.
pub struct FnLoad<F>(pub F);

impl<F: Fn([f64; 2]) -> f64 + Send + Sync> SpatialLoad for FnLoad<F> {
    fn project(&self, domain: &Domain, cell: &Cell, deg: usize) -> (Vec<f64>, f64) {
        let bx = domain.cell_box(cell);
        let n = deg + 1;
        let rule = Rule::gauss_on(deg + 6, 0.0, 1.0);
        let (w, h) = (bx[2] - bx[0], bx[3] - bx[1]);
        let mut c = vec![0.0; n * n];
        let mut sq = 0.0;
        let mut px = vec![0.0; n];
        let mut py = vec![0.0; n];
        for (y, wy) in rule.x.iter().zip(&rule.w) {
            legendre_unit(deg, *y, &mut py);
            for (x, wx) in rule.x.iter().zip(&rule.w) {
                legendre_unit(deg, *x, &mut px);
                let f = (self.0)([bx[0] + w * x, bx[1] + h * y]);
                sq += wx * wy * f * f;
                for b in 0..n {
                    for a in 0..n {
                        c[b * n + a] += wx * wy * f * px[a] * py[b];
                    }
                }
            }
        }
        let area = w * h;
        sq *= area;
        c.iter_mut().for_each(|v| *v *= area.sqrt());
        let e: f64 = c.iter().map(|v| v * v).sum();
        (c, (sq - e).max(0.0).sqrt())
    }

    fn eval(&self, p: [f64; 2]) -> f64 {
        (self.0)(p)
    }
}

/// Linear combination of loads.
#[derive(Clone, Default)]
pub struct FiberRhs<'a> {
    pub terms: Vec<(f64, &'a dyn SpatialLoad)>,
}

impl<'a> FiberRhs<'a> {
    pub fn new() -> Self {
        FiberRhs { terms: Vec::new() }
    }

    pub fn with(mut self, coef: f64, load: &'a dyn SpatialLoad) -> Self {
        if coef != 0.0 {
            self.terms.push((coef, load));
        }
        self
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Projection coefficients and an oscillation bound (triangle inequality over terms).
    pub fn project(&self, domain: &Domain, cell: &Cell, deg: usize) -> (Vec<f64>, f64) {
        let mut c = vec![0.0; (deg + 1) * (deg + 1)];
        let mut osc = 0.0;
        for (k, load) in &self.terms {
            let (ck, ok) = load.project(domain, cell, deg);
            for (a, b) in c.iter_mut().zip(&ck) {
                *a += k * b;
            }
            osc += k.abs() * ok;
        }
        (c, osc)
    }

    pub fn eval(&self, p: [f64; 2]) -> f64 {
        self.terms.iter().map(|(k, l)| k * l.eval(p)).sum()
    }
}

/// Inflow boundary values.
pub type InflowData<'a> = Option<&'a (dyn Fn([f64; 2]) -> f64 + Sync)>;

/// One transport problem with frozen direction.
#[derive(Clone)]
pub struct FiberProblem<'a> {
    pub sigma: &'a GridField,
    pub direction: [f64; 2],
    pub rhs: FiberRhs<'a>,
    pub inflow: InflowData<'a>,
}

impl<'a> FiberProblem<'a> {
    pub fn new(sigma: &'a GridField, theta: f64, rhs: FiberRhs<'a>) -> Self {
        FiberProblem {
            sigma,
            direction: [theta.cos(), theta.sin()],
            rhs,
            inflow: None,
        }
    }
}

/// Solver parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DpgConfig {
    /// Trace degree; the bulk field has degree `m-1`.
    pub m: usize,
    pub subgrid_depth: u8,
    /// Assumed ratio between true L2 error and the computed residual.
    pub c_rel: f64,
    pub bulk_fraction: f64,
    pub max_level: u8,
    pub max_cycles: usize,
    /// Weight of `‖u - w‖²` added to fix trace values the residual does not see.
    pub mu: f64,
}

impl Default for DpgConfig {
    fn default() -> Self {
        DpgConfig {
            m: 2,
            subgrid_depth: 0,
            c_rel: 2.0,
            bulk_fraction: 0.5,
            max_level: 14,
            max_cycles: 80,
            mu: 1e-6,
        }
    }
}

/// Reference-cell matrices shared by all cells.
#[derive(Clone, Debug)]
pub struct Reference {
    pub m: usize,
    pub depth: u8,
    pub nu: usize,
    pub nw: usize,
    pub nq: usize,
    pub nsub: usize,
    pub nt: usize,
    dxx: Vec<f64>,
    dxy: Vec<f64>,
    dyy: Vec<f64>,
    cx: Vec<f64>,
    cy: Vec<f64>,
    sel: Vec<f64>,
    tx: Vec<f64>,
    ty: Vec<f64>,
    muw: Vec<f64>,
    mww: Vec<f64>,
    /// Local trace nodes on the cell boundary, then interior ones.
    pub edge_nodes: Vec<usize>,
    pub interior_nodes: Vec<usize>,
}

impl Reference {
    pub fn new(m: usize, depth: u8) -> Result<Reference> {
        if m < 1 {
            return input("trace degree must be at least 1");
        }
        if depth > 3 {
            return input("subgrid depth above 3 is not supported");
        }
        let nu = m * m;
        let nw = (m + 1) * (m + 1);
        let qd = m + 1;
        let nq = (qd + 1) * (qd + 1);
        let ns1 = 1usize << depth;
        let nsub = ns1 * ns1;
        let nt = nq * nsub;
        let scale = ns1 as f64;
        let rule = Rule::gauss_on(m + 3, 0.0, 1.0);

        let mut dxx = vec![0.0; nq * nq];
        let mut dxy = vec![0.0; nq * nq];
        let mut dyy = vec![0.0; nq * nq];
        let mut cx = vec![0.0; nt * nu];
        let mut cy = vec![0.0; nt * nu];
        let mut sel = vec![0.0; nt * nu];
        let mut tx = vec![0.0; nt * nw];
        let mut ty = vec![0.0; nt * nw];
        let mut muw = vec![0.0; nu * nw];
        let mut mww = vec![0.0; nw * nw];

        let mut qa = vec![0.0; qd + 1];
        let mut qda = vec![0.0; qd + 1];
        let mut qb = vec![0.0; qd + 1];
        let mut qdb = vec![0.0; qd + 1];
        let mut pa = vec![0.0; m];
        let mut pb = vec![0.0; m];
        let mut la = vec![0.0; m + 1];
        let mut lda = vec![0.0; m + 1];
        let mut lb = vec![0.0; m + 1];
        let mut ldb = vec![0.0; m + 1];
        let mut q = vec![0.0; nq];
        let mut qx = vec![0.0; nq];
        let mut qy = vec![0.0; nq];
        let mut p = vec![0.0; nu];
        let mut l = vec![0.0; nw];
        let mut lx = vec![0.0; nw];
        let mut ly = vec![0.0; nw];

        for sy in 0..ns1 {
            for sx in 0..ns1 {
                let sub = sy * ns1 + sx;
                for (zy, wy) in rule.x.iter().zip(&rule.w) {
                    for (zx, wx) in rule.x.iter().zip(&rule.w) {
                        let w = wx * wy / (scale * scale);
                        let (xi, eta) = ((sx as f64 + zx) / scale, (sy as f64 + zy) / scale);
                        legendre_unit_d(qd, *zx, &mut qa, &mut qda);
                        legendre_unit_d(qd, *zy, &mut qb, &mut qdb);
                        for b in 0..=qd {
                            for a in 0..=qd {
                                let k = b * (qd + 1) + a;
                                q[k] = qa[a] * qb[b];
                                qx[k] = scale * qda[a] * qb[b];
                                qy[k] = scale * qa[a] * qdb[b];
                            }
                        }
                        if m > 1 {
                            legendre_unit(m - 1, xi, &mut pa);
                            legendre_unit(m - 1, eta, &mut pb);
                        } else {
                            pa[0] = 1.0;
                            pb[0] = 1.0;
                        }
                        for b in 0..m {
                            for a in 0..m {
                                p[b * m + a] = pa[a] * pb[b];
                            }
                        }
                        lagrange_equispaced(m, xi, &mut la, &mut lda);
                        lagrange_equispaced(m, eta, &mut lb, &mut ldb);
                        for b in 0..=m {
                            for a in 0..=m {
                                let j = b * (m + 1) + a;
                                l[j] = la[a] * lb[b];
                                lx[j] = lda[a] * lb[b];
                                ly[j] = la[a] * ldb[b];
                            }
                        }
                        if sub == 0 {
                            // derivative blocks in subcell-reference coordinates, same for all subcells
                            let ws = wx * wy;
                            for k in 0..nq {
                                let (ax, ay) = (qx[k] / scale, qy[k] / scale);
                                for k2 in 0..nq {
                                    let (bx, by) = (qx[k2] / scale, qy[k2] / scale);
                                    dxx[k * nq + k2] += ws * ax * bx;
                                    dyy[k * nq + k2] += ws * ay * by;
                                    dxy[k * nq + k2] += 0.5 * ws * (ax * by + ay * bx);
                                }
                            }
                        }
                        for k in 0..nq {
                            let row = sub * nq + k;
                            for j in 0..nu {
                                sel[row * nu + j] += w * p[j] * q[k];
                                cx[row * nu + j] += w * p[j] * qx[k];
                                cy[row * nu + j] += w * p[j] * qy[k];
                            }
                            for j in 0..nw {
                                tx[row * nw + j] += w * (lx[j] * q[k] + l[j] * qx[k]);
                                ty[row * nw + j] += w * (ly[j] * q[k] + l[j] * qy[k]);
                            }
                        }
                        for i in 0..nu {
                            for j in 0..nw {
                                muw[i * nw + j] += w * p[i] * l[j];
                            }
                        }
                        for i in 0..nw {
                            for j in 0..nw {
                                mww[i * nw + j] += w * l[i] * l[j];
                            }
                        }
                    }
                }
            }
        }
        let (mut edge_nodes, mut interior_nodes) = (Vec::new(), Vec::new());
        for b in 0..=m {
            for a in 0..=m {
                let j = b * (m + 1) + a;
                if a == 0 || a == m || b == 0 || b == m {
                    edge_nodes.push(j);
                } else {
                    interior_nodes.push(j);
                }
            }
        }
        Ok(Reference {
            m,
            depth,
            nu,
            nw,
            nq,
            nsub,
            nt,
            dxx,
            dxy,
            dyy,
            cx,
            cy,
            sel,
            tx,
            ty,
            muw,
            mww,
            edge_nodes,
            interior_nodes,
        })
    }

    /// Lower Cholesky factor of one subcell block of the test Gram matrix.
    fn gram_factor(&self, h: f64, s: [f64; 2]) -> Result<Vec<f64>> {
        let mut g = self.gram_block(h, s);
        if !dense::cholesky(&mut g, self.nq) {
            return Err(Error::Numerical(format!(
                "test Gram matrix not positive definite (h = {h:e})"
            )));
        }
        Ok(g)
    }

    fn gram_block(&self, h: f64, s: [f64; 2]) -> Vec<f64> {
        let hs = h / (1u64 << self.depth) as f64;
        let nq = self.nq;
        let mut g = vec![0.0; nq * nq];
        for k in 0..nq * nq {
            g[k] = s[0] * s[0] * self.dxx[k]
                + 2.0 * s[0] * s[1] * self.dxy[k]
                + s[1] * s[1] * self.dyy[k];
        }
        for k in 0..nq {
            g[k * nq + k] += hs * hs;
        }
        g
    }

    /// Full test Gram matrix `(v,w) + (s·∇v, s·∇w)` on a cell of width `h`.
    pub fn local_gram(&self, h: f64, s: [f64; 2]) -> Vec<f64> {
        let blk = self.gram_block(h, s);
        let nt = self.nt;
        let mut g = vec![0.0; nt * nt];
        for c in 0..self.nsub {
            for i in 0..self.nq {
                for j in 0..self.nq {
                    g[(c * self.nq + i) * nt + c * self.nq + j] = blk[i * self.nq + j];
                }
            }
        }
        g
    }

    /// `∫ σ P_j q_k dξ` for a cell where σ varies.
    fn sigma_mass(&self, sigma: &GridField, bx: [f64; 4]) -> Vec<f64> {
        let (m, nq, nu) = (self.m, self.nq, self.nu);
        let qd = m + 1;
        let ns1 = 1usize << self.depth;
        let scale = ns1 as f64;
        let (w, h) = (bx[2] - bx[0], bx[3] - bx[1]);
        let mut out = vec![0.0; self.nt * nu];
        let mut qa = vec![0.0; qd + 1];
        let mut qb = vec![0.0; qd + 1];
        let mut pa = vec![0.0; m];
        let mut pb = vec![0.0; m];
        for sy in 0..ns1 {
            for sx in 0..ns1 {
                let sub = sy * ns1 + sx;
                let sb = [
                    bx[0] + w * sx as f64 / scale,
                    bx[1] + h * sy as f64 / scale,
                    bx[0] + w * (sx + 1) as f64 / scale,
                    bx[1] + h * (sy + 1) as f64 / scale,
                ];
                for (pbx, sv) in sigma.pieces(sb) {
                    if sv == 0.0 {
                        continue;
                    }
                    let rx = Rule::gauss_on(m + 1, (pbx[0] - bx[0]) / w, (pbx[2] - bx[0]) / w);
                    let ry = Rule::gauss_on(m + 1, (pbx[1] - bx[1]) / h, (pbx[3] - bx[1]) / h);
                    for (eta, wy) in ry.x.iter().zip(&ry.w) {
                        for (xi, wx) in rx.x.iter().zip(&rx.w) {
                            legendre_unit(qd, xi * scale - sx as f64, &mut qa);
                            legendre_unit(qd, eta * scale - sy as f64, &mut qb);
                            if m > 1 {
                                legendre_unit(m - 1, *xi, &mut pa);
                                legendre_unit(m - 1, *eta, &mut pb);
                            } else {
                                pa[0] = 1.0;
                                pb[0] = 1.0;
                            }
                            for b in 0..=qd {
                                for a in 0..=qd {
                                    let row = sub * nq + b * (qd + 1) + a;
                                    let qv = sv * wx * wy * qa[a] * qb[b];
                                    for jb in 0..m {
                                        for ja in 0..m {
                                            out[row * nu + jb * m + ja] += qv * pa[ja] * pb[jb];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Condensed per-cell operator.
struct LocalOp {
    /// `L⁻¹B`, `nt × (nu+nw)` row-major.
    x: Vec<f64>,
    chol_ii: Vec<f64>,
    /// `A_ii⁻¹ A_ie`.
    y: Vec<f64>,
    /// Schur complement on edge trace nodes.
    s: Vec<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum LocalKey {
    Uniform(u8, u64),
    Cell(Cell),
}

type Resolved = (Vec<(usize, f64)>, f64);

/// Per-direction solver state reused across adaptive cycles.
pub struct FiberSolver<'a> {
    reference: &'a Reference,
    cfg: &'a DpgConfig,
    problem: &'a FiberProblem<'a>,
    domain: Domain,
    factors: FxHashMap<u8, Vec<f64>>,
    ops: FxHashMap<LocalKey, Arc<LocalOp>>,
    loads: FxHashMap<Cell, Arc<CellLoad>>,
}

/// Output of one fiber solve.
#[derive(Clone, Debug)]
pub struct DpgSolution {
    pub mesh: Arc<SpatialMesh>,
    pub m: usize,
    pub direction: [f64; 2],
    /// Bulk coefficients, `m²` per cell (physical-orthonormal Legendre).
    pub u: Vec<f64>,
    /// Trace nodal values, `(m+1)²` per cell.
    pub w: Vec<f64>,
    pub indicators: CellIndicatorMap,
    /// `(Σ η_T²)^{1/2}`.
    pub residual: f64,
    /// Global trace unknowns plus bulk coefficients.
    pub dofs: usize,
    pub cycles: usize,
    /// History of total residuals across adaptive cycles.
    pub history: Vec<f64>,
}

/// Assembled global system on free trace nodes.
pub struct DpgSystem {
    pub n: usize,
    /// Both triangles, duplicates merged, sorted by (col, row).
    pub entries: Vec<(usize, usize, f64)>,
    pub rhs: Vec<f64>,
}

impl DpgSystem {
    /// `max|A - Aᵀ| / max|A|`.
    pub fn symmetry_defect(&self) -> f64 {
        let map: FxHashMap<(usize, usize), f64> = self
            .entries
            .iter()
            .map(|(r, c, v)| ((*r, *c), *v))
            .collect();
        let scale = self
            .entries
            .iter()
            .map(|e| e.2.abs())
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        self.entries
            .iter()
            .map(|(r, c, v)| (v - map.get(&(*c, *r)).copied().unwrap_or(0.0)).abs())
            .fold(0.0, f64::max)
            / scale
    }

    /// Copy holding only the lower triangle, which is all the factorization reads.
    pub fn lower(&self) -> DpgSystem {
        DpgSystem {
            n: self.n,
            entries: self
                .entries
                .iter()
                .filter(|e| e.0 >= e.1)
                .copied()
                .collect(),
            rhs: self.rhs.clone(),
        }
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>> {
        let trip: Vec<Triplet<usize, usize, f64>> = self
            .entries
            .iter()
            .map(|(r, c, v)| Triplet::new(*r, *c, *v))
            .collect();
        SparseColMat::try_new_from_triplets(self.n, self.n, &trip)
            .map_err(|e| Error::Numerical(format!("sparse assembly failed: {e:?}")))
    }

    /// Sparse Cholesky solve; fails if the matrix is not positive definite.
    pub fn solve(&self) -> Result<Vec<f64>> {
        if self.n == 0 {
            return Ok(Vec::new());
        }
        let a = self.to_faer()?;
        let llt = a
            .sp_cholesky(FaerSide::Lower)
            .map_err(|e| Error::Numerical(format!("sparse Cholesky failed: {e:?}")))?;
        let b = Mat::from_fn(self.n, 1, |i, _| self.rhs[i]);
        let x = llt.solve(&b);
        Ok((0..self.n).map(|i| x[(i, 0)]).collect())
    }

    /// `‖Ax - b‖ / ‖b‖`.
    pub fn relative_residual(&self, x: &[f64]) -> f64 {
        let mut r = self.rhs.iter().map(|v| -v).collect::<Vec<_>>();
        for (i, j, v) in &self.entries {
            r[*i] += v * x[*j];
        }
        let nb = self.rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nr = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nb == 0.0 {
            nr
        } else {
            nr / nb
        }
    }
}

struct Built {
    ops: Vec<Arc<LocalOp>>,
    loads: Vec<Arc<CellLoad>>,
    maps: Vec<Vec<Resolved>>,
    system: DpgSystem,
}

struct CellLoad {
    /// `L⁻¹ l`.
    r: Vec<f64>,
    osc2: f64,
    z: Vec<f64>,
    be: Vec<f64>,
}

fn node_key(m: usize, cell: &Cell, a: usize, b: usize) -> (u64, u64) {
    let sh = KEY_LEVEL - cell.level;
    (
        (((cell.i as u64) * m as u64) + a as u64) << sh,
        (((cell.j as u64) * m as u64) + b as u64) << sh,
    )
}

fn opposite(s: Side) -> Side {
    match s {
        Side::Left => Side::Right,
        Side::Right => Side::Left,
        Side::Bottom => Side::Top,
        Side::Top => Side::Bottom,
    }
}

/// Local node indices on one side, ordered along the side.
fn side_nodes(m: usize, side: Side) -> Vec<(usize, usize)> {
    (0..=m)
        .map(|t| match side {
            Side::Left => (0, t),
            Side::Right => (m, t),
            Side::Bottom => (t, 0),
            Side::Top => (t, m),
        })
        .collect()
}

impl<'a> FiberSolver<'a> {
    pub fn new(
        reference: &'a Reference,
        cfg: &'a DpgConfig,
        problem: &'a FiberProblem<'a>,
        domain: Domain,
    ) -> Result<Self> {
        let s = problem.direction;
        if ((s[0] * s[0] + s[1] * s[1]).sqrt() - 1.0).abs() > 1e-12 {
            return input("direction must be a unit vector");
        }
        let [hx, hy] = domain.cell_size(0);
        if (hx - hy).abs() > 1e-12 * hx {
            return input("the transport solver needs square root cells");
        }
        if reference.m != cfg.m || reference.depth != cfg.subgrid_depth {
            return input("reference data does not match the configuration");
        }
        Ok(FiberSolver {
            reference,
            cfg,
            problem,
            domain,
            factors: FxHashMap::default(),
            ops: FxHashMap::default(),
            loads: FxHashMap::default(),
        })
    }

    fn h(&self, level: u8) -> f64 {
        self.domain.cell_size(level)[0]
    }

    fn factor(&mut self, level: u8) -> Result<&Vec<f64>> {
        if !self.factors.contains_key(&level) {
            let f = self
                .reference
                .gram_factor(self.h(level), self.problem.direction)?;
            self.factors.insert(level, f);
        }
        Ok(&self.factors[&level])
    }

    fn local_op(&mut self, cell: &Cell) -> Result<Arc<LocalOp>> {
        let bx = self.domain.cell_box(cell);
        let sconst = self.problem.sigma.constant_on(bx);
        let key = match sconst {
            Some(v) => LocalKey::Uniform(cell.level, v.to_bits()),
            None => LocalKey::Cell(*cell),
        };
        if let Some(op) = self.ops.get(&key) {
            return Ok(op.clone());
        }
        let r = self.reference;
        let (nu, nw, nt, nq) = (r.nu, r.nw, r.nt, r.nq);
        let nc = nu + nw;
        let h = self.h(cell.level);
        let s = self.problem.direction;
        let msig = match sconst {
            Some(v) => r.sel.iter().map(|x| v * x).collect::<Vec<_>>(),
            None => r.sigma_mass(self.problem.sigma, bx),
        };
        let mut b = vec![0.0; nt * nc];
        for row in 0..nt {
            for j in 0..nu {
                b[row * nc + j] = h * msig[row * nu + j]
                    - (s[0] * r.cx[row * nu + j] + s[1] * r.cy[row * nu + j]);
            }
            for j in 0..nw {
                b[row * nc + nu + j] = h * (s[0] * r.tx[row * nw + j] + s[1] * r.ty[row * nw + j]);
            }
        }
        let l = self.factor(cell.level)?.clone();
        for c in 0..r.nsub {
            dense::forward(&l, nq, &mut b[c * nq * nc..(c + 1) * nq * nc], nc);
        }
        let x = b;
        let mut a = dense::at_b(&x, &x, nt, nc, nc);
        let mu = self.cfg.mu;
        for i in 0..nu {
            a[i * nc + i] += mu;
            for j in 0..nw {
                let v = -mu * h * r.muw[i * nw + j];
                a[i * nc + nu + j] += v;
                a[(nu + j) * nc + i] += v;
            }
        }
        for i in 0..nw {
            for j in 0..nw {
                a[(nu + i) * nc + nu + j] += mu * h * h * r.mww[i * nw + j];
            }
        }
        let iset: Vec<usize> = (0..nu)
            .chain(r.interior_nodes.iter().map(|k| nu + k))
            .collect();
        let eset: Vec<usize> = r.edge_nodes.iter().map(|k| nu + k).collect();
        let (ni, ne) = (iset.len(), eset.len());
        let mut aii = vec![0.0; ni * ni];
        let mut y = vec![0.0; ni * ne];
        let mut see = vec![0.0; ne * ne];
        for (p, &gi) in iset.iter().enumerate() {
            for (q, &gj) in iset.iter().enumerate() {
                aii[p * ni + q] = a[gi * nc + gj];
            }
            for (q, &gj) in eset.iter().enumerate() {
                y[p * ne + q] = a[gi * nc + gj];
            }
        }
        for (p, &gi) in eset.iter().enumerate() {
            for (q, &gj) in eset.iter().enumerate() {
                see[p * ne + q] = a[gi * nc + gj];
            }
        }
        let aie = y.clone();
        if !dense::cholesky(&mut aii, ni) {
            return Err(Error::Numerical(format!(
                "cell {} local block not positive definite",
                cell
            )));
        }
        dense::forward(&aii, ni, &mut y, ne);
        dense::backward_t(&aii, ni, &mut y, ne);
        let corr = dense::at_b(&aie, &y, ni, ne, ne);
        for k in 0..ne * ne {
            see[k] -= corr[k];
        }
        for p in 0..ne {
            for q in (p + 1)..ne {
                let v = 0.5 * (see[p * ne + q] + see[q * ne + p]);
                see[p * ne + q] = v;
                see[q * ne + p] = v;
            }
        }
        let op = Arc::new(LocalOp {
            x,
            chol_ii: aii,
            y,
            s: see,
        });
        self.ops.insert(key, op.clone());
        Ok(op)
    }

    fn cell_load(&mut self, cell: &Cell, op: &LocalOp) -> Result<Arc<CellLoad>> {
        if let Some(l) = self.loads.get(cell) {
            return Ok(l.clone());
        }
        let l = Arc::new(self.compute_load(cell, op)?);
        self.loads.insert(*cell, l.clone());
        Ok(l)
    }

    fn compute_load(&mut self, cell: &Cell, op: &LocalOp) -> Result<CellLoad> {
        let r = self.reference;
        let (nu, nw, nt, nq) = (r.nu, r.nw, r.nt, r.nq);
        let nc = nu + nw;
        let depth = r.depth;
        let hs = self.h(cell.level) / (1u64 << depth) as f64;
        let mut l = vec![0.0; nt];
        let mut osc2 = 0.0;
        if !self.problem.rhs.is_zero() {
            let ns1 = 1u32 << depth;
            for sy in 0..ns1 {
                for sx in 0..ns1 {
                    let sub = Cell::new(
                        cell.level + depth,
                        (cell.i << depth) + sx,
                        (cell.j << depth) + sy,
                    );
                    let (c, osc) = self.problem.rhs.project(&self.domain, &sub, r.m + 1);
                    let base = (sy * ns1 + sx) as usize * nq;
                    for k in 0..nq {
                        l[base + k] = hs * c[k];
                    }
                    osc2 += osc * osc;
                }
            }
        }
        let f = self.factor(cell.level)?;
        for c in 0..r.nsub {
            dense::forward(f, nq, &mut l[c * nq..(c + 1) * nq], 1);
        }
        let b = dense::at_b(&op.x, &l, nt, nc, 1);
        let ni = nu + r.interior_nodes.len();
        let ne = r.edge_nodes.len();
        let mut z: Vec<f64> = (0..nu)
            .map(|k| b[k])
            .chain(r.interior_nodes.iter().map(|k| b[nu + k]))
            .collect();
        let mut be: Vec<f64> = r.edge_nodes.iter().map(|k| b[nu + k]).collect();
        // be - Yᵀ bi
        for p in 0..ni {
            for q in 0..ne {
                be[q] -= op.y[p * ne + q] * z[p];
            }
        }
        dense::forward(&op.chol_ii, ni, &mut z, 1);
        dense::backward_t(&op.chol_ii, ni, &mut z, 1);
        Ok(CellLoad { r: l, osc2, z, be })
    }

    /// Key extent of the whole domain in each direction.
    fn full_keys(&self) -> (u64, u64) {
        let (nx, ny) = self.domain.roots();
        let m = self.reference.m as u64;
        ((m * nx as u64) << KEY_LEVEL, (m * ny as u64) << KEY_LEVEL)
    }

    fn node_position(&self, key: (u64, u64)) -> [f64; 2] {
        let (fx, fy) = self.full_keys();
        [
            self.domain.x0 + self.domain.width() * key.0 as f64 / fx as f64,
            self.domain.y0 + self.domain.height() * key.1 as f64 / fy as f64,
        ]
    }

    fn inflow_node(&self, key: (u64, u64)) -> bool {
        let (fx, fy) = self.full_keys();
        let s = self.problem.direction;
        let on = [
            (key.0 == 0, Side::Left),
            (key.0 == fx, Side::Right),
            (key.1 == 0, Side::Bottom),
            (key.1 == fy, Side::Top),
        ];
        on.iter().any(|(b, side)| {
            let n = side.normal();
            *b && s[0] * n[0] + s[1] * n[1] < -CHARACTERISTIC_TOL
        })
    }

    fn build(&mut self, mesh: &Arc<SpatialMesh>) -> Result<Built> {
        if mesh.domain() != &self.domain {
            return input("mesh domain differs from the solver domain");
        }
        if mesh.max_level() + self.reference.depth > KEY_LEVEL {
            return input(format!(
                "mesh level above {}",
                KEY_LEVEL - self.reference.depth
            ));
        }
        let r = self.reference;
        let m = r.m;
        let ne = r.edge_nodes.len();
        let leaves = mesh.leaves();
        let mut ops = Vec::with_capacity(leaves.len());
        let mut loads = Vec::with_capacity(leaves.len());
        for c in leaves {
            let op = self.local_op(c)?;
            loads.push(self.cell_load(c, &op)?);
            ops.push(op);
        }

        // hanging trace nodes: key -> (coarse cell, its side, position along the side)
        let mut hanging: FxHashMap<(u64, u64), (Cell, Side, f64)> = FxHashMap::default();
        for c in leaves {
            for side in Side::ALL {
                let Some(nb) = self.domain.neighbor(c, side) else {
                    continue;
                };
                let Some((_, coarse)) = mesh.covering_leaf(&nb) else {
                    continue;
                };
                if coarse.level >= c.level {
                    continue;
                }
                let step = 1u64 << (KEY_LEVEL - coarse.level);
                let vertical = matches!(side, Side::Left | Side::Right);
                for (a, b) in side_nodes(m, side) {
                    let key = node_key(m, c, a, b);
                    let along = if vertical { key.1 } else { key.0 };
                    if along % step == 0 {
                        continue;
                    }
                    let origin = if vertical { coarse.j } else { coarse.i } as u64 * m as u64;
                    let t = (along as f64 / step as f64 - origin as f64) / m as f64;
                    hanging.insert(key, (coarse, opposite(side), t));
                }
            }
        }

        let mut memo: FxHashMap<(u64, u64), Resolved> = FxHashMap::default();
        let mut ndof = 0usize;
        let mut maps: Vec<Vec<Resolved>> = Vec::with_capacity(leaves.len());
        for c in leaves {
            let mut cm = Vec::with_capacity(ne);
            for &k in &r.edge_nodes {
                let key = node_key(m, c, k % (m + 1), k / (m + 1));
                cm.push(self.resolve(key, &hanging, &mut memo, &mut ndof)?);
            }
            maps.push(cm);
        }

        let mut trip: Vec<(usize, usize, f64)> = Vec::new();
        let mut rhs = vec![0.0; ndof];
        for (ci, cm) in maps.iter().enumerate() {
            let op = &ops[ci];
            for p in 0..ne {
                let mut f = loads[ci].be[p];
                for q in 0..ne {
                    f -= op.s[p * ne + q] * cm[q].1;
                }
                for (d, w) in &cm[p].0 {
                    rhs[*d] += w * f;
                }
                for q in 0..ne {
                    let sv = op.s[p * ne + q];
                    for (di, wi) in &cm[p].0 {
                        for (dj, wj) in &cm[q].0 {
                            trip.push((*di, *dj, wi * wj * sv));
                        }
                    }
                }
            }
        }
        trip.sort_unstable_by_key(|a| (a.1, a.0));
        let mut entries: Vec<(usize, usize, f64)> = Vec::with_capacity(trip.len() / 2);
        for (i, j, v) in trip {
            match entries.last_mut() {
                Some(last) if last.0 == i && last.1 == j => last.2 += v,
                _ => entries.push((i, j, v)),
            }
        }
        Ok(Built {
            ops,
            loads,
            maps,
            system: DpgSystem {
                n: ndof,
                entries,
                rhs,
            },
        })
    }

    /// Global system on a fixed mesh, both triangles.
    pub fn assemble(&mut self, mesh: &Arc<SpatialMesh>) -> Result<DpgSystem> {
        Ok(self.build(mesh)?.system)
    }

    /// Assembles and solves on a fixed mesh.
    pub fn solve_on(&mut self, mesh: &Arc<SpatialMesh>) -> Result<DpgSolution> {
        let Built {
            ops,
            loads,
            maps: cell_maps,
            system,
        } = self.build(mesh)?;
        let y = system.lower().solve()?;
        let r = self.reference;
        let m = r.m;
        let (nu, nw) = (r.nu, r.nw);
        let ne = r.edge_nodes.len();
        let leaves = mesh.leaves();
        let ni = nu + r.interior_nodes.len();
        let mut u = vec![0.0; leaves.len() * nu];
        let mut w = vec![0.0; leaves.len() * nw];
        let mut indicators = CellIndicatorMap::new();
        let mut total = 0.0;
        let nc = nu + nw;
        let mut xfull = vec![0.0; nc];
        for (ci, c) in leaves.iter().enumerate() {
            let op = &ops[ci];
            let ld = &loads[ci];
            let xe: Vec<f64> = cell_maps[ci]
                .iter()
                .map(|(lst, c0)| c0 + lst.iter().map(|(d, wt)| wt * y[*d]).sum::<f64>())
                .collect();
            let mut xi = ld.z.clone();
            for p in 0..ni {
                for q in 0..ne {
                    xi[p] -= op.y[p * ne + q] * xe[q];
                }
            }
            xfull[..nu].copy_from_slice(&xi[..nu]);
            for (k, &node) in r.interior_nodes.iter().enumerate() {
                xfull[nu + node] = xi[nu + k];
            }
            for (k, &node) in r.edge_nodes.iter().enumerate() {
                xfull[nu + node] = xe[k];
            }
            u[ci * nu..(ci + 1) * nu].copy_from_slice(&xfull[..nu]);
            w[ci * nw..(ci + 1) * nw].copy_from_slice(&xfull[nu..]);
            let res = dense::mat_vec(&op.x, &xfull, r.nt, nc);
            let lifted: f64 = res.iter().zip(&ld.r).map(|(a, b)| (a - b) * (a - b)).sum();
            let eta2 = lifted + ld.osc2;
            total += eta2;
            indicators.insert(*c, eta2);
        }
        Ok(DpgSolution {
            mesh: mesh.clone(),
            m,
            direction: self.problem.direction,
            u,
            w,
            indicators,
            residual: total.sqrt(),
            dofs: system.n + leaves.len() * nu,
            cycles: 0,
            history: Vec::new(),
        })
    }

    fn resolve(
        &self,
        key: (u64, u64),
        hanging: &FxHashMap<(u64, u64), (Cell, Side, f64)>,
        memo: &mut FxHashMap<(u64, u64), Resolved>,
        ndof: &mut usize,
    ) -> Result<Resolved> {
        if let Some(r) = memo.get(&key) {
            return Ok(r.clone());
        }
        let m = self.reference.m;
        let out = if self.inflow_node(key) {
            let g = self
                .problem
                .inflow
                .map(|g| g(self.node_position(key)))
                .unwrap_or(0.0);
            (Vec::new(), g)
        } else if let Some((coarse, side, t)) = hanging.get(&key).copied() {
            let mut val = vec![0.0; m + 1];
            let mut der = vec![0.0; m + 1];
            lagrange_equispaced(m, t, &mut val, &mut der);
            let mut acc: FxHashMap<usize, f64> = FxHashMap::default();
            let mut c0 = 0.0;
            for (k, (a, b)) in side_nodes(m, side).into_iter().enumerate() {
                if val[k].abs() < 1e-15 {
                    continue;
                }
                let (lst, c) = self.resolve(node_key(m, &coarse, a, b), hanging, memo, ndof)?;
                c0 += val[k] * c;
                for (d, wt) in lst {
                    *acc.entry(d).or_insert(0.0) += val[k] * wt;
                }
            }
            let mut lst: Vec<(usize, f64)> = acc.into_iter().collect();
            lst.sort_unstable_by_key(|e| e.0);
            (lst, c0)
        } else {
            let d = *ndof;
            *ndof += 1;
            (vec![(d, 1.0)], 0.0)
        };
        match memo.entry(key) {
            Entry::Occupied(e) => Ok(e.get().clone()),
            Entry::Vacant(e) => Ok(e.insert(out).clone()),
        }
    }

    /// Lifted residual `(Σ η_T²)^{1/2}` of a given pair on `mesh`, after resetting
    /// the trace at inflow nodes to the boundary data.
    pub fn residual_of(&mut self, mesh: &Arc<SpatialMesh>, u: &[f64], w: &[f64]) -> Result<f64> {
        let r = self.reference;
        let (m, nu, nw) = (r.m, r.nu, r.nw);
        if u.len() != mesh.len() * nu || w.len() != mesh.len() * nw {
            return input("coefficient vectors do not match the mesh");
        }
        let nc = nu + nw;
        let mut x = vec![0.0; nc];
        let mut total = 0.0;
        for (ci, c) in mesh.leaves().iter().enumerate() {
            let op = self.local_op(c)?;
            let ld = self.cell_load(c, &op)?;
            x[..nu].copy_from_slice(&u[ci * nu..(ci + 1) * nu]);
            x[nu..].copy_from_slice(&w[ci * nw..(ci + 1) * nw]);
            for &k in &r.edge_nodes {
                let key = node_key(m, c, k % (m + 1), k / (m + 1));
                if self.inflow_node(key) {
                    x[nu + k] = self
                        .problem
                        .inflow
                        .map(|g| g(self.node_position(key)))
                        .unwrap_or(0.0);
                }
            }
            let res = dense::mat_vec(&op.x, &x, r.nt, nc);
            total += res
                .iter()
                .zip(&ld.r)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                + ld.osc2;
        }
        Ok(total.sqrt())
    }

    /// Mark → refine → solve until the residual is below `eta / c_rel`.
    pub fn adaptive(&mut self, eta: f64, initial: Arc<SpatialMesh>) -> Result<DpgSolution> {
        if !(eta > 0.0) {
            return input("tolerance must be positive");
        }
        let target = eta / self.cfg.c_rel;
        let mut mesh = initial;
        let mut history = Vec::new();
        for cycle in 0.. {
            let mut sol = self.solve_on(&mesh)?;
            history.push(sol.residual);
            if sol.residual <= target {
                sol.cycles = cycle + 1;
                sol.history = history;
                return Ok(sol);
            }
            let cap = || Error::RefinementCap {
                level: mesh.max_level(),
                residual: sol.residual,
                target,
            };
            if cycle + 1 >= self.cfg.max_cycles {
                return Err(cap());
            }
            let marked: Vec<Cell> = dorfler_mark(&sol.indicators, self.cfg.bulk_fraction)?
                .into_iter()
                .filter(|c| c.level < self.cfg.max_level)
                .collect();
            if marked.is_empty() {
                return Err(cap());
            }
            mesh = Arc::new(mesh.refine(&marked)?);
        }
        unreachable!()
    }
}

/// Stateless entry point holding the reference data.
#[derive(Clone, Debug)]
pub struct DpgSolver {
    pub cfg: DpgConfig,
    pub reference: Reference,
}

impl DpgSolver {
    pub fn new(cfg: DpgConfig) -> Result<DpgSolver> {
        if !(cfg.c_rel > 0.0) {
            return input("reliability constant must be positive");
        }
        let reference = Reference::new(cfg.m, cfg.subgrid_depth)?;
        Ok(DpgSolver { cfg, reference })
    }

    pub fn fiber<'a>(
        &'a self,
        problem: &'a FiberProblem<'a>,
        domain: Domain,
    ) -> Result<FiberSolver<'a>> {
        FiberSolver::new(&self.reference, &self.cfg, problem, domain)
    }

    pub fn solve(&self, problem: &FiberProblem, mesh: &Arc<SpatialMesh>) -> Result<DpgSolution> {
        self.fiber(problem, *mesh.domain())?.solve_on(mesh)
    }

    pub fn adaptive(
        &self,
        problem: &FiberProblem,
        eta: f64,
        initial: Arc<SpatialMesh>,
    ) -> Result<DpgSolution> {
        self.fiber(problem, *initial.domain())?
            .adaptive(eta, initial)
    }

    pub fn assemble(&self, problem: &FiberProblem, mesh: &Arc<SpatialMesh>) -> Result<DpgSystem> {
        self.fiber(problem, *mesh.domain())?.assemble(mesh)
    }
}

impl DpgSolution {
    pub fn nu(&self) -> usize {
        self.m * self.m
    }

    pub fn bulk(&self, cell_index: usize) -> &[f64] {
        let nu = self.nu();
        &self.u[cell_index * nu..(cell_index + 1) * nu]
    }

    pub fn eval_u(&self, p: [f64; 2]) -> Option<f64> {
        let k = self.mesh.locate(p)?;
        let c = self.mesh.leaves()[k];
        Some(eval_bulk(self.m, self.mesh.domain(), &c, self.bulk(k), p))
    }

    pub fn eval_w(&self, p: [f64; 2]) -> Option<f64> {
        let k = self.mesh.locate(p)?;
        let c = self.mesh.leaves()[k];
        let bx = self.mesh.cell_box(&c);
        let m = self.m;
        let (xi, eta) = (
            (p[0] - bx[0]) / (bx[2] - bx[0]),
            (p[1] - bx[1]) / (bx[3] - bx[1]),
        );
        let mut la = vec![0.0; m + 1];
        let mut lb = vec![0.0; m + 1];
        let mut d = vec![0.0; m + 1];
        lagrange_equispaced(m, xi, &mut la, &mut d);
        lagrange_equispaced(m, eta, &mut lb, &mut d);
        let nw = (m + 1) * (m + 1);
        let w = &self.w[k * nw..(k + 1) * nw];
        Some(
            (0..=m)
                .flat_map(|b| (0..=m).map(move |a| (a, b)))
                .map(|(a, b)| w[b * (m + 1) + a] * la[a] * lb[b])
                .sum(),
        )
    }

    /// `‖u_exact - u_h‖_{L2}` by per-cell tensor Gauss quadrature.
    pub fn l2_error(&self, exact: &dyn Fn([f64; 2]) -> f64, points: usize) -> f64 {
        let rule = Rule::gauss_on(points, 0.0, 1.0);
        let mut e = 0.0;
        for (k, c) in self.mesh.leaves().iter().enumerate() {
            let bx = self.mesh.cell_box(c);
            let area = (bx[2] - bx[0]) * (bx[3] - bx[1]);
            for (y, wy) in rule.x.iter().zip(&rule.w) {
                for (x, wx) in rule.x.iter().zip(&rule.w) {
                    let p = [bx[0] + x * (bx[2] - bx[0]), bx[1] + y * (bx[3] - bx[1])];
                    let d = exact(p) - eval_bulk(self.m, self.mesh.domain(), c, self.bulk(k), p);
                    e += area * wx * wy * d * d;
                }
            }
        }
        e.sqrt()
    }

    pub fn bulk_norm(&self) -> f64 {
        self.u.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Two-term surrogate `‖u-w‖² + ‖s·∇w + σu - ΠF‖²` per cell, with `ΠF` the
    /// degree-`m` projection of the load.
    pub fn surrogate(&self, problem: &FiberProblem) -> CellIndicatorMap {
        let m = self.m;
        let nu = m * m;
        let nw = (m + 1) * (m + 1);
        let rule = Rule::gauss_on(m + 3, 0.0, 1.0);
        let domain = *self.mesh.domain();
        let s = self.direction;
        let mut out = CellIndicatorMap::new();
        let mut la = vec![0.0; m + 1];
        let mut lda = vec![0.0; m + 1];
        let mut lb = vec![0.0; m + 1];
        let mut ldb = vec![0.0; m + 1];
        let mut fa = vec![0.0; m + 1];
        let mut fb = vec![0.0; m + 1];
        for (k, c) in self.mesh.leaves().iter().enumerate() {
            let bx = domain.cell_box(c);
            let h = bx[2] - bx[0];
            let (fc, _) = problem.rhs.project(&domain, c, m);
            let w = &self.w[k * nw..(k + 1) * nw];
            let mut acc = 0.0;
            for (y, wy) in rule.x.iter().zip(&rule.w) {
                for (x, wx) in rule.x.iter().zip(&rule.w) {
                    let p = [bx[0] + x * h, bx[1] + y * h];
                    let uv = eval_bulk(m, &domain, c, &self.u[k * nu..(k + 1) * nu], p);
                    lagrange_equispaced(m, *x, &mut la, &mut lda);
                    lagrange_equispaced(m, *y, &mut lb, &mut ldb);
                    let (mut wv, mut gx, mut gy) = (0.0, 0.0, 0.0);
                    for b in 0..=m {
                        for a in 0..=m {
                            let c0 = w[b * (m + 1) + a];
                            wv += c0 * la[a] * lb[b];
                            gx += c0 * lda[a] * lb[b] / h;
                            gy += c0 * la[a] * ldb[b] / h;
                        }
                    }
                    legendre_unit(m, *x, &mut fa);
                    legendre_unit(m, *y, &mut fb);
                    let mut fbar = 0.0;
                    for b in 0..=m {
                        for a in 0..=m {
                            fbar += fc[b * (m + 1) + a] * fa[a] * fb[b] / h;
                        }
                    }
                    let sig = problem.sigma.eval(p);
                    let r1 = uv - wv;
                    let r2 = s[0] * gx + s[1] * gy + sig * uv - fbar;
                    acc += wx * wy * h * h * (r1 * r1 + r2 * r2);
                }
            }
            out.insert(*c, acc);
        }
        out
    }

    /// Text dump, one `field <cellid> <c00> <c01> ...` line per cell (bulk coefficients).
    pub fn dump_field(&self) -> String {
        let mut s = String::new();
        for (k, c) in self.mesh.leaves().iter().enumerate() {
            let _ = write!(s, "field {}", self.mesh.cell_id(c));
            for v in self.bulk(k) {
                let _ = write!(s, " {v:e}");
            }
            s.push('\n');
        }
        s
    }
}

/// Value of a degree-`m-1` physical-orthonormal tensor Legendre expansion.
pub fn eval_bulk(m: usize, domain: &Domain, cell: &Cell, coeffs: &[f64], p: [f64; 2]) -> f64 {
    let bx = domain.cell_box(cell);
    let (w, h) = (bx[2] - bx[0], bx[3] - bx[1]);
    let mut pa = vec![0.0; m];
    let mut pb = vec![0.0; m];
    legendre_unit(m - 1, (p[0] - bx[0]) / w, &mut pa);
    legendre_unit(m - 1, (p[1] - bx[1]) / h, &mut pb);
    let mut v = 0.0;
    for b in 0..m {
        for a in 0..m {
            v += coeffs[b * m + a] * pa[a] * pb[b];
        }
    }
    v / (w * h).sqrt()
}

/// Exact solution along characteristics: integrates the load with piecewise
/// exact attenuation from the inflow point `x - ℓ₋ s`.
pub fn characteristic_solve(
    domain: &Domain,
    sigma: &GridField,
    source: &dyn Fn([f64; 2]) -> f64,
    inflow: &dyn Fn([f64; 2]) -> f64,
    s: [f64; 2],
    points: &[[f64; 2]],
    tol: f64,
) -> Vec<f64> {
    points
        .iter()
        .map(|&x| {
            let mut len = f64::INFINITY;
            if s[0] > 0.0 {
                len = len.min((x[0] - domain.x0) / s[0]);
            } else if s[0] < 0.0 {
                len = len.min((domain.x1 - x[0]) / -s[0]);
            }
            if s[1] > 0.0 {
                len = len.min((x[1] - domain.y0) / s[1]);
            } else if s[1] < 0.0 {
                len = len.min((domain.y1 - x[1]) / -s[1]);
            }
            let len = len.max(0.0);
            let x0 = [x[0] - len * s[0], x[1] - len * s[1]];
            // breakpoints where the ray crosses grid lines of σ
            let mut br = vec![0.0, len];
            for (k, d) in [(0usize, s[0]), (1usize, s[1])] {
                if d.abs() < 1e-15 {
                    continue;
                }
                let (lo, hi) = if k == 0 {
                    (domain.x0, domain.x1)
                } else {
                    (domain.y0, domain.y1)
                };
                let n = if k == 0 { sigma.nx } else { sigma.ny };
                for i in 1..n {
                    let line = lo + (hi - lo) * i as f64 / n as f64;
                    let r = (line - x0[k]) / d;
                    if r > 0.0 && r < len {
                        br.push(r);
                    }
                }
            }
            br.sort_by(|a, b| a.partial_cmp(b).unwrap());
            br.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
            let at = |r: f64| [x0[0] + r * s[0], x0[1] + r * s[1]];
            let sig: Vec<f64> = br
                .windows(2)
                .map(|w| sigma.eval(at(0.5 * (w[0] + w[1]))))
                .collect();
            // optical depth from the end of segment k to the point x
            let mut tail = vec![0.0; sig.len() + 1];
            for k in (0..sig.len()).rev() {
                tail[k] = tail[k + 1] + sig[k] * (br[k + 1] - br[k]);
            }
            let mut val = inflow(x0) * (-tail[0]).exp();
            for k in 0..sig.len() {
                let (a, b) = (br[k], br[k + 1]);
                let (sk, tk) = (sig[k], tail[k + 1]);
                val += crate::quad::adaptive(
                    |r| (-(sk * (b - r) + tk)).exp() * source(at(r)),
                    a,
                    b,
                    tol,
                );
            }
            val
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Domain {
        Domain::unit_square()
    }

    #[test]
    fn reference_gram_is_identity_plus_derivatives() {
        let r = Reference::new(2, 0).unwrap();
        let g = r.local_gram(1.0, [0.0, 0.0]);
        for i in 0..r.nt {
            for j in 0..r.nt {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[i * r.nt + j] - want).abs() < 1e-12);
            }
        }
        // mass part on a cell of width h is h² on the diagonal
        let g = r.local_gram(0.25, [0.0, 0.0]);
        assert!((g[0] - 0.0625).abs() < 1e-14);
    }

    #[test]
    fn gram_eigenvalues_bounded_below_by_cell_area() {
        for depth in [0u8, 1] {
            let r = Reference::new(2, depth).unwrap();
            let h: f64 = 0.125;
            let g = r.local_gram(h, [0.6, 0.8]);
            let m = faer::Mat::from_fn(r.nt, r.nt, |i, j| g[i * r.nt + j]);
            let ev = m.self_adjoint_eigenvalues(faer::Side::Lower).unwrap();
            let area = (h / (1 << depth) as f64).powi(2);
            assert!(ev.iter().all(|v| *v >= area * (1.0 - 1e-10)));
        }
    }

    #[test]
    fn zero_load_gives_zero_solution() {
        let sigma = GridField::constant(unit(), 1.0);
        let problem = FiberProblem::new(&sigma, 0.3, FiberRhs::new());
        let solver = DpgSolver::new(DpgConfig::default()).unwrap();
        let mesh = Arc::new(SpatialMesh::uniform(unit(), 2));
        let sol = solver.adaptive(&problem, 1e-3, mesh).unwrap();
        assert_eq!(sol.residual, 0.0);
        assert!(sol.u.iter().all(|v| *v == 0.0));
        assert_eq!(sol.cycles, 1);
    }

    #[test]
    fn constant_absorption_matches_exponential_profile() {
        let sigma = GridField::constant(unit(), 2.0);
        let load = GridField::constant(unit(), 2.0);
        let problem = FiberProblem::new(&sigma, 0.0, FiberRhs::new().with(1.0, &load));
        let solver = DpgSolver::new(DpgConfig::default()).unwrap();
        let sol = solver
            .adaptive(&problem, 1e-3, Arc::new(SpatialMesh::uniform(unit(), 1)))
            .unwrap();
        let err = sol.l2_error(&|p| 1.0 - (-2.0 * p[0]).exp(), 6);
        assert!(err <= 1e-3, "error {err}");
    }

    #[test]
    fn system_is_symmetric_and_solvable_with_hanging_nodes() {
        let sigma = GridField::constant(unit(), 1.5);
        let load = FnLoad(|p: [f64; 2]| p[0] + p[1]);
        let problem = FiberProblem::new(&sigma, 0.7, FiberRhs::new().with(1.0, &load));
        let solver = DpgSolver::new(DpgConfig::default()).unwrap();
        let mesh = SpatialMesh::uniform(unit(), 2);
        let mesh = mesh.refine(&[Cell::new(2, 1, 1)]).unwrap();
        let mesh = Arc::new(mesh.refine(&[Cell::new(3, 3, 3)]).unwrap());
        let sys = solver.assemble(&problem, &mesh).unwrap();
        assert!(sys.symmetry_defect() <= 1e-12);
        let x = sys.lower().solve().unwrap();
        assert!(sys.relative_residual(&x) < 1e-10);
    }

    #[test]
    fn hanging_nodes_keep_trace_continuous() {
        let sigma = GridField::constant(unit(), 1.0);
        let load = FnLoad(|p: [f64; 2]| 1.0 + p[0] * p[1]);
        let problem = FiberProblem::new(&sigma, 0.4, FiberRhs::new().with(1.0, &load));
        let solver = DpgSolver::new(DpgConfig::default()).unwrap();
        let mesh = Arc::new(
            SpatialMesh::uniform(unit(), 1)
                .refine(&[Cell::new(1, 0, 0)])
                .unwrap(),
        );
        let sol = solver.solve(&problem, &mesh).unwrap();
        // along x = 0.5 between the fine and coarse cells
        for y in [0.1, 0.2, 0.3, 0.4] {
            let left = sol.eval_w([0.5 - 1e-12, y]).unwrap();
            let right = sol.eval_w([0.5 + 1e-12, y]).unwrap();
            assert!((left - right).abs() < 1e-8, "{left} vs {right}");
        }
    }

    #[test]
    fn residual_of_solution_matches_solve() {
        let sigma = GridField::constant(unit(), 2.0);
        let load = GridField::constant(unit(), 2.0);
        let problem = FiberProblem::new(&sigma, 2.0, FiberRhs::new().with(1.0, &load));
        let solver = DpgSolver::new(DpgConfig::default()).unwrap();
        let sol = solver
            .adaptive(&problem, 1e-2, Arc::new(SpatialMesh::uniform(unit(), 2)))
            .unwrap();
        let r = solver
            .fiber(&problem, unit())
            .unwrap()
            .residual_of(&sol.mesh, &sol.u, &sol.w)
            .unwrap();
        assert!((r - sol.residual).abs() <= 1e-12 * sol.residual);
        assert!(sol.history.windows(2).all(|h| h[1] <= h[0] * (1.0 + 1e-9)));
    }

    #[test]
    fn inflow_lift_reproduces_free_streaming() {
        let sigma = GridField::constant(unit(), 0.0);
        let one = |_: [f64; 2]| 1.0;
        let mut problem = FiberProblem::new(&sigma, 0.5, FiberRhs::new());
        problem.inflow = Some(&one);
        let solver = DpgSolver::new(DpgConfig::default()).unwrap();
        let sol = solver
            .solve(&problem, &Arc::new(SpatialMesh::uniform(unit(), 2)))
            .unwrap();
        assert!(sol.l2_error(&|_| 1.0, 4) < 1e-8);
    }

    #[test]
    fn inflow_lift_with_absorption() {
        let sigma = GridField::constant(unit(), 1.5);
        let one = |_: [f64; 2]| 1.0;
        let mut problem = FiberProblem::new(&sigma, 0.0, FiberRhs::new());
        problem.inflow = Some(&one);
        let solver = DpgSolver::new(DpgConfig::default()).unwrap();
        let sol = solver
            .adaptive(&problem, 1e-3, Arc::new(SpatialMesh::uniform(unit(), 1)))
            .unwrap();
        assert!(sol.l2_error(&|p| (-1.5 * p[0]).exp(), 6) < 1e-3);
    }

    #[test]
    fn characteristic_oracle_closed_forms() {
        let d = unit();
        let sig = GridField::constant(d, 3.0);
        let s = [0.6, 0.8];
        let pts = [[0.3, 0.9], [0.7, 0.2], [1.0, 1.0]];
        let v = characteristic_solve(&d, &sig, &|_| 3.0, &|_| 0.0, s, &pts, 1e-12);
        for (p, val) in pts.iter().zip(&v) {
            let l = (p[0] / s[0]).min(p[1] / s[1]);
            assert!((val - (1.0 - (-3.0 * l).exp())).abs() < 1e-10);
        }
        let zero = GridField::constant(d, 0.0);
        let v = characteristic_solve(&d, &zero, &|_| 0.0, &|_| 1.0, s, &pts, 1e-12);
        assert!(v.iter().all(|x| (x - 1.0).abs() < 1e-14));
    }

    #[test]
    fn characteristic_oracle_matches_riemann_sum_for_layers() {
        let d = unit();
        let sig = GridField::new(d, 3, 1, vec![1.0, 5.0, 2.0]).unwrap();
        let s = [1.0, 0.0];
        let x = [0.95, 0.5];
        let v = characteristic_solve(&d, &sig, &|_| 1.0, &|_| 0.0, s, &[x], 1e-12)[0];
        // midpoint sums marching back from x
        let n = 400_000;
        let dr = x[0] / n as f64;
        let (mut acc, mut depth) = (0.0, 0.0);
        for k in 0..n {
            let r = x[0] - (k as f64 + 0.5) * dr;
            let sv = sig.eval([r, 0.5]);
            acc += (-(depth + 0.5 * sv * dr)).exp() * dr;
            depth += sv * dr;
        }
        assert!((v - acc).abs() < 1e-6, "{v} vs {acc}");
    }
}
