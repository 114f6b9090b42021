//! Built-in oracle suites: characteristic solutions, Fourier diagonalization of
//! the kernel, dense-vs-compressed deviation, quadtree merges, manufactured
//! solutions and DPG system symmetry.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::sync::Arc;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dpg::{characteristic_solve, DpgConfig, DpgSolver, FiberProblem, FiberRhs, FnLoad};
use crate::error::Result;
use crate::grid::GridField;
use crate::kernel::{compress, spectral_norm, KernelMatrix, KernelSpec};
use crate::mesh::{Cell, Domain, SpatialMesh};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Check {
        Check {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<28} {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            )?;
        }
        let n = self.checks.iter().filter(|c| c.passed).count();
        write!(f, "{n}/{} checks passed", self.checks.len())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Options {
    /// Added to one kernel entry before the kernel checks run.
    pub fault: Option<f64>,
    /// Kernel level for the kernel checks.
    pub kernel_level: Option<u8>,
}

/// Wavelet coordinates touched by an injected fault.
const FAULT_ENTRY: (usize, usize) = (4, 9);

fn inject(k: &mut KernelMatrix, delta: f64) {
    let d = k.dim();
    let (r, c) = FAULT_ENTRY;
    k.data[r * d + c] += delta;
    k.data[c * d + r] += delta;
}

pub fn run(opts: &Options) -> Result<Report> {
    let mut report = Report::default();
    report.checks.push(characteristic_check());
    report.checks.push(fiber_check()?);
    let level = opts.kernel_level.unwrap_or(5);
    let mut k = KernelMatrix::assemble(&KernelSpec::henyey_greenstein(0.5)?, 2, level)?;
    let dense = k.to_faer();
    if let Some(delta) = opts.fault {
        inject(&mut k, delta);
    }
    report.checks.push(fourier_check(&k)?);
    for eta in [1e-2, 1e-3] {
        report.checks.push(compression_check(&dense, &k, eta)?);
    }
    report.checks.push(quadtree_check()?);
    let cases = manufactured_suite(24, 3)?;
    let worst = cases
        .iter()
        .map(|c| c.ratio)
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), r| {
            (lo.min(r), hi.max(r))
        });
    report.checks.push(Check::new(
        "manufactured solutions",
        cases.iter().all(|c| c.ratio >= 0.1 && c.ratio <= 10.0),
        format!(
            "{} cases, error/residual in [{:.3}, {:.3}]",
            cases.len(),
            worst.0,
            worst.1
        ),
    ));
    let sym = symmetry_suite(5, 7)?;
    let defect = sym.iter().map(|c| c.defect).fold(0.0, f64::max);
    report.checks.push(Check::new(
        "system symmetry",
        sym.iter().all(|c| c.passed()),
        format!("{} instances, max defect {defect:.1e}", sym.len()),
    ));
    Ok(report)
}

fn characteristic_check() -> Check {
    let d = Domain::unit_square();
    let sig = GridField::constant(d, 3.0);
    let s = [0.6, 0.8];
    let pts = [[0.3, 0.9], [0.7, 0.2], [1.0, 1.0], [0.05, 0.5]];
    let v = characteristic_solve(&d, &sig, &|_| 3.0, &|_| 0.0, s, &pts, 1e-12);
    let err = pts
        .iter()
        .zip(&v)
        .map(|(p, val)| {
            let l = (p[0] / s[0]).min(p[1] / s[1]);
            (val - (1.0 - (-3.0 * l).exp())).abs()
        })
        .fold(0.0, f64::max);
    Check::new(
        "characteristic solver",
        err <= 1e-10,
        format!("max deviation {err:.1e}"),
    )
}

fn fiber_check() -> Result<Check> {
    let d = Domain::unit_square();
    let sigma = GridField::constant(d, 2.0);
    let load = GridField::constant(d, 2.0);
    let problem = FiberProblem::new(&sigma, 0.0, FiberRhs::new().with(1.0, &load));
    let solver = DpgSolver::new(DpgConfig::default())?;
    let sol = solver.adaptive(&problem, 1e-3, Arc::new(SpatialMesh::uniform(d, 1)))?;
    let err = sol.l2_error(&|p| 1.0 - (-2.0 * p[0]).exp(), 6);
    Ok(Check::new(
        "adaptive fiber solve",
        err <= 1e-3,
        format!("L2 error {err:.2e}, {} cells", sol.mesh.len()),
    ))
}

/// Leading singular values against the Fourier multipliers `γ^|n|`.
fn fourier_check(k: &KernelMatrix) -> Result<Check> {
    let sv = k.singular_values()?;
    let mut expect: Vec<f64> = (-3i64..=3).map(|n| k.spec.fourier(n)).collect();
    expect.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let dev = sv
        .iter()
        .zip(&expect)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(Check::new(
        "Fourier diagonalization",
        dev <= 1e-3,
        format!("max deviation {dev:.1e} over 7 modes"),
    ))
}

fn compression_check(dense: &Mat<f64>, k: &KernelMatrix, eta: f64) -> Result<Check> {
    let c = compress(k, eta)?;
    let d = c.csr.n;
    let sparse = c.csr.to_dense();
    let diff = Mat::from_fn(d, d, |i, j| dense[(i, j)] - sparse[i * d + j]);
    let dev = spectral_norm(&diff)?;
    Ok(Check::new(
        &format!("compression eta={eta:.0e}"),
        dev <= eta,
        format!(
            "spectral deviation {dev:.2e}, fill {:.1}%",
            100.0 * c.fill_fraction()
        ),
    ))
}

fn quadtree_check() -> Result<Check> {
    let base = SpatialMesh::uniform(Domain::unit_square(), 1);
    let a = base
        .refine(&[Cell::new(1, 0, 0)])?
        .refine(&[Cell::new(2, 1, 1)])?;
    let b = base
        .refine(&[Cell::new(1, 1, 1)])?
        .refine(&[Cell::new(2, 2, 2)])?;
    let ab = SpatialMesh::merge(&a, &b)?;
    let ba = SpatialMesh::merge(&b, &a)?;
    let aa = SpatialMesh::merge(&a, &a)?;
    let ok = ab == ba
        && aa == a
        && ab.refines(&a)
        && ab.refines(&b)
        && ab.is_one_irregular()
        && (ab.total_area() - 1.0).abs() < 1e-14;
    Ok(Check::new(
        "quadtree merge",
        ok,
        format!("{} + {} leaves -> {}", a.len(), b.len(), ab.len()),
    ))
}

#[derive(Clone, Debug)]
pub struct ManufacturedCase {
    pub label: String,
    pub error: f64,
    pub residual: f64,
    pub ratio: f64,
}

type Profile = (&'static str, fn([f64; 2]) -> f64, fn([f64; 2]) -> [f64; 2]);

fn profiles() -> Vec<Profile> {
    vec![
        (
            "sin",
            |p| (PI * p[0]).sin() * (PI * p[1]).sin(),
            |p| {
                [
                    PI * (PI * p[0]).cos() * (PI * p[1]).sin(),
                    PI * (PI * p[0]).sin() * (PI * p[1]).cos(),
                ]
            },
        ),
        (
            "bubble-exp",
            |p| 16.0 * p[0] * (1.0 - p[0]) * p[1] * (1.0 - p[1]) * p[0].exp(),
            |p| {
                let e = p[0].exp();
                let gy = p[1] * (1.0 - p[1]);
                let gx = p[0] * (1.0 - p[0]);
                [
                    16.0 * gy * e * (1.0 - 2.0 * p[0] + gx),
                    16.0 * gx * e * (1.0 - 2.0 * p[1]),
                ]
            },
        ),
        (
            "wave",
            |p| (TAU * p[0]).sin() * p[1] * p[1] * (1.0 - p[1]),
            |p| {
                let g = p[1] * p[1] * (1.0 - p[1]);
                [
                    TAU * (TAU * p[0]).cos() * g,
                    (TAU * p[0]).sin() * (2.0 * p[1] - 3.0 * p[1] * p[1]),
                ]
            },
        ),
    ]
}

/// Solves `s·∇u + σu = F` for exact profiles vanishing on the boundary and
/// compares the true bulk error with the lifted residual. Instances draw a
/// profile, a direction, a mesh and a medium piecewise constant on a dyadic
/// grid no finer than the mesh, so the load is resolved by the mesh.
pub fn manufactured_suite(count: usize, seed: u64) -> Result<Vec<ManufacturedCase>> {
    let d = Domain::unit_square();
    let solver = DpgSolver::new(DpgConfig::default())?;
    let profiles = profiles();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (pname, u, grad) = profiles[rng.gen_range(0..profiles.len())];
        let level: u8 = rng.gen_range(1..=3);
        let mut mesh = SpatialMesh::uniform(d, level);
        if rng.gen_bool(0.5) {
            let leaves = mesh.leaves();
            let marked: Vec<Cell> = (0..2)
                .map(|_| leaves[rng.gen_range(0..leaves.len())])
                .collect();
            mesh = mesh.refine(&marked)?;
        }
        let n = 1usize << rng.gen_range(0..=level.min(2));
        let sigma = GridField::new(
            d,
            n,
            n,
            (0..n * n).map(|_| rng.gen_range(0.0..10.0)).collect(),
        )?;
        let theta: f64 = rng.gen_range(0.0..TAU);
        let s = [theta.cos(), theta.sin()];
        let sig = &sigma;
        let load = FnLoad(move |p: [f64; 2]| {
            let g = grad(p);
            s[0] * g[0] + s[1] * g[1] + sig.eval(p) * u(p)
        });
        let problem = FiberProblem::new(&sigma, theta, FiberRhs::new().with(1.0, &load));
        let sol = solver.solve(&problem, &Arc::new(mesh.clone()))?;
        let error = sol.l2_error(&u, 6);
        out.push(ManufacturedCase {
            label: format!(
                "{pname} theta={theta:.3} cells={} sigma={n}x{n}",
                mesh.len()
            ),
            error,
            residual: sol.residual,
            ratio: error / sol.residual,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SymmetryCase {
    pub label: String,
    pub defect: f64,
    pub factorized: bool,
    pub relative_residual: f64,
}

impl SymmetryCase {
    pub fn passed(&self) -> bool {
        self.defect <= 1e-12 && self.factorized && self.relative_residual < 1e-10
    }
}

/// Random locally refined meshes, directions and piecewise constant media.
pub fn symmetry_suite(count: usize, seed: u64) -> Result<Vec<SymmetryCase>> {
    let d = Domain::unit_square();
    let solver = DpgSolver::new(DpgConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let load = FnLoad(|p: [f64; 2]| 1.0 + p[0] * p[1]);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut mesh = SpatialMesh::uniform(d, rng.gen_range(1..=2));
        for _ in 0..rng.gen_range(1..=3) {
            let leaves = mesh.leaves();
            let marked: Vec<Cell> = (0..rng.gen_range(1..=3))
                .map(|_| leaves[rng.gen_range(0..leaves.len())])
                .collect();
            mesh = mesh.refine(&marked)?;
        }
        let n = rng.gen_range(1..=4);
        let sigma = GridField::new(
            d,
            n,
            n,
            (0..n * n).map(|_| rng.gen_range(0.0..10.0)).collect(),
        )?;
        let theta = rng.gen_range(0.0..TAU);
        let problem = FiberProblem::new(&sigma, theta, FiberRhs::new().with(1.0, &load));
        let sys = solver.assemble(&problem, &Arc::new(mesh.clone()))?;
        let defect = sys.symmetry_defect();
        let solved = sys.lower().solve();
        let relative_residual = solved
            .as_ref()
            .map(|x| sys.relative_residual(x))
            .unwrap_or(f64::INFINITY);
        out.push(SymmetryCase {
            label: format!("#{i} cells={} theta={theta:.3} sigma={n}x{n}", mesh.len()),
            defect,
            factorized: solved.is_ok(),
            relative_residual,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_passes() {
        let r = run(&Options {
            fault: None,
            kernel_level: Some(4),
        })
        .unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn injected_kernel_fault_is_detected() {
        let r = run(&Options {
            fault: Some(0.05),
            kernel_level: Some(4),
        })
        .unwrap();
        assert!(!r.passed());
        let failed: Vec<&str> = r
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        assert!(failed.contains(&"Fourier diagonalization"), "{failed:?}");
        assert!(
            failed.iter().any(|n| n.starts_with("compression")),
            "{failed:?}"
        );
    }
}
