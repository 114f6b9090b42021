//! Outer source-term iterations with scheduled tolerances, the bound
//! recursions that certify them, and the nested variant for dominating
//! scattering.

use std::time::Instant;

use serde::Serialize;

use crate::error::{input, Error, Result};
use crate::mesh::Domain;
use crate::optics::OpticalField;

/// Scalar optical data entering the contraction bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OpticalConstants {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub kappa: f64,
    pub alpha: f64,
    pub ma: f64,
    pub ma_prime: f64,
    pub diameter: f64,
}

impl OpticalConstants {
    pub fn of(optics: &OpticalField, domain: &Domain) -> OpticalConstants {
        OpticalConstants {
            sigma_min: optics.sigma_min(),
            sigma_max: optics.sigma_max(),
            kappa: optics.kappa(),
            alpha: optics.alpha(),
            ma: optics.ma(),
            ma_prime: optics.ma_prime(),
            diameter: domain.diameter(),
        }
    }

    /// Constants of `T + a id`: absorption and accretivity grow by `a`.
    pub fn shifted(&self, a: f64) -> OpticalConstants {
        OpticalConstants {
            sigma_min: self.sigma_min + a,
            sigma_max: self.sigma_max + a,
            alpha: self.alpha + a,
            ..*self
        }
    }
}

/// Upper bounds on `‖T⁻¹K‖` and `‖T⁻¹‖`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ContractionEstimate {
    pub gamma: f64,
    pub zeta: f64,
    pub term2: f64,
    pub term3: f64,
    pub rho: f64,
    pub c_t: f64,
}

impl ContractionEstimate {
    pub fn transport_dominated(&self) -> bool {
        self.rho < 1.0
    }
}

pub fn estimate_contraction(optics: &OpticalField, domain: &Domain) -> ContractionEstimate {
    contraction_of(&OpticalConstants::of(optics, domain))
}

pub fn contraction_of(c: &OpticalConstants) -> ContractionEstimate {
    let l = c.diameter;
    let c_t = if c.sigma_min > 0.0 {
        l.min((l / (2.0 * c.sigma_min)).sqrt())
    } else {
        l
    };
    // a normalized phase function has σ̄ = σ̄' = κ, so γ = sup κ/σ
    let (gamma, zeta, term2) = if c.sigma_min > 0.0 {
        let g = c.kappa / c.sigma_min;
        (
            g,
            g * c.sigma_max / c.sigma_min,
            (c.sigma_max - c.alpha) / c.sigma_min,
        )
    } else {
        (f64::INFINITY, f64::INFINITY, f64::INFINITY)
    };
    let term3 = (c.ma * c.ma_prime).sqrt() * c_t;
    ContractionEstimate {
        gamma,
        zeta,
        term2,
        term3,
        rho: zeta.min(term2).min(term3),
        c_t,
    }
}

/// `a/(a+α) − (σ_max−α)(σ_max+a)/(σ_min+a)²`, zero at the balancing shift.
pub fn shift_residual(a: f64, sigma_min: f64, sigma_max: f64, alpha: f64) -> f64 {
    a / (a + alpha) - (sigma_max - alpha) * (sigma_max + a) / ((sigma_min + a) * (sigma_min + a))
}

/// Shift `a*` balancing the preconditioner contraction `a/(a+α)` against the
/// bound on `‖(T + a)⁻¹K‖`, and the common rate `ρ* = a*/(a*+α)`.
pub fn compute_a_star(sigma_min: f64, sigma_max: f64, alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0) || !(sigma_min > 0.0) || sigma_max < sigma_min {
        return input("shift needs α > 0 and 0 < σ_min ≤ σ_max");
    }
    if sigma_max - alpha <= 0.0 {
        return Err(Error::Config(
            "no sign change: the scattering bound vanishes, no positive shift balances it".into(),
        ));
    }
    let h = |a: f64| shift_residual(a, sigma_min, sigma_max, alpha);
    let mut hi = 1.0;
    while h(hi) <= 0.0 {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::Config("no sign change in the shift bracket".into()));
        }
    }
    let mut lo = 0.0;
    while hi - lo > 1e-12 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if h(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    // one secant step polishes the bracketed root
    let (hl, hh) = (h(lo), h(hi));
    let a = if hh != hl {
        (lo - hl * (hi - lo) / (hh - hl)).clamp(lo, hi)
    } else {
        0.5 * (lo + hi)
    };
    Ok((a, a / (a + alpha)))
}

/// Riemann zeta `ζ(β)` for `β > 1` by Euler–Maclaurin summation.
pub fn riemann_zeta(beta: f64) -> Result<f64> {
    if !(beta > 1.0) {
        return input("zeta needs β > 1");
    }
    let n = 64.0_f64;
    let mut s: f64 = (1..64).map(|j| (j as f64).powf(-beta)).sum();
    s += n.powf(1.0 - beta) / (beta - 1.0) + 0.5 * n.powf(-beta);
    // Bernoulli corrections B₂ₖ/(2k)! · (β)_(2k−1) · n^(−β−2k+1)
    let b = [1.0 / 6.0, -1.0 / 30.0, 1.0 / 42.0, -1.0 / 30.0];
    let mut rising = beta;
    let mut fact = 2.0;
    for (k, bk) in b.iter().enumerate() {
        let k2 = 2 * (k + 1);
        s += bk / fact * rising * n.powf(-beta - k2 as f64 + 1.0);
        rising *= (beta + k2 as f64 - 1.0) * (beta + k2 as f64);
        fact *= ((k2 + 1) * (k2 + 2)) as f64;
    }
    Ok(s)
}

/// `η_n = (1+n)^(−β) ρⁿ`.
pub fn schedule(n: usize, rho: f64, beta: f64) -> f64 {
    (1.0 + n as f64).powf(-beta) * rho.powi(n as i32)
}

/// Number of outer steps after which `(ρ b + c ζ(β)) ρⁿ ≤ ε`.
pub fn step_bound(eps: f64, rho: f64, b: f64, c_zeta: f64) -> usize {
    let v = (eps.ln().abs() + (rho * b + c_zeta).ln()) / rho.ln().abs();
    v.ceil().max(0.0) as usize
}

/// `min{b, ‖ū_{n+1}‖ + (ρ b + ζ)ρ^(n−1)}`.
pub fn update_bound(b: f64, norm_next: f64, rho: f64, zeta_beta: f64, n: usize) -> f64 {
    b.min(norm_next + (rho * b + zeta_beta) * rho.powi(n as i32 - 1))
}

/// `ρ/(1−ρ) (‖ū_n − ū_{n−1}‖ + ζ(ρ^(n−1) + ρ^(n−2)))`, defined for `n ≥ 2`.
pub fn aposteriori_alt(diff: f64, rho: f64, zeta_beta: f64, n: usize) -> Option<f64> {
    if n < 2 || rho >= 1.0 {
        return None;
    }
    let n = n as i32;
    Some(rho / (1.0 - rho) * (diff + zeta_beta * (rho.powi(n - 1) + rho.powi(n - 2))))
}

/// Sizes reported per iterate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct FieldStats {
    pub dofs: usize,
    pub angular_cells: usize,
    pub spatial_cells: usize,
}

/// Error-controlled sub-routines for `T u − K u = f`.
pub trait Routines: Sized {
    type Field: Clone;
    type Scattered;
    type Source: Clone;

    fn zero(&self) -> Self::Field;
    fn norm(&self, u: &Self::Field) -> f64;
    fn distance(&self, a: &Self::Field, b: &Self::Field) -> Result<f64>;
    /// Upper bound on `‖f‖`.
    fn source_norm(&self, f: &Self::Source) -> f64;
    fn scale(&self, u: Self::Field, c: f64) -> Self::Field;
    fn stats(&self, _u: &Self::Field) -> FieldStats {
        FieldStats::default()
    }

    /// `[K, u; η]`.
    fn scatter(&mut self, u: &Self::Field, eta: f64) -> Result<Self::Scattered>;
    /// `[f; η]`.
    fn source(&mut self, f: &Self::Source, _eta: f64) -> Result<Self::Source> {
        Ok(f.clone())
    }
    /// `[T⁻¹, w + g; η]`.
    fn transport(&mut self, w: &Self::Scattered, g: &Self::Source, eta: f64)
        -> Result<Self::Field>;

    /// Routines for `T + a id` with the same kernel.
    fn shifted(&self, a: f64) -> Result<Self>;
    /// `u + [f/a; η]`.
    fn nested_source(
        &mut self,
        u: &Self::Field,
        f: &Self::Source,
        a: f64,
        eta: f64,
    ) -> Result<Self::Source>;
}

/// User-facing knobs of the outer iteration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationConfig {
    pub beta: f64,
    /// Split `κ₁ = ξ/C_T`, `κ₂ = 0`, `κ₃ = 1 − ξ`.
    pub xi: f64,
    /// Explicit `(κ₁, κ₂, κ₃)`, overriding `xi`.
    pub kappa: Option<[f64; 3]>,
    /// Sharper initial bound on `‖u‖`.
    pub b0: Option<f64>,
    /// Force the nested scheme even when transport dominates.
    pub force_nested: bool,
    pub max_steps: usize,
}

impl Default for IterationConfig {
    fn default() -> Self {
        IterationConfig {
            beta: 1.5,
            xi: 0.2,
            kappa: None,
            b0: None,
            force_nested: false,
            max_steps: 200,
        }
    }
}

/// Constants driving one source-term iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AstiParams {
    pub rho: f64,
    pub c_t: f64,
    pub kappa: [f64; 3],
    pub beta: f64,
    pub zeta_beta: f64,
    /// Accretivity constant; `b₀ = ‖f‖/α` unless overridden.
    pub alpha: f64,
    pub b0: Option<f64>,
    pub max_steps: usize,
}

impl AstiParams {
    pub fn new(rho: f64, c_t: f64, alpha: f64, cfg: &IterationConfig) -> Result<AstiParams> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::Config(format!(
                "source iteration needs a contraction, got ρ = {rho}"
            )));
        }
        let kappa = match cfg.kappa {
            Some(k) => k,
            None => {
                if !(cfg.xi >= 0.0 && cfg.xi <= 1.0) {
                    return input("ξ must lie in [0, 1]");
                }
                [cfg.xi / c_t, 0.0, 1.0 - cfg.xi]
            }
        };
        if kappa.iter().any(|k| *k < 0.0) || c_t * (kappa[0] + kappa[1]) + kappa[2] > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "tolerance split {kappa:?} violates C_T(κ₁+κ₂)+κ₃ ≤ 1"
            )));
        }
        if kappa[2] == 0.0 {
            return Err(Error::Config("transport share κ₃ must be positive".into()));
        }
        Ok(AstiParams {
            rho,
            c_t,
            kappa,
            beta: cfg.beta,
            zeta_beta: riemann_zeta(cfg.beta)?,
            alpha,
            b0: cfg.b0,
            max_steps: cfg.max_steps,
        })
    }
}

/// Constants of the nested scheme.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NestedParams {
    pub a_star: f64,
    pub rho_star: f64,
    pub alpha: f64,
    pub beta: f64,
    pub zeta_beta: f64,
    pub b0: Option<f64>,
    pub max_steps: usize,
    /// Source iteration for the shifted operator.
    pub inner: AstiParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Plan {
    Transport(AstiParams),
    Nested(NestedParams),
}

/// Picks the scheme from the contraction bound.
pub fn plan(c: &OpticalConstants, cfg: &IterationConfig) -> Result<Plan> {
    let est = contraction_of(c);
    if est.transport_dominated() && !cfg.force_nested {
        return Ok(Plan::Transport(AstiParams::new(
            est.rho, est.c_t, c.alpha, cfg,
        )?));
    }
    let (a_star, rho_star) = compute_a_star(c.sigma_min, c.sigma_max, c.alpha)?;
    let sh = c.shifted(a_star);
    let inner_est = contraction_of(&sh);
    let inner_cfg = IterationConfig {
        b0: None,
        ..cfg.clone()
    };
    let inner = AstiParams::new(
        inner_est.rho.min(rho_star),
        inner_est.c_t,
        sh.alpha,
        &inner_cfg,
    )?;
    Ok(Plan::Nested(NestedParams {
        a_star,
        rho_star,
        alpha: c.alpha,
        beta: cfg.beta,
        zeta_beta: riemann_zeta(cfg.beta)?,
        b0: cfg.b0,
        max_steps: cfg.max_steps,
        inner,
    }))
}

/// One row of the outer-iteration log; `error` certifies `ū_{n+1}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRow {
    pub n: usize,
    pub eta: f64,
    pub error: f64,
    pub bound: f64,
    pub norm: f64,
    pub alt: Option<f64>,
    pub stats: FieldStats,
    pub seconds: f64,
    pub inner_steps: usize,
}

/// Certified outcome of an outer iteration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Certificate {
    pub scheme: &'static str,
    pub epsilon: f64,
    /// Certified bound on `‖u − u_ε‖` for the returned iterate.
    pub error: f64,
    pub terminated: bool,
    /// Outer steps executed (transport solves or preconditioner applications).
    pub steps: usize,
    /// Value of `n` at the final bound check, comparable with `step_bound`.
    pub final_index: Option<usize>,
    pub step_bound: usize,
    pub rate: f64,
    pub b0: f64,
    pub bound: f64,
    pub plan: Plan,
    pub rows: Vec<IterationRow>,
    pub config: serde_json::Value,
}

impl Certificate {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }
}

type Observer<'o, F> = dyn FnMut(&IterationRow, &F) + 'o;

/// Source-term iteration `ū_{n+1} = [T⁻¹, [K, ū_n; κ₁η_n] + [f; κ₂η_n]; κ₃η_n]`,
/// stopped once the certified bound drops below `eps`.
pub fn asti<R: Routines>(
    r: &mut R,
    f: &R::Source,
    eps: f64,
    p: &AstiParams,
    observe: &mut Observer<'_, R::Field>,
) -> Result<(R::Field, Certificate)> {
    if !(eps > 0.0) {
        return input("target accuracy must be positive");
    }
    let b0 = p.b0.unwrap_or(r.source_norm(f) / p.alpha);
    let mut u = r.zero();
    let mut prev: Option<R::Field> = None;
    let mut err = b0;
    let mut b = b0;
    let mut rows = Vec::new();
    let mut n = 0;
    let mut final_index = None;
    while err > eps && n < p.max_steps {
        let t0 = Instant::now();
        let eta = schedule(n, p.rho, p.beta);
        let step = (|| {
            let w = r.scatter(&u, p.kappa[0] * eta)?;
            let g = r.source(f, p.kappa[1] * eta)?;
            r.transport(&w, &g, p.kappa[2] * eta)
        })()
        .map_err(|e| Error::Step {
            step: n,
            source: Box::new(e),
        })?;
        err = (p.rho * b + p.zeta_beta) * p.rho.powi(n as i32);
        let norm = r.norm(&step);
        b = update_bound(b, norm, p.rho, p.zeta_beta, n);
        let alt = match (&prev, n + 1 >= 2) {
            (Some(_), true) => aposteriori_alt(r.distance(&step, &u)?, p.rho, p.zeta_beta, n + 1),
            _ => None,
        };
        let row = IterationRow {
            n,
            eta,
            error: err,
            bound: b,
            norm,
            alt,
            stats: r.stats(&step),
            seconds: t0.elapsed().as_secs_f64(),
            inner_steps: 0,
        };
        observe(&row, &step);
        rows.push(row);
        prev = Some(std::mem::replace(&mut u, step));
        final_index = Some(n);
        n += 1;
    }
    Ok((
        u,
        Certificate {
            scheme: "asti",
            epsilon: eps,
            error: err,
            terminated: err <= eps,
            steps: n,
            final_index,
            step_bound: step_bound(eps, p.rho, b0, p.zeta_beta),
            rate: p.rho,
            b0,
            bound: b,
            plan: Plan::Transport(*p),
            rows,
            config: serde_json::Value::Null,
        },
    ))
}

/// Dispatches to `asti` when transport dominates, otherwise iterates
/// `ū_{n+1} = a* · asti(T + a*, K, ū_n + [f/a*; η_n]; η_n)`.
pub fn n_asti<R: Routines>(
    r: &mut R,
    f: &R::Source,
    eps: f64,
    plan: &Plan,
    observe: &mut Observer<'_, R::Field>,
) -> Result<(R::Field, Certificate)> {
    let p = match plan {
        Plan::Transport(p) => return asti(r, f, eps, p, observe),
        Plan::Nested(p) => p,
    };
    if !(eps > 0.0) {
        return input("target accuracy must be positive");
    }
    let a = p.a_star;
    let rho = p.rho_star;
    let cz = (1.0 + a) * p.zeta_beta;
    let b0 = p.b0.unwrap_or(r.source_norm(f) / p.alpha);
    let mut inner = r.shifted(a)?;
    let mut u = r.zero();
    let mut err = b0;
    let mut b = b0;
    let mut rows = Vec::new();
    let mut n = 0;
    let mut final_index = None;
    while err > eps && n < p.max_steps {
        let t0 = Instant::now();
        let eta = schedule(n, rho, p.beta);
        let (v, cert) = (|| {
            let g = r.nested_source(&u, f, a, eta)?;
            asti(&mut inner, &g, eta, &p.inner, &mut |_, _| {})
        })()
        .map_err(|e| Error::Step {
            step: n,
            source: Box::new(e),
        })?;
        if !cert.terminated {
            return Err(Error::Step {
                step: n,
                source: Box::new(Error::Numerical(format!(
                    "inner iteration stopped at {:.3e} above {eta:.3e}",
                    cert.error
                ))),
            });
        }
        let step = r.scale(v, a);
        err = (rho * b + cz) * rho.powi(n as i32);
        let norm = r.norm(&step);
        b = update_bound(b, norm, rho, cz, n);
        let alt = if n >= 1 {
            aposteriori_alt(r.distance(&step, &u)?, rho, cz, n + 1)
        } else {
            None
        };
        let row = IterationRow {
            n,
            eta,
            error: err,
            bound: b,
            norm,
            alt,
            stats: r.stats(&step),
            seconds: t0.elapsed().as_secs_f64(),
            inner_steps: cert.steps,
        };
        observe(&row, &step);
        rows.push(row);
        u = step;
        final_index = Some(n);
        n += 1;
    }
    Ok((
        u,
        Certificate {
            scheme: "n-asti",
            epsilon: eps,
            error: err,
            terminated: err <= eps,
            steps: n,
            final_index,
            step_bound: step_bound(eps, rho, b0, cz),
            rate: rho,
            b0,
            bound: b,
            plan: *plan,
            rows,
            config: serde_json::Value::Null,
        },
    ))
}

/// Finite-dimensional stand-in `T = σI + S` (`S` skew), `K = κG` with a
/// symmetric doubly stochastic circulant `G`, whose routines return the exact
/// result plus a random perturbation of norm exactly the tolerance.
pub mod model {
    use faer::linalg::solvers::Solve;
    use faer::Mat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{FieldStats, Routines};
    use crate::error::Result;

    #[derive(Clone)]
    pub struct NoisyLinearModel {
        pub dim: usize,
        pub sigma: f64,
        pub kappa: f64,
        pub shift: f64,
        skew: Mat<f64>,
        pub g: Mat<f64>,
        rng: ChaCha8Rng,
        /// Every call as `(requested, achieved)`.
        pub calls: Vec<(f64, f64)>,
    }

    impl NoisyLinearModel {
        pub fn new(dim: usize, sigma: f64, kappa: f64, seed: u64) -> NoisyLinearModel {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut skew = Mat::zeros(dim, dim);
            for i in 0..dim {
                for j in 0..i {
                    let v: f64 = rng.gen_range(-1.0..1.0);
                    skew[(i, j)] = v;
                    skew[(j, i)] = -v;
                }
            }
            // wrapped kernel weights, normalized to unit row sums
            let w: Vec<f64> = (0..dim)
                .map(|k| 0.5f64.powi(k.min(dim - k) as i32))
                .collect();
            let tot: f64 = w.iter().sum();
            let g = Mat::from_fn(dim, dim, |i, j| w[(i + dim - j) % dim] / tot);
            NoisyLinearModel {
                dim,
                sigma,
                kappa,
                shift: 0.0,
                skew,
                g,
                rng,
                calls: Vec::new(),
            }
        }

        fn t(&self) -> Mat<f64> {
            let s = self.sigma + self.shift;
            Mat::from_fn(self.dim, self.dim, |i, j| {
                self.skew[(i, j)] + if i == j { s } else { 0.0 }
            })
        }

        pub fn apply_k(&self, u: &[f64]) -> Vec<f64> {
            (0..self.dim)
                .map(|i| self.kappa * (0..self.dim).map(|j| self.g[(i, j)] * u[j]).sum::<f64>())
                .collect()
        }

        fn solve(&self, m: Mat<f64>, g: &[f64]) -> Vec<f64> {
            let rhs = Mat::from_fn(self.dim, 1, |i, _| g[i]);
            let x = m.partial_piv_lu().solve(&rhs);
            (0..self.dim).map(|i| x[(i, 0)]).collect()
        }

        /// `T⁻¹ g` for the current shift.
        pub fn t_inv(&self, g: &[f64]) -> Vec<f64> {
            self.solve(self.t(), g)
        }

        /// `(T + a − K)⁻¹ g`.
        pub fn b_inv(&self, g: &[f64], a: f64) -> Vec<f64> {
            let t = self.t();
            let m = Mat::from_fn(self.dim, self.dim, |i, j| {
                t[(i, j)] - self.kappa * self.g[(i, j)] + if i == j { a } else { 0.0 }
            });
            self.solve(m, g)
        }

        fn perturb(&mut self, mut v: Vec<f64>, eta: f64) -> Vec<f64> {
            let d: Vec<f64> = (0..self.dim)
                .map(|_| self.rng.gen_range(-1.0..1.0))
                .collect();
            let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().zip(&d).for_each(|(x, y)| *x += eta * y / n);
            self.calls.push((eta, eta));
            v
        }
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    impl Routines for NoisyLinearModel {
        type Field = Vec<f64>;
        type Scattered = Vec<f64>;
        type Source = Vec<f64>;

        fn zero(&self) -> Vec<f64> {
            vec![0.0; self.dim]
        }
        fn norm(&self, u: &Vec<f64>) -> f64 {
            norm(u)
        }
        fn distance(&self, a: &Vec<f64>, b: &Vec<f64>) -> Result<f64> {
            Ok(a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt())
        }
        fn source_norm(&self, f: &Vec<f64>) -> f64 {
            norm(f)
        }
        fn scale(&self, u: Vec<f64>, c: f64) -> Vec<f64> {
            u.into_iter().map(|x| c * x).collect()
        }
        fn stats(&self, _u: &Vec<f64>) -> FieldStats {
            FieldStats {
                dofs: self.dim,
                angular_cells: 0,
                spatial_cells: 0,
            }
        }
        fn scatter(&mut self, u: &Vec<f64>, eta: f64) -> Result<Vec<f64>> {
            let k = self.apply_k(u);
            Ok(self.perturb(k, eta))
        }
        fn source(&mut self, f: &Vec<f64>, eta: f64) -> Result<Vec<f64>> {
            Ok(self.perturb(f.clone(), eta))
        }
        fn transport(&mut self, w: &Vec<f64>, g: &Vec<f64>, eta: f64) -> Result<Vec<f64>> {
            let rhs: Vec<f64> = w.iter().zip(g).map(|(a, b)| a + b).collect();
            let x = self.t_inv(&rhs);
            Ok(self.perturb(x, eta))
        }
        fn shifted(&self, a: f64) -> Result<Self> {
            let mut m = self.clone();
            m.shift += a;
            m.calls.clear();
            Ok(m)
        }
        fn nested_source(
            &mut self,
            u: &Vec<f64>,
            f: &Vec<f64>,
            a: f64,
            eta: f64,
        ) -> Result<Vec<f64>> {
            let v = f.iter().map(|x| x / a).collect();
            let v = self.perturb(v, eta);
            Ok(u.iter().zip(v).map(|(x, y)| x + y).collect())
        }
    }
}
