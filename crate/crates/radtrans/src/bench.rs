//! Checkerboard benchmark: configuration, driver and text outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::dpg::DpgConfig;
use crate::error::{Error, Result};
use crate::grid::GridField;
use crate::iteration::{
    contraction_of, n_asti, plan, Certificate, ContractionEstimate, IterationConfig, IterationRow,
    OpticalConstants,
};
use crate::kernel::{KernelSpec, Route, Scatterer};
use crate::mesh::Domain;
use crate::optics::OpticalField;
use crate::phase::{dump_poly, Deadline, PhaseSpaceField, TransportConfig};
use crate::transfer::{grid_l2, CallRecord, PhaseSource, TransferRoutines};

/// Flat key=value configuration of a benchmark run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkConfig {
    pub gamma: f64,
    /// Angular polynomial degree `M`.
    pub angular_degree: usize,
    /// Trace degree `m`; the bulk has degree `m − 1`.
    pub spatial_degree: usize,
    pub epsilon: f64,
    pub beta: f64,
    pub xi: f64,
    pub bulk_fraction: f64,
    pub omega: f64,
    pub c_rel: f64,
    pub kappa_t: f64,
    pub subgrid_depth: u8,
    pub kernel_level: u8,
    pub initial_level: u8,
    pub min_angular_level: u8,
    pub max_angular_level: u8,
    pub max_level: u8,
    pub max_steps: usize,
    pub threads: usize,
    /// Wall-clock limit in seconds for the whole run.
    pub time_limit: Option<f64>,
    /// Directions whose fiber fields and meshes are dumped.
    pub directions: Vec<f64>,
    pub output: Option<PathBuf>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            gamma: 0.5,
            angular_degree: 2,
            spatial_degree: 2,
            epsilon: 5e-2,
            beta: 1.5,
            xi: 0.2,
            bulk_fraction: 0.5,
            omega: 1.0,
            c_rel: 2.0,
            kappa_t: 0.7,
            subgrid_depth: 0,
            kernel_level: 6,
            initial_level: 0,
            min_angular_level: 2,
            max_angular_level: 12,
            max_level: 14,
            max_steps: 60,
            threads: 0,
            time_limit: None,
            directions: vec![0.2, 1.0],
            output: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: {v:?}")))
}

impl BenchmarkConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "gamma" => self.gamma = num(key, v)?,
            "angular_degree" => self.angular_degree = num(key, v)?,
            "spatial_degree" => self.spatial_degree = num(key, v)?,
            "epsilon" => self.epsilon = num(key, v)?,
            "beta" => self.beta = num(key, v)?,
            "xi" => self.xi = num(key, v)?,
            "bulk_fraction" => self.bulk_fraction = num(key, v)?,
            "omega" => self.omega = num(key, v)?,
            "c_rel" => self.c_rel = num(key, v)?,
            "kappa_t" => self.kappa_t = num(key, v)?,
            "subgrid_depth" => self.subgrid_depth = num(key, v)?,
            "kernel_level" => self.kernel_level = num(key, v)?,
            "initial_level" => self.initial_level = num(key, v)?,
            "min_angular_level" => self.min_angular_level = num(key, v)?,
            "max_angular_level" => self.max_angular_level = num(key, v)?,
            "max_level" => self.max_level = num(key, v)?,
            "max_steps" => self.max_steps = num(key, v)?,
            "threads" => self.threads = num(key, v)?,
            "time_limit" => self.time_limit = (!v.is_empty()).then(|| num(key, v)).transpose()?,
            "directions" => {
                self.directions = v
                    .split(',')
                    .map(|s| s.trim())
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            "output" => self.output = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
    pub fn parse(text: &str) -> Result<BenchmarkConfig> {
        let mut c = BenchmarkConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            c.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<BenchmarkConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        BenchmarkConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.time_limit.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::Config("time_limit must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config("gamma must lie in [0, 1)".into()));
        }
        if self.spatial_degree < 1 {
            return Err(Error::Config("spatial_degree must be at least 1".into()));
        }
        if !(self.beta > 1.0) {
            return Err(Error::Config("beta must exceed 1".into()));
        }
        Ok(())
    }

    pub fn transport(&self) -> TransportConfig {
        TransportConfig {
            dpg: DpgConfig {
                m: self.spatial_degree,
                subgrid_depth: self.subgrid_depth,
                c_rel: self.c_rel,
                bulk_fraction: self.bulk_fraction,
                max_level: self.max_level,
                ..DpgConfig::default()
            },
            big_m: self.angular_degree,
            kappa_t: self.kappa_t,
            omega: self.omega,
            initial_level: self.initial_level,
            min_angular_level: self.min_angular_level,
            max_angular_level: self.max_angular_level,
            deadline: None,
        }
    }

    pub fn iteration(&self) -> IterationConfig {
        IterationConfig {
            beta: self.beta,
            xi: self.xi,
            max_steps: self.max_steps,
            ..IterationConfig::default()
        }
    }
}

/// Gray cells of the 7×7 layout: `(i+j)` even inside the inner 5×5 block,
/// except the source cell `(3,3)` and `(3,5)`.
pub fn is_gray(i: usize, j: usize) -> bool {
    (1..=5).contains(&i)
        && (1..=5).contains(&j)
        && (i + j).is_multiple_of(2)
        && !(i == 3 && (j == 3 || j == 5))
}

/// Absorption (10 on gray cells, 2 elsewhere), Henyey–Greenstein scattering
/// with unit density, and the unit source on the center cell. Meshes are
/// rooted on the same 7×7 grid so that coefficient jumps fall on cell faces.
pub fn checkerboard(gamma: f64) -> Result<(OpticalField, GridField)> {
    let d = Domain::unit_square().with_roots(7, 7)?;
    let sigma = (0..49)
        .map(|k| if is_gray(k % 7, k / 7) { 10.0 } else { 2.0 })
        .collect();
    let source = (0..49)
        .map(|k| if k % 7 == 3 && k / 7 == 3 { 1.0 } else { 0.0 })
        .collect();
    let optics = OpticalField::new(
        GridField::new(d, 7, 7, sigma)?,
        KernelSpec::henyey_greenstein(gamma)?,
    )?;
    Ok((optics, GridField::new(d, 7, 7, source)?))
}

/// Constants of a run: contraction bound, `b₀` and the step bound.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConstants {
    pub estimate: ContractionEstimate,
    pub b0: f64,
    pub kappa: [f64; 3],
}

pub fn checkerboard_constants(cfg: &BenchmarkConfig) -> Result<RunConstants> {
    let (optics, source) = checkerboard(cfg.gamma)?;
    let c = OpticalConstants::of(&optics, &Domain::unit_square());
    let estimate = contraction_of(&c);
    let kappa = match plan(&c, &cfg.iteration())? {
        crate::iteration::Plan::Transport(p) => p.kappa,
        crate::iteration::Plan::Nested(p) => p.inner.kappa,
    };
    Ok(RunConstants {
        estimate,
        b0: grid_l2(&source) / c.alpha,
        kappa,
    })
}

/// Everything a run produces.
pub struct BenchmarkRun {
    pub constants: RunConstants,
    pub certificate: Certificate,
    pub field: PhaseSpaceField,
    pub calls: Vec<CallRecord>,
    pub fiber_solves: usize,
    pub seconds: f64,
}

/// Header `n,error,dofs,seconds,angular_cells,spatial_cells`; `n` counts
/// completed outer steps and `error` certifies the iterate after step `n`.
pub fn convergence_csv(rows: &[IterationRow]) -> String {
    let mut s = String::from("n,error,dofs,seconds,angular_cells,spatial_cells\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:e},{},{:.3},{},{}",
            r.n + 1,
            r.error,
            r.stats.dofs,
            r.seconds,
            r.stats.angular_cells,
            r.stats.spatial_cells
        );
    }
    s
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, text).map_err(|e| Error::Io {
        path: p.display().to_string(),
        source: e,
    })
}

/// Integrated density `∫ u ds` with its mesh, in the mesh and field dump formats.
pub fn density_dump(u: &PhaseSpaceField) -> Result<String> {
    let d = u.integrated_density()?;
    Ok(format!("{}{}", d.mesh.dump(), dump_poly(&d)))
}

/// Fiber field at `theta` on its block mesh.
pub fn direction_dump(u: &PhaseSpaceField, theta: f64) -> String {
    let p = u.at(theta);
    format!("direction {theta}\n{}{}", p.mesh.dump(), dump_poly(&p))
}

/// Sizes the global rayon pool; `0` keeps the default. Only the first call
/// in a process takes effect.
pub fn configure_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Runs the nested source-term iteration on the checkerboard, writing outputs
/// to `cfg.output` when set.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkRun> {
    run_benchmark_with(cfg, &mut |_, _| {})
}

/// Like [`run_benchmark`], calling `progress` after every outer step.
pub fn run_benchmark_with(
    cfg: &BenchmarkConfig,
    progress: &mut dyn FnMut(&IterationRow, &PhaseSpaceField),
) -> Result<BenchmarkRun> {
    cfg.validate()?;
    let t0 = Instant::now();
    let mut transport = cfg.transport();
    transport.deadline = cfg.time_limit.map(Deadline::after);
    let (optics, source) = checkerboard(cfg.gamma)?;
    let constants = checkerboard_constants(cfg)?;
    let c = OpticalConstants::of(&optics, &Domain::unit_square());
    let pl = plan(&c, &cfg.iteration())?;
    let scatterer = Arc::new(Scatterer::new(
        &optics.kernel,
        cfg.angular_degree,
        cfg.kernel_level,
        Route::LowRank,
    )?);
    let mut routines = TransferRoutines::new(optics, transport, scatterer.clone())?;
    let f = PhaseSource::load(source);
    let dir = cfg.output.clone();
    if let Some(d) = &dir {
        std::fs::create_dir_all(d).map_err(|e| Error::Io {
            path: d.display().to_string(),
            source: e,
        })?;
    }
    let mut dump_err: Option<Error> = None;
    let mut observe = |row: &IterationRow, u: &PhaseSpaceField| {
        progress(row, u);
        if let (Some(d), None) = (&dir, &dump_err) {
            if let Err(e) =
                density_dump(u).and_then(|s| write(d, &format!("density_{}.txt", row.n + 1), &s))
            {
                dump_err = Some(e);
            }
        }
    };
    let (field, mut certificate) = n_asti(&mut routines, &f, cfg.epsilon, &pl, &mut observe)?;
    if let Some(e) = dump_err {
        return Err(e);
    }
    certificate.config = serde_json::to_value(cfg).expect("config serializes");
    let run = BenchmarkRun {
        constants,
        certificate,
        field,
        calls: routines.calls.clone(),
        fiber_solves: routines.fiber_solves,
        seconds: t0.elapsed().as_secs_f64(),
    };
    if let Some(d) = &dir {
        write_outputs(&run, cfg, &scatterer, d)?;
    }
    Ok(run)
}

fn write_outputs(
    run: &BenchmarkRun,
    cfg: &BenchmarkConfig,
    scatterer: &Scatterer,
    dir: &Path,
) -> Result<()> {
    write(
        dir,
        "convergence.csv",
        &convergence_csv(&run.certificate.rows),
    )?;
    write(dir, "certificate.json", &run.certificate.to_json())?;
    let mut calls = String::from("routine,requested,achieved\n");
    for c in &run.calls {
        let _ = writeln!(calls, "{},{:e},{:e}", c.routine, c.requested, c.achieved);
    }
    write(dir, "calls.csv", &calls)?;
    write(dir, "density_final.txt", &density_dump(&run.field)?)?;
    for (k, th) in cfg.directions.iter().enumerate() {
        write(
            dir,
            &format!("direction_{k}.txt"),
            &direction_dump(&run.field, *th),
        )?;
    }
    write(dir, "kernel.txt", &scatterer.matrix.dump(1e-12))?;
    let sv = scatterer.matrix.singular_values()?;
    write(
        dir,
        "singular_values.txt",
        &sv.iter().map(|v| format!("{v:e}\n")).collect::<String>(),
    )?;
    Ok(())
}

/// Summary line per outer step for terminal output.
pub fn describe(run: &BenchmarkRun) -> String {
    let e = &run.constants.estimate;
    let mut s = format!(
        "C_T = {:.6}  rho = {:.6}  b0 = {:.6}  kappa = ({:.6}, {}, {})\n",
        e.c_t,
        e.rho,
        run.constants.b0,
        run.constants.kappa[0],
        run.constants.kappa[1],
        run.constants.kappa[2]
    );
    for r in &run.certificate.rows {
        let _ = writeln!(
            s,
            "n = {:2}  err = {:.6e}  dofs = {:9}  arcs = {:4}  cells = {:6}  {:.1}s",
            r.n + 1,
            r.error,
            r.stats.dofs,
            r.stats.angular_cells,
            r.stats.spatial_cells,
            r.seconds
        );
    }
    let _ = writeln!(
        s,
        "certified {:.6e} <= {:e}: {}  ({} steps, bound {}, {:.1}s)",
        run.certificate.error,
        run.certificate.epsilon,
        run.certificate.terminated,
        run.certificate.steps,
        run.certificate.step_bound,
        run.seconds
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_matches_geometry() {
        let gray: Vec<(usize, usize)> = (0..7)
            .flat_map(|j| (0..7).map(move |i| (i, j)))
            .filter(|&(i, j)| is_gray(i, j))
            .collect();
        assert_eq!(gray.len(), 11);
        assert!(
            !is_gray(3, 3) && !is_gray(3, 5) && is_gray(1, 1) && is_gray(5, 5) && !is_gray(0, 0)
        );
        let (o, f) = checkerboard(0.5).unwrap();
        assert_eq!((o.sigma_min(), o.sigma_max(), o.alpha()), (2.0, 10.0, 1.0));
        assert_eq!(f.eval([0.5, 0.5]), 1.0);
        assert_eq!(o.sigma.eval([1.5 / 7.0, 1.5 / 7.0]), 10.0);
    }

    #[test]
    fn table_constants() {
        let c = checkerboard_constants(&BenchmarkConfig::default()).unwrap();
        assert!((c.estimate.c_t - 0.594604).abs() < 1e-6);
        assert!((c.estimate.rho - 0.594604).abs() < 1e-6);
        assert!((c.b0 - 1.0 / 7.0).abs() < 1e-15);
        assert!(
            (c.kappa[0] - 0.2 / c.estimate.c_t).abs() < 1e-15
                && c.kappa[1] == 0.0
                && c.kappa[2] == 0.8
        );
    }

    #[test]
    fn config_parsing() {
        let c = BenchmarkConfig::parse(
            "# comment\n\ngamma = 0.3\nepsilon=0.1 # trailing\ndirections = 0.5, 2.5\n",
        )
        .unwrap();
        assert_eq!(
            (c.gamma, c.epsilon, c.directions.clone()),
            (0.3, 0.1, vec![0.5, 2.5])
        );
        assert_eq!(
            BenchmarkConfig::parse("").unwrap(),
            BenchmarkConfig::default()
        );
        let e = BenchmarkConfig::parse("gamma = 0.3\nbogus = 1\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 2"), "{e}");
        assert!(BenchmarkConfig::parse("gamma = 1.5").is_err());
        assert!(BenchmarkConfig::parse("epsilon").is_err());
    }

    #[test]
    fn large_epsilon_returns_zero() {
        let cfg = BenchmarkConfig {
            epsilon: 0.2,
            ..Default::default()
        };
        let run = run_benchmark(&cfg).unwrap();
        assert_eq!(run.certificate.steps, 0);
        assert!(run.field.is_zero());
        assert!((run.certificate.error - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(convergence_csv(&run.certificate.rows).lines().count(), 1);
    }
}
