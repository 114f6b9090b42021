//! Phase-space realization of the outer-iteration routines: DPG transport
//! inversion, low-rank scattering application and exact sources.

use std::sync::Arc;

use serde::Serialize;

use crate::angular::AngularPartition;
use crate::error::Result;
use crate::grid::GridField;
use crate::iteration::{FieldStats, Routines};
use crate::kernel::Scatterer;
use crate::mesh::SpatialMesh;
use crate::optics::OpticalField;
use crate::phase::{
    apply_scattering, PhaseRhs, PhaseSpaceField, PhaseTerm, ScatteredField, TransportConfig,
    TransportSolver,
};

/// Direction-independent loads plus phase-space fields, all represented exactly.
#[derive(Clone, Debug, Default)]
pub struct PhaseSource {
    pub loads: Vec<(f64, GridField)>,
    pub fields: Vec<(f64, PhaseSpaceField)>,
}

impl PhaseSource {
    pub fn load(f: GridField) -> PhaseSource {
        PhaseSource {
            loads: vec![(1.0, f)],
            fields: Vec::new(),
        }
    }
}

/// `‖f‖_{L2(D)}` of a grid field.
pub fn grid_l2(f: &GridField) -> f64 {
    let cell = f.domain.area() / (f.nx * f.ny) as f64;
    (f.values.iter().map(|v| v * v).sum::<f64>() * cell).sqrt()
}

/// One sub-routine call with its requested tolerance and achieved certificate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CallRecord {
    pub routine: &'static str,
    pub requested: f64,
    pub achieved: f64,
}

pub struct TransferRoutines {
    pub solver: TransportSolver,
    pub scatterer: Arc<Scatterer>,
    /// Angular partition of the latest transport output, reused as a start.
    pub partition: AngularPartition,
    pub calls: Vec<CallRecord>,
    /// Fiber solves performed so far.
    pub fiber_solves: usize,
}

impl TransferRoutines {
    pub fn new(
        optics: OpticalField,
        cfg: TransportConfig,
        scatterer: Arc<Scatterer>,
    ) -> Result<TransferRoutines> {
        let partition = AngularPartition::uniform(cfg.min_angular_level);
        let solver = TransportSolver::new(optics, cfg)?;
        Ok(TransferRoutines {
            solver,
            scatterer,
            partition,
            calls: Vec::new(),
            fiber_solves: 0,
        })
    }

    fn record(&mut self, routine: &'static str, requested: f64, achieved: f64) {
        self.calls.push(CallRecord {
            routine,
            requested,
            achieved,
        });
    }
}

impl Routines for TransferRoutines {
    type Field = PhaseSpaceField;
    type Scattered = ScatteredField;
    type Source = PhaseSource;

    fn zero(&self) -> PhaseSpaceField {
        let cfg = &self.solver.cfg;
        let mesh = Arc::new(SpatialMesh::uniform(self.solver.domain, cfg.initial_level));
        PhaseSpaceField::zeros(
            mesh,
            cfg.dpg.m,
            cfg.big_m,
            AngularPartition::uniform(cfg.min_angular_level),
        )
    }

    fn norm(&self, u: &PhaseSpaceField) -> f64 {
        u.norm()
    }

    fn distance(&self, a: &PhaseSpaceField, b: &PhaseSpaceField) -> Result<f64> {
        a.distance(b)
    }

    fn source_norm(&self, f: &PhaseSource) -> f64 {
        f.loads
            .iter()
            .map(|(c, g)| c.abs() * grid_l2(g))
            .sum::<f64>()
            + f.fields
                .iter()
                .map(|(c, u)| c.abs() * u.norm())
                .sum::<f64>()
    }

    fn scale(&self, u: PhaseSpaceField, c: f64) -> PhaseSpaceField {
        u.scaled(c)
    }

    fn stats(&self, u: &PhaseSpaceField) -> FieldStats {
        FieldStats {
            dofs: u.dofs(),
            angular_cells: u.partition.len(),
            spatial_cells: u.merged_mesh().map(|m| m.len()).unwrap_or(0),
        }
    }

    fn scatter(&mut self, u: &PhaseSpaceField, eta: f64) -> Result<ScatteredField> {
        let w = apply_scattering(&self.scatterer, u, eta)?;
        self.record("scatter", eta, w.certificate);
        Ok(w)
    }

    fn transport(
        &mut self,
        w: &ScatteredField,
        g: &PhaseSource,
        eta: f64,
    ) -> Result<PhaseSpaceField> {
        let mut rhs = PhaseRhs::new().with(PhaseTerm::Scattered(1.0, w));
        for (c, l) in &g.loads {
            rhs = rhs.with(PhaseTerm::Static(*c, l));
        }
        for (c, f) in &g.fields {
            rhs = rhs.with(PhaseTerm::Field(*c, f));
        }
        let start = self.partition.clone();
        let out = self.solver.solve(&rhs, eta, &start)?;
        let c_rel = self.solver.cfg.dpg.c_rel;
        let nodes = out
            .records
            .iter()
            .map(|r| c_rel * r.achieved)
            .fold(0.0, f64::max);
        self.fiber_solves += out.records.len();
        self.record("transport", eta, nodes.max(out.sampled_error));
        self.partition = out.field.partition.clone();
        Ok(out.field)
    }

    fn shifted(&self, a: f64) -> Result<TransferRoutines> {
        TransferRoutines::new(
            self.solver.optics.shifted(a),
            self.solver.cfg.clone(),
            self.scatterer.clone(),
        )
    }

    fn nested_source(
        &mut self,
        u: &PhaseSpaceField,
        f: &PhaseSource,
        a: f64,
        _eta: f64,
    ) -> Result<PhaseSource> {
        let mut g = PhaseSource {
            loads: f.loads.iter().map(|(c, l)| (c / a, l.clone())).collect(),
            fields: f.fields.iter().map(|(c, v)| (c / a, v.clone())).collect(),
        };
        if !u.is_zero() {
            g.fields.push((1.0, u.clone()));
        }
        self.record("source", 0.0, 0.0);
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iteration::{asti, contraction_of, AstiParams, IterationConfig, OpticalConstants};
    use crate::kernel::{KernelSpec, Route};
    use crate::mesh::Domain;

    #[test]
    fn grid_norm() {
        let g = GridField::new(
            Domain::unit_square(),
            7,
            7,
            (0..49).map(|i| if i == 24 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        assert!((grid_l2(&g) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn isotropic_scattering_asti_converges() {
        // constant medium with strong absorption: two outer steps suffice
        let sigma = GridField::constant(Domain::unit_square(), 4.0);
        let optics = OpticalField::new(sigma, KernelSpec::isotropic()).unwrap();
        let sc = Arc::new(Scatterer::new(&optics.kernel, 2, 4, Route::Auto).unwrap());
        let cfg = TransportConfig::default();
        let mut r = TransferRoutines::new(optics.clone(), cfg, sc).unwrap();
        let est = contraction_of(&OpticalConstants::of(&optics, &Domain::unit_square()));
        let p = AstiParams::new(
            est.rho,
            est.c_t,
            optics.alpha(),
            &IterationConfig::default(),
        )
        .unwrap();
        let f = PhaseSource::load(GridField::constant(Domain::unit_square(), 1.0));
        let (u, c) = asti(&mut r, &f, 0.25, &p, &mut |_, _| {}).unwrap();
        assert!(c.terminated && c.error <= 0.25);
        assert!(u.norm() > 0.0);
        assert!(r.calls.iter().all(|c| c.achieved <= c.requested));
    }
}
