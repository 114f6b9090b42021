use proptest::prelude::*;
use radtrans::angular::{quadrature_points, AngularPartition, Arc};
use radtrans::iteration::{compute_a_star, riemann_zeta, schedule, shift_residual, step_bound};
use radtrans::kernel::{compress, spectral_norm, KernelMatrix, KernelSpec};
use radtrans::mesh::{Cell, Domain, SpatialMesh};

/// Mesh on an `nx × ny` root grid after `rounds` of refining leaves picked by `picks`.
fn random_mesh(nx: u32, ny: u32, picks: &[usize]) -> SpatialMesh {
    let d = Domain::unit_square().with_roots(nx, ny).unwrap();
    let mut m = SpatialMesh::uniform(d, 0);
    for p in picks {
        let c = m.leaves()[p % m.len()];
        if c.level < 6 {
            m = m.refine(&[c]).unwrap();
        }
    }
    m
}

fn random_partition(picks: &[usize]) -> AngularPartition {
    let mut p = AngularPartition::root();
    for k in picks {
        let a = p.leaves()[k % p.len()];
        if a.level < 8 {
            p = p.refine(&[a]).unwrap();
        }
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn refined_meshes_tile_and_stay_one_irregular(nx in 1u32..5, ny in 1u32..5, picks in prop::collection::vec(0usize..1000, 0..25)) {
        let m = random_mesh(nx, ny, &picks);
        prop_assert!(m.is_one_irregular());
        prop_assert!((m.total_area() - 1.0).abs() < 1e-12);
        let rebuilt = SpatialMesh::from_leaves(*m.domain(), m.leaves().to_vec()).unwrap();
        prop_assert_eq!(&rebuilt, &m);
        let ids: std::collections::BTreeSet<u64> = m.leaves().iter().map(|c| m.cell_id(c)).collect();
        prop_assert_eq!(ids.len(), m.len());
    }

    #[test]
    fn merge_is_the_common_refinement(
        n in 1u32..4,
        a in prop::collection::vec(0usize..1000, 0..15),
        b in prop::collection::vec(0usize..1000, 0..15),
    ) {
        let ma = random_mesh(n, n, &a);
        let mb = random_mesh(n, n, &b);
        let ab = SpatialMesh::merge(&ma, &mb).unwrap();
        prop_assert_eq!(&ab, &SpatialMesh::merge(&mb, &ma).unwrap());
        prop_assert_eq!(&SpatialMesh::merge(&ab, &ab).unwrap(), &ab);
        prop_assert!(ab.refines(&ma) && ab.refines(&mb));
        prop_assert!((ab.total_area() - 1.0).abs() < 1e-12);
        for c in ab.leaves() {
            prop_assert!(ma.is_leaf(c) || mb.is_leaf(c));
        }
    }

    #[test]
    fn locate_returns_the_containing_leaf(n in 1u32..5, picks in prop::collection::vec(0usize..1000, 0..20), x in 0.0f64..1.0, y in 0.0f64..1.0) {
        let m = random_mesh(n, n, &picks);
        let k = m.locate([x, y]).unwrap();
        let b = m.cell_box(&m.leaves()[k]);
        prop_assert!(b[0] <= x && x <= b[2] && b[1] <= y && y <= b[3]);
        let Cell { level, .. } = m.leaves()[k];
        prop_assert!(level <= m.max_level());
    }

    #[test]
    fn angular_partitions_cover_the_circle(a in prop::collection::vec(0usize..1000, 0..30), b in prop::collection::vec(0usize..1000, 0..30), theta in 0.0f64..std::f64::consts::TAU) {
        let pa = random_partition(&a);
        let pb = random_partition(&b);
        let total: f64 = pa.leaves().iter().map(Arc::len).sum();
        prop_assert!((total - std::f64::consts::TAU).abs() < 1e-12);
        let m = AngularPartition::merge(&pa, &pb);
        prop_assert_eq!(&m, &AngularPartition::merge(&pb, &pa));
        prop_assert!(m.len() >= pa.len().max(pb.len()));
        let k = m.locate(theta);
        prop_assert!(m.leaves()[k].contains_angle(theta));
        let w: f64 = quadrature_points(&m, 2).iter().flat_map(|r| r.weights.iter()).sum();
        prop_assert!((w - std::f64::consts::TAU).abs() < 1e-11);
    }

    #[test]
    fn shift_root_solves_its_equation(smin in 0.5f64..5.0, spread in 0.0f64..2.0, frac in 0.01f64..0.9) {
        let smax = smin * (1.0 + spread);
        let alpha = frac * smin;
        if let Ok((a, rho)) = compute_a_star(smin, smax, alpha) {
            prop_assert!(a > 0.0);
            prop_assert!(shift_residual(a, smin, smax, alpha).abs() <= 1e-10);
            prop_assert!((rho - a / (a + alpha)).abs() <= 1e-12);
            prop_assert!(rho > 0.0 && rho < 1.0);
        }
    }

    #[test]
    fn step_bound_reaches_the_tolerance(eps in 1e-6f64..0.5, rho in 0.05f64..0.95, b in 0.0f64..10.0, cz in 0.1f64..5.0) {
        let n = step_bound(eps, rho, b, cz);
        prop_assert!((rho * b + cz) * rho.powi(n as i32) <= eps * (1.0 + 1e-12));
        if n > 0 {
            prop_assert!((rho * b + cz) * rho.powi(n as i32 - 1) > eps * (1.0 - 1e-12));
        }
    }

    #[test]
    fn schedule_decreases_and_sums_to_zeta(rho in 0.05f64..1.0, beta in 1.1f64..3.0) {
        for n in 0..40 {
            prop_assert!(schedule(n + 1, rho, beta) < schedule(n, rho, beta));
            prop_assert!(schedule(n, rho, beta) <= rho.powi(n as i32));
        }
        let z = riemann_zeta(beta).unwrap();
        let partial: f64 = (1..20000).map(|j| (j as f64).powf(-beta)).sum();
        let tail = 20000f64.powf(1.0 - beta) / (beta - 1.0);
        prop_assert!((z - partial - tail).abs() < 1e-6 * z);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn compression_respects_its_certificate(gamma in 0.0f64..0.95, log_eta in -4.0f64..-1.0) {
        let eta = 10f64.powf(log_eta);
        let k = KernelMatrix::assemble(&KernelSpec::henyey_greenstein(gamma).unwrap(), 2, 4).unwrap();
        let c = compress(&k, eta).unwrap();
        prop_assert!(c.certificate <= eta);
        let dense = k.to_faer();
        let kept = c.csr.to_dense();
        let d = k.dim();
        let diff = faer::Mat::from_fn(d, d, |r, s| dense[(r, s)] - kept[r * d + s]);
        prop_assert!(spectral_norm(&diff).unwrap() <= c.certificate + 1e-12);
        for r in 0..d {
            for s in 0..d {
                prop_assert!((kept[r * d + s] - kept[s * d + r]).abs() <= 1e-14);
            }
        }
    }
}
