//! Piecewise-constant data on a tensor grid over the domain.

use crate::error::{input, Result};
use crate::mesh::Domain;
use crate::quad::{legendre_unit, Rule};

/// Values constant on each rectangle of an `nx × ny` tensor grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub domain: Domain,
    pub nx: usize,
    pub ny: usize,
    /// Row-major from the bottom: `values[j * nx + i]`.
    pub values: Vec<f64>,
}

impl GridField {
    pub fn new(domain: Domain, nx: usize, ny: usize, values: Vec<f64>) -> Result<GridField> {
        if nx == 0 || ny == 0 || values.len() != nx * ny {
            return input(format!(
                "grid {nx}x{ny} needs {} values, got {}",
                nx * ny,
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return input("grid values must be finite");
        }
        Ok(GridField {
            domain,
            nx,
            ny,
            values,
        })
    }

    pub fn constant(domain: Domain, v: f64) -> GridField {
        GridField {
            domain,
            nx: 1,
            ny: 1,
            values: vec![v],
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    fn xline(&self, i: usize) -> f64 {
        self.domain.x0 + self.domain.width() * i as f64 / self.nx as f64
    }

    fn yline(&self, j: usize) -> f64 {
        self.domain.y0 + self.domain.height() * j as f64 / self.ny as f64
    }

    fn col(&self, x: f64) -> usize {
        (((x - self.domain.x0) / self.domain.width() * self.nx as f64)
            .floor()
            .max(0.0) as usize)
            .min(self.nx - 1)
    }

    fn row(&self, y: f64) -> usize {
        (((y - self.domain.y0) / self.domain.height() * self.ny as f64)
            .floor()
            .max(0.0) as usize)
            .min(self.ny - 1)
    }

    pub fn eval(&self, p: [f64; 2]) -> f64 {
        self.values[self.row(p[1]) * self.nx + self.col(p[0])]
    }

    /// Grid lines strictly inside `(a, b)` along x.
    pub fn x_breaks(&self, a: f64, b: f64) -> Vec<f64> {
        (1..self.nx)
            .map(|i| self.xline(i))
            .filter(|x| *x > a && *x < b)
            .collect()
    }

    pub fn y_breaks(&self, a: f64, b: f64) -> Vec<f64> {
        (1..self.ny)
            .map(|j| self.yline(j))
            .filter(|y| *y > a && *y < b)
            .collect()
    }

    /// Pieces `(box, value)` of the intersection of `bx` with the grid rectangles.
    pub fn pieces(&self, bx: [f64; 4]) -> Vec<([f64; 4], f64)> {
        let mut xs = vec![bx[0]];
        xs.extend(self.x_breaks(bx[0], bx[2]));
        xs.push(bx[2]);
        let mut ys = vec![bx[1]];
        ys.extend(self.y_breaks(bx[1], bx[3]));
        ys.push(bx[3]);
        let mut out = Vec::with_capacity((xs.len() - 1) * (ys.len() - 1));
        for wy in ys.windows(2) {
            for wx in xs.windows(2) {
                let mid = [0.5 * (wx[0] + wx[1]), 0.5 * (wy[0] + wy[1])];
                out.push(([wx[0], wy[0], wx[1], wy[1]], self.eval(mid)));
            }
        }
        out
    }

    /// The value on `bx` if the field is constant there.
    pub fn constant_on(&self, bx: [f64; 4]) -> Option<f64> {
        let p = self.pieces(bx);
        let v = p[0].1;
        p.iter().all(|q| q.1 == v).then_some(v)
    }

    /// Coefficients of the L2 projection onto tensor polynomials of degree `deg`
    /// on `bx` (basis orthonormal in physical L2), and `∫_bx f²`.
    pub fn project(&self, bx: [f64; 4], deg: usize) -> (Vec<f64>, f64) {
        let n = deg + 1;
        let (w, h) = (bx[2] - bx[0], bx[3] - bx[1]);
        let mut coeffs = vec![0.0; n * n];
        let mut sq = 0.0;
        let mut px = vec![0.0; n];
        let mut py = vec![0.0; n];
        for (pb, v) in self.pieces(bx) {
            if v == 0.0 {
                continue;
            }
            sq += v * v * (pb[2] - pb[0]) * (pb[3] - pb[1]);
            // ∫ p_a over the piece, in reference coordinates of bx
            moments_1d(deg, (pb[0] - bx[0]) / w, (pb[2] - bx[0]) / w, &mut px);
            moments_1d(deg, (pb[1] - bx[1]) / h, (pb[3] - bx[1]) / h, &mut py);
            for b in 0..n {
                for a in 0..n {
                    coeffs[b * n + a] += v * px[a] * py[b];
                }
            }
        }
        let scale = (w * h).sqrt();
        coeffs.iter_mut().for_each(|c| *c *= scale);
        (coeffs, sq)
    }

    /// Text dump `grid <nx> <ny>` then one value per line.
    pub fn dump(&self) -> String {
        let mut s = format!("grid {} {}\n", self.nx, self.ny);
        for v in &self.values {
            s.push_str(&format!("{v}\n"));
        }
        s
    }
}

/// `∫_lo^hi p_a(t) dt` for the orthonormal Legendre polynomials on `[0,1]`.
fn moments_1d(deg: usize, lo: f64, hi: f64, out: &mut [f64]) {
    let rule = Rule::gauss_on(deg / 2 + 1, lo, hi);
    let mut p = vec![0.0; deg + 1];
    out.iter_mut().for_each(|v| *v = 0.0);
    for (x, w) in rule.x.iter().zip(&rule.w) {
        legendre_unit(deg, *x, &mut p);
        for (o, pv) in out.iter_mut().zip(&p) {
            *o += w * pv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two() -> GridField {
        GridField::new(Domain::unit_square(), 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn evaluation_and_extremes() {
        let g = two_by_two();
        assert_eq!(g.eval([0.25, 0.25]), 1.0);
        assert_eq!(g.eval([0.75, 0.25]), 2.0);
        assert_eq!(g.eval([0.25, 0.75]), 3.0);
        assert_eq!(g.eval([1.0, 1.0]), 4.0);
        assert_eq!((g.min(), g.max()), (1.0, 4.0));
        assert!(GridField::new(Domain::unit_square(), 2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn pieces_split_on_grid_lines() {
        let g = two_by_two();
        let p = g.pieces([0.25, 0.25, 0.75, 0.5]);
        assert_eq!(p.len(), 2);
        assert_eq!(g.constant_on([0.0, 0.0, 0.5, 0.5]), Some(1.0));
        assert_eq!(g.constant_on([0.0, 0.0, 0.6, 0.5]), None);
    }

    #[test]
    fn projection_of_constant_and_step() {
        let g = two_by_two();
        let (c, sq) = g.project([0.0, 0.0, 0.5, 0.5], 2);
        assert!((c[0] - 0.5).abs() < 1e-14 && c[1..].iter().all(|v| v.abs() < 1e-14));
        assert!((sq - 0.25).abs() < 1e-14);
        // over the whole square the mean is 2.5; energy stays below the total
        let (c, sq) = g.project([0.0, 0.0, 1.0, 1.0], 1);
        assert!((c[0] - 2.5).abs() < 1e-13);
        let e: f64 = c.iter().map(|v| v * v).sum();
        assert!(e <= sq + 1e-12 && (sq - 7.5).abs() < 1e-12);
    }
}
