//! Dyadic quadtree meshes on a rectangle tiled by a grid of root cells:
//! refinement with 1-irregular closure, merging, boundary classification and
//! Dörfler marking.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rustc_hash::FxHashMap;

use crate::error::{input, Result};

/// Tolerance below which `s·n` counts as characteristic.
pub const CHARACTERISTIC_TOL: f64 = 1e-12;

/// A node of the dyadic forest: level and integer position. Level-0 cells are
/// the roots of the domain's macro grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Cell {
    pub level: u8,
    pub i: u32,
    pub j: u32,
}

impl Cell {
    pub const ROOT: Cell = Cell {
        level: 0,
        i: 0,
        j: 0,
    };

    pub fn new(level: u8, i: u32, j: u32) -> Cell {
        Cell { level, i, j }
    }

    pub fn parent(&self) -> Option<Cell> {
        (self.level > 0).then(|| Cell::new(self.level - 1, self.i / 2, self.j / 2))
    }

    /// Children in the order (0,0), (1,0), (0,1), (1,1).
    pub fn children(&self) -> [Cell; 4] {
        let (l, i, j) = (self.level + 1, 2 * self.i, 2 * self.j);
        [
            Cell::new(l, i, j),
            Cell::new(l, i + 1, j),
            Cell::new(l, i, j + 1),
            Cell::new(l, i + 1, j + 1),
        ]
    }

    pub fn ancestor_at(&self, level: u8) -> Cell {
        debug_assert!(level <= self.level);
        let d = self.level - level;
        Cell::new(level, self.i >> d, self.j >> d)
    }

    pub fn is_ancestor_or_self_of(&self, other: &Cell) -> bool {
        other.level >= self.level && other.ancestor_at(self.level) == *self
    }

    /// Position of this cell relative to an ancestor, in cells of this level.
    pub fn offset_in(&self, ancestor: &Cell) -> (u32, u64, u64) {
        let d = (self.level - ancestor.level) as u32;
        let oi = self.i as u64 - ((ancestor.i as u64) << d);
        let oj = self.j as u64 - ((ancestor.j as u64) << d);
        (d, oi, oj)
    }
}

impl PartialOrd for Cell {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Breadth-first order: by level, then row, then column.
impl Ord for Cell {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.level, self.j, self.i).cmp(&(other.level, other.j, other.i))
    }
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.level, self.i, self.j)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
    Bottom,
    Top,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Left, Side::Right, Side::Bottom, Side::Top];

    pub fn normal(&self) -> [f64; 2] {
        match self {
            Side::Left => [-1.0, 0.0],
            Side::Right => [1.0, 0.0],
            Side::Bottom => [0.0, -1.0],
            Side::Top => [0.0, 1.0],
        }
    }
}

/// Axis-aligned rectangle tiled by `nx × ny` root cells.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Domain {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    nx: u32,
    ny: u32,
}

impl Domain {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Domain> {
        if !(x1 > x0 && y1 > y0) || ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            return input(format!("degenerate domain [{x0},{x1}]x[{y0},{y1}]"));
        }
        Ok(Domain {
            x0,
            y0,
            x1,
            y1,
            nx: 1,
            ny: 1,
        })
    }

    pub fn unit_square() -> Domain {
        Domain {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
            nx: 1,
            ny: 1,
        }
    }

    /// Same rectangle with an `nx × ny` grid of root cells.
    pub fn with_roots(self, nx: u32, ny: u32) -> Result<Domain> {
        if nx == 0 || ny == 0 || nx > 1 << 16 || ny > 1 << 16 {
            return input(format!("invalid root grid {nx}x{ny}"));
        }
        Ok(Domain { nx, ny, ..self })
    }

    pub fn roots(&self) -> (u32, u32) {
        (self.nx, self.ny)
    }

    /// Number of cells per row and column at `level`.
    pub fn cells_at(&self, level: u8) -> (u64, u64) {
        ((self.nx as u64) << level, (self.ny as u64) << level)
    }

    /// Cell width and height at `level`.
    pub fn cell_size(&self, level: u8) -> [f64; 2] {
        let (n, m) = self.cells_at(level);
        [self.width() / n as f64, self.height() / m as f64]
    }

    pub fn root_cells(&self) -> Vec<Cell> {
        (0..self.ny)
            .flat_map(|j| (0..self.nx).map(move |i| Cell::new(0, i, j)))
            .collect()
    }

    /// Same-level neighbour across `side`, if inside the domain.
    pub fn neighbor(&self, c: &Cell, side: Side) -> Option<Cell> {
        let (n, m) = self.cells_at(c.level);
        let (i, j) = (c.i as i64, c.j as i64);
        let (ni, nj) = match side {
            Side::Left => (i - 1, j),
            Side::Right => (i + 1, j),
            Side::Bottom => (i, j - 1),
            Side::Top => (i, j + 1),
        };
        (ni >= 0 && nj >= 0 && ni < n as i64 && nj < m as i64)
            .then(|| Cell::new(c.level, ni as u32, nj as u32))
    }

    pub fn contains_cell(&self, c: &Cell) -> bool {
        let (n, m) = self.cells_at(c.level);
        (c.i as u64) < n && (c.j as u64) < m
    }

    /// Breadth-first number: `nx ny (4^l - 1)/3 + j nx 2^l + i`.
    pub fn cell_id(&self, c: &Cell) -> u64 {
        let l = c.level as u32;
        let (n, _) = self.cells_at(c.level);
        (self.nx as u64 * self.ny as u64) * (((1u64 << (2 * l)) - 1) / 3)
            + c.j as u64 * n
            + c.i as u64
    }

    /// Euclidean diameter, the longest chord any characteristic can travel.
    pub fn diameter(&self) -> f64 {
        (self.width().powi(2) + self.height().powi(2)).sqrt()
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn cell_box(&self, c: &Cell) -> [f64; 4] {
        let (n, m) = self.cells_at(c.level);
        let (fx, fy) = (self.width() / n as f64, self.height() / m as f64);
        let (i, j) = (c.i as f64, c.j as f64);
        [
            self.x0 + i * fx,
            self.y0 + j * fy,
            self.x0 + (i + 1.0) * fx,
            self.y0 + (j + 1.0) * fy,
        ]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }
}

/// Per-cell squared indicators, ordered by cell id.
pub type CellIndicatorMap = BTreeMap<Cell, f64>;

/// Boundary faces grouped by the sign of `s·n`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FaceClasses {
    pub inflow: Vec<(Cell, Side)>,
    pub outflow: Vec<(Cell, Side)>,
    pub characteristic: Vec<(Cell, Side)>,
}

/// Classifies a boundary side for direction `s`.
pub fn classify_side(side: Side, s: [f64; 2]) -> std::cmp::Ordering {
    let n = side.normal();
    let sn = s[0] * n[0] + s[1] * n[1];
    if sn.abs() <= CHARACTERISTIC_TOL {
        std::cmp::Ordering::Equal
    } else if sn < 0.0 {
        std::cmp::Ordering::Less
    } else {
        std::cmp::Ordering::Greater
    }
}

/// A 1-irregular dyadic quadtree mesh. Immutable; operations return new meshes.
#[derive(Clone, Debug)]
pub struct SpatialMesh {
    domain: Domain,
    leaves: Vec<Cell>,
    index: FxHashMap<Cell, usize>,
}

impl PartialEq for SpatialMesh {
    fn eq(&self, other: &Self) -> bool {
        self.domain == other.domain && self.leaves == other.leaves
    }
}

impl SpatialMesh {
    fn from_sorted(domain: Domain, mut leaves: Vec<Cell>) -> SpatialMesh {
        leaves.sort_unstable();
        leaves.dedup();
        let index = leaves.iter().enumerate().map(|(k, c)| (*c, k)).collect();
        SpatialMesh {
            domain,
            leaves,
            index,
        }
    }

    pub fn uniform(domain: Domain, level: u8) -> SpatialMesh {
        let (n, m) = domain.cells_at(level);
        let leaves = (0..m as u32)
            .flat_map(|j| (0..n as u32).map(move |i| Cell::new(level, i, j)))
            .collect();
        SpatialMesh::from_sorted(domain, leaves)
    }

    /// Builds a mesh from an explicit leaf set, checking that it tiles the domain.
    pub fn from_leaves(domain: Domain, leaves: Vec<Cell>) -> Result<SpatialMesh> {
        let mesh = SpatialMesh::from_sorted(domain, leaves);
        if let Some(c) = mesh.leaves.iter().find(|c| !domain.contains_cell(c)) {
            return input(format!("leaf {c} lies outside the domain"));
        }
        let area: f64 = mesh
            .leaves
            .iter()
            .map(|c| 0.25f64.powi(c.level as i32))
            .sum();
        let (nx, ny) = domain.roots();
        if (area - (nx * ny) as f64).abs() > 1e-12 * (nx * ny) as f64 {
            return input("leaves do not tile the domain");
        }
        for c in &mesh.leaves {
            let mut a = *c;
            while let Some(p) = a.parent() {
                if mesh.index.contains_key(&p) {
                    return input(format!("leaf {c} overlaps leaf {p}"));
                }
                a = p;
            }
        }
        Ok(mesh)
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn leaves(&self) -> &[Cell] {
        &self.leaves
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn index_of(&self, c: &Cell) -> Option<usize> {
        self.index.get(c).copied()
    }

    pub fn is_leaf(&self, c: &Cell) -> bool {
        self.index.contains_key(c)
    }

    pub fn max_level(&self) -> u8 {
        self.leaves.iter().map(|c| c.level).max().unwrap_or(0)
    }

    /// The leaf equal to or containing `c`, if `c` is not subdivided.
    pub fn covering_leaf(&self, c: &Cell) -> Option<(usize, Cell)> {
        let mut a = *c;
        loop {
            if let Some(k) = self.index.get(&a) {
                return Some((*k, a));
            }
            a = a.parent()?;
        }
    }

    /// Leaves contained in `c` (including `c` itself when it is a leaf).
    pub fn leaves_within(&self, c: &Cell, out: &mut Vec<usize>) {
        if let Some(k) = self.index.get(c) {
            out.push(*k);
            return;
        }
        if c.level >= 40 {
            return;
        }
        for ch in c.children() {
            self.leaves_within(&ch, out);
        }
    }

    /// Leaf containing a point (points on shared edges go to the upper/right cell).
    pub fn locate(&self, p: [f64; 2]) -> Option<usize> {
        if !self.domain.contains(p) {
            return None;
        }
        let u = (p[0] - self.domain.x0) / self.domain.width();
        let v = (p[1] - self.domain.y0) / self.domain.height();
        let at = |level: u8| {
            let (n, m) = self.domain.cells_at(level);
            let i = ((u * n as f64).floor() as u64).min(n - 1);
            let j = ((v * m as f64).floor() as u64).min(m - 1);
            Cell::new(level, i as u32, j as u32)
        };
        for level in 0..=40 {
            if let Some(k) = self.index.get(&at(level)) {
                return Some(*k);
            }
        }
        None
    }

    pub fn cell_box(&self, c: &Cell) -> [f64; 4] {
        self.domain.cell_box(c)
    }

    /// Replaces every marked leaf by its four children and closes the result so
    /// that face-adjacent leaves differ by at most one level.
    pub fn refine(&self, marked: &[Cell]) -> Result<SpatialMesh> {
        for c in marked {
            if !self.is_leaf(c) {
                return input(format!("cell {c} is not a leaf"));
            }
        }
        let mut set: rustc_hash::FxHashSet<Cell> = self.leaves.iter().copied().collect();
        fn covering(set: &rustc_hash::FxHashSet<Cell>, c: Cell) -> Option<Cell> {
            let mut a = c;
            loop {
                if set.contains(&a) {
                    return Some(a);
                }
                a = a.parent()?;
            }
        }
        fn split(d: &Domain, set: &mut rustc_hash::FxHashSet<Cell>, c: Cell) {
            set.remove(&c);
            for ch in c.children() {
                set.insert(ch);
            }
            for side in Side::ALL {
                if let Some(nb) = d.neighbor(&c, side) {
                    while let Some(a) = covering(set, nb) {
                        if a.level >= c.level {
                            break;
                        }
                        split(d, set, a);
                    }
                }
            }
        }
        for c in marked {
            if set.contains(c) {
                split(&self.domain, &mut set, *c);
            }
        }
        Ok(SpatialMesh::from_sorted(
            self.domain,
            set.into_iter().collect(),
        ))
    }

    pub fn refine_uniform(&self) -> SpatialMesh {
        let leaves = self.leaves.clone();
        self.refine(&leaves).expect("leaves are leaves")
    }

    /// Coarsest common refinement of two meshes over the same domain.
    pub fn merge(a: &SpatialMesh, b: &SpatialMesh) -> Result<SpatialMesh> {
        if a.domain != b.domain {
            return input("cannot merge meshes on different domains");
        }
        let mut leaves: Vec<Cell> = a
            .leaves
            .iter()
            .filter(|c| b.covering_leaf(c).is_some())
            .copied()
            .collect();
        leaves.extend(
            b.leaves
                .iter()
                .filter(|c| a.covering_leaf(c).is_some())
                .copied(),
        );
        Ok(SpatialMesh::from_sorted(a.domain, leaves))
    }

    /// Merge of many meshes by sequential reduction.
    pub fn merge_all<'a>(
        meshes: impl IntoIterator<Item = &'a SpatialMesh>,
    ) -> Result<Option<SpatialMesh>> {
        let mut acc: Option<SpatialMesh> = None;
        for m in meshes {
            acc = Some(match acc {
                None => m.clone(),
                Some(a) if a == *m => a,
                Some(a) => SpatialMesh::merge(&a, m)?,
            });
        }
        Ok(acc)
    }

    /// Whether every leaf of `self` lies inside a leaf of `coarse`.
    pub fn refines(&self, coarse: &SpatialMesh) -> bool {
        self.leaves
            .iter()
            .all(|c| coarse.covering_leaf(c).is_some())
    }

    pub fn is_one_irregular(&self) -> bool {
        self.leaves.iter().all(|c| {
            Side::ALL.iter().all(|s| match self.domain.neighbor(c, *s) {
                None => true,
                Some(nb) => match self.covering_leaf(&nb) {
                    Some((_, a)) => c.level - a.level <= 1,
                    None => true,
                },
            })
        })
    }

    pub fn total_area(&self) -> f64 {
        self.leaves
            .iter()
            .map(|c| {
                let b = self.cell_box(c);
                (b[2] - b[0]) * (b[3] - b[1])
            })
            .sum()
    }

    /// Boundary faces classified by the sign of `s·n`.
    pub fn inflow_faces(&self, s: [f64; 2]) -> Result<FaceClasses> {
        let norm = (s[0] * s[0] + s[1] * s[1]).sqrt();
        if (norm - 1.0).abs() > 1e-12 {
            return input(format!(
                "direction ({}, {}) is not a unit vector",
                s[0], s[1]
            ));
        }
        let mut out = FaceClasses::default();
        for c in &self.leaves {
            for side in Side::ALL {
                if self.domain.neighbor(c, side).is_some() {
                    continue;
                }
                let bucket = match classify_side(side, s) {
                    std::cmp::Ordering::Less => &mut out.inflow,
                    std::cmp::Ordering::Greater => &mut out.outflow,
                    std::cmp::Ordering::Equal => &mut out.characteristic,
                };
                bucket.push((*c, side));
            }
        }
        Ok(out)
    }

    pub fn cell_id(&self, c: &Cell) -> u64 {
        self.domain.cell_id(c)
    }

    /// Text dump, one `cell <id> <level> <x0> <y0> <x1> <y1>` line per leaf.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for c in &self.leaves {
            let b = self.cell_box(c);
            let _ = writeln!(
                s,
                "cell {} {} {} {} {} {}",
                self.cell_id(c),
                c.level,
                b[0],
                b[1],
                b[2],
                b[3]
            );
        }
        s
    }
}

/// Smallest greedy set carrying `bulk_fraction` of the indicator total;
/// ties are broken by cell id.
pub fn dorfler_mark(indicators: &CellIndicatorMap, bulk_fraction: f64) -> Result<Vec<Cell>> {
    if !(bulk_fraction > 0.0 && bulk_fraction <= 1.0) {
        return input(format!("bulk fraction {bulk_fraction} outside (0, 1]"));
    }
    if indicators.is_empty() {
        return input("empty indicator map");
    }
    if indicators.values().any(|v| *v < 0.0 || !v.is_finite()) {
        return input("indicators must be finite and nonnegative");
    }
    let total: f64 = indicators.values().sum();
    let mut order: Vec<(&Cell, &f64)> = indicators.iter().collect();
    order.sort_by(|a, b| b.1.partial_cmp(a.1).unwrap().then(a.0.cmp(b.0)));
    let goal = bulk_fraction * total;
    let mut acc = 0.0;
    let mut out = Vec::new();
    for (c, v) in order {
        if acc >= goal && !out.is_empty() {
            break;
        }
        if total == 0.0 {
            break;
        }
        acc += v;
        out.push(*c);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Domain {
        Domain::unit_square()
    }

    #[test]
    fn ids_are_breadth_first() {
        let d = unit();
        assert_eq!(d.cell_id(&Cell::ROOT), 0);
        let ch = Cell::ROOT.children();
        assert_eq!(
            ch.iter().map(|c| d.cell_id(c)).collect::<Vec<_>>(),
            vec![1, 2, 3, 4]
        );
        assert_eq!(d.cell_id(&Cell::new(2, 0, 0)), 5);
        let mut sorted = ch.to_vec();
        sorted.reverse();
        sorted.sort();
        assert_eq!(sorted, ch.to_vec());
    }

    #[test]
    fn macro_grid_ids_are_distinct_and_ordered() {
        let d = unit().with_roots(3, 2).unwrap();
        let m = SpatialMesh::uniform(d, 2);
        let ids: Vec<u64> = m.leaves().iter().map(|c| d.cell_id(c)).collect();
        assert_eq!(ids.len(), 96);
        assert_eq!(ids[0], 6 * 5);
        assert!(ids.windows(2).all(|w| w[1] == w[0] + 1));
    }

    #[test]
    fn macro_grid_geometry() {
        let d = unit().with_roots(7, 7).unwrap();
        assert!(unit().with_roots(0, 1).is_err());
        let m = SpatialMesh::uniform(d, 0);
        assert_eq!(m.len(), 49);
        assert!((m.total_area() - 1.0).abs() < 1e-14);
        let b = d.cell_box(&Cell::new(1, 5, 0));
        assert!((b[0] - 5.0 / 14.0).abs() < 1e-15 && (b[2] - 6.0 / 14.0).abs() < 1e-15);
        assert_eq!(d.neighbor(&Cell::new(0, 6, 3), Side::Right), None);
        assert_eq!(
            d.neighbor(&Cell::new(0, 5, 3), Side::Right),
            Some(Cell::new(0, 6, 3))
        );
        let r = m
            .refine(&[Cell::new(0, 3, 3)])
            .unwrap()
            .refine(&[Cell::new(1, 6, 6)])
            .unwrap();
        assert!(r.is_one_irregular());
        assert!(!r.is_leaf(&Cell::new(0, 2, 3)));
        let k = r.locate([0.999, 0.5]).unwrap();
        assert_eq!(r.leaves()[k], Cell::new(0, 6, 3));
        let k = r.locate([3.2 / 7.0, 3.2 / 7.0]).unwrap();
        assert_eq!(r.leaves()[k], Cell::new(2, 12, 12));
        let f = r.inflow_faces([1.0, 0.0]).unwrap();
        assert_eq!(f.inflow.len(), 7);
        assert!(SpatialMesh::from_leaves(d, r.leaves().to_vec()).is_ok());
        assert!(SpatialMesh::from_leaves(d, vec![Cell::ROOT]).is_err());
        assert!(SpatialMesh::from_leaves(d, vec![Cell::new(0, 7, 0)]).is_err());
        let other = SpatialMesh::uniform(d, 1);
        let merged = SpatialMesh::merge(&r, &other).unwrap();
        assert!(merged.refines(&r) && merged.refines(&other));
        assert!((merged.total_area() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn refine_root_gives_four_cells() {
        let m = SpatialMesh::uniform(unit(), 0)
            .refine(&[Cell::ROOT])
            .unwrap();
        assert_eq!(m, SpatialMesh::uniform(unit(), 1));
    }

    #[test]
    fn refine_empty_is_identity() {
        let m = SpatialMesh::uniform(unit(), 2);
        assert_eq!(m.refine(&[]).unwrap(), m);
    }

    #[test]
    fn refine_one_of_four_gives_seven() {
        let m = SpatialMesh::uniform(unit(), 1);
        let r = m.refine(&[Cell::new(1, 1, 1)]).unwrap();
        assert_eq!(r.len(), 7);
        assert!(r.is_one_irregular());
    }

    #[test]
    fn refine_rejects_non_leaf() {
        let m = SpatialMesh::uniform(unit(), 1);
        assert!(m.refine(&[Cell::ROOT]).is_err());
    }

    #[test]
    fn closure_splits_coarse_neighbour() {
        let m = SpatialMesh::uniform(unit(), 1)
            .refine(&[Cell::new(1, 0, 0)])
            .unwrap();
        // refining the corner grandchild next to (1,1,0) forces that cell to split
        let r = m.refine(&[Cell::new(2, 1, 0)]).unwrap();
        assert!(r.is_one_irregular());
        assert!(!r.is_leaf(&Cell::new(1, 1, 0)));
    }

    #[test]
    fn merge_examples() {
        let m1 = SpatialMesh::uniform(unit(), 1);
        let m2 = SpatialMesh::uniform(unit(), 2);
        assert_eq!(SpatialMesh::merge(&m1, &m1).unwrap(), m1);
        assert_eq!(SpatialMesh::merge(&m1, &m2).unwrap(), m2);
        let ne = m1.refine(&[Cell::new(1, 1, 1)]).unwrap();
        let sw = m1.refine(&[Cell::new(1, 0, 0)]).unwrap();
        let m = SpatialMesh::merge(&ne, &sw).unwrap();
        assert_eq!(m.len(), 10);
        assert!(m.refines(&ne) && m.refines(&sw));
    }

    #[test]
    fn merge_rejects_mismatched_domains() {
        let a = SpatialMesh::uniform(unit(), 1);
        let b = SpatialMesh::uniform(Domain::new(0.0, 0.0, 2.0, 2.0).unwrap(), 1);
        assert!(SpatialMesh::merge(&a, &b).is_err());
    }

    #[test]
    fn faces_for_axis_and_diagonal_directions() {
        let m = SpatialMesh::uniform(unit(), 2);
        let f = m.inflow_faces([1.0, 0.0]).unwrap();
        assert!(f.inflow.iter().all(|(_, s)| *s == Side::Left) && f.inflow.len() == 4);
        assert!(f.outflow.iter().all(|(_, s)| *s == Side::Right) && f.outflow.len() == 4);
        assert_eq!(f.characteristic.len(), 8);
        let g = m.inflow_faces([-1.0, 0.0]).unwrap();
        assert_eq!(g.inflow, f.outflow);
        assert_eq!(g.outflow, f.inflow);
        let d = std::f64::consts::FRAC_1_SQRT_2;
        let h = m.inflow_faces([d, d]).unwrap();
        assert!(h
            .inflow
            .iter()
            .all(|(_, s)| matches!(s, Side::Left | Side::Bottom)));
        assert_eq!(h.inflow.len(), 8);
        assert!(h.characteristic.is_empty());
        assert!(m.inflow_faces([1.0, 1.0]).is_err());
    }

    #[test]
    fn dorfler_examples() {
        let a = Cell::new(1, 0, 0);
        let b = Cell::new(1, 1, 0);
        let c = Cell::new(1, 0, 1);
        let d = Cell::new(1, 1, 1);
        let single: CellIndicatorMap = [(a, 1.0)].into_iter().collect();
        assert_eq!(dorfler_mark(&single, 0.5).unwrap(), vec![a]);
        let two: CellIndicatorMap = [(a, 3.0), (b, 1.0)].into_iter().collect();
        assert_eq!(dorfler_mark(&two, 0.7).unwrap(), vec![a]);
        let four: CellIndicatorMap = [(a, 1.0), (b, 1.0), (c, 1.0), (d, 1.0)]
            .into_iter()
            .collect();
        assert_eq!(dorfler_mark(&four, 1.0).unwrap(), vec![a, b, c, d]);
        assert!(dorfler_mark(&four, 0.0).is_err());
        assert!(dorfler_mark(&four, 1.5).is_err());
    }

    #[test]
    fn dump_lists_every_leaf() {
        let m = SpatialMesh::uniform(unit(), 1);
        let d = m.dump();
        assert_eq!(d.lines().count(), 4);
        assert!(d.starts_with("cell 1 1 0 0 0.5 0.5"));
    }

    #[test]
    fn locate_finds_containing_leaf() {
        let m = SpatialMesh::uniform(unit(), 1)
            .refine(&[Cell::new(1, 0, 0)])
            .unwrap();
        let k = m.locate([0.1, 0.1]).unwrap();
        assert_eq!(m.leaves()[k], Cell::new(2, 0, 0));
        let k = m.locate([0.9, 0.9]).unwrap();
        assert_eq!(m.leaves()[k], Cell::new(1, 1, 1));
    }
}
