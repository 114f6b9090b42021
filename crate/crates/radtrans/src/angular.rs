//! Dyadic partitions of the direction circle `[0, 2π)`, Alpert multiwavelets,
//! fast wavelet transforms and per-arc Gauss quadrature.
//!
//! All inner products use the angle measure `dθ`.

use std::f64::consts::PI;

use rustc_hash::{FxHashMap, FxHashSet};

use crate::error::{input, Result};
use crate::quad::{legendre_unit, Rule};

const TWO_PI: f64 = 2.0 * PI;

/// A dyadic arc `[2πk/2^l, 2π(k+1)/2^l)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Arc {
    pub level: u8,
    pub k: u32,
}

impl Arc {
    pub const ROOT: Arc = Arc { level: 0, k: 0 };

    pub fn new(level: u8, k: u32) -> Arc {
        Arc { level, k }
    }

    pub fn bounds(&self) -> (f64, f64) {
        let n = (1u64 << self.level) as f64;
        (TWO_PI * self.k as f64 / n, TWO_PI * (self.k + 1) as f64 / n)
    }

    pub fn len(&self) -> f64 {
        TWO_PI / (1u64 << self.level) as f64
    }

    pub fn children(&self) -> [Arc; 2] {
        [
            Arc::new(self.level + 1, 2 * self.k),
            Arc::new(self.level + 1, 2 * self.k + 1),
        ]
    }

    pub fn parent(&self) -> Option<Arc> {
        (self.level > 0).then(|| Arc::new(self.level - 1, self.k / 2))
    }

    /// Heap number `2^l + k`; used as the wavelet block index of an internal node.
    pub fn heap(&self) -> usize {
        (1usize << self.level) + self.k as usize
    }

    pub fn from_heap(h: usize) -> Arc {
        let level = (usize::BITS - 1 - h.leading_zeros()) as u8;
        Arc::new(level, (h - (1usize << level)) as u32)
    }

    /// Start position in units of `2π / 2^40`, used for ordering.
    fn start_key(&self) -> u64 {
        (self.k as u64) << (40 - self.level as u32)
    }

    pub fn is_ancestor_or_self_of(&self, other: &Arc) -> bool {
        other.level >= self.level && (other.k >> (other.level - self.level)) == self.k
    }

    pub fn contains_angle(&self, theta: f64) -> bool {
        let (a, b) = self.bounds();
        let t = wrap(theta);
        t >= a && t < b
    }

    /// Local coordinate in `[0, 1]` of an angle inside the arc.
    pub fn local(&self, theta: f64) -> f64 {
        let (a, _) = self.bounds();
        (wrap(theta) - a) / self.len()
    }
}

/// Maps an angle to `[0, 2π)`.
pub fn wrap(theta: f64) -> f64 {
    let t = theta.rem_euclid(TWO_PI);
    if t >= TWO_PI {
        0.0
    } else {
        t
    }
}

/// Unit vector of an angle.
pub fn direction(theta: f64) -> [f64; 2] {
    [theta.cos(), theta.sin()]
}

/// A complete binary tree over `[0, 2π)` represented by its leaves.
#[derive(Clone, Debug, PartialEq)]
pub struct AngularPartition {
    leaves: Vec<Arc>,
}

impl AngularPartition {
    pub fn root() -> AngularPartition {
        AngularPartition {
            leaves: vec![Arc::ROOT],
        }
    }

    pub fn uniform(level: u8) -> AngularPartition {
        AngularPartition {
            leaves: (0..(1u32 << level)).map(|k| Arc::new(level, k)).collect(),
        }
    }

    pub fn from_leaves(mut leaves: Vec<Arc>) -> Result<AngularPartition> {
        leaves.sort_by_key(|a| a.start_key());
        leaves.dedup();
        let mut pos = 0u64;
        for a in &leaves {
            if a.start_key() != pos {
                return input("arcs do not tile the circle");
            }
            pos += 1u64 << (40 - a.level as u32);
        }
        if pos != 1u64 << 40 {
            return input("arcs do not cover the circle");
        }
        Ok(AngularPartition { leaves })
    }

    pub fn leaves(&self) -> &[Arc] {
        &self.leaves
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn max_level(&self) -> u8 {
        self.leaves.iter().map(|a| a.level).max().unwrap_or(0)
    }

    pub fn position(&self, arc: &Arc) -> Option<usize> {
        self.leaves
            .binary_search_by_key(&arc.start_key(), |a| a.start_key())
            .ok()
            .filter(|&i| self.leaves[i] == *arc)
    }

    /// Index of the leaf containing `theta`.
    pub fn locate(&self, theta: f64) -> usize {
        let t = wrap(theta);
        let key = ((t / TWO_PI) * (1u64 << 40) as f64).floor() as u64;
        match self.leaves.binary_search_by_key(&key, |a| a.start_key()) {
            Ok(i) => i,
            Err(i) => i - 1,
        }
    }

    /// Strict ancestors of the leaves, sorted by heap number.
    pub fn internal_nodes(&self) -> Vec<Arc> {
        let mut set = FxHashSet::default();
        for a in &self.leaves {
            let mut p = a.parent();
            while let Some(q) = p {
                if !set.insert(q) {
                    break;
                }
                p = q.parent();
            }
        }
        let mut v: Vec<Arc> = set.into_iter().collect();
        v.sort_by_key(|a| a.heap());
        v
    }

    pub fn refine(&self, marked: &[Arc]) -> Result<AngularPartition> {
        let marked: FxHashSet<Arc> = marked.iter().copied().collect();
        for m in &marked {
            if self.position(m).is_none() {
                return input(format!("arc ({}, {}) is not a leaf", m.level, m.k));
            }
        }
        let leaves = self
            .leaves
            .iter()
            .flat_map(|a| {
                if marked.contains(a) {
                    a.children().to_vec()
                } else {
                    vec![*a]
                }
            })
            .collect();
        Ok(AngularPartition { leaves })
    }

    /// Coarsest common refinement.
    pub fn merge(a: &AngularPartition, b: &AngularPartition) -> AngularPartition {
        let covered =
            |p: &AngularPartition, x: &Arc| p.leaves.iter().any(|l| l.is_ancestor_or_self_of(x));
        let mut leaves: Vec<Arc> = a.leaves.iter().filter(|x| covered(b, x)).copied().collect();
        leaves.extend(b.leaves.iter().filter(|x| covered(a, x)));
        AngularPartition::from_leaves(leaves).expect("merge of partitions tiles the circle")
    }

    /// Minimal partition whose internal nodes include the given heap numbers.
    pub fn from_internal(heaps: impl IntoIterator<Item = usize>) -> AngularPartition {
        let mut internal = FxHashSet::default();
        for h in heaps {
            let mut a = Some(Arc::from_heap(h));
            while let Some(q) = a {
                if !internal.insert(q) {
                    break;
                }
                a = q.parent();
            }
        }
        if internal.is_empty() {
            return AngularPartition::root();
        }
        let leaves = internal
            .iter()
            .flat_map(|a| a.children())
            .filter(|c| !internal.contains(c))
            .collect();
        AngularPartition::from_leaves(leaves).expect("closure of internal nodes is complete")
    }

    /// Leaf of `self` that contains `arc`, if `arc` is not subdivided here.
    pub fn covering(&self, arc: &Arc) -> Option<usize> {
        let key = arc.start_key();
        let i = match self.leaves.binary_search_by_key(&key, |a| a.start_key()) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        self.leaves[i].is_ancestor_or_self_of(arc).then_some(i)
    }
}

/// Orthonormal scaling function `i` of an arc evaluated at local coordinate `t`.
pub fn scaling_values(m: usize, arc_len: f64, t: f64, out: &mut [f64]) {
    legendre_unit(m, t, out);
    let s = 1.0 / arc_len.sqrt();
    out[..=m].iter_mut().for_each(|v| *v *= s);
}

/// Alpert multiwavelet filters of degree `m` on interval bisection.
///
/// `h` (rows `m+1`, cols `2(m+1)`) expresses the parent's scaling functions in
/// the children's scaling functions; `g` does the same for the wavelets.
#[derive(Clone, Debug)]
pub struct AlpertBasis {
    pub m: usize,
    pub h: Vec<f64>,
    pub g: Vec<f64>,
}

impl AlpertBasis {
    pub fn new(m: usize) -> AlpertBasis {
        let n = m + 1;
        let w = 2 * n;
        // parent scaling in children scaling: h[i][c*n+k] = ∫ φ_i^parent φ_k^child
        let mut h = vec![0.0; n * w];
        for c in 0..2 {
            let r = crate::quad::restriction_1d(m, 1, c as u64);
            for k in 0..n {
                for i in 0..n {
                    h[i * w + c * n + k] = r[k * n + i];
                }
            }
        }
        // orthonormal complement of the rows of h, by Gram–Schmidt over unit vectors
        let mut rows: Vec<Vec<f64>> = (0..n).map(|i| h[i * w..(i + 1) * w].to_vec()).collect();
        let mut g = Vec::with_capacity(n * w);
        for e in 0..w {
            if rows.len() == w {
                break;
            }
            let mut v = vec![0.0; w];
            v[e] = 1.0;
            for _ in 0..2 {
                for r in &rows {
                    let d: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(r).for_each(|(x, y)| *x -= d * y);
                }
            }
            let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nrm > 1e-8 {
                v.iter_mut().for_each(|x| *x /= nrm);
                g.extend_from_slice(&v);
                rows.push(v);
            }
        }
        assert_eq!(g.len(), n * w, "wavelet complement has full dimension");
        AlpertBasis { m, h, g }
    }

    pub fn n(&self) -> usize {
        self.m + 1
    }

    /// `(s_parent, d) = (H x, G x)` for stacked child scaling coefficients `x`.
    pub fn analyze(&self, x: &[f64], s: &mut [f64], d: &mut [f64]) {
        let n = self.n();
        let w = 2 * n;
        for i in 0..n {
            s[i] = (0..w).map(|c| self.h[i * w + c] * x[c]).sum();
            d[i] = (0..w).map(|c| self.g[i * w + c] * x[c]).sum();
        }
    }

    /// Inverse of [`AlpertBasis::analyze`]: `x = Hᵀ s + Gᵀ d`.
    pub fn synthesize(&self, s: &[f64], d: &[f64], x: &mut [f64]) {
        let n = self.n();
        let w = 2 * n;
        for c in 0..w {
            x[c] = (0..n)
                .map(|i| self.h[i * w + c] * s[i] + self.g[i * w + c] * d[i])
                .sum();
        }
    }

    /// Wavelet `r` of the root arc evaluated at an angle (tests and dumps).
    pub fn wavelet_value(&self, arc: &Arc, r: usize, theta: f64) -> f64 {
        let n = self.n();
        let t = arc.local(theta);
        let (c, tc) = if t < 0.5 {
            (0, 2.0 * t)
        } else {
            (1, 2.0 * t - 1.0)
        };
        let mut v = vec![0.0; n];
        scaling_values(self.m, arc.len() / 2.0, tc, &mut v);
        (0..n).map(|k| self.g[r * 2 * n + c * n + k] * v[k]).sum()
    }
}

/// Representation of an [`AngularField`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Repr {
    /// `(M+1)` coefficients per leaf, leaves in circle order.
    Scaling,
    /// Root scaling block followed by one wavelet block per internal node in heap order.
    Wavelet,
}

/// A piecewise polynomial of degree `m` on a partition.
#[derive(Clone, Debug, PartialEq)]
pub struct AngularField {
    pub partition: AngularPartition,
    pub m: usize,
    pub repr: Repr,
    pub coeffs: Vec<f64>,
}

impl AngularField {
    pub fn zeros(partition: AngularPartition, m: usize) -> AngularField {
        let n = (m + 1) * partition.len();
        AngularField {
            partition,
            m,
            repr: Repr::Scaling,
            coeffs: vec![0.0; n],
        }
    }

    /// L2 projection of `f` computed with a `q`-point Gauss rule per leaf.
    pub fn project<F: Fn(f64) -> f64>(
        partition: AngularPartition,
        m: usize,
        q: usize,
        f: F,
    ) -> AngularField {
        let n = m + 1;
        let mut coeffs = vec![0.0; n * partition.len()];
        let rule = Rule::gauss_on(q, 0.0, 1.0);
        let mut v = vec![0.0; n];
        for (li, arc) in partition.leaves().iter().enumerate() {
            let (a, _) = arc.bounds();
            let len = arc.len();
            for (t, w) in rule.x.iter().zip(&rule.w) {
                scaling_values(m, len, *t, &mut v);
                let fx = f(a + t * len);
                for i in 0..n {
                    coeffs[li * n + i] += w * len * fx * v[i];
                }
            }
        }
        AngularField {
            partition,
            m,
            repr: Repr::Scaling,
            coeffs,
        }
    }

    pub fn norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    /// Evaluates a scaling-form field at an angle.
    pub fn eval(&self, theta: f64) -> Result<f64> {
        if self.repr != Repr::Scaling {
            return input("evaluation needs scaling representation");
        }
        let n = self.m + 1;
        let li = self.partition.locate(theta);
        let arc = self.partition.leaves()[li];
        let mut v = vec![0.0; n];
        scaling_values(self.m, arc.len(), arc.local(theta), &mut v);
        Ok((0..n).map(|i| self.coeffs[li * n + i] * v[i]).sum())
    }

    pub fn fwt(&self, basis: &AlpertBasis) -> Result<AngularField> {
        if self.repr != Repr::Scaling {
            return input("forward transform needs scaling representation");
        }
        if basis.m != self.m {
            return input("basis degree mismatch");
        }
        let n = self.m + 1;
        let mut scal: FxHashMap<Arc, Vec<f64>> = FxHashMap::default();
        for (li, a) in self.partition.leaves().iter().enumerate() {
            scal.insert(*a, self.coeffs[li * n..(li + 1) * n].to_vec());
        }
        let internal = self.partition.internal_nodes();
        let mut det: FxHashMap<Arc, Vec<f64>> = FxHashMap::default();
        let mut by_level = internal.clone();
        by_level.sort_by_key(|a| std::cmp::Reverse(a.level));
        let mut x = vec![0.0; 2 * n];
        for node in &by_level {
            let [c0, c1] = node.children();
            x[..n].copy_from_slice(&scal.remove(&c0).expect("child present"));
            x[n..].copy_from_slice(&scal.remove(&c1).expect("child present"));
            let mut s = vec![0.0; n];
            let mut d = vec![0.0; n];
            basis.analyze(&x, &mut s, &mut d);
            scal.insert(*node, s);
            det.insert(*node, d);
        }
        let mut coeffs = Vec::with_capacity(self.coeffs.len());
        coeffs.extend_from_slice(&scal[&Arc::ROOT]);
        for node in &internal {
            coeffs.extend_from_slice(&det[node]);
        }
        Ok(AngularField {
            partition: self.partition.clone(),
            m: self.m,
            repr: Repr::Wavelet,
            coeffs,
        })
    }

    pub fn ifwt(&self, basis: &AlpertBasis) -> Result<AngularField> {
        if self.repr != Repr::Wavelet {
            return input("inverse transform needs wavelet representation");
        }
        if basis.m != self.m {
            return input("basis degree mismatch");
        }
        let n = self.m + 1;
        let internal = self.partition.internal_nodes();
        let mut scal: FxHashMap<Arc, Vec<f64>> = FxHashMap::default();
        scal.insert(Arc::ROOT, self.coeffs[..n].to_vec());
        let mut x = vec![0.0; 2 * n];
        for (b, node) in internal.iter().enumerate() {
            let s = scal.remove(node).expect("parent present");
            let d = &self.coeffs[(b + 1) * n..(b + 2) * n];
            basis.synthesize(&s, d, &mut x);
            let [c0, c1] = node.children();
            scal.insert(c0, x[..n].to_vec());
            scal.insert(c1, x[n..].to_vec());
        }
        let mut coeffs = Vec::with_capacity(self.coeffs.len());
        for a in self.partition.leaves() {
            coeffs.extend_from_slice(&scal[a]);
        }
        Ok(AngularField {
            partition: self.partition.clone(),
            m: self.m,
            repr: Repr::Scaling,
            coeffs,
        })
    }

    /// Re-expresses a scaling-form field on a refinement of its partition.
    pub fn refine_to(&self, target: &AngularPartition) -> Result<AngularField> {
        if self.repr != Repr::Scaling {
            return input("refinement needs scaling representation");
        }
        let map = restriction_map(&self.partition, target, self.m)?;
        let mut out = AngularField::zeros(target.clone(), self.m);
        map.apply(&self.coeffs, &mut out.coeffs, 1);
        Ok(out)
    }
}

/// Sparse map re-expressing scaling coefficients of one partition on a refinement.
#[derive(Clone, Debug)]
pub struct RestrictionMap {
    pub n: usize,
    /// `(source leaf, target leaf, (n×n) matrix child←parent)`.
    pub entries: Vec<(usize, usize, Vec<f64>)>,
}

impl RestrictionMap {
    /// Applies the map to `stride` interleaved coefficient sets: `src[(leaf*n+i)*stride + c]`.
    pub fn apply(&self, src: &[f64], dst: &mut [f64], stride: usize) {
        let n = self.n;
        for (s, t, r) in &self.entries {
            for k in 0..n {
                for c in 0..stride {
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += r[k * n + i] * src[(s * n + i) * stride + c];
                    }
                    dst[(t * n + k) * stride + c] = acc;
                }
            }
        }
    }
}

/// Restriction from `coarse` to `fine`, which must refine `coarse`.
pub fn restriction_map(
    coarse: &AngularPartition,
    fine: &AngularPartition,
    m: usize,
) -> Result<RestrictionMap> {
    let n = m + 1;
    let mut entries = Vec::with_capacity(fine.len());
    for (t, arc) in fine.leaves().iter().enumerate() {
        let s = match coarse.covering(arc) {
            Some(s) => s,
            None => return input("target partition does not refine the source"),
        };
        let parent = coarse.leaves()[s];
        let depth = (arc.level - parent.level) as u32;
        let offset = (arc.k - (parent.k << depth)) as u64;
        entries.push((s, t, crate::quad::restriction_1d(m, depth, offset)));
    }
    Ok(RestrictionMap { n, entries })
}

/// Gauss nodes and weights of one arc.
#[derive(Clone, Debug, PartialEq)]
pub struct ArcRule {
    pub arc: Arc,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// `(M+1)`-point Gauss–Legendre rule on every leaf.
pub fn quadrature_points(partition: &AngularPartition, m: usize) -> Vec<ArcRule> {
    partition.leaves().iter().map(|a| arc_rule(a, m)).collect()
}

pub fn arc_rule(arc: &Arc, m: usize) -> ArcRule {
    let (a, b) = arc.bounds();
    let r = Rule::gauss_on(m + 1, a, b);
    ArcRule {
        arc: *arc,
        nodes: r.x,
        weights: r.w,
    }
}

/// Scaling coefficients of the degree-`m` polynomial through the values at the
/// arc's Gauss nodes. Gauss exactness makes this equal to the discrete projection.
pub fn interpolate_cell(arc: &Arc, m: usize, values: &[f64]) -> Result<Vec<f64>> {
    if values.len() != m + 1 {
        return input(format!("expected {} values, got {}", m + 1, values.len()));
    }
    let rule = arc_rule(arc, m);
    let n = m + 1;
    let mut c = vec![0.0; n];
    let mut v = vec![0.0; n];
    for ((x, w), val) in rule.nodes.iter().zip(&rule.weights).zip(values) {
        scaling_values(m, arc.len(), arc.local(*x), &mut v);
        for i in 0..n {
            c[i] += w * val * v[i];
        }
    }
    Ok(c)
}

/// Lagrange weights of the arc's Gauss nodes at an angle.
pub fn lagrange_weights(rule: &ArcRule, theta: f64) -> Vec<f64> {
    let t = wrap(theta);
    let t = if t < rule.nodes[0] - PI {
        t + TWO_PI
    } else {
        t
    };
    (0..rule.nodes.len())
        .map(|a| {
            rule.nodes
                .iter()
                .enumerate()
                .filter(|(b, _)| *b != a)
                .map(|(_, xb)| (t - xb) / (rule.nodes[a] - xb))
                .product()
        })
        .collect()
}
