//! Half-spaces, H-polytopes and their unions, the lifting of state
//! predicates into trajectory space, and closed-form intersection of an
//! ellipse with a hyperplane.

mod reach_avoid;

use std::f64::consts::{PI, TAU};

use thiserror::Error;

use crate::stl::LinearPredicate;

pub use reach_avoid::{
    build_reach_avoid_domains, Goal, ReachAvoidDomains, ReachAvoidSpec, SatisfactionDomain,
    DEFAULT_ENUMERATION_CAP,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("half-space normal is identically zero")]
    ZeroNormal,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("polytope needs at least one face")]
    EmptyPolytope,
    #[error("step {t} out of range for a {steps}-step trajectory")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("no arc of the ellipse lies in the domain, although the current point should")]
    EmptyActiveSet,
    #[error("explicit enumeration needs {count} polytopes, above the cap of {cap}; use the STL-score sampler instead")]
    EnumerationCap { count: u128, cap: usize },
    #[error("goal window [{start}, {end}] is invalid for a {steps}-step trajectory")]
    InvalidWindow {
        start: usize,
        end: usize,
        steps: usize,
    },
}

/// `a'x + b >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Halfspace {
    normal: Vec<f64>,
    offset: f64,
    support: Vec<usize>,
}

impl Halfspace {
    pub fn new(normal: Vec<f64>, offset: f64) -> Result<Self, GeometryError> {
        let support: Vec<usize> = normal
            .iter()
            .enumerate()
            .filter(|(_, a)| **a != 0.0)
            .map(|(i, _)| i)
            .collect();
        if support.is_empty() {
            return Err(GeometryError::ZeroNormal);
        }
        Ok(Self {
            normal,
            offset,
            support,
        })
    }

    pub fn normal(&self) -> &[f64] {
        &self.normal
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn dim(&self) -> usize {
        self.normal.len()
    }

    /// `a'x`, skipping structural zeros of `a`.
    pub fn dot(&self, x: &[f64]) -> f64 {
        self.support.iter().map(|&i| self.normal[i] * x[i]).sum()
    }

    /// `a'x + b`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.dot(x) + self.offset
    }

    pub fn complement(&self) -> Self {
        Self {
            normal: self.normal.iter().map(|a| -a).collect(),
            offset: -self.offset,
            support: self.support.clone(),
        }
    }
}

/// Conjunction of half-spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    faces: Vec<Halfspace>,
}

impl Polytope {
    pub fn new(faces: Vec<Halfspace>) -> Result<Self, GeometryError> {
        let first = faces.first().ok_or(GeometryError::EmptyPolytope)?;
        let dim = first.dim();
        if let Some(bad) = faces.iter().find(|f| f.dim() != dim) {
            return Err(GeometryError::DimensionMismatch {
                expected: dim,
                found: bad.dim(),
            });
        }
        Ok(Self { faces })
    }

    /// Rows of `A x + b >= 0`.
    pub fn from_rows(a: &[Vec<f64>], b: &[f64]) -> Result<Self, GeometryError> {
        if a.len() != b.len() {
            return Err(GeometryError::DimensionMismatch {
                expected: a.len(),
                found: b.len(),
            });
        }
        let faces = a
            .iter()
            .zip(b)
            .map(|(row, off)| Halfspace::new(row.clone(), *off))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(faces)
    }

    /// Axis-aligned box `lo <= x <= hi`.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Result<Self, GeometryError> {
        let n = lo.len();
        let mut faces = Vec::with_capacity(2 * n);
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            faces.push(Halfspace::new(e.clone(), -lo[i])?);
            e[i] = -1.0;
            faces.push(Halfspace::new(e, hi[i])?);
        }
        Self::new(faces)
    }

    pub fn faces(&self) -> &[Halfspace] {
        &self.faces
    }

    pub fn dim(&self) -> usize {
        self.faces[0].dim()
    }

    /// Smallest face value; nonnegative exactly on the polytope.
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.faces
            .iter()
            .map(|f| f.eval(x))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.faces.iter().all(|f| f.eval(x) >= 0.0)
    }

    /// Each face as a state predicate.
    pub fn predicates(&self) -> Vec<LinearPredicate> {
        self.faces
            .iter()
            .map(|f| LinearPredicate::new(f.normal.clone(), f.offset).expect("nonzero normal"))
            .collect()
    }
}

/// Disjunction of polytopes. An empty union is the empty set.
#[derive(Debug, Clone, PartialEq)]
pub struct UnionOfPolytopes {
    dim: usize,
    members: Vec<Polytope>,
}

impl UnionOfPolytopes {
    pub fn new(dim: usize, members: Vec<Polytope>) -> Result<Self, GeometryError> {
        if let Some(bad) = members.iter().find(|p| p.dim() != dim) {
            return Err(GeometryError::DimensionMismatch {
                expected: dim,
                found: bad.dim(),
            });
        }
        Ok(Self { dim, members })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            members: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn members(&self) -> &[Polytope] {
        &self.members
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    /// Union with another union of the same dimension.
    pub fn extend(&mut self, other: UnionOfPolytopes) {
        debug_assert_eq!(self.dim, other.dim);
        self.members.extend(other.members);
    }

    /// Largest member margin; `x` lies in the union shifted outward by
    /// `g` iff `score(x) >= -g`. Minus infinity for the empty union.
    pub fn score(&self, x: &[f64]) -> f64 {
        self.members
            .iter()
            .map(|p| p.margin(x))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.members.iter().any(|p| p.contains(x))
    }
}

/// `x(theta) = center + u cos(theta) + v sin(theta)`.
#[derive(Debug, Clone)]
pub struct Ellipse {
    pub center: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl Ellipse {
    pub fn new(center: Vec<f64>, u: Vec<f64>, v: Vec<f64>) -> Self {
        debug_assert!(center.len() == u.len() && u.len() == v.len());
        Self { center, u, v }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn point(&self, theta: f64) -> Vec<f64> {
        let (s, c) = theta.sin_cos();
        self.center
            .iter()
            .zip(self.u.iter().zip(&self.v))
            .map(|(m, (u, v))| m + u * c + v * s)
            .collect()
    }

    /// The constraint `a'x(theta) + b + shift` as `alpha cos + beta sin + c`.
    pub fn project(&self, hs: &Halfspace, shift: f64) -> Harmonic {
        Harmonic {
            alpha: hs.dot(&self.u),
            beta: hs.dot(&self.v),
            c: hs.dot(&self.center) + hs.offset + shift,
        }
    }
}

/// `alpha cos(theta) + beta sin(theta) + c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Harmonic {
    pub alpha: f64,
    pub beta: f64,
    pub c: f64,
}

impl Harmonic {
    pub fn at(&self, theta: f64) -> f64 {
        let (s, co) = theta.sin_cos();
        self.alpha * co + self.beta * s + self.c
    }

    /// Zeros on the circle, via `r cos(theta - phi0) = -c`.
    pub fn roots(&self) -> EllipseRoots {
        let r = self.alpha.hypot(self.beta);
        if r == 0.0 {
            return if self.c == 0.0 {
                EllipseRoots::Degenerate
            } else {
                EllipseRoots::None
            };
        }
        let ratio = -self.c / r;
        if ratio.abs() > 1.0 {
            return EllipseRoots::None;
        }
        let phi0 = self.beta.atan2(self.alpha);
        let delta = ratio.acos();
        if ratio.abs() == 1.0 {
            return EllipseRoots::Tangent(wrap_angle(phi0 + delta));
        }
        EllipseRoots::Crossing(wrap_angle(phi0 - delta), wrap_angle(phi0 + delta))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EllipseRoots {
    None,
    Tangent(f64),
    Crossing(f64, f64),
    /// The constraint is identically zero on the ellipse.
    Degenerate,
}

impl EllipseRoots {
    pub fn push_into(self, out: &mut Vec<f64>) {
        match self {
            Self::Tangent(a) => out.push(a),
            Self::Crossing(a, b) => {
                out.push(a);
                out.push(b);
            }
            Self::None | Self::Degenerate => {}
        }
    }
}

pub fn wrap_angle(theta: f64) -> f64 {
    let w = theta.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Angles where the shifted constraint `a'x + b + shift = 0` meets the ellipse.
pub fn ellipse_halfspace_roots(ellipse: &Ellipse, hs: &Halfspace, shift: f64) -> EllipseRoots {
    ellipse.project(hs, shift).roots()
}

/// Disjoint cyclic arcs `[start, start + len)` of the unit circle.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipseArcs {
    arcs: Vec<(f64, f64)>,
}

impl EllipseArcs {
    pub fn full() -> Self {
        Self {
            arcs: vec![(0.0, TAU)],
        }
    }

    /// `(start, length)` pairs; starts in `[0, 2pi)`, an arc may wrap past `2pi`.
    pub fn arcs(&self) -> &[(f64, f64)] {
        &self.arcs
    }

    pub fn measure(&self) -> f64 {
        self.arcs.iter().map(|(_, len)| len).sum()
    }

    pub fn is_full(&self) -> bool {
        self.arcs.len() == 1 && self.arcs[0].1 >= TAU
    }

    pub fn contains(&self, theta: f64) -> bool {
        let theta = wrap_angle(theta);
        self.arcs.iter().any(|&(s, len)| {
            let d = (theta - s).rem_euclid(TAU);
            d < len || len >= TAU
        })
    }

    /// Maps `fraction` in `[0, 1)` to an angle, uniformly by arc length.
    pub fn angle_at(&self, fraction: f64) -> f64 {
        let mut target = fraction * self.measure();
        for &(s, len) in &self.arcs {
            if target < len {
                return wrap_angle(s + target);
            }
            target -= len;
        }
        let (s, len) = *self.arcs.last().expect("non-empty arcs");
        wrap_angle(s + len * (1.0 - f64::EPSILON))
    }
}

/// Splits the circle at `roots`, keeps elementary arcs whose midpoint
/// satisfies `member`, and merges neighbours.
pub fn arcs_from_roots(
    mut roots: Vec<f64>,
    mut member: impl FnMut(f64) -> bool,
) -> Result<EllipseArcs, GeometryError> {
    for r in roots.iter_mut() {
        *r = wrap_angle(*r);
    }
    roots.sort_by(f64::total_cmp);
    roots.dedup();
    if roots.is_empty() {
        return if member(PI) {
            Ok(EllipseArcs::full())
        } else {
            Err(GeometryError::EmptyActiveSet)
        };
    }
    let k = roots.len();
    let mut active: Vec<(f64, f64)> = Vec::new();
    let mut flags = Vec::with_capacity(k);
    let mut prev_inside = false;
    for i in 0..k {
        let lo = roots[i];
        let hi = if i + 1 < k {
            roots[i + 1]
        } else {
            roots[0] + TAU
        };
        let len = hi - lo;
        let inside = len > 0.0 && member(lo + 0.5 * len);
        flags.push(inside);
        if inside {
            match active.last_mut() {
                Some(last) if prev_inside => last.1 += len,
                _ => active.push((lo, len)),
            }
        }
        prev_inside = inside;
    }
    if active.is_empty() {
        return Err(GeometryError::EmptyActiveSet);
    }
    if flags.iter().all(|f| *f) {
        return Ok(EllipseArcs::full());
    }
    if flags[0] && flags[k - 1] && active.len() > 1 {
        let (_, first_len) = active.remove(0);
        active.last_mut().expect("non-empty").1 += first_len;
    }
    Ok(EllipseArcs { arcs: active })
}

/// Arcs of the ellipse inside the union with every face shifted outward by
/// `shift`. Some point of the ellipse must lie in the shifted union.
pub fn active_arcs_union(
    ellipse: &Ellipse,
    domain: &UnionOfPolytopes,
    shift: f64,
) -> Result<EllipseArcs, GeometryError> {
    let projected: Vec<Vec<Harmonic>> = domain
        .members()
        .iter()
        .map(|p| {
            p.faces()
                .iter()
                .map(|f| ellipse.project(f, shift))
                .collect()
        })
        .collect();
    let mut roots = Vec::new();
    for h in projected.iter().flatten() {
        h.roots().push_into(&mut roots);
    }
    arcs_from_roots(roots, |theta| {
        let (s, c) = theta.sin_cos();
        projected
            .iter()
            .any(|faces| faces.iter().all(|h| h.alpha * c + h.beta * s + h.c >= 0.0))
    })
}

/// Active arcs of `{x in keep, shifted inward by level} \ {avoid, shifted
/// outward by -level}`, i.e. the points with `min(keep margin, -avoid score)
/// >= level`.
pub fn active_arcs_outside(
    ellipse: &Ellipse,
    keep: Option<&Polytope>,
    avoid: &UnionOfPolytopes,
    level: f64,
) -> Result<EllipseArcs, GeometryError> {
    let kept: Vec<Harmonic> = keep
        .map(|p| {
            p.faces()
                .iter()
                .map(|f| ellipse.project(f, -level))
                .collect()
        })
        .unwrap_or_default();
    let avoided: Vec<Vec<Harmonic>> = avoid
        .members()
        .iter()
        .map(|p| {
            p.faces()
                .iter()
                .map(|f| ellipse.project(f, level))
                .collect()
        })
        .collect();
    let mut roots = Vec::new();
    for h in kept.iter().chain(avoided.iter().flatten()) {
        h.roots().push_into(&mut roots);
    }
    arcs_from_roots(roots, |theta| {
        let (s, c) = theta.sin_cos();
        let at = |h: &Harmonic| h.alpha * c + h.beta * s + h.c;
        kept.iter().all(|h| at(h) >= 0.0)
            && !avoided
                .iter()
                .any(|faces| faces.iter().all(|h| at(h) > 0.0))
    })
}

/// A state predicate applied to state `t` of a `steps`-step stacked trajectory.
pub fn lift_predicate(
    pred: &LinearPredicate,
    t: usize,
    steps: usize,
) -> Result<Halfspace, GeometryError> {
    if t >= steps {
        return Err(GeometryError::StepOutOfRange { t, steps });
    }
    let n = pred.dim();
    let mut normal = vec![0.0; n * steps];
    normal[t * n..(t + 1) * n].copy_from_slice(pred.coeffs());
    Halfspace::new(normal, pred.offset())
}

/// The predicate at the midpoint `(x_t + x_{t+1}) / 2`.
pub fn midpoint_constraint(
    pred: &LinearPredicate,
    t: usize,
    steps: usize,
) -> Result<Halfspace, GeometryError> {
    if t + 1 >= steps {
        return Err(GeometryError::StepOutOfRange { t: t + 1, steps });
    }
    let n = pred.dim();
    let mut normal = vec![0.0; n * steps];
    for (i, a) in pred.coeffs().iter().enumerate() {
        normal[t * n + i] = 0.5 * a;
        normal[(t + 1) * n + i] = 0.5 * a;
    }
    Halfspace::new(normal, pred.offset())
}

#[cfg(test)]
mod tests;
