//! Explicit trajectory-space polytope unions for reach-avoid tasks.
//!
//! Failure of "start in Init, always avoid every Unsafe set, reach every
//! Goal within its window" splits into
//!
//! * type a: hit some obstacle at some step while still reaching every goal
//!   on time, one polytope per (obstacle, hit event, reach step per goal);
//! * type b: miss some goal, one polytope per choice of a violated goal face
//!   at every step of that goal's window.
//!
//! Both are conjoined with Init at step 0.

use super::{
    lift_predicate, midpoint_constraint, GeometryError, Halfspace, Polytope, UnionOfPolytopes,
};
use crate::stl::{Interval, LinearPredicate, StlFormula};

pub const DEFAULT_ENUMERATION_CAP: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Goal {
    pub region: Polytope,
    /// Inclusive step window.
    pub window: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReachAvoidSpec {
    pub init: Option<Polytope>,
    pub unsafe_sets: Vec<Polytope>,
    pub goals: Vec<Goal>,
    /// Number of states in the trajectory.
    pub steps: usize,
    /// Also test obstacle faces at the midpoint of consecutive states.
    pub midpoints: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SatisfactionDomain {
    Explicit(UnionOfPolytopes),
    /// Too many polytopes to enumerate; sample through the formula instead.
    DelegateToStl,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReachAvoidDomains {
    pub hit_obstacle: UnionOfPolytopes,
    pub miss_goal: UnionOfPolytopes,
    pub satisfaction: SatisfactionDomain,
}

impl ReachAvoidDomains {
    /// Every failing trajectory, as a single union.
    pub fn failure(&self) -> UnionOfPolytopes {
        let mut u = self.hit_obstacle.clone();
        u.extend(self.miss_goal.clone());
        u
    }
}

#[derive(Debug, Clone, Copy)]
enum Event {
    State(usize),
    Midpoint(usize),
}

impl ReachAvoidSpec {
    pub fn state_dim(&self) -> Option<usize> {
        self.init
            .as_ref()
            .map(Polytope::dim)
            .or_else(|| self.unsafe_sets.first().map(Polytope::dim))
            .or_else(|| self.goals.first().map(|g| g.region.dim()))
    }

    fn validate(&self) -> Result<usize, GeometryError> {
        let n = self.state_dim().unwrap_or(1);
        let regions = self
            .init
            .iter()
            .chain(&self.unsafe_sets)
            .chain(self.goals.iter().map(|g| &g.region));
        for p in regions {
            if p.dim() != n {
                return Err(GeometryError::DimensionMismatch {
                    expected: n,
                    found: p.dim(),
                });
            }
        }
        for g in &self.goals {
            let (start, end) = g.window;
            if start > end || end >= self.steps {
                return Err(GeometryError::InvalidWindow {
                    start,
                    end,
                    steps: self.steps,
                });
            }
        }
        Ok(n)
    }

    fn events(&self) -> Vec<Event> {
        let mut ev: Vec<Event> = (0..self.steps).map(Event::State).collect();
        if self.midpoints {
            ev.extend((0..self.steps.saturating_sub(1)).map(Event::Midpoint));
        }
        ev
    }

    /// The equivalent formula: Init at step 0, every unsafe set avoided at
    /// every step, every goal reached inside its window. Midpoint
    /// constraints have no counterpart here.
    pub fn to_formula(&self) -> Option<StlFormula> {
        let conj = |p: &Polytope| {
            StlFormula::all_of(p.predicates().into_iter().map(StlFormula::Predicate))
                .expect("non-empty polytope")
        };
        let whole = Interval::new(0, self.steps.saturating_sub(1)).ok()?;
        let mut parts = Vec::new();
        if let Some(init) = &self.init {
            parts.push(conj(init));
        }
        for o in &self.unsafe_sets {
            parts.push(StlFormula::always(whole, StlFormula::not(conj(o))));
        }
        for g in &self.goals {
            let w = Interval::new(g.window.0, g.window.1).ok()?;
            parts.push(StlFormula::eventually(w, conj(&g.region)));
        }
        StlFormula::all_of(parts)
    }
}

fn lift_event(p: &LinearPredicate, ev: Event, steps: usize) -> Result<Halfspace, GeometryError> {
    match ev {
        Event::State(t) => lift_predicate(p, t, steps),
        Event::Midpoint(t) => midpoint_constraint(p, t, steps),
    }
}

fn lift_all(poly: &Polytope, ev: Event, steps: usize) -> Result<Vec<Halfspace>, GeometryError> {
    poly.predicates()
        .iter()
        .map(|p| lift_event(p, ev, steps))
        .collect()
}

/// Cartesian product of index ranges `0..sizes[i]`, in odometer order.
fn for_each_choice(
    sizes: &[usize],
    mut f: impl FnMut(&[usize]) -> Result<(), GeometryError>,
) -> Result<(), GeometryError> {
    if sizes.contains(&0) {
        return Ok(());
    }
    let mut idx = vec![0usize; sizes.len()];
    loop {
        f(&idx)?;
        let mut k = 0;
        loop {
            if k == sizes.len() {
                return Ok(());
            }
            idx[k] += 1;
            if idx[k] < sizes[k] {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

fn checked_product(sizes: impl IntoIterator<Item = usize>) -> u128 {
    sizes
        .into_iter()
        .fold(1u128, |acc, s| acc.saturating_mul(s as u128))
}

pub fn build_reach_avoid_domains(
    spec: &ReachAvoidSpec,
    cap: usize,
) -> Result<ReachAvoidDomains, GeometryError> {
    let n = spec.validate()?;
    let steps = spec.steps;
    let dim = n * steps;
    let events = spec.events();
    let windows: Vec<usize> = spec
        .goals
        .iter()
        .map(|g| g.window.1 - g.window.0 + 1)
        .collect();
    let reach_combos = checked_product(windows.iter().copied());

    let count_a = (spec.unsafe_sets.len() as u128)
        .saturating_mul(events.len() as u128)
        .saturating_mul(reach_combos);
    let count_b: u128 = spec
        .goals
        .iter()
        .zip(&windows)
        .map(|(g, w)| checked_product(std::iter::repeat_n(g.region.faces().len(), *w)))
        .fold(0u128, u128::saturating_add);
    let total = count_a.saturating_add(count_b);
    if total > cap as u128 {
        return Err(GeometryError::EnumerationCap { count: total, cap });
    }

    let init_faces = match &spec.init {
        Some(p) => lift_all(p, Event::State(0), steps)?,
        None => Vec::new(),
    };
    let goal_faces = |choice: &[usize]| -> Result<Vec<Halfspace>, GeometryError> {
        let mut faces = Vec::new();
        for (g, k) in spec.goals.iter().zip(choice) {
            faces.extend(lift_all(&g.region, Event::State(g.window.0 + k), steps)?);
        }
        Ok(faces)
    };

    let mut hit = Vec::new();
    for o in &spec.unsafe_sets {
        for &ev in &events {
            let obstacle = lift_all(o, ev, steps)?;
            for_each_choice(&windows, |choice| {
                let mut faces = init_faces.clone();
                faces.extend(obstacle.iter().cloned());
                faces.extend(goal_faces(choice)?);
                hit.push(Polytope::new(faces)?);
                Ok(())
            })?;
        }
    }

    let mut miss = Vec::new();
    for g in &spec.goals {
        let preds = g.region.predicates();
        let (start, end) = g.window;
        let width = end - start + 1;
        let sizes = vec![preds.len(); width];
        for_each_choice(&sizes, |choice| {
            let mut faces = init_faces.clone();
            for (k, &face) in choice.iter().enumerate() {
                faces.push(lift_predicate(&preds[face].complement(), start + k, steps)?);
            }
            miss.push(Polytope::new(faces)?);
            Ok(())
        })?;
    }

    let satisfaction = satisfaction_domain(spec, &events, &init_faces, &windows, cap, dim)?;

    Ok(ReachAvoidDomains {
        hit_obstacle: UnionOfPolytopes::new(dim, hit)?,
        miss_goal: UnionOfPolytopes::new(dim, miss)?,
        satisfaction,
    })
}

fn satisfaction_domain(
    spec: &ReachAvoidSpec,
    events: &[Event],
    init_faces: &[Halfspace],
    windows: &[usize],
    cap: usize,
    dim: usize,
) -> Result<SatisfactionDomain, GeometryError> {
    let steps = spec.steps;
    // One complemented face per (obstacle, event), one reach step per goal.
    let mut sizes = Vec::new();
    let mut avoid_slots = Vec::new();
    for o in &spec.unsafe_sets {
        let comps: Vec<LinearPredicate> = o
            .predicates()
            .iter()
            .map(LinearPredicate::complement)
            .collect();
        for &ev in events {
            sizes.push(comps.len());
            avoid_slots.push((comps.clone(), ev));
        }
    }
    sizes.extend(windows.iter().copied());
    let count = checked_product(sizes.iter().copied());
    if count > cap as u128 {
        return Ok(SatisfactionDomain::DelegateToStl);
    }
    let mut members = Vec::new();
    for_each_choice(&sizes, |choice| {
        let mut faces = init_faces.to_vec();
        for ((comps, ev), &k) in avoid_slots.iter().zip(choice) {
            faces.push(lift_event(&comps[k], *ev, steps)?);
        }
        for (g, &k) in spec.goals.iter().zip(&choice[avoid_slots.len()..]) {
            faces.extend(lift_all(&g.region, Event::State(g.window.0 + k), steps)?);
        }
        if faces.is_empty() {
            return Ok(());
        }
        members.push(Polytope::new(faces)?);
        Ok(())
    })?;
    Ok(SatisfactionDomain::Explicit(UnionOfPolytopes::new(
        dim, members,
    )?))
}
