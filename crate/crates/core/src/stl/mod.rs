//! Discrete-time signal temporal logic over linear state predicates.
//!
//! Formulas are evaluated on stacked signals `(x_0', x_1', ..., x_{H-1}')'`
//! with the usual min/max quantitative semantics. A score of exactly zero
//! counts as satisfying.

mod parse;

use std::fmt;

use thiserror::Error;

pub use parse::{parse_formula, parse_formula_with};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StlError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("predicate references x{index} but the state dimension is {dim}")]
    DimensionMismatch { index: usize, dim: usize },
    #[error("invalid interval [{start}, {end}]: {reason}")]
    InvalidInterval {
        start: f64,
        end: f64,
        reason: String,
    },
    #[error("predicate has an all-zero coefficient vector")]
    ZeroPredicate,
    #[error("signal has {steps} steps but evaluation at t={t} needs {needed}")]
    SignalTooShort {
        steps: usize,
        t: usize,
        needed: usize,
    },
    #[error("signal length {len} is not a multiple of the state dimension {dim}")]
    RaggedSignal { len: usize, dim: usize },
}

/// `a'x + b >= 0` over a single state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredicate {
    coeffs: Vec<f64>,
    offset: f64,
}

impl LinearPredicate {
    pub fn new(coeffs: Vec<f64>, offset: f64) -> Result<Self, StlError> {
        if coeffs.iter().all(|c| *c == 0.0) {
            return Err(StlError::ZeroPredicate);
        }
        Ok(Self { coeffs, offset })
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }

    /// Value of `a'x + b` for one state.
    pub fn eval(&self, state: &[f64]) -> f64 {
        self.coeffs
            .iter()
            .zip(state)
            .map(|(a, x)| a * x)
            .sum::<f64>()
            + self.offset
    }

    /// The complementary predicate `-a'x - b >= 0`.
    pub fn complement(&self) -> Self {
        Self {
            coeffs: self.coeffs.iter().map(|c| -c).collect(),
            offset: -self.offset,
        }
    }
}

/// Closed step interval `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    start: usize,
    end: usize,
}

impl Interval {
    pub fn new(start: usize, end: usize) -> Result<Self, StlError> {
        if start > end {
            return Err(StlError::InvalidInterval {
                start: start as f64,
                end: end as f64,
                reason: "inverted bounds".into(),
            });
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StlFormula {
    Predicate(LinearPredicate),
    Not(Box<StlFormula>),
    And(Box<StlFormula>, Box<StlFormula>),
    Or(Box<StlFormula>, Box<StlFormula>),
    Always(Interval, Box<StlFormula>),
    Eventually(Interval, Box<StlFormula>),
    Until(Interval, Box<StlFormula>, Box<StlFormula>),
}

impl StlFormula {
    pub fn predicate(pred: LinearPredicate) -> Self {
        Self::Predicate(pred)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(phi: StlFormula) -> Self {
        Self::Not(Box::new(phi))
    }

    pub fn and(lhs: StlFormula, rhs: StlFormula) -> Self {
        Self::And(Box::new(lhs), Box::new(rhs))
    }

    pub fn or(lhs: StlFormula, rhs: StlFormula) -> Self {
        Self::Or(Box::new(lhs), Box::new(rhs))
    }

    pub fn always(interval: Interval, phi: StlFormula) -> Self {
        Self::Always(interval, Box::new(phi))
    }

    pub fn eventually(interval: Interval, phi: StlFormula) -> Self {
        Self::Eventually(interval, Box::new(phi))
    }

    pub fn until(interval: Interval, lhs: StlFormula, rhs: StlFormula) -> Self {
        Self::Until(interval, Box::new(lhs), Box::new(rhs))
    }

    /// Conjunction of a non-empty list, left-nested.
    pub fn all_of(items: impl IntoIterator<Item = StlFormula>) -> Option<Self> {
        items.into_iter().reduce(Self::and)
    }

    /// Disjunction of a non-empty list, left-nested.
    pub fn any_of(items: impl IntoIterator<Item = StlFormula>) -> Option<Self> {
        items.into_iter().reduce(Self::or)
    }

    pub fn children(&self) -> Vec<&StlFormula> {
        match self {
            Self::Predicate(_) => vec![],
            Self::Not(phi) | Self::Always(_, phi) | Self::Eventually(_, phi) => vec![phi],
            Self::And(l, r) | Self::Or(l, r) | Self::Until(_, l, r) => vec![l, r],
        }
    }
}

/// Minimum signal length needed to evaluate the formula at time 0.
pub fn horizon(formula: &StlFormula) -> usize {
    match formula {
        StlFormula::Predicate(_) => 1,
        StlFormula::Not(phi) => horizon(phi),
        StlFormula::And(l, r) | StlFormula::Or(l, r) => horizon(l).max(horizon(r)),
        StlFormula::Always(i, phi) | StlFormula::Eventually(i, phi) => i.end + horizon(phi),
        StlFormula::Until(i, l, r) => i.end + horizon(l).max(horizon(r)),
    }
}

/// Every distinct predicate in the tree, in first-occurrence order.
pub fn collect_predicates(formula: &StlFormula) -> Vec<LinearPredicate> {
    fn walk(phi: &StlFormula, out: &mut Vec<LinearPredicate>) {
        if let StlFormula::Predicate(p) = phi {
            if !out.contains(p) {
                out.push(p.clone());
            }
        }
        for child in phi.children() {
            walk(child, out);
        }
    }
    let mut out = Vec::new();
    walk(formula, &mut out);
    out
}

/// Flat stacked trajectory: `steps` consecutive state vectors of size `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedSignal {
    data: Vec<f64>,
    dim: usize,
}

impl StackedSignal {
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self, StlError> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(StlError::RaggedSignal {
                len: data.len(),
                dim,
            });
        }
        Ok(Self { data, dim })
    }

    pub fn from_states(states: &[Vec<f64>]) -> Result<Self, StlError> {
        let dim = states.first().map_or(0, Vec::len);
        let data: Vec<f64> = states.iter().flatten().copied().collect();
        if states.iter().any(|s| s.len() != dim) {
            return Err(StlError::RaggedSignal {
                len: data.len(),
                dim,
            });
        }
        Self::new(data, dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

/// Robustness score of `formula` on `signal` at step `t`.
pub fn robustness(formula: &StlFormula, signal: &StackedSignal, t: usize) -> Result<f64, StlError> {
    let compiled = CompiledFormula::new(formula);
    compiled.robustness_at(signal, t)
}

/// Whether the signal's score at time 0 reaches `level`.
pub fn in_level_set(
    signal: &StackedSignal,
    formula: &StlFormula,
    level: f64,
) -> Result<bool, StlError> {
    Ok(robustness(formula, signal, 0)? >= level)
}

#[derive(Debug, Clone)]
enum Node {
    Pred(usize),
    Not(Box<Node>),
    And(Box<Node>, Box<Node>),
    Or(Box<Node>, Box<Node>),
    Always(usize, usize, Box<Node>),
    Eventually(usize, usize, Box<Node>),
    Until(usize, usize, Box<Node>, Box<Node>),
}

/// A formula with its predicates indexed, evaluated from a table of
/// predicate values rather than from raw states.
///
/// The table is row-major `values[t * num_predicates + i]` holding
/// `a_i'x_t + b_i` for `t < horizon`.
#[derive(Debug, Clone)]
pub struct CompiledFormula {
    predicates: Vec<LinearPredicate>,
    root: Node,
    horizon: usize,
}

impl CompiledFormula {
    pub fn new(formula: &StlFormula) -> Self {
        let predicates = collect_predicates(formula);
        let root = Self::lower(formula, &predicates);
        Self {
            predicates,
            root,
            horizon: horizon(formula),
        }
    }

    fn lower(phi: &StlFormula, preds: &[LinearPredicate]) -> Node {
        let b = |f: &StlFormula| Box::new(Self::lower(f, preds));
        match phi {
            StlFormula::Predicate(p) => Node::Pred(
                preds
                    .iter()
                    .position(|q| q == p)
                    .expect("predicate collected"),
            ),
            StlFormula::Not(f) => Node::Not(b(f)),
            StlFormula::And(l, r) => Node::And(b(l), b(r)),
            StlFormula::Or(l, r) => Node::Or(b(l), b(r)),
            StlFormula::Always(i, f) => Node::Always(i.start, i.end, b(f)),
            StlFormula::Eventually(i, f) => Node::Eventually(i.start, i.end, b(f)),
            StlFormula::Until(i, l, r) => Node::Until(i.start, i.end, b(l), b(r)),
        }
    }

    pub fn predicates(&self) -> &[LinearPredicate] {
        &self.predicates
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Score at time 0 given the predicate-value table for `t < horizon`.
    pub fn robustness_from_values(&self, values: &[f64]) -> f64 {
        debug_assert!(values.len() >= self.horizon * self.predicates.len());
        eval_node(&self.root, values, self.predicates.len(), 1)[0]
    }

    /// Score at time 0 of a stacked trajectory (which may be longer than the horizon).
    pub fn robustness(&self, trajectory: &[f64], dim: usize) -> f64 {
        let np = self.predicates.len();
        let mut values = Vec::with_capacity(self.horizon * np);
        for t in 0..self.horizon {
            let x = &trajectory[t * dim..(t + 1) * dim];
            values.extend(self.predicates.iter().map(|p| p.eval(x)));
        }
        self.robustness_from_values(&values)
    }

    pub fn robustness_at(&self, signal: &StackedSignal, t: usize) -> Result<f64, StlError> {
        let needed = t + self.horizon;
        if signal.steps() < needed {
            return Err(StlError::SignalTooShort {
                steps: signal.steps(),
                t,
                needed,
            });
        }
        let np = self.predicates.len();
        let mut values = Vec::with_capacity(needed * np);
        for s in 0..needed {
            let x = signal.state(s);
            values.extend(self.predicates.iter().map(|p| p.eval(x)));
        }
        Ok(eval_node(&self.root, &values, np, t + 1)[t])
    }
}

/// Scores of `node` at times `0..count`; the table must cover
/// `count + H(node) - 1` rows.
fn eval_node(node: &Node, values: &[f64], np: usize, count: usize) -> Vec<f64> {
    match node {
        Node::Pred(i) => (0..count).map(|t| values[t * np + i]).collect(),
        Node::Not(f) => eval_node(f, values, np, count)
            .into_iter()
            .map(|v| -v)
            .collect(),
        Node::And(l, r) => {
            let a = eval_node(l, values, np, count);
            let b = eval_node(r, values, np, count);
            a.into_iter().zip(b).map(|(x, y)| x.min(y)).collect()
        }
        Node::Or(l, r) => {
            let a = eval_node(l, values, np, count);
            let b = eval_node(r, values, np, count);
            a.into_iter().zip(b).map(|(x, y)| x.max(y)).collect()
        }
        Node::Always(lo, hi, f) => {
            let c = eval_node(f, values, np, count + hi);
            (0..count)
                .map(|t| {
                    c[t + lo..=t + hi]
                        .iter()
                        .copied()
                        .fold(f64::INFINITY, f64::min)
                })
                .collect()
        }
        Node::Eventually(lo, hi, f) => {
            let c = eval_node(f, values, np, count + hi);
            (0..count)
                .map(|t| {
                    c[t + lo..=t + hi]
                        .iter()
                        .copied()
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect()
        }
        Node::Until(lo, hi, l, r) => {
            let c1 = eval_node(l, values, np, count + hi);
            let c2 = eval_node(r, values, np, count + hi);
            (0..count)
                .map(|t| {
                    let mut prefix_min = f64::INFINITY;
                    let mut best = f64::NEG_INFINITY;
                    for tau in t..=t + hi {
                        prefix_min = prefix_min.min(c1[tau]);
                        if tau >= t + lo {
                            best = best.max(c2[tau].min(prefix_min));
                        }
                    }
                    best
                })
                .collect()
        }
    }
}

impl fmt::Display for LinearPredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.coeffs.iter().enumerate().filter(|(_, c)| **c != 0.0) {
            write!(f, "{c:?}*x{} + ", i + 1)?;
        }
        write!(f, "{:?} >= 0)", self.offset)
    }
}

impl fmt::Display for StlFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Predicate(p) => write!(f, "{p}"),
            Self::Not(phi) => write!(f, "!{phi}"),
            Self::And(l, r) => write!(f, "({l} & {r})"),
            Self::Or(l, r) => write!(f, "({l} | {r})"),
            Self::Always(i, phi) => write!(f, "G[{},{}]{phi}", i.start, i.end),
            Self::Eventually(i, phi) => write!(f, "F[{},{}]{phi}", i.start, i.end),
            Self::Until(i, l, r) => write!(f, "({l} U[{},{}] {r})", i.start, i.end),
        }
    }
}

#[cfg(test)]
pub(crate) mod tests;
