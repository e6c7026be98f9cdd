//! Signal temporal logic over discrete timed traces.
//!
//! The fragment has three constructs: threshold predicates on one signal
//! dimension, conjunction, and bounded `always`. Quantitative robustness is
//!
//! ```text
//! rho(s_p < c, k)          = c - x_k[p]          (same for <=)
//! rho(s_p >= c, k)         = x_k[p] - c          (same for >)
//! rho(f and g, k)          = min(rho(f, k), rho(g, k))
//! rho(alw[a,b](f), k)      = min over t in [k+a, k+b] of rho(f, t)
//! ```
//!
//! Positive robustness means the trace satisfies the formula at `k`.

mod dag;
mod loss;
mod parse;

use std::fmt;

pub use dag::{compile_dag, DagNode, RobustnessDag};
pub use loss::{logic_loss, robustness_column, robustness_var};

#[derive(Debug, thiserror::Error)]
pub enum StlError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("time bounds must satisfy a < b, got [{lo},{hi}]")]
    Bounds { lo: usize, hi: usize },
    #[error("invalid trace: {0}")]
    Trace(String),
    #[error("{node}: timestamps {missing:?} are outside the trace")]
    OutOfRange { node: String, missing: Vec<i64> },
    #[error("{node}: signal s{index} does not exist in {dim}-dimensional samples")]
    SignalIndex { node: String, index: usize, dim: usize },
    #[error(transparent)]
    Diff(#[from] crate::diffcore::DiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Comparison {
    Lt,
    Le,
    Gt,
    Ge,
}

impl Comparison {
    pub fn symbol(self) -> &'static str {
        match self {
            Comparison::Lt => "<",
            Comparison::Le => "<=",
            Comparison::Gt => ">",
            Comparison::Ge => ">=",
        }
    }

    /// Robustness of `x cmp threshold`.
    pub fn margin(self, x: f64, threshold: f64) -> f64 {
        match self {
            Comparison::Lt | Comparison::Le => threshold - x,
            Comparison::Gt | Comparison::Ge => x - threshold,
        }
    }

    pub fn holds(self, x: f64, threshold: f64) -> bool {
        match self {
            Comparison::Lt => x < threshold,
            Comparison::Le => x <= threshold,
            Comparison::Gt => x > threshold,
            Comparison::Ge => x >= threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Formula {
    Predicate {
        signal: usize,
        cmp: Comparison,
        threshold: f64,
    },
    And(Box<Formula>, Box<Formula>),
    Always {
        lo: usize,
        hi: usize,
        child: Box<Formula>,
    },
}

impl Formula {
    pub fn parse(text: &str) -> Result<Self, StlError> {
        parse::parse(text)
    }

    pub fn pred(signal: usize, cmp: Comparison, threshold: f64) -> Self {
        Formula::Predicate {
            signal,
            cmp,
            threshold,
        }
    }

    pub fn and(lhs: Formula, rhs: Formula) -> Self {
        Formula::And(Box::new(lhs), Box::new(rhs))
    }

    /// Panics if `lo >= hi`; use [`Formula::parse`] for checked input.
    pub fn always(lo: usize, hi: usize, child: Formula) -> Self {
        assert!(lo < hi, "always bounds must satisfy lo < hi");
        Formula::Always {
            lo,
            hi,
            child: Box::new(child),
        }
    }

    /// The tracking rule `alw[lo,hi]((s0 >= target) and (s0 <= target))`.
    pub fn tracking_rule(target: f64, lo: usize, hi: usize) -> Self {
        Self::tracking_band(target, 0.0, lo, hi)
    }

    /// Like [`Formula::tracking_rule`] but with a band of half-width `delta`.
    pub fn tracking_band(target: f64, delta: f64, lo: usize, hi: usize) -> Self {
        Self::always(
            lo,
            hi,
            Self::and(
                Self::pred(0, Comparison::Ge, target - delta),
                Self::pred(0, Comparison::Le, target + delta),
            ),
        )
    }

    pub fn depth(&self) -> usize {
        match self {
            Formula::Predicate { .. } => 1,
            Formula::And(a, b) => 1 + a.depth().max(b.depth()),
            Formula::Always { child, .. } => 1 + child.depth(),
        }
    }

    /// Largest signal index referenced, if any predicate exists.
    pub fn max_signal(&self) -> usize {
        match self {
            Formula::Predicate { signal, .. } => *signal,
            Formula::And(a, b) => a.max_signal().max(b.max_signal()),
            Formula::Always { child, .. } => child.max_signal(),
        }
    }

    /// How far past `k` the formula looks.
    pub fn horizon(&self) -> usize {
        match self {
            Formula::Predicate { .. } => 0,
            Formula::And(a, b) => a.horizon().max(b.horizon()),
            Formula::Always { hi, child, .. } => hi + child.horizon(),
        }
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Formula::Predicate {
                signal,
                cmp,
                threshold,
            } => write!(f, "s{signal} {} {threshold:?}", cmp.symbol()),
            Formula::And(a, b) => write!(f, "({a} and {b})"),
            Formula::Always { lo, hi, child } => write!(f, "alw[{lo},{hi}]({child})"),
        }
    }
}

impl std::str::FromStr for Formula {
    type Err = StlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Formula::parse(s)
    }
}

/// Samples at strictly increasing integer timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct TimedTrace {
    timestamps: Vec<i64>,
    samples: Vec<Vec<f64>>,
    dim: usize,
}

impl TimedTrace {
    pub fn new(timestamps: Vec<i64>, samples: Vec<Vec<f64>>) -> Result<Self, StlError> {
        if timestamps.is_empty() {
            return Err(StlError::Trace("trace is empty".into()));
        }
        if timestamps.len() != samples.len() {
            return Err(StlError::Trace(format!(
                "{} timestamps but {} samples",
                timestamps.len(),
                samples.len()
            )));
        }
        if let Some(w) = timestamps.windows(2).find(|w| w[1] <= w[0]) {
            return Err(StlError::Trace(format!(
                "timestamps not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        let dim = samples[0].len();
        if dim == 0 || samples.iter().any(|s| s.len() != dim) {
            return Err(StlError::Trace("samples must share a non-zero dimension".into()));
        }
        Ok(Self {
            timestamps,
            samples,
            dim,
        })
    }

    /// One-dimensional trace with timestamps `start, start + 1, ...`.
    pub fn from_signal(start: i64, values: &[f64]) -> Result<Self, StlError> {
        let ts = (0..values.len() as i64).map(|i| start + i).collect();
        Self::new(ts, values.iter().map(|v| vec![*v]).collect())
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    /// Position of timestamp `t`, if present.
    pub fn index_of(&self, t: i64) -> Option<usize> {
        let first = self.timestamps[0];
        // Contiguous traces resolve without a search.
        if let Ok(off) = usize::try_from(t - first) {
            if self.timestamps.get(off) == Some(&t) {
                return Some(off);
            }
        }
        self.timestamps.binary_search(&t).ok()
    }

    pub fn value(&self, t: i64, signal: usize) -> Option<f64> {
        self.index_of(t).and_then(|i| self.samples[i].get(signal).copied())
    }
}

fn check_signals(f: &Formula, tr: &TimedTrace) -> Result<(), StlError> {
    let max = f.max_signal();
    if max >= tr.dim() {
        return Err(StlError::SignalIndex {
            node: f.to_string(),
            index: max,
            dim: tr.dim(),
        });
    }
    Ok(())
}

/// Offsets relative to `k` that evaluating `f` reads, as merged closed intervals.
fn footprint(f: &Formula) -> Vec<(i64, i64)> {
    let mut spans = match f {
        Formula::Predicate { .. } => vec![(0, 0)],
        Formula::And(a, b) => {
            let mut v = footprint(a);
            v.extend(footprint(b));
            v
        }
        Formula::Always { lo, hi, child } => footprint(child)
            .into_iter()
            .map(|(l, h)| (l + *lo as i64, h + *hi as i64))
            .collect(),
    };
    spans.sort_unstable();
    let mut merged: Vec<(i64, i64)> = Vec::with_capacity(spans.len());
    for (l, h) in spans {
        match merged.last_mut() {
            Some(last) if l <= last.1 + 1 => last.1 = last.1.max(h),
            _ => merged.push((l, h)),
        }
    }
    merged
}

/// Reports timestamps needed at `k` that the trace lacks, naming the
/// outermost node whose window is not covered.
fn check_window(f: &Formula, tr: &TimedTrace, k: i64) -> Result<(), StlError> {
    if let Formula::And(a, b) = f {
        check_window(a, tr, k)?;
        return check_window(b, tr, k);
    }
    let missing: Vec<i64> = footprint(f)
        .into_iter()
        .flat_map(|(l, h)| k + l..=k + h)
        .filter(|t| tr.index_of(*t).is_none())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(StlError::OutOfRange {
            node: f.to_string(),
            missing,
        })
    }
}

fn rho(f: &Formula, tr: &TimedTrace, k: i64) -> f64 {
    match f {
        Formula::Predicate {
            signal,
            cmp,
            threshold,
        } => {
            let i = tr.index_of(k).expect("window checked");
            cmp.margin(tr.samples[i][*signal], *threshold)
        }
        Formula::And(a, b) => rho(a, tr, k).min(rho(b, tr, k)),
        Formula::Always { lo, hi, child } => (k + *lo as i64..=k + *hi as i64)
            .map(|t| rho(child, tr, t))
            .fold(f64::INFINITY, f64::min),
    }
}

fn sat(f: &Formula, tr: &TimedTrace, k: i64) -> bool {
    match f {
        Formula::Predicate {
            signal,
            cmp,
            threshold,
        } => {
            let i = tr.index_of(k).expect("window checked");
            cmp.holds(tr.samples[i][*signal], *threshold)
        }
        Formula::And(a, b) => sat(a, tr, k) && sat(b, tr, k),
        Formula::Always { lo, hi, child } => {
            (k + *lo as i64..=k + *hi as i64).all(|t| sat(child, tr, t))
        }
    }
}

/// Quantitative robustness of `f` on `tr` at timestamp `k`.
pub fn robustness(f: &Formula, tr: &TimedTrace, k: i64) -> Result<f64, StlError> {
    check_signals(f, tr)?;
    check_window(f, tr, k)?;
    Ok(rho(f, tr, k))
}

/// Boolean satisfaction of `f` on `tr` at timestamp `k`.
pub fn satisfies(f: &Formula, tr: &TimedTrace, k: i64) -> Result<bool, StlError> {
    check_signals(f, tr)?;
    check_window(f, tr, k)?;
    Ok(sat(f, tr, k))
}
