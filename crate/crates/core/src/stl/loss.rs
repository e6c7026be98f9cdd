//! Robustness as a node on the autodiff tape.
//!
//! The trace is a `[T, m]` tensor whose row `i` holds the sample at time
//! offset `i`. Every subformula becomes a column whose row `k` is its
//! robustness at `k`; windows shorten the column by their upper bound.

use super::{footprint, Comparison, Formula, StlError};
use crate::diffcore::{Graph, MinMode, Var};

fn column_of(g: &mut Graph, f: &Formula, trace: Var, mode: MinMode) -> Result<Var, StlError> {
    Ok(match f {
        Formula::Predicate {
            signal,
            cmp,
            threshold,
        } => {
            let x = g.column(trace, *signal)?;
            match cmp {
                Comparison::Lt | Comparison::Le => {
                    let neg = g.scale(x, -1.0);
                    g.shift(neg, *threshold)
                }
                Comparison::Gt | Comparison::Ge => g.shift(x, -threshold),
            }
        }
        Formula::And(a, b) => {
            let mut ra = column_of(g, a, trace, mode)?;
            let mut rb = column_of(g, b, trace, mode)?;
            let n = g.shape(ra)[0].min(g.shape(rb)[0]);
            if g.shape(ra)[0] > n {
                ra = g.rows(ra, 0, n)?;
            }
            if g.shape(rb)[0] > n {
                rb = g.rows(rb, 0, n)?;
            }
            g.min2(ra, rb, mode)?
        }
        Formula::Always { lo, hi, child } => {
            let r = column_of(g, child, trace, mode)?;
            g.window_min(r, *lo, *hi, mode)?
        }
    })
}

fn out_of_range(f: &Formula, rows: usize, k: usize) -> StlError {
    let missing = footprint(f)
        .into_iter()
        .flat_map(|(l, h)| k as i64 + l..=k as i64 + h)
        .filter(|t| *t >= rows as i64)
        .collect();
    StlError::OutOfRange {
        node: f.to_string(),
        missing,
    }
}

/// Robustness at every admissible offset as an `[T - horizon, 1]` column.
pub fn robustness_column(g: &mut Graph, f: &Formula, trace: Var, mode: MinMode) -> Result<Var, StlError> {
    let [rows, cols] = g.shape(trace);
    if f.max_signal() >= cols {
        return Err(StlError::SignalIndex {
            node: f.to_string(),
            index: f.max_signal(),
            dim: cols,
        });
    }
    if f.horizon() >= rows {
        return Err(out_of_range(f, rows, 0));
    }
    column_of(g, f, trace, mode)
}

/// Robustness at offset `k` as a `[1, 1]` node.
pub fn robustness_var(g: &mut Graph, f: &Formula, trace: Var, k: usize, mode: MinMode) -> Result<Var, StlError> {
    let rows = g.shape(trace)[0];
    if k + f.horizon() >= rows {
        return Err(out_of_range(f, rows, k));
    }
    let col = robustness_column(g, f, trace, mode)?;
    Ok(g.rows(col, k, k + 1)?)
}

/// `max(0, -rho)`: zero once the rule holds at `k`.
pub fn logic_loss(g: &mut Graph, f: &Formula, trace: Var, k: usize, mode: MinMode) -> Result<Var, StlError> {
    let rho = robustness_var(g, f, trace, k, mode)?;
    Ok(g.relu_of_negation(rho))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use crate::stl::{robustness, TimedTrace};

    fn loss_on(f: &Formula, values: &[f64], k: usize) -> f64 {
        let mut g = Graph::new();
        let tr = g.constant(Tensor::column(values.to_vec()));
        let l = logic_loss(&mut g, f, tr, k, MinMode::Hard).unwrap();
        g.item(l)
    }

    #[test]
    fn relu_of_robustness() {
        let f = Formula::parse("s0 < 1").unwrap();
        assert_eq!(loss_on(&f, &[1.5], 0), 0.5);
        assert_eq!(loss_on(&f, &[0.7], 0), 0.0);
    }

    #[test]
    fn tracking_rule_constant_traces() {
        let beta = 3.0;
        let f = Formula::tracking_rule(beta, 151, 251);
        assert_eq!(loss_on(&f, &[beta; 252], 0), 0.0);
        let delta = 0.25;
        assert_eq!(loss_on(&f, &[beta + delta; 252], 0), delta);
        assert_eq!(loss_on(&f, &[beta - delta; 252], 0), delta);
    }

    #[test]
    fn matches_recursive_robustness() {
        let f = Formula::parse("(alw[1,3]((s0 < 2 and s0 >= -1)) and alw[0,1](s0 > 0.5))").unwrap();
        let values = [0.3, 1.2, -0.4, 2.5, 0.9, 1.1, 0.0];
        let tr = TimedTrace::from_signal(0, &values).unwrap();
        let mut g = Graph::new();
        let t = g.constant(Tensor::column(values.to_vec()));
        let col = robustness_column(&mut g, &f, t, MinMode::Hard).unwrap();
        assert_eq!(g.shape(col), [4, 1]);
        for k in 0..4 {
            assert_eq!(g.value(col).data()[k], robustness(&f, &tr, k as i64).unwrap());
        }
    }

    #[test]
    fn gradient_hits_the_worst_sample() {
        let f = Formula::tracking_rule(0.0, 0, 2);
        let mut g = Graph::new();
        let t = g.constant(Tensor::column(vec![0.1, -0.4, 0.2]));
        let l = logic_loss(&mut g, &f, t, 0, MinMode::Hard).unwrap();
        assert!((g.item(l) - 0.4).abs() < 1e-15);
        let grads = g.gradients(l).unwrap();
        assert_eq!(grads.get(t).unwrap().data(), &[0.0, -1.0, 0.0]);
    }

    #[test]
    fn short_trace_is_rejected() {
        let f = Formula::parse("alw[0,5](s0 < 1)").unwrap();
        let mut g = Graph::new();
        let t = g.constant(Tensor::column(vec![0.0; 4]));
        match logic_loss(&mut g, &f, t, 0, MinMode::Hard) {
            Err(StlError::OutOfRange { missing, .. }) => assert_eq!(missing, vec![4, 5]),
            other => panic!("{other:?}"),
        }
    }
}
