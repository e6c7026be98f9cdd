use std::collections::HashMap;

use super::{check_signals, check_window, Comparison, Formula, StlError, TimedTrace};

/// One operation of a compiled robustness graph. Children always have a
/// smaller index than their parent.
#[derive(Clone, Debug, PartialEq)]
pub enum DagNode {
    Predicate {
        signal: usize,
        cmp: Comparison,
        threshold: f64,
    },
    Min(usize, usize),
    WindowMin {
        child: usize,
        lo: usize,
        hi: usize,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum Key {
    Pred(usize, Comparison, u64),
    Min(usize, usize),
    Window(usize, usize, usize),
}

/// Robustness graph in topological order with shared subformulas merged.
#[derive(Clone, Debug)]
pub struct RobustnessDag {
    nodes: Vec<DagNode>,
    output: usize,
    trace_len: usize,
    formula: Formula,
}

struct Builder {
    nodes: Vec<DagNode>,
    seen: HashMap<Key, usize>,
}

impl Builder {
    fn intern(&mut self, key: Key, node: DagNode) -> usize {
        *self.seen.entry(key).or_insert_with(|| {
            self.nodes.push(node);
            self.nodes.len() - 1
        })
    }

    fn add(&mut self, f: &Formula) -> usize {
        match f {
            Formula::Predicate {
                signal,
                cmp,
                threshold,
            } => self.intern(
                Key::Pred(*signal, *cmp, threshold.to_bits()),
                DagNode::Predicate {
                    signal: *signal,
                    cmp: *cmp,
                    threshold: *threshold,
                },
            ),
            Formula::And(a, b) => {
                let (a, b) = (self.add(a), self.add(b));
                self.intern(Key::Min(a, b), DagNode::Min(a, b))
            }
            Formula::Always { lo, hi, child } => {
                let child = self.add(child);
                self.intern(
                    Key::Window(child, *lo, *hi),
                    DagNode::WindowMin {
                        child,
                        lo: *lo,
                        hi: *hi,
                    },
                )
            }
        }
    }
}

/// Compiles `f` for traces of `trace_len` samples.
pub fn compile_dag(f: &Formula, trace_len: usize) -> RobustnessDag {
    let mut b = Builder {
        nodes: Vec::new(),
        seen: HashMap::new(),
    };
    let output = b.add(f);
    RobustnessDag {
        nodes: b.nodes,
        output,
        trace_len,
        formula: f.clone(),
    }
}

impl RobustnessDag {
    pub fn nodes(&self) -> &[DagNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn output(&self) -> usize {
        self.output
    }

    pub fn trace_len(&self) -> usize {
        self.trace_len
    }

    pub fn formula(&self) -> &Formula {
        &self.formula
    }

    fn check_len(&self, tr: &TimedTrace) -> Result<(), StlError> {
        if tr.len() != self.trace_len {
            return Err(StlError::Trace(format!(
                "compiled for {} samples, got {}",
                self.trace_len,
                tr.len()
            )));
        }
        check_signals(&self.formula, tr)
    }

    /// Robustness of the output node at every trace position, `None` where
    /// a window runs past the end of the trace or hits a gap.
    pub fn evaluate_all(&self, tr: &TimedTrace) -> Result<Vec<Option<f64>>, StlError> {
        self.check_len(tr)?;
        let ts = tr.timestamps();
        let mut values: Vec<Vec<Option<f64>>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let row = match node {
                DagNode::Predicate {
                    signal,
                    cmp,
                    threshold,
                } => tr
                    .samples()
                    .iter()
                    .map(|s| Some(cmp.margin(s[*signal], *threshold)))
                    .collect(),
                DagNode::Min(a, b) => values[*a]
                    .iter()
                    .zip(&values[*b])
                    .map(|(x, y)| Some((*x)?.min((*y)?)))
                    .collect(),
                DagNode::WindowMin { child, lo, hi } => {
                    let src = &values[*child];
                    ts.iter()
                        .map(|&t| {
                            (t + *lo as i64..=t + *hi as i64).try_fold(f64::INFINITY, |m, u| {
                                tr.index_of(u).and_then(|j| src[j]).map(|v| m.min(v))
                            })
                        })
                        .collect()
                }
            };
            values.push(row);
        }
        Ok(values.swap_remove(self.output))
    }

    /// Robustness at timestamp `k`; agrees exactly with [`super::robustness`].
    pub fn evaluate(&self, tr: &TimedTrace, k: i64) -> Result<f64, StlError> {
        self.check_len(tr)?;
        check_window(&self.formula, tr, k)?;
        let i = tr.index_of(k).expect("window checked");
        let all = self.evaluate_all(tr)?;
        Ok(all[i].expect("window checked"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stl::robustness;

    #[test]
    fn single_predicate_is_one_node() {
        let dag = compile_dag(&Formula::parse("s0 < 3").unwrap(), 4);
        assert_eq!(dag.len(), 1);
        assert_eq!(dag.output(), 0);
    }

    #[test]
    fn tracking_rule_layers() {
        let f = Formula::tracking_rule(2.0, 1, 3);
        let dag = compile_dag(&f, 6);
        assert_eq!(dag.len(), 4);
        assert!(matches!(dag.nodes()[3], DagNode::WindowMin { child: 2, lo: 1, hi: 3 }));
        let tr = TimedTrace::from_signal(0, &[0.0, 2.2, 1.9, 2.05, 3.0, 3.0]).unwrap();
        for k in 0..=2 {
            assert_eq!(dag.evaluate(&tr, k).unwrap(), robustness(&f, &tr, k).unwrap());
        }
        assert!(dag.evaluate(&tr, 3).is_err());
    }

    #[test]
    fn shared_subformulas_are_merged() {
        let f = Formula::parse("(alw[0,2](s0 < 1) and alw[0,2](s0 < 1))").unwrap();
        assert_eq!(compile_dag(&f, 5).len(), 3);
    }

    #[test]
    fn gaps_in_timestamps() {
        let f = Formula::parse("alw[0,1](s0 >= 0)").unwrap();
        let tr = TimedTrace::new(vec![0, 1, 3, 4], vec![vec![1.0], vec![2.0], vec![3.0], vec![0.5]])
            .unwrap();
        let dag = compile_dag(&f, 4);
        assert_eq!(dag.evaluate_all(&tr).unwrap(), vec![Some(1.0), None, Some(0.5), None]);
        assert!(dag.evaluate(&tr, 1).is_err());
        assert!(dag.evaluate(&TimedTrace::from_signal(0, &[1.0; 3]).unwrap(), 0).is_err());
    }
}
