use proptest::prelude::*;

use lkae::diffcore::{Axis, Graph, MinMode, Tensor};

/// Scalar built from every differentiable operation the losses use.
fn composite(a: &Tensor, b: &Tensor) -> (Graph, lkae::diffcore::Var, lkae::diffcore::Var) {
    let mut g = Graph::new();
    let va = g.constant(a.clone());
    let vb = g.constant(b.clone());
    let ab = g.matmul(va, vb).unwrap();
    let s = g.sigmoid(ab);
    let r = g.relu(ab);
    let sum = g.add(s, r).unwrap();
    let bias = g.rows(ab, 0, 1).unwrap();
    let shifted = g.add_row(sum, bias).unwrap();
    let sq = g.square(shifted);
    let mins = g.min_over_axis(sq, Axis::Cols);
    let col = g.column(ab, 0).unwrap();
    let win = g.window_min(col, 0, 1, MinMode::Hard).unwrap();
    let both = g.concat_rows(&[mins, win]).unwrap();
    let neg = g.scale(both, -1.0);
    let hinge = g.relu_of_negation(neg);
    let m = g.mean(hinge);
    let t = g.transpose(va);
    let n = g.l2_norm_sq(t);
    let n = g.scale(n, 0.1);
    let total = g.add(m, n).unwrap();
    (g, va, total)
}

/// Distance of the composite's inputs to the nearest point where relu or a
/// min switches branch.
fn kink_margin(a: &Tensor, b: &Tensor) -> f64 {
    let ab = a.matmul(b).unwrap();
    let mut margin = ab.data().iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut mins = Vec::new();
    for r in 0..ab.rows() {
        let mut sq: Vec<f64> = (0..ab.cols())
            .map(|c| (sig(ab.get(r, c)) + ab.get(r, c).max(0.0) + ab.get(0, c)).powi(2))
            .collect();
        sq.sort_by(f64::total_cmp);
        margin = margin.min(sq[1] - sq[0]);
        mins.push(sq[0]);
    }
    let win = ab.get(0, 0).min(ab.get(1, 0));
    margin = margin.min((ab.get(0, 0) - ab.get(1, 0)).abs());
    // The hinge switches where its input, the negated minimum, crosses zero.
    mins.push(win);
    mins.iter().map(|v| v.abs()).fold(margin, f64::min)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0..2.0f64, rows * cols).prop_map(move |d| Tensor::new(rows, cols, d).unwrap())
}

proptest! {
    #[test]
    fn reverse_sweep_matches_central_differences(a in matrix(3, 2), b in matrix(2, 4)) {
        prop_assume!(kink_margin(&a, &b) > 1e-3);
        let (g, va, root) = composite(&a, &b);
        let grad = g.gradients(root).unwrap().get(va).unwrap();
        let h = 1e-6;
        for i in 0..a.len() {
            let mut up = a.clone();
            up.data_mut()[i] += h;
            let mut dn = a.clone();
            dn.data_mut()[i] -= h;
            let (gu, _, ru) = composite(&up, &b);
            let (gd, _, rd) = composite(&dn, &b);
            let fd = (gu.item(ru) - gd.item(rd)) / (2.0 * h);
            prop_assert!((fd - grad.data()[i]).abs() < 1e-5 * (1.0 + fd.abs()), "entry {}: {} vs {}", i, grad.data()[i], fd);
        }
    }

    #[test]
    fn matmul_matches_by_hand(a in matrix(2, 3), b in matrix(3, 2)) {
        let c = a.matmul(&b).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let dot: f64 = (0..3).map(|k| a.get(i, k) * b.get(k, j)).sum();
                prop_assert!((c.get(i, j) - dot).abs() < 1e-12);
            }
        }
        prop_assert_eq!(c.transpose(), b.transpose().matmul(&a.transpose()).unwrap());
    }
}
