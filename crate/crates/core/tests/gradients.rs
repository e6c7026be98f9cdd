mod common;

use lkae::diffcore::Graph;
use lkae::koopman::LossWeights;

#[test]
fn every_loss_matches_central_differences_on_twenty_models() {
    for (name, worst) in common::gradient_suite(20) {
        assert!(worst < 1e-4, "{name}: relative gradient error {worst:.3e}");
    }
}

#[test]
fn total_lsk_without_violation_is_the_weighted_sum_of_its_parts() {
    let m = common::random_model(4, true);
    let mut g = Graph::new();
    let batch = common::random_batch(4, 12);
    let term = common::random_logic(4);
    let policy = common::random_policy(4, m.latent_dim());
    let x0 = [0.2, -0.1, 0.05, 0.3];
    let w = LossWeights::LSK;
    let parts = lkae::koopman::total_loss_lsk(&mut g, &m, &batch, &term, &policy, &x0, &w, 3).unwrap();
    let by_hand = w.recon * g.item(parts.recon)
        + w.linear * g.item(parts.linear)
        + w.pred * g.item(parts.pred)
        + w.logic * g.item(parts.logic.unwrap())
        + w.reg * g.item(parts.reg);
    assert!((g.item(parts.total) - by_hand).abs() <= 1e-12 * by_hand.abs().max(1.0));
}
