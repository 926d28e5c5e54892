//! The rate-vector objective: trial-soft-prune a pretrained snapshot, check
//! the sparsity band, train one epoch, and score validation loss plus the
//! weighted under-pruning penalty.
//!
//! Candidates whose sparsity lands outside `[T - T+, T + T+]` short-circuit
//! to `penalty_value` without any training.

use crate::data::Split;
use crate::error::{Error, Result};
use crate::fpgm;
use crate::grouping::{self, LayerGrouping};
use crate::network::{Network, TrainOpts};

/// Everything one evaluation needs. The snapshot is never mutated.
#[derive(Debug, Clone)]
pub struct ObjectiveConfig<'a> {
    /// Target pruning rate T.
    pub target: f64,
    /// Acceptable sparsity deviation.
    pub t_plus: f64,
    /// Penalty weight for under-pruning.
    pub lambda: f64,
    /// Sentinel objective value outside the band.
    pub penalty_value: f64,
    /// Learning rate of the single trial epoch.
    pub lr: f64,
    pub batch_size: usize,
    /// Fixed across evaluations so objective differences reflect the rates
    /// only.
    pub epoch_seed: u64,
    pub snapshot: &'a Network,
    pub split: &'a Split,
    pub grouping: &'a LayerGrouping,
}

/// Outcome of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveResult {
    pub value: f64,
    pub sparsity_achieved: f64,
    pub was_penalty: bool,
    pub val_loss: Option<f64>,
    pub penalty_term: Option<f64>,
    /// Set when a non-finite loss was converted into the penalty value.
    pub non_finite_loss: bool,
    /// SGD steps executed (zero whenever the band check fails).
    pub sgd_steps: u64,
}

/// Under-pruning hinge: `T - S` when the network is sparser than asked for
/// nothing, zero once the target is met.
pub fn sparsity_penalty_g(sparsity: f64, target: f64) -> f64 {
    if target > sparsity {
        target - sparsity
    } else {
        0.0
    }
}

fn penalty_result(cfg: &ObjectiveConfig, sparsity: f64, non_finite: bool) -> ObjectiveResult {
    ObjectiveResult {
        value: cfg.penalty_value,
        sparsity_achieved: sparsity,
        was_penalty: true,
        val_loss: None,
        penalty_term: None,
        non_finite_loss: non_finite,
        sgd_steps: 0,
    }
}

/// Deep copy of the pretrained network; later evaluations all start from
/// identical weights.
pub fn snapshot_pretrained(net: &Network) -> Network {
    net.clone()
}

/// Evaluates one rate vector. Deterministic given (rates, config).
pub fn evaluate(rates: &[f64], cfg: &ObjectiveConfig) -> Result<ObjectiveResult> {
    let mut net = cfg.snapshot.clone();
    fpgm::soft_prune_network(&mut net, rates, cfg.grouping)?;
    let sparsity = grouping::sparsity(&net, cfg.grouping).overall;
    let in_band =
        sparsity >= cfg.target - cfg.t_plus && sparsity <= cfg.target + cfg.t_plus;
    if !in_band {
        return Ok(penalty_result(cfg, sparsity, false));
    }
    // g is measured on the pruned, untrained network.
    let penalty_term = cfg.lambda * sparsity_penalty_g(sparsity, cfg.target);

    let opts = TrainOpts {
        epochs: 1,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        seed: cfg.epoch_seed,
    };
    let trace = match net.train_epochs(&cfg.split.train, &opts) {
        Ok(t) => t,
        // A diverging trial candidate is reported as a penalty, not an
        // abort of the whole search.
        Err(Error::NonFinite { .. }) => return Ok(penalty_result(cfg, sparsity, true)),
        Err(e) => return Err(e),
    };
    let val_indices: Vec<usize> = (0..cfg.split.validation.len()).collect();
    let val_loss = net.eval_loss(&cfg.split.validation, &val_indices)?;
    if !val_loss.is_finite() {
        let mut r = penalty_result(cfg, sparsity, true);
        r.sgd_steps = trace.steps;
        return Ok(r);
    }
    Ok(ObjectiveResult {
        value: val_loss + penalty_term,
        sparsity_achieved: sparsity,
        was_penalty: false,
        val_loss: Some(val_loss),
        penalty_term: Some(penalty_term),
        non_finite_loss: false,
        sgd_steps: trace.steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint;
    use crate::data::{make_synthetic, split_80_20, Split};
    use crate::grouping::partition;
    use crate::layer::Layer;
    use crate::network::{init_conv, init_dense};
    use crate::rng;
    use approx::assert_abs_diff_eq;

    fn tiny_setup(filters: usize) -> (Network, Split) {
        let mut rng = rng::rng_from(17);
        let conv = init_conv(&mut rng, filters, 1, 1, 1, 0);
        let mut head = init_dense(&mut rng, 2, filters);
        head.prunable = false;
        let net = Network::new(
            vec![
                Layer::Conv(conv),
                Layer::Relu,
                Layer::GlobalAvgPool,
                Layer::Dense(head),
            ],
            17,
        )
        .unwrap();
        let data = make_synthetic(3, 20, 2, 8).unwrap();
        let split = split_80_20(&data, 5).unwrap();
        (net, split)
    }

    fn cfg<'a>(
        net: &'a Network,
        split: &'a Split,
        grouping: &'a LayerGrouping,
        target: f64,
    ) -> ObjectiveConfig<'a> {
        ObjectiveConfig {
            target,
            t_plus: 0.04,
            lambda: 5.0,
            penalty_value: 100.0,
            lr: 0.05,
            batch_size: 4,
            epoch_seed: 99,
            snapshot: net,
            split,
            grouping,
        }
    }

    #[test]
    fn g_substitution_values() {
        assert_eq!(sparsity_penalty_g(0.5, 0.5), 0.0);
        assert_eq!(sparsity_penalty_g(0.6, 0.5), 0.0);
        assert_abs_diff_eq!(sparsity_penalty_g(0.4, 0.5), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn g_is_nonneg_piecewise_linear_zero_above_target() {
        for i in 0..=20 {
            for j in 0..=20 {
                let s = i as f64 / 20.0;
                let t = j as f64 / 20.0;
                let g = sparsity_penalty_g(s, t);
                assert!(g >= 0.0);
                if s >= t {
                    assert_eq!(g, 0.0);
                } else {
                    assert_abs_diff_eq!(g, t - s, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn over_pruned_candidate_short_circuits_to_penalty() {
        // 10 one-weight filters: rate 0.3 prunes 3 filters -> S = 0.30.
        let (net, split) = tiny_setup(10);
        let grouping = partition(&net, 1, &[]).unwrap();
        let cfg = cfg(&net, &split, &grouping, 0.20);
        let r = evaluate(&[0.3], &cfg).unwrap();
        assert_abs_diff_eq!(r.sparsity_achieved, 0.30, epsilon = 1e-12);
        assert!(r.was_penalty);
        assert_eq!(r.value, 100.0);
        assert_eq!(r.val_loss, None);
        assert_eq!(r.sgd_steps, 0, "penalty must skip training");
    }

    #[test]
    fn under_target_in_band_adds_weighted_gap() {
        // 50 filters, rate 0.18 -> 9 pruned -> S = 0.18 with T = 0.20.
        let (net, split) = tiny_setup(50);
        let grouping = partition(&net, 1, &[]).unwrap();
        let cfg = cfg(&net, &split, &grouping, 0.20);
        let r = evaluate(&[0.18], &cfg).unwrap();
        assert!(!r.was_penalty);
        assert_abs_diff_eq!(r.sparsity_achieved, 0.18, epsilon = 1e-12);
        let val_loss = r.val_loss.unwrap();
        assert_abs_diff_eq!(
            r.value,
            val_loss + 5.0 * sparsity_penalty_g(0.18, 0.20),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(r.penalty_term.unwrap(), 0.1, epsilon = 1e-12);
        // the worked example: a measured loss of 1.00 would score 1.10
        assert_abs_diff_eq!(1.0 + 5.0 * sparsity_penalty_g(0.18, 0.20), 1.10, epsilon = 1e-12);
        assert!(r.sgd_steps > 0);
    }

    #[test]
    fn above_target_in_band_scores_loss_alone() {
        // 50 filters, rate 0.22 -> 11 pruned -> S = 0.22 > T = 0.20, g = 0.
        let (net, split) = tiny_setup(50);
        let grouping = partition(&net, 1, &[]).unwrap();
        let cfg = cfg(&net, &split, &grouping, 0.20);
        let r = evaluate(&[0.22], &cfg).unwrap();
        assert!(!r.was_penalty);
        assert_eq!(r.penalty_term, Some(0.0));
        assert_eq!(r.value, r.val_loss.unwrap());
        // the worked example: a measured loss of 0.90 would score 0.90
        assert_abs_diff_eq!(0.9 + 5.0 * sparsity_penalty_g(0.22, 0.20), 0.90, epsilon = 1e-12);
    }

    #[test]
    fn band_boundaries_are_inclusive() {
        // S = 0.24 sits exactly on T + T+ = 0.24: inside the closed band.
        let (net, split) = tiny_setup(50);
        let grouping = partition(&net, 1, &[]).unwrap();
        let cfg = cfg(&net, &split, &grouping, 0.20);
        let r = evaluate(&[0.24], &cfg).unwrap();
        assert!(!r.was_penalty, "closed upper boundary");
        // S = 0.16 sits exactly on T - T+.
        let r = evaluate(&[0.16], &cfg).unwrap();
        assert!(!r.was_penalty, "closed lower boundary");
    }

    #[test]
    fn evaluation_is_pure_and_deterministic() {
        let (net, split) = tiny_setup(10);
        let grouping = partition(&net, 1, &[]).unwrap();
        let before = checkpoint::to_bytes(&net);
        let cfg = cfg(&net, &split, &grouping, 0.20);
        let a = evaluate(&[0.2], &cfg).unwrap();
        let b = evaluate(&[0.2], &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(checkpoint::to_bytes(&net), before, "snapshot mutated");
    }

    #[test]
    fn snapshot_survives_a_hundred_evaluations() {
        let (net, split) = tiny_setup(10);
        let grouping = partition(&net, 1, &[]).unwrap();
        let before = checkpoint::to_bytes(&net);
        let cfg = cfg(&net, &split, &grouping, 0.20);
        for i in 0..100 {
            let rate = (i % 9) as f64 / 10.0;
            evaluate(&[rate], &cfg).unwrap();
        }
        assert_eq!(checkpoint::to_bytes(&net), before);
    }

    #[test]
    fn band_law_over_a_rate_and_target_grid() {
        // 100 (S, T) combinations; was_penalty must equal band exclusion
        // exactly, with the closed interval.
        let (net, split) = tiny_setup(50);
        let grouping = partition(&net, 1, &[]).unwrap();
        for i in 0..10 {
            let rate = i as f64 * 0.08; // S = 0.00, 0.08, ..., 0.72
            for j in 0..10 {
                let target = 0.05 + j as f64 * 0.08;
                let mut c = cfg(&net, &split, &grouping, target);
                c.t_plus = 0.04;
                let r = evaluate(&[rate], &c).unwrap();
                let s = r.sparsity_achieved;
                let outside = s < target - c.t_plus || s > target + c.t_plus;
                assert_eq!(
                    r.was_penalty, outside,
                    "S={s} T={target} penalty={}",
                    r.was_penalty
                );
                if outside {
                    assert_eq!(r.sgd_steps, 0);
                }
            }
        }
    }
}
