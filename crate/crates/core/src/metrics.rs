//! Cost accounting and global evaluation: the measurement side of every
//! experiment. Evaluation never touches the counters; training costs are
//! charged by the round engines only.

use serde::Serialize;

use crate::data::{Dataset, Partition};
use crate::error::Result;
use crate::numerics::{l2_norm_sq, ParamVector};
use crate::objectives::{full_grad, full_loss, Objective};

/// Monotone cumulative cost counters.
///
/// Gradient samples are per-sample gradient evaluations; communication is
/// counted in 64-bit floats transferred between server and clients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub cum_grad_samples: u64,
    pub cum_comm_floats: u64,
    pub rounds: u64,
}

impl Counters {
    /// Adds non-negative increments (non-negativity is enforced by the types).
    pub fn charge(&mut self, grad_samples: u64, comm_floats: u64) {
        self.cum_grad_samples += grad_samples;
        self.cum_comm_floats += comm_floats;
    }

    pub fn bump_round(&mut self) {
        self.rounds += 1;
    }

    /// Communication in the "x32 Mbits" presentation unit, assuming 32-bit
    /// weights on the wire: floats * 32 / 1e6 megabits.
    pub fn comm_32mbits(&self) -> f64 {
        self.cum_comm_floats as f64 * 32.0 / 1e6
    }
}

/// Per-round metrics row. `t` counts completed rounds, so row 0 is the
/// initial evaluation before training; `p_t`, `n_anchors` and `n_miners`
/// describe the round that produced this state (NaN/0 on row 0).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RoundReport {
    pub t: u64,
    pub p_t: f64,
    pub n_anchors: u32,
    pub n_miners: u32,
    pub train_loss: f64,
    pub grad_norm_sq: f64,
    pub test_acc: f64,
    pub counters: Counters,
}

/// Result of a full evaluation pass.
#[derive(Debug, Clone, Copy)]
pub struct Evaluation {
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub acc: f64,
}

/// Evaluates the global objective: mean full-shard loss, the squared norm of
/// the exact full gradient (per-shard full gradients averaged with equal
/// weights, summed in ascending client order), and test accuracy when a test
/// set is given and the objective classifies. Charges nothing.
pub fn eval_global(
    obj: &dyn Objective,
    partition: &Partition,
    x: &ParamVector,
    test_set: Option<&Dataset>,
) -> Result<Evaluation> {
    let m = partition.num_clients();
    let mut loss = 0.0;
    let mut grad_sum = ParamVector::zeros(x.dim());
    for client in 0..m {
        let shard = partition.shard(client);
        loss += full_loss(obj, client, x, shard)?;
        grad_sum.add_scaled(1.0, &full_grad(obj, client, x, shard)?)?;
    }
    loss /= m as f64;
    grad_sum.scale(1.0 / m as f64);
    let grad_norm_sq = l2_norm_sq(&grad_sum);

    let acc = match test_set {
        Some(ds) => accuracy(obj, ds, x),
        None => f64::NAN,
    };
    Ok(Evaluation {
        loss,
        grad_norm_sq,
        acc,
    })
}

/// Fraction of test samples whose argmax class score matches the label; ties
/// resolve to the lowest class id. NaN when the objective does not classify.
pub fn accuracy(obj: &dyn Objective, test_set: &Dataset, x: &ParamVector) -> f64 {
    let mut correct = 0usize;
    for i in 0..test_set.len() {
        let scores = match obj.class_scores(x, test_set.features.row(i)) {
            Some(s) => s,
            None => return f64::NAN,
        };
        let mut best = 0usize;
        for (k, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = k;
            }
        }
        if best == test_set.labels[i] {
            correct += 1;
        }
    }
    correct as f64 / test_set.len() as f64
}

/// First position in `history` whose test accuracy reaches `target`, if any.
pub fn rounds_to_target(history: &[RoundReport], target: f64) -> Option<usize> {
    history.iter().position(|r| r.test_acc >= target)
}
