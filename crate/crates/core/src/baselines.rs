//! Comparison algorithms sharing the engine's selection, sampling, and
//! accounting contracts: FedAvg, SCAFFOLD, distributed minibatch SGD, and
//! BVR-L-SGD (a specialization of the anchor-sampling engine).
//!
//! All baselines draw client subsets and batches from the same keyed streams
//! as the engine, so two algorithms run with the same seed see the same
//! client subsets round for round and differ only in algorithmic logic.

use rayon::prelude::*;

use crate::data::{sample_batch, Partition};
use crate::engine::{
    self, run_round, BatchSize, GlobalState, GradCount, RoundOutcome, RoundParams,
};
use crate::error::{Error, Result};
use crate::metrics::Counters;
use crate::numerics::{stream, ParamVector, StreamOwner, StreamPurpose};
use crate::objectives::Objective;
use crate::schedules::Schedule;

/// Model and round index for the cache-free baselines.
#[derive(Debug, Clone)]
pub struct BaselineState {
    pub x: ParamVector,
    pub t: u64,
}

impl BaselineState {
    pub fn new(x: ParamVector) -> Self {
        BaselineState { x, t: 0 }
    }
}

/// Hyperparameters shared by the local-update baselines.
#[derive(Debug, Clone)]
pub struct LocalSgdParams {
    pub seed: u64,
    pub participants: usize,
    pub local_updates: usize,
    pub batch_small: usize,
    pub eta_l: f64,
    pub eta_s: f64,
}

impl LocalSgdParams {
    fn validate(&self, clients_total: usize) -> Result<()> {
        if self.participants == 0 || self.participants > clients_total {
            return Err(Error::Config(format!(
                "participants A = {} must satisfy 1 <= A <= M = {clients_total}",
                self.participants
            )));
        }
        if self.local_updates == 0 || self.batch_small == 0 {
            return Err(Error::Config("need K >= 1 and b' >= 1".into()));
        }
        if self.eta_l <= 0.0 || self.eta_s <= 0.0 {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        Ok(())
    }
}

fn selection(seed: u64, t: u64, clients_total: usize, participants: usize) -> Result<Vec<usize>> {
    let mut rng = stream(seed, t + 1, StreamOwner::Server, StreamPurpose::ClientSelection);
    engine::select_clients(clients_total, participants, &mut rng)
}

fn batch_stream(seed: u64, t: u64, client: usize) -> crate::numerics::RngStream {
    stream(
        seed,
        t + 1,
        StreamOwner::Client(client as u64),
        StreamPurpose::BatchSampling,
    )
}

/// Summary of a baseline round for reporting.
#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub participants: Vec<usize>,
    pub grad_samples: u64,
    pub comm_floats: u64,
}

/// FedAvg: every selected client runs K plain SGD steps on size-b' batches
/// from x_t; the server applies x_{t+1} = x_t - eta_s * mean(x_t - x_{t,K}).
/// Communication: 2 A d floats (model down, delta up).
pub fn fedavg_round(
    state: &mut BaselineState,
    obj: &dyn Objective,
    partition: &Partition,
    params: &LocalSgdParams,
    counters: &mut Counters,
) -> Result<BaselineOutcome> {
    params.validate(partition.num_clients())?;
    let t = state.t;
    let selected = selection(params.seed, t, partition.num_clients(), params.participants)?;
    let dim = state.x.dim();
    let x_t = &state.x;

    let results: Vec<(ParamVector, u64)> = selected
        .par_iter()
        .map(|&client| -> Result<(ParamVector, u64)> {
            let shard = partition.shard(client);
            let mut rng = batch_stream(params.seed, t, client);
            let mut x_local = x_t.clone();
            let mut samples = 0u64;
            for _ in 0..params.local_updates {
                let batch = sample_batch(shard, params.batch_small, &mut rng)?;
                samples += batch.size() as u64;
                let g = obj.grad(client, &x_local, &batch)?;
                x_local.add_scaled(-params.eta_l, &g)?;
            }
            Ok((x_t.sub(&x_local)?, samples))
        })
        .collect::<Result<_>>()?;

    let mut avg = ParamVector::zeros(dim);
    let mut grad_samples = 0u64;
    for (delta, samples) in &results {
        avg.add_scaled(1.0, delta)?;
        grad_samples += samples;
    }
    avg.scale(1.0 / results.len() as f64);
    state.x.add_scaled(-params.eta_s, &avg)?;
    if !state.x.is_finite() {
        return Err(Error::Numeric(format!(
            "model diverged to non-finite values at round {t}"
        )));
    }
    state.t += 1;

    let comm_floats = 2 * selected.len() as u64 * dim as u64;
    counters.charge(grad_samples, comm_floats);
    counters.bump_round();
    Ok(BaselineOutcome {
        participants: selected,
        grad_samples,
        comm_floats,
    })
}

/// SCAFFOLD control variates: the server average c and one vector per client.
#[derive(Debug, Clone)]
pub struct ScaffoldState {
    pub c_global: ParamVector,
    pub c_local: Vec<ParamVector>,
}

impl ScaffoldState {
    /// All controls start at zero.
    pub fn zeros(clients_total: usize, dim: usize) -> Self {
        ScaffoldState {
            c_global: ParamVector::zeros(dim),
            c_local: vec![ParamVector::zeros(dim); clients_total],
        }
    }

    /// Worst-coordinate drift of c_global from the mean of the c_local.
    pub fn invariant_drift(&self) -> f64 {
        let mut mean = ParamVector::zeros(self.c_global.dim());
        for c in &self.c_local {
            mean.add_scaled(1.0, c).expect("uniform dims");
        }
        mean.scale(1.0 / self.c_local.len() as f64);
        mean.max_abs_diff(&self.c_global).expect("dims match")
    }
}

/// SCAFFOLD round (option-II control updates). Local steps correct each
/// stochastic gradient by (c_global - c_local); afterwards
/// c_local' = c_local - c_global + (x_t - x_{t,K}) / (K eta_l). The server
/// averages model deltas over participants and folds (1/M) of the control
/// deltas into c_global, which keeps c_global equal to the mean of the
/// c_local. Communication: 4 A d floats (model and control, both directions).
pub fn scaffold_round(
    state: &mut BaselineState,
    scaffold: &mut ScaffoldState,
    obj: &dyn Objective,
    partition: &Partition,
    params: &LocalSgdParams,
    counters: &mut Counters,
) -> Result<BaselineOutcome> {
    params.validate(partition.num_clients())?;
    if scaffold.c_local.len() != partition.num_clients() {
        return Err(Error::Config(format!(
            "scaffold state covers {} clients but partition has {}",
            scaffold.c_local.len(),
            partition.num_clients()
        )));
    }
    let t = state.t;
    let selected = selection(params.seed, t, partition.num_clients(), params.participants)?;
    let dim = state.x.dim();
    let x_t = &state.x;
    let c_global = &scaffold.c_global;

    struct ClientOut {
        client: usize,
        delta: ParamVector,
        c_new: ParamVector,
        samples: u64,
    }

    let results: Vec<ClientOut> = selected
        .par_iter()
        .map(|&client| -> Result<ClientOut> {
            let shard = partition.shard(client);
            let mut rng = batch_stream(params.seed, t, client);
            let c_local = &scaffold.c_local[client];
            let mut x_local = x_t.clone();
            let mut samples = 0u64;
            for _ in 0..params.local_updates {
                let batch = sample_batch(shard, params.batch_small, &mut rng)?;
                samples += batch.size() as u64;
                let mut g = obj.grad(client, &x_local, &batch)?;
                g.add_diff(c_global, c_local)?;
                x_local.add_scaled(-params.eta_l, &g)?;
            }
            let delta = x_t.sub(&x_local)?;
            // Option II: c' = c - c_global + (x_t - x_K) / (K eta_l).
            let mut c_new = c_local.sub(c_global)?;
            c_new.add_scaled(
                1.0 / (params.local_updates as f64 * params.eta_l),
                &delta,
            )?;
            Ok(ClientOut {
                client,
                delta,
                c_new,
                samples,
            })
        })
        .collect::<Result<_>>()?;

    let mut avg = ParamVector::zeros(dim);
    let mut control_delta_sum = ParamVector::zeros(dim);
    let mut grad_samples = 0u64;
    for out in &results {
        avg.add_scaled(1.0, &out.delta)?;
        control_delta_sum.add_diff(&out.c_new, &scaffold.c_local[out.client])?;
        grad_samples += out.samples;
    }
    avg.scale(1.0 / results.len() as f64);
    state.x.add_scaled(-params.eta_s, &avg)?;
    if !state.x.is_finite() {
        return Err(Error::Numeric(format!(
            "model diverged to non-finite values at round {t}"
        )));
    }
    for out in results {
        scaffold.c_local[out.client] = out.c_new;
    }
    scaffold
        .c_global
        .add_scaled(1.0 / partition.num_clients() as f64, &control_delta_sum)?;
    state.t += 1;

    let comm_floats = 4 * selected.len() as u64 * dim as u64;
    counters.charge(grad_samples, comm_floats);
    counters.bump_round();
    Ok(BaselineOutcome {
        participants: selected,
        grad_samples,
        comm_floats,
    })
}

/// Hyperparameters for distributed minibatch SGD.
#[derive(Debug, Clone)]
pub struct MinibatchParams {
    pub seed: u64,
    pub participants: usize,
    pub num_batches: usize,
    pub batch_small: usize,
    pub eta: f64,
}

/// Distributed minibatch SGD: each selected client computes one gradient
/// averaged over K size-b' batches at x_t; the server steps with the mean of
/// the client gradients. Communication: 2 A d floats.
pub fn minibatch_sgd_round(
    state: &mut BaselineState,
    obj: &dyn Objective,
    partition: &Partition,
    params: &MinibatchParams,
    counters: &mut Counters,
) -> Result<BaselineOutcome> {
    if params.participants == 0 || params.participants > partition.num_clients() {
        return Err(Error::Config(format!(
            "participants A = {} must satisfy 1 <= A <= M = {}",
            params.participants,
            partition.num_clients()
        )));
    }
    if params.num_batches == 0 || params.batch_small == 0 || params.eta <= 0.0 {
        return Err(Error::Config("need K >= 1, b' >= 1, eta > 0".into()));
    }
    let t = state.t;
    let selected = selection(params.seed, t, partition.num_clients(), params.participants)?;
    let dim = state.x.dim();
    let x_t = &state.x;

    let results: Vec<(ParamVector, u64)> = selected
        .par_iter()
        .map(|&client| -> Result<(ParamVector, u64)> {
            let shard = partition.shard(client);
            let mut rng = batch_stream(params.seed, t, client);
            let mut acc = ParamVector::zeros(x_t.dim());
            let mut samples = 0u64;
            for _ in 0..params.num_batches {
                let batch = sample_batch(shard, params.batch_small, &mut rng)?;
                samples += batch.size() as u64;
                acc.add_scaled(1.0, &obj.grad(client, x_t, &batch)?)?;
            }
            acc.scale(1.0 / params.num_batches as f64);
            Ok((acc, samples))
        })
        .collect::<Result<_>>()?;

    let mut mean = ParamVector::zeros(dim);
    let mut grad_samples = 0u64;
    for (g, samples) in &results {
        mean.add_scaled(1.0, g)?;
        grad_samples += samples;
    }
    mean.scale(1.0 / results.len() as f64);
    state.x.add_scaled(-params.eta, &mean)?;
    if !state.x.is_finite() {
        return Err(Error::Numeric(format!(
            "model diverged to non-finite values at round {t}"
        )));
    }
    state.t += 1;

    let comm_floats = 2 * selected.len() as u64 * dim as u64;
    counters.charge(grad_samples, comm_floats);
    counters.bump_round();
    Ok(BaselineOutcome {
        participants: selected,
        grad_samples,
        comm_floats,
    })
}

/// BVR-L-SGD as a specialization of the engine: the sequential tau = 2
/// schedule alternates an all-anchor synchronization round (which, under
/// partial participation, refreshes the caches of the sampled clients only)
/// with a round of variance-reduced local updates.
pub fn bvr_l_sgd_round(
    state: &mut GlobalState,
    obj: &dyn Objective,
    partition: &Partition,
    params: &RoundParams,
    counters: &mut Counters,
) -> Result<RoundOutcome> {
    let schedule = Schedule::sequential(2).expect("tau = 2 is valid");
    run_round(state, obj, partition, &schedule, params, counters)
}

/// Convenience constructor for the engine parameters BVR-L-SGD uses.
pub fn bvr_params(
    seed: u64,
    participants: usize,
    local_updates: usize,
    batch_large: BatchSize,
    batch_small: usize,
    eta_l: f64,
    eta_s: f64,
) -> RoundParams {
    RoundParams {
        seed,
        participants,
        local_updates,
        batch_large,
        batch_small,
        eta_l,
        eta_s,
        grad_count: GradCount::Exact,
        g_to_all: false,
    }
}
