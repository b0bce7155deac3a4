//! Config-driven experiment execution, multi-algorithm comparison, and
//! CSV/JSON emission: the user surface behind the CLI.
//!
//! A run is a pure function of (config, seed): data generation, partitioning,
//! client selection, group classification, and batch sampling all draw from
//! keyed streams, and per-client work is merged in ascending client order, so
//! the emitted bytes do not depend on the number of worker threads.

pub mod config;

use std::sync::Arc;

use serde::Serialize;

pub use config::{parse_config, Algorithm, ExperimentConfig};
use config::{DatasetKind, InitKind, LrPreset, ModelKind};

use crate::baselines::{
    bvr_l_sgd_round, fedavg_round, minibatch_sgd_round, scaffold_round, BaselineState,
    LocalSgdParams, MinibatchParams, ScaffoldState,
};
use crate::data::{
    gen_class_means, gen_samples_for_means, gen_synthetic_classification, load_idx,
    partition_label_skew, ClientShard, Dataset, Matrix, Partition,
};
use crate::engine::{init_cache, run_round, GlobalState, RoundParams};
use crate::error::{Error, Result};
use crate::metrics::{eval_global, rounds_to_target, Counters, RoundReport};
use crate::numerics::{stream, ParamVector, RngStream, StreamOwner, StreamPurpose};
use crate::objectives::{
    quadratic_minimum, Mlp2, Model, Objective, QuadraticEnsemble, SoftmaxRegression,
};
use crate::schedules::{preset_lrs, HyperPreset, LrRegime, Schedule};

/// Stream sub-indices within the data-generation purpose.
const GEN_TRAIN: u64 = 0;
const GEN_TEST: u64 = 1;
const GEN_PARTITION: u64 = 2;
const GEN_QUADRATIC: u64 = 3;
const GEN_INIT: u64 = 4;

fn data_rng(seed: u64, sub: u64) -> RngStream {
    stream(seed, sub, StreamOwner::Server, StreamPurpose::DataGeneration)
}

/// Least-squares line fit over (x, y) points.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Fits y = slope * x + intercept; needs at least 3 points and non-constant x.
pub fn fit_line(points: &[(f64, f64)]) -> Option<LinearFit> {
    if points.len() < 3 {
        return None;
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut ss_tot = 0.0;
    for &(x, y) in points {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
        ss_tot += (y - mean_y) * (y - mean_y);
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let mut ss_res = 0.0;
    for &(x, y) in points {
        let e = y - (slope * x + intercept);
        ss_res += e * e;
    }
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Extra summary for quadratic runs, where the exact minimum is known.
#[derive(Debug, Clone, Serialize)]
pub struct QuadraticSummary {
    pub f_star: f64,
    pub final_gap: f64,
    /// Fit of log(F(x_t) - F*) against t over evaluated update rounds.
    pub log_gap_fit: Option<LinearFit>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub final_loss: f64,
    pub final_acc: f64,
    pub rounds_to_target: Option<usize>,
    pub final_counters: Counters,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quadratic: Option<QuadraticSummary>,
}

/// Everything a run emits: the config echo, one report per completed round
/// (plus the initial evaluation), and the summary.
#[derive(Debug, Clone, Serialize)]
pub struct RunArtifact {
    pub config: ExperimentConfig,
    pub reports: Vec<RoundReport>,
    pub summary: RunSummary,
}

pub const CSV_HEADER: &str =
    "round,p_t,anchors,miners,train_loss,grad_norm_sq,test_acc,cum_grad_samples,cum_comm_floats";

/// Renders the per-round reports as CSV with the fixed column set.
pub fn to_csv(artifact: &RunArtifact) -> String {
    let mut out = String::with_capacity(64 * (artifact.reports.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in &artifact.reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.t,
            r.p_t,
            r.n_anchors,
            r.n_miners,
            r.train_loss,
            r.grad_norm_sq,
            r.test_acc,
            r.counters.cum_grad_samples,
            r.counters.cum_comm_floats
        ));
    }
    out
}

/// Renders the full artifact (config echo, reports, summary) as JSON.
pub fn to_json(artifact: &RunArtifact) -> Result<String> {
    serde_json::to_string_pretty(artifact)
        .map_err(|e| Error::Numeric(format!("json encoding failed: {e}")))
}

/// Parallelism cap from the FEDAMD_THREADS environment variable
/// (unset or 0 = automatic).
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("FEDAMD_THREADS") {
        Err(_) => Ok(0),
        Ok(s) if s.trim().is_empty() => Ok(0),
        Ok(s) => s.trim().parse::<usize>().map_err(|_| {
            Error::Config(format!(
                "FEDAMD_THREADS must be a non-negative integer, got \"{s}\""
            ))
        }),
    }
}

/// Runs the experiment with the parallelism cap from the environment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifact> {
    run_experiment_with_threads(cfg, threads_from_env()?)
}

/// Runs the experiment inside a dedicated thread pool (0 = automatic size).
/// Output bytes are identical for every thread count.
pub fn run_experiment_with_threads(cfg: &ExperimentConfig, threads: usize) -> Result<RunArtifact> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Numeric(format!("failed to build thread pool: {e}")))?;
    pool.install(|| run_inner(cfg))
}

struct Problem {
    model: Model,
    partition: Partition,
    test_set: Option<Dataset>,
    x0: ParamVector,
    /// Exact minimizer and minimum for quadratic ensembles.
    minimum: Option<(ParamVector, f64)>,
    /// Exact smoothness/PL constants for quadratic ensembles.
    l: Option<f64>,
    mu: Option<f64>,
}

fn build_problem(cfg: &ExperimentConfig) -> Result<Problem> {
    let seed = cfg.run.seed;
    let m = cfg.federation.clients_total;
    let ds_cfg = &cfg.dataset;

    match ds_cfg.kind {
        DatasetKind::Quadratic => {
            let d = ds_cfg.d.or(ds_cfg.in_dim).unwrap_or(10);
            let mu_min = ds_cfg.mu_min.unwrap_or(0.5);
            let l_max = ds_cfg.l_max.unwrap_or(1.0);
            let center_scale = ds_cfg.center_scale.unwrap_or(1.0);
            let n = ds_cfg.samples_per_client.unwrap_or(1);
            let ensemble = QuadraticEnsemble::generate(m, d, mu_min, l_max, center_scale, |c| {
                stream(
                    seed,
                    GEN_QUADRATIC,
                    StreamOwner::Client(c as u64),
                    StreamPurpose::DataGeneration,
                )
            })?;
            let (l, mu) = ensemble.global_l_mu();
            let minimum = quadratic_minimum(&ensemble)?;
            // Placeholder samples: quadratic losses ignore batch contents,
            // but the sampling machinery still needs shards of size n.
            let data = Arc::new(Dataset::new(Matrix::zeros(m * n, 1), vec![0; m * n], 2)?);
            let shards = (0..m)
                .map(|i| ClientShard::new(Arc::clone(&data), (i * n..(i + 1) * n).collect()))
                .collect();
            let partition = Partition::from_shards(shards, 1)?;
            let x0 = match cfg.run.init {
                InitKind::Zeros => ParamVector::zeros(d),
                InitKind::Random => {
                    use rand_distr::StandardNormal;
                    let mut rng = data_rng(seed, GEN_INIT);
                    use rand::Rng;
                    ParamVector::new((0..d).map(|_| rng.sample(StandardNormal)).collect())?
                }
            };
            Ok(Problem {
                x0,
                model: Model::Quadratic(ensemble),
                partition,
                test_set: None,
                minimum: Some(minimum),
                l: Some(l),
                mu: Some(mu),
            })
        }
        DatasetKind::Synthetic => {
            let in_dim = ds_cfg.in_dim.unwrap_or(20);
            let classes = ds_cfg.classes.unwrap_or(10);
            let spc = ds_cfg.samples_per_client.unwrap_or(100);
            let spread = ds_cfg.spread.unwrap_or(1.0);
            let n_train = m * spc;
            let n_test = ds_cfg.test_samples.unwrap_or((n_train / 5).max(classes));
            let train = Arc::new(gen_synthetic_classification(
                in_dim,
                classes,
                n_train,
                spread,
                &mut data_rng(seed, GEN_TRAIN),
            )?);
            // The test set shares the training means (same stream key) but
            // draws fresh samples.
            let means = gen_class_means(in_dim, classes, &mut data_rng(seed, GEN_TRAIN))?;
            let test = gen_samples_for_means(&means, n_test, spread, &mut data_rng(seed, GEN_TEST))?;
            let partition = partition_label_skew(
                &train,
                m,
                ds_cfg.classes_per_client,
                &mut data_rng(seed, GEN_PARTITION),
            )?;
            finish_classifier(cfg, seed, partition, Some(test), in_dim, classes)
        }
        DatasetKind::Idx => {
            let images = ds_cfg.images_path.as_ref().expect("validated");
            let labels = ds_cfg.labels_path.as_ref().expect("validated");
            let train = Arc::new(load_idx(images, labels)?);
            let test = match (&ds_cfg.test_images_path, &ds_cfg.test_labels_path) {
                (Some(ti), Some(tl)) => Some(load_idx(ti, tl)?),
                _ => None,
            };
            let in_dim = train.in_dim();
            let classes = train.classes;
            let partition = partition_label_skew(
                &train,
                m,
                ds_cfg.classes_per_client,
                &mut data_rng(seed, GEN_PARTITION),
            )?;
            finish_classifier(cfg, seed, partition, test, in_dim, classes)
        }
    }
}

fn finish_classifier(
    cfg: &ExperimentConfig,
    seed: u64,
    partition: Partition,
    test_set: Option<Dataset>,
    in_dim: usize,
    classes: usize,
) -> Result<Problem> {
    let (model, x0) = match cfg.model.kind {
        ModelKind::SoftmaxRegression => {
            let sm = SoftmaxRegression::new(in_dim, classes)?;
            let x0 = match cfg.run.init {
                InitKind::Zeros => ParamVector::zeros(sm.dim()),
                InitKind::Random => sm.xavier_init(&mut data_rng(seed, GEN_INIT)),
            };
            (Model::Softmax(sm), x0)
        }
        ModelKind::Mlp2 => {
            let hidden = cfg.model.hidden.expect("validated");
            let mlp = Mlp2::new(in_dim, hidden, classes)?;
            let x0 = mlp.xavier_init(&mut data_rng(seed, GEN_INIT));
            (Model::Mlp2(mlp), x0)
        }
        ModelKind::Quadratic => unreachable!("validated kind pairing"),
    };
    Ok(Problem {
        model,
        partition,
        test_set,
        x0,
        minimum: None,
        l: None,
        mu: None,
    })
}

fn resolve_lrs(
    cfg: &ExperimentConfig,
    problem: &Problem,
    schedule: &Schedule,
) -> Result<(f64, f64)> {
    if let (Some(el), Some(es)) = (cfg.lrs.eta_l, cfg.lrs.eta_s) {
        return Ok((el, es));
    }
    if cfg.lrs.eta_l.is_some() || cfg.lrs.eta_s.is_some() {
        return Err(Error::Config(
            "explicit learning rates need both eta_l and eta_s".into(),
        ));
    }
    let preset = cfg.lrs.preset.ok_or_else(|| {
        Error::Config("lrs needs either a preset or explicit eta_l and eta_s".into())
    })?;
    let l = cfg.lrs.l.or(problem.l).ok_or_else(|| {
        Error::Config("preset learning rates need the smoothness constant L".into())
    })?;
    let hp = HyperPreset {
        l,
        l_sigma: cfg.lrs.l_sigma.unwrap_or(0.0),
        sigma: cfg.lrs.sigma.unwrap_or(0.0),
        mu: cfg.lrs.mu.or(problem.mu),
        c: cfg.schedule.c,
        local_updates: cfg.federation.local_updates as u32,
        batch_small: cfg.federation.b_small as u32,
        clients_total: cfg.federation.clients_total as u32,
        participants: cfg.federation.participants as u32,
    };
    let tau = match schedule {
        Schedule::Sequential { tau } => Some(*tau),
        _ => None,
    };
    let regime = match preset {
        LrPreset::SequentialNonconvex => LrRegime::SequentialNonconvex,
        LrPreset::ConstantNonconvex => LrRegime::ConstantNonconvex,
        LrPreset::ConstantPl => LrRegime::ConstantPl,
    };
    preset_lrs(regime, &hp, tau)
}

struct StepInfo {
    p_t: f64,
    anchors: u32,
    miners: u32,
    updated: bool,
}

enum Runner {
    Engine {
        state: GlobalState,
        schedule: Schedule,
        params: RoundParams,
    },
    Bvr {
        state: GlobalState,
        params: RoundParams,
    },
    Fedavg {
        state: BaselineState,
        params: LocalSgdParams,
    },
    Scaffold {
        state: BaselineState,
        controls: ScaffoldState,
        params: LocalSgdParams,
    },
    Minibatch {
        state: BaselineState,
        params: MinibatchParams,
    },
}

impl Runner {
    fn x(&self) -> &ParamVector {
        match self {
            Runner::Engine { state, .. } | Runner::Bvr { state, .. } => &state.x,
            Runner::Fedavg { state, .. }
            | Runner::Scaffold { state, .. }
            | Runner::Minibatch { state, .. } => &state.x,
        }
    }

    fn step(
        &mut self,
        model: &Model,
        partition: &Partition,
        counters: &mut Counters,
    ) -> Result<StepInfo> {
        match self {
            Runner::Engine {
                state,
                schedule,
                params,
            } => {
                let out = run_round(state, model, partition, schedule, params, counters)?;
                Ok(StepInfo {
                    p_t: out.p_t,
                    anchors: out.anchors.len() as u32,
                    miners: out.miners.len() as u32,
                    updated: !out.miners.is_empty(),
                })
            }
            Runner::Bvr { state, params } => {
                let out = bvr_l_sgd_round(state, model, partition, params, counters)?;
                Ok(StepInfo {
                    p_t: out.p_t,
                    anchors: out.anchors.len() as u32,
                    miners: out.miners.len() as u32,
                    updated: !out.miners.is_empty(),
                })
            }
            Runner::Fedavg { state, params } => {
                let out = fedavg_round(state, model, partition, params, counters)?;
                Ok(StepInfo {
                    p_t: f64::NAN,
                    anchors: 0,
                    miners: out.participants.len() as u32,
                    updated: true,
                })
            }
            Runner::Scaffold {
                state,
                controls,
                params,
            } => {
                let out = scaffold_round(state, controls, model, partition, params, counters)?;
                Ok(StepInfo {
                    p_t: f64::NAN,
                    anchors: 0,
                    miners: out.participants.len() as u32,
                    updated: true,
                })
            }
            Runner::Minibatch { state, params } => {
                let out = minibatch_sgd_round(state, model, partition, params, counters)?;
                Ok(StepInfo {
                    p_t: f64::NAN,
                    anchors: 0,
                    miners: out.participants.len() as u32,
                    updated: true,
                })
            }
        }
    }
}

fn run_inner(cfg: &ExperimentConfig) -> Result<RunArtifact> {
    cfg.validate()?;
    let problem = build_problem(cfg)?;
    let schedule = if cfg.algorithm == Algorithm::BvrLSgd {
        Schedule::sequential(2)?
    } else {
        cfg.resolve_schedule(problem.mu)?
    };
    let (eta_l, eta_s) = resolve_lrs(cfg, &problem, &schedule)?;
    let seed = cfg.run.seed;
    let fed = &cfg.federation;
    let mut counters = Counters::default();

    let mut runner = match cfg.algorithm {
        Algorithm::Fedamd | Algorithm::BvrLSgd => {
            let params = RoundParams {
                seed,
                participants: fed.participants,
                local_updates: fed.local_updates,
                batch_large: fed.b.resolve()?,
                batch_small: fed.b_small,
                eta_l,
                eta_s,
                grad_count: cfg.run.grad_count.into(),
                g_to_all: cfg.run.g_to_all,
            };
            let cache = init_cache(
                &problem.model,
                &problem.partition,
                &problem.x0,
                params.batch_large,
                cfg.run.cache_mode.into(),
                seed,
                &mut counters,
            )?;
            let state = GlobalState::new(problem.x0.clone(), cache);
            if cfg.algorithm == Algorithm::Fedamd {
                Runner::Engine {
                    state,
                    schedule,
                    params,
                }
            } else {
                Runner::Bvr { state, params }
            }
        }
        Algorithm::Fedavg => Runner::Fedavg {
            state: BaselineState::new(problem.x0.clone()),
            params: LocalSgdParams {
                seed,
                participants: fed.participants,
                local_updates: fed.local_updates,
                batch_small: fed.b_small,
                eta_l,
                eta_s,
            },
        },
        Algorithm::Scaffold => Runner::Scaffold {
            state: BaselineState::new(problem.x0.clone()),
            controls: ScaffoldState::zeros(fed.clients_total, problem.x0.dim()),
            params: LocalSgdParams {
                seed,
                participants: fed.participants,
                local_updates: fed.local_updates,
                batch_small: fed.b_small,
                eta_l,
                eta_s,
            },
        },
        Algorithm::MinibatchSgd => Runner::Minibatch {
            state: BaselineState::new(problem.x0.clone()),
            params: MinibatchParams {
                seed,
                participants: fed.participants,
                num_batches: fed.local_updates,
                batch_small: fed.b_small,
                // A single server step: the product of the two rates.
                eta: eta_l * eta_s,
            },
        },
    };

    let rounds = cfg.run.rounds;
    let mut reports = Vec::with_capacity(rounds as usize + 1);
    let mut last_eval = eval_global(
        &problem.model,
        &problem.partition,
        runner.x(),
        problem.test_set.as_ref(),
    )?;
    reports.push(RoundReport {
        t: 0,
        p_t: f64::NAN,
        n_anchors: 0,
        n_miners: 0,
        train_loss: last_eval.loss,
        grad_norm_sq: last_eval.grad_norm_sq,
        test_acc: last_eval.acc,
        counters,
    });

    // (t, F(x_t)) over evaluated update rounds, for the quadratic log fit.
    let mut gap_points: Vec<(u64, f64)> = Vec::new();

    for i in 0..rounds {
        let info = runner
            .step(&problem.model, &problem.partition, &mut counters)
            .map_err(|e| e.at_round(i))?;
        let evaluated = (i + 1) % cfg.run.eval_every == 0 || i + 1 == rounds;
        if evaluated {
            last_eval = eval_global(
                &problem.model,
                &problem.partition,
                runner.x(),
                problem.test_set.as_ref(),
            )
            .map_err(|e| e.at_round(i))?;
        }
        reports.push(RoundReport {
            t: i + 1,
            p_t: info.p_t,
            n_anchors: info.anchors,
            n_miners: info.miners,
            train_loss: last_eval.loss,
            grad_norm_sq: last_eval.grad_norm_sq,
            test_acc: last_eval.acc,
            counters,
        });
        if evaluated && info.updated {
            gap_points.push((i + 1, last_eval.loss));
        }
    }

    let quadratic = problem.minimum.as_ref().map(|(_, f_star)| {
        let final_gap = last_eval.loss - f_star;
        let log_points: Vec<(f64, f64)> = gap_points
            .iter()
            .filter(|(_, loss)| loss - f_star > 0.0)
            .map(|&(t, loss)| (t as f64, (loss - f_star).ln()))
            .collect();
        QuadraticSummary {
            f_star: *f_star,
            final_gap,
            log_gap_fit: fit_line(&log_points),
        }
    });

    let summary = RunSummary {
        final_loss: last_eval.loss,
        final_acc: last_eval.acc,
        rounds_to_target: cfg
            .run
            .target_acc
            .and_then(|target| rounds_to_target(&reports, target)),
        final_counters: counters,
        quadratic,
    };

    Ok(RunArtifact {
        config: cfg.clone(),
        reports,
        summary,
    })
}

/// One comparison row; means over the seeds of a run.
#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub algorithm: String,
    pub grad_samples: f64,
    pub comm_floats: f64,
    pub rounds_to_target: Option<f64>,
    pub final_acc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareTable {
    pub rows: Vec<CompareRow>,
}

pub const COMPARE_CSV_HEADER: &str =
    "algorithm,grad_samples,comm_floats,rounds_to_target,final_acc";

pub fn compare_to_csv(table: &CompareTable) -> String {
    let mut out = String::from(COMPARE_CSV_HEADER);
    out.push('\n');
    for row in &table.rows {
        let rounds = row
            .rounds_to_target
            .map(|r| r.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.algorithm, row.grad_samples, row.comm_floats, rounds, row.final_acc
        ));
    }
    out
}

pub fn compare_to_json(table: &CompareTable) -> Result<String> {
    serde_json::to_string_pretty(table)
        .map_err(|e| Error::Numeric(format!("json encoding failed: {e}")))
}

/// Runs every config over `seeds_per_config` consecutive seeds starting at
/// the shared base seed, and summarizes one row per config, sorted by
/// algorithm name. All configs must share the dataset, the base seed, and the
/// target accuracy.
pub fn compare(configs: &[ExperimentConfig], seeds_per_config: u32) -> Result<CompareTable> {
    if configs.len() < 2 {
        return Err(Error::Config("compare needs at least two configs".into()));
    }
    if seeds_per_config == 0 {
        return Err(Error::Config("compare needs at least one seed".into()));
    }
    let first = &configs[0];
    for cfg in &configs[1..] {
        if cfg.dataset != first.dataset {
            return Err(Error::Config(
                "compare configs must share the [dataset] section".into(),
            ));
        }
        if cfg.run.seed != first.run.seed {
            return Err(Error::Config("compare configs must share run.seed".into()));
        }
        if cfg.run.target_acc != first.run.target_acc {
            return Err(Error::Config(
                "compare configs must share run.target_acc".into(),
            ));
        }
    }

    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let mut grads = 0.0;
        let mut comm = 0.0;
        let mut acc = 0.0;
        let mut rounds_sum = 0.0;
        let mut rounds_all = true;
        for s in 0..seeds_per_config {
            let mut run_cfg = cfg.clone();
            run_cfg.run.seed = cfg.run.seed.wrapping_add(u64::from(s));
            let artifact = run_experiment(&run_cfg)?;
            grads += artifact.summary.final_counters.cum_grad_samples as f64;
            comm += artifact.summary.final_counters.cum_comm_floats as f64;
            acc += artifact.summary.final_acc;
            match artifact.summary.rounds_to_target {
                Some(r) => rounds_sum += r as f64,
                None => rounds_all = false,
            }
        }
        let n = f64::from(seeds_per_config);
        rows.push(CompareRow {
            algorithm: cfg.algorithm.name().to_string(),
            grad_samples: grads / n,
            comm_floats: comm / n,
            rounds_to_target: (rounds_all && cfg.run.target_acc.is_some())
                .then_some(rounds_sum / n),
            final_acc: acc / n,
        });
    }
    rows.sort_by(|a, b| a.algorithm.cmp(&b.algorithm));
    Ok(CompareTable { rows })
}

/// One grid point of a learning-rate sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub eta_l: f64,
    pub eta_s: f64,
    pub final_loss: f64,
    pub final_acc: f64,
    pub rounds_to_target: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Index of the best row: highest final accuracy, or lowest final loss
    /// when the objective does not classify.
    pub best: usize,
}

pub const SWEEP_CSV_HEADER: &str = "eta_l,eta_s,final_loss,final_acc,rounds_to_target,best";

pub fn sweep_to_csv(table: &SweepTable) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for (i, row) in table.rows.iter().enumerate() {
        let rounds = row
            .rounds_to_target
            .map(|r| r.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.eta_l,
            row.eta_s,
            row.final_loss,
            row.final_acc,
            rounds,
            if i == table.best { 1 } else { 0 }
        ));
    }
    out
}

pub fn sweep_to_json(table: &SweepTable) -> Result<String> {
    serde_json::to_string_pretty(table)
        .map_err(|e| Error::Numeric(format!("json encoding failed: {e}")))
}

/// Grid search over the [sweep] learning-rate lists, one run per pair.
pub fn sweep(cfg: &ExperimentConfig) -> Result<SweepTable> {
    let grid = cfg
        .sweep
        .clone()
        .ok_or_else(|| Error::Config("sweep needs a [sweep] section".into()))?;
    let mut rows = Vec::with_capacity(grid.eta_l.len() * grid.eta_s.len());
    for &eta_l in &grid.eta_l {
        for &eta_s in &grid.eta_s {
            let mut run_cfg = cfg.clone();
            run_cfg.sweep = None;
            run_cfg.lrs.preset = None;
            run_cfg.lrs.eta_l = Some(eta_l);
            run_cfg.lrs.eta_s = Some(eta_s);
            run_cfg.validate()?;
            let artifact = run_experiment(&run_cfg)?;
            rows.push(SweepRow {
                eta_l,
                eta_s,
                final_loss: artifact.summary.final_loss,
                final_acc: artifact.summary.final_acc,
                rounds_to_target: artifact.summary.rounds_to_target,
            });
        }
    }
    let classifies = rows.iter().any(|r| !r.final_acc.is_nan());
    let mut best = 0;
    for (i, row) in rows.iter().enumerate() {
        let better = if classifies {
            row.final_acc > rows[best].final_acc
        } else {
            row.final_loss < rows[best].final_loss
        };
        if better {
            best = i;
        }
    }
    Ok(SweepTable { rows, best })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_cfg(algorithm: &str, rounds: u64, seed: u64) -> ExperimentConfig {
        parse_config(&format!(
            r#"
algorithm = "{algorithm}"

[dataset]
kind = "quadratic"
d = 3
mu_min = 0.5
l_max = 1.0
center_scale = 1.0
samples_per_client = 2

[model]
kind = "quadratic"

[federation]
M = 4
A = 4
K = 2
b = "full"
b_small = 2

[schedule]
kind = "sequential"
tau = 2

[lrs]
eta_l = 0.1
eta_s = 1.0

[run]
rounds = {rounds}
seed = {seed}
"#
        ))
        .unwrap()
    }

    #[test]
    fn quadratic_run_emits_full_report_series() {
        let cfg = quad_cfg("fedamd", 6, 3);
        let artifact = run_experiment_with_threads(&cfg, 1).unwrap();
        assert_eq!(artifact.reports.len(), 7);
        for (i, r) in artifact.reports.iter().enumerate() {
            assert_eq!(r.t, i as u64);
        }
        let q = artifact.summary.quadratic.as_ref().unwrap();
        assert!(q.final_gap >= 0.0);
        assert!(artifact.summary.final_loss < artifact.reports[0].train_loss);
    }

    #[test]
    fn csv_is_deterministic_and_thread_invariant() {
        let cfg = quad_cfg("fedamd", 5, 9);
        let a = to_csv(&run_experiment_with_threads(&cfg, 1).unwrap());
        let b = to_csv(&run_experiment_with_threads(&cfg, 1).unwrap());
        let c = to_csv(&run_experiment_with_threads(&cfg, 4).unwrap());
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert!(a.starts_with(CSV_HEADER));
    }

    #[test]
    fn all_anchor_constant_schedule_freezes_model() {
        let mut cfg = quad_cfg("fedamd", 8, 5);
        cfg.schedule = config::ScheduleConfig {
            kind: config::ScheduleKind::Constant,
            p: Some(config::ProbabilityConfig::Value(1.0)),
            c: 1.0,
            tau: None,
        };
        let artifact = run_experiment_with_threads(&cfg, 1).unwrap();
        let first = artifact.reports[0].train_loss;
        for r in &artifact.reports {
            assert_eq!(r.train_loss.to_bits(), first.to_bits());
            assert_eq!(r.n_miners, 0);
        }
    }

    #[test]
    fn baseline_algorithms_run_end_to_end() {
        for algo in ["fedavg", "scaffold", "minibatch_sgd", "bvr_l_sgd"] {
            let cfg = quad_cfg(algo, 4, 11);
            let artifact = run_experiment_with_threads(&cfg, 1).unwrap();
            assert_eq!(artifact.reports.len(), 5, "{algo}");
            assert!(artifact.summary.final_loss.is_finite(), "{algo}");
        }
    }

    #[test]
    fn compare_rows_sorted_and_order_invariant() {
        let a = quad_cfg("fedavg", 3, 7);
        let b = quad_cfg("fedamd", 3, 7);
        let t1 = compare(&[a.clone(), b.clone()], 1).unwrap();
        let t2 = compare(&[b, a], 1).unwrap();
        let names1: Vec<&str> = t1.rows.iter().map(|r| r.algorithm.as_str()).collect();
        let names2: Vec<&str> = t2.rows.iter().map(|r| r.algorithm.as_str()).collect();
        assert_eq!(names1, vec!["fedamd", "fedavg"]);
        assert_eq!(names1, names2);
        assert_eq!(compare_to_csv(&t1), compare_to_csv(&t2));
    }

    #[test]
    fn compare_rejects_mismatched_datasets() {
        let a = quad_cfg("fedavg", 3, 7);
        let mut b = quad_cfg("fedamd", 3, 7);
        b.dataset.d = Some(4);
        assert!(compare(&[a, b], 1).is_err());
    }

    #[test]
    fn sweep_runs_grid_and_marks_best() {
        let mut cfg = quad_cfg("fedamd", 4, 13);
        cfg.sweep = Some(config::SweepConfig {
            eta_l: vec![0.05, 0.1],
            eta_s: vec![1.0],
        });
        let table = sweep(&cfg).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert!(table.best < 2);
        let csv = sweep_to_csv(&table);
        assert!(csv.starts_with(SWEEP_CSV_HEADER));
    }

    #[test]
    fn json_artifact_parses_back() {
        let cfg = quad_cfg("fedamd", 3, 17);
        let artifact = run_experiment_with_threads(&cfg, 1).unwrap();
        let json = to_json(&artifact).unwrap();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["reports"].as_array().unwrap().len(), 4);
        // NaN columns (p_t of row 0) serialize as null.
        assert!(value["reports"][0]["p_t"].is_null());
    }

    #[test]
    fn fit_line_recovers_exact_line() {
        let points: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 3.0 - 0.5 * i as f64)).collect();
        let fit = fit_line(&points).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-12);
        assert!((fit.intercept - 3.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }
}
