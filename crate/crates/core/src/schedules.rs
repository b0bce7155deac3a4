//! Anchor-probability schedules and learning-rate presets derived from the
//! convergence analysis.

use serde::Serialize;

use crate::error::{Error, Result};

/// Rule producing the anchor probability p_t for round t.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Schedule {
    /// p_t = p for every round. The analysis assumes p in (0, 1); the
    /// endpoints are still accepted so degenerate runs (all-anchor freezes,
    /// all-miner baselines) can be simulated.
    Constant { p: f64 },
    /// p_t = 1 when t mod tau == 0, else 0: an all-anchor refresh round every
    /// tau rounds.
    Sequential { tau: u32 },
}

impl Schedule {
    pub fn constant(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("constant p must lie in [0, 1], got {p}")));
        }
        Ok(Schedule::Constant { p })
    }

    pub fn sequential(tau: u32) -> Result<Self> {
        if tau < 2 {
            return Err(Error::Config(format!("sequential tau must be >= 2, got {tau}")));
        }
        Ok(Schedule::Sequential { tau })
    }

    /// Anchor probability at round t.
    pub fn prob_at(&self, t: u64) -> f64 {
        match *self {
            Schedule::Constant { p } => p,
            Schedule::Sequential { tau } => {
                if t % u64::from(tau) == 0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// The constant probability minimizing the nonconvex round bound:
/// p = (1/c) * (2 / (A + 2))^(1/A), with damping c >= 1.
pub fn optimal_constant_p(participants: u32, c: f64) -> Result<f64> {
    if participants < 1 {
        return Err(Error::Config("participants must be >= 1".into()));
    }
    if c < 1.0 {
        return Err(Error::Config(format!("damping constant c must be >= 1, got {c}")));
    }
    let a = f64::from(participants);
    Ok((2.0 / (a + 2.0)).powf(1.0 / a) / c)
}

/// The constant probability for the PL regime:
/// p = (1/c) * ((1 + (A+1)/(2 mu^2)) - sqrt(((A+1)/(2 mu^2))^2 + A/mu^2))^(1/A).
///
/// The base is evaluated as (1 + 1/mu^2) / ((1 + s) + sqrt(s^2 + r)) with
/// s = (A+1)/(2 mu^2) and r = A/mu^2, which is algebraically identical but
/// avoids the catastrophic cancellation of the direct form for small mu.
pub fn optimal_constant_p_pl(participants: u32, c: f64, mu: f64) -> Result<f64> {
    if participants < 1 {
        return Err(Error::Config("participants must be >= 1".into()));
    }
    if c < 1.0 {
        return Err(Error::Config(format!("damping constant c must be >= 1, got {c}")));
    }
    if mu <= 0.0 {
        return Err(Error::Config(format!("mu must be > 0, got {mu}")));
    }
    let a = f64::from(participants);
    let inv_mu_sq = 1.0 / (mu * mu);
    let s = (a + 1.0) * 0.5 * inv_mu_sq;
    let r = a * inv_mu_sq;
    let denom = (1.0 + s) + (s * s + r).sqrt();
    let base = (1.0 + inv_mu_sq) / denom;
    if !(base > 0.0) || !base.is_finite() {
        return Err(Error::Numeric(format!(
            "PL probability base degenerated to {base} (A = {participants}, mu = {mu})"
        )));
    }
    Ok(base.powf(1.0 / a) / c)
}

/// Problem constants and hyperparameters the learning-rate presets consume.
#[derive(Debug, Clone, Serialize)]
pub struct HyperPreset {
    /// Smoothness constant of the local objectives.
    pub l: f64,
    /// Average-smoothness constant; zero for deterministic objectives.
    pub l_sigma: f64,
    /// Per-sample gradient noise scale.
    pub sigma: f64,
    /// PL constant, when known.
    pub mu: Option<f64>,
    /// Probability damping, >= 1.
    pub c: f64,
    pub local_updates: u32,
    pub batch_small: u32,
    pub clients_total: u32,
    pub participants: u32,
}

/// Which theorem's learning-rate setting to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LrRegime {
    SequentialNonconvex,
    ConstantNonconvex,
    ConstantPl,
}

/// Returns the (eta_l, eta_s) pair for the regime.
///
/// The sequential setting fixes only the product eta_s * eta_l; the local
/// rate is taken at its own cap and the global rate solves the product.
pub fn preset_lrs(regime: LrRegime, hp: &HyperPreset, tau: Option<u32>) -> Result<(f64, f64)> {
    if hp.l <= 0.0 {
        return Err(Error::Config("preset learning rates need L > 0".into()));
    }
    if hp.local_updates < 1 || hp.participants < 1 || hp.clients_total < 1 {
        return Err(Error::Config("preset learning rates need K, A, M >= 1".into()));
    }
    if hp.c < 1.0 {
        return Err(Error::Config("preset learning rates need c >= 1".into()));
    }
    let k = f64::from(hp.local_updates);
    let l = hp.l;
    let m = f64::from(hp.clients_total);
    let a = f64::from(hp.participants);
    let sqrt6 = 6.0_f64.sqrt();
    let eta_l_cap = 1.0 / (2.0 * sqrt6 * k * l);

    match regime {
        LrRegime::SequentialNonconvex => {
            let tau = tau.ok_or_else(|| {
                Error::Config("sequential-nonconvex preset needs the schedule period tau".into())
            })?;
            if tau < 2 {
                return Err(Error::Config("sequential tau must be >= 2".into()));
            }
            let mut eta_l = eta_l_cap;
            if hp.l_sigma > 0.0 {
                let noise_cap =
                    (f64::from(hp.batch_small) / k).sqrt() / (4.0 * 3.0_f64.sqrt() * hp.l_sigma);
                eta_l = eta_l.min(noise_cap);
            }
            let product = 1.0 / (k * l * (1.0 + 2.0 * m * f64::from(tau) / a));
            Ok((eta_l, product / eta_l))
        }
        LrRegime::ConstantNonconvex => {
            let eta_s = 2.0 * sqrt6 * a / (a + 3.0 * m * hp.c);
            Ok((eta_l_cap, eta_s))
        }
        LrRegime::ConstantPl => {
            let mu = hp.mu.ok_or_else(|| {
                Error::Config("constant-pl preset needs the PL constant mu".into())
            })?;
            if mu <= 0.0 {
                return Err(Error::Config("constant-pl preset needs mu > 0".into()));
            }
            let first = sqrt6 * a * l / (m * mu * hp.c);
            let second = 2.0 * sqrt6 / (1.0 + 32.0 * m * hp.c / (mu * a));
            Ok((eta_l_cap, first.min(second)))
        }
    }
}
