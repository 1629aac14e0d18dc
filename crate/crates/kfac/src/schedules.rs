//! Scalar training schedules: warmup damping, polynomial learning-rate
//! decay with ratio-fixed momentum, normalizing-weights rescale, and the
//! curvature refresh-interval heuristics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("t_warmup must be positive")]
    ZeroWarmup,
    #[error("damping must be positive, got {0}")]
    NonPositiveDamping(f64),
}

/// Warmup damping parameters: start at `gamma0` and decay toward
/// `gamma_target` over roughly `t_warmup` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DampingConfig {
    pub gamma0: f64,
    pub gamma_target: f64,
    pub rho_bn: f64,
    pub t_warmup: u64,
}

/// Learning-rate / momentum schedule parameters (polynomial decay).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrMomentumConfig {
    pub eta0: f64,
    pub m0: f64,
    pub e_start: f64,
    pub e_end: f64,
    pub p_decay: f64,
}

/// Scalar schedule values for the current iteration, owned by the
/// orchestrator and broadcast to workers at iteration start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub gamma_t: f64,
    pub eta_e: f64,
    pub m_e: f64,
    pub interval_e: u64,
}

/// Decay coefficient `alpha = 2 log10(gamma0 / gamma_target) / t_warmup`.
pub fn damping_alpha(cfg: &DampingConfig) -> Result<f64, ScheduleError> {
    if cfg.t_warmup == 0 {
        return Err(ScheduleError::ZeroWarmup);
    }
    Ok(2.0 * (cfg.gamma0 / cfg.gamma_target).log10() / cfg.t_warmup as f64)
}

/// One warmup step: `gamma_{t+1} = (1 - alpha) gamma_t + alpha gamma_target`.
pub fn damping_step(cfg: &DampingConfig, gamma_t: f64) -> Result<f64, ScheduleError> {
    if gamma_t <= 0.0 {
        return Err(ScheduleError::NonPositiveDamping(gamma_t));
    }
    let alpha = damping_alpha(cfg)?;
    Ok((1.0 - alpha) * gamma_t + alpha * cfg.gamma_target)
}

/// Damping used for batch-norm Fisher blocks: `rho_bn * gamma_t`.
pub fn bn_damping(gamma_t: f64, rho_bn: f64) -> f64 {
    rho_bn * gamma_t
}

/// Polynomial learning-rate decay, clamped to `eta0` before `e_start`
/// and to zero after `e_end`. `e` is a real-valued epoch.
pub fn learning_rate(cfg: &LrMomentumConfig, e: f64) -> f64 {
    if e <= cfg.e_start {
        return cfg.eta0;
    }
    if e >= cfg.e_end {
        return 0.0;
    }
    let base = 1.0 - (e - cfg.e_start) / (cfg.e_end - cfg.e_start);
    cfg.eta0 * base.powf(cfg.p_decay)
}

/// Momentum with the `m/eta` ratio fixed at `m0/eta0`.
pub fn momentum(cfg: &LrMomentumConfig, eta_e: f64) -> f64 {
    (cfg.m0 / cfg.eta0) * eta_e
}

/// Rescale weights in place to norm `sqrt(2 * d_out)`; the epsilon guard
/// maps the zero vector to itself.
pub fn rescale_weights(values: &mut [f64], d_out: usize, eps: f64) {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let target = (2.0 * d_out as f64).sqrt();
    let scale = target / (norm + eps);
    values.iter_mut().for_each(|v| *v *= scale);
}

/// Heuristic for the curvature refresh interval (iterations) at epoch `e`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntervalHeuristic {
    /// `min(20, 5 * floor(e/5) + 1)`: ramps up in steps of five epochs.
    Rampup,
    /// 1 before epoch 13, 20 afterwards.
    Step13,
}

pub fn refresh_interval(e: u64, heuristic: IntervalHeuristic) -> u64 {
    match heuristic {
        IntervalHeuristic::Rampup => (5 * (e / 5) + 1).min(20),
        IntervalHeuristic::Step13 => {
            if e < 13 {
                1
            } else {
                20
            }
        }
    }
}
