//! Euler–Maruyama simulation of `(D, N, X)` under a feedback policy.
//!
//! Brownian increments come from a ChaCha20 stream keyed by the run seed,
//! with the path index as the stream id and the step index addressing the
//! word position. Any single increment can be regenerated in isolation, so
//! results do not depend on thread count or evaluation order.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fh_solver::{feedback_at, FHCoefficientPath};
use crate::ih_solver::{IHFeedback, IHSolution};
use crate::model::ModelParams;

/// 32-bit words consumed per increment (two `u64` draws).
const WORDS_PER_DRAW: u128 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub steps: usize,
    pub seed: u64,
    pub n_paths: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { dt: 0.001, steps: 1000, seed: 42, n_paths: 10_000 }
    }
}

impl SimConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidInput(format!("dt must be positive, got {}", self.dt)));
        }
        if self.steps == 0 || self.n_paths == 0 {
            return Err(Error::InvalidInput("steps and n_paths must be at least 1".into()));
        }
        Ok(())
    }

    /// Checks `steps * dt == horizon` exactly on the decimal values as
    /// configured (`0.001 * 1000 == 1` holds even though it fails in binary).
    pub fn check_horizon(&self, horizon: f64) -> Result<()> {
        self.check()?;
        let mismatch = || {
            Error::InvalidInput(format!(
                "steps * dt = {} * {} does not equal horizon {}",
                self.steps, self.dt, horizon
            ))
        };
        let (dt_digits, dt_scale) = decimal_parts(self.dt).ok_or_else(mismatch)?;
        let (t_digits, t_scale) = decimal_parts(horizon).ok_or_else(mismatch)?;
        // steps * dt_digits / 10^dt_scale == t_digits / 10^t_scale
        let lhs = (self.steps as u128)
            .checked_mul(dt_digits)
            .and_then(|v| v.checked_mul(10u128.checked_pow(t_scale)?));
        let rhs = t_digits.checked_mul(10u128.checked_pow(dt_scale).ok_or_else(mismatch)?);
        match (lhs, rhs) {
            (Some(l), Some(r)) if l == r => Ok(()),
            _ => Err(mismatch()),
        }
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }
}

/// Shortest round-trip decimal of a positive `x` as `digits / 10^scale`.
fn decimal_parts(x: f64) -> Option<(u128, u32)> {
    if !(x > 0.0 && x.is_finite()) {
        return None;
    }
    let text = format!("{x}");
    let (int, frac) = text.split_once('.').unwrap_or((&text, ""));
    let digits: u128 = format!("{int}{frac}").parse().ok()?;
    Some((digits, frac.len() as u32))
}

/// Trading policy evaluated on `(t, d, n)`.
#[derive(Debug, Clone)]
pub enum Policy {
    InfiniteHorizon(IHFeedback),
    FiniteHorizon(Arc<FHCoefficientPath>),
    ConstantRate(f64),
    Scaled(Box<Policy>, f64),
}

impl Policy {
    pub fn rate(&self, t: f64, d: f64, n: f64) -> Result<f64> {
        match self {
            Policy::InfiniteHorizon(feedback) => Ok(feedback.rate(d, n)),
            Policy::FiniteHorizon(path) => Ok(feedback_at(path, t)?.rate(d, n)),
            Policy::ConstantRate(rate) => Ok(*rate),
            Policy::Scaled(base, factor) => Ok(factor * base.rate(t, d, n)?),
        }
    }

    pub fn scaled(self, factor: f64) -> Self {
        Policy::Scaled(Box::new(self), factor)
    }

    pub fn label(&self) -> String {
        match self {
            Policy::InfiniteHorizon(_) => "ih_optimal".into(),
            Policy::FiniteHorizon(_) => "fh_optimal".into(),
            Policy::ConstantRate(rate) => format!("constant_{rate}"),
            Policy::Scaled(base, factor) => format!("{}_x{factor}", base.label()),
        }
    }
}

/// Which objective a simulated path accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizonKind {
    /// Undiscounted running reward plus the terminal liquidation penalty.
    Finite,
    /// Discounted running reward truncated at the simulated horizon.
    Infinite,
}

impl HorizonKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            HorizonKind::Finite => "finite",
            HorizonKind::Infinite => "infinite",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathRecord {
    pub t: Vec<f64>,
    pub d: Vec<f64>,
    pub n: Vec<f64>,
    pub x: Vec<f64>,
    /// Rate applied on each step; one shorter than the state arrays.
    pub gamma: Vec<f64>,
    pub realized_objective: f64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn standard_normal(rng: &mut ChaCha20Rng) -> f64 {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 * SCALE;
    let u2 = (rng.next_u64() >> 11) as f64 * SCALE;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Increment `index` of stream `stream`, drawn independently of all others.
pub fn increment_at(seed: u64, stream: u64, index: u64, dt: f64) -> f64 {
    let mut rng = stream_rng(seed, stream);
    rng.set_word_pos(index as u128 * WORDS_PER_DRAW);
    dt.sqrt() * standard_normal(&mut rng)
}

/// `steps` i.i.d. `Normal(0, sqrt(dt))` increments of stream `stream`.
pub fn path_increments(seed: u64, stream: u64, steps: usize, dt: f64) -> Vec<f64> {
    let mut rng = stream_rng(seed, stream);
    let sd = dt.sqrt();
    (0..steps).map(|_| sd * standard_normal(&mut rng)).collect()
}

pub fn brownian_increments(seed: u64, steps: usize, dt: f64) -> Vec<f64> {
    path_increments(seed, 0, steps, dt)
}

pub fn simulate_path(
    params: &ModelParams,
    policy: &Policy,
    increments: &[f64],
    dt: f64,
    kind: HorizonKind,
) -> Result<PathRecord> {
    let steps = increments.len();
    let mut rec = PathRecord {
        t: Vec::with_capacity(steps + 1),
        d: Vec::with_capacity(steps + 1),
        n: Vec::with_capacity(steps + 1),
        x: Vec::with_capacity(steps + 1),
        gamma: Vec::with_capacity(steps),
        realized_objective: 0.0,
    };
    let (mut d, mut n, mut x) = (params.d0, params.n0, params.x0);
    rec.t.push(0.0);
    rec.d.push(d);
    rec.n.push(n);
    rec.x.push(x);

    let mut running = 0.0;
    for (i, dw) in increments.iter().enumerate() {
        let t = i as f64 * dt;
        let gamma = policy.rate(t, d, n)?;
        let reward = running_reward(params, d, n, gamma);
        running += match kind {
            HorizonKind::Finite => reward * dt,
            HorizonKind::Infinite => (-params.rho * t).exp() * reward * dt,
        };

        let d_next = d + params.drift_d(d, gamma) * dt + params.diffusion_d() * dw;
        let n_next = n + gamma * dt;
        let x_next = x + params.drift_x(d, n, gamma) * dt + params.diffusion_x(n) * dw;
        if !(d_next.is_finite() && n_next.is_finite() && x_next.is_finite()) {
            return Err(Error::SimulationDiverged { step: i });
        }
        (d, n, x) = (d_next, n_next, x_next);

        rec.t.push((i + 1) as f64 * dt);
        rec.d.push(d);
        rec.n.push(n);
        rec.x.push(x);
        rec.gamma.push(gamma);
    }

    rec.realized_objective = match kind {
        HorizonKind::Finite => running - 0.5 * params.lam_t()? * n * n,
        HorizonKind::Infinite => running,
    };
    Ok(rec)
}

fn running_reward(params: &ModelParams, d: f64, n: f64, gamma: f64) -> f64 {
    params.carry_rate(d, gamma) * n - params.lam() * gamma * gamma - params.phi * n * n
}

/// Simulates the infinite- and finite-horizon optimal policies on one
/// shared increment array (stream 0 of `config.seed`).
pub fn simulate_pair(
    params: &ModelParams,
    ih_solution: &IHSolution,
    fh_path: &Arc<FHCoefficientPath>,
    config: &SimConfig,
) -> Result<(PathRecord, PathRecord)> {
    config.check_horizon(fh_path.horizon)?;
    let increments = brownian_increments(config.seed, config.steps, config.dt);
    let ih = simulate_path(
        params,
        &Policy::InfiniteHorizon(ih_solution.feedback),
        &increments,
        config.dt,
        HorizonKind::Infinite,
    )?;
    let fh = simulate_path(
        params,
        &Policy::FiniteHorizon(Arc::clone(fh_path)),
        &increments,
        config.dt,
        HorizonKind::Finite,
    )?;
    Ok((ih, fh))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

impl McEstimate {
    /// Standard error of the difference of two independent estimates.
    pub fn combined_std_error(&self, other: &McEstimate) -> f64 {
        self.std_error.hypot(other.std_error)
    }
}

/// Realized objective of every path, in path order. Path `k` uses stream `k`.
pub fn path_objectives(
    params: &ModelParams,
    policy: &Policy,
    config: &SimConfig,
    kind: HorizonKind,
) -> Result<Vec<f64>> {
    config.check()?;
    if kind == HorizonKind::Finite {
        config.check_horizon(params.horizon()?)?;
    }
    (0..config.n_paths)
        .into_par_iter()
        .map(|k| {
            let increments = path_increments(config.seed, k as u64, config.steps, config.dt);
            simulate_path(params, policy, &increments, config.dt, kind).map(|r| r.realized_objective)
        })
        .collect()
}

/// Sample mean and standard error of the realized objective.
pub fn mc_objective(
    params: &ModelParams,
    policy: &Policy,
    config: &SimConfig,
    kind: HorizonKind,
) -> Result<McEstimate> {
    if config.n_paths < 2 {
        return Err(Error::InsufficientPaths { required: 2, got: config.n_paths });
    }
    let values = path_objectives(params, policy, config, kind)?;
    let count = values.len() as f64;
    let mean = values.iter().sum::<f64>() / count;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1.0);
    Ok(McEstimate { estimate: mean, std_error: (var / count).sqrt(), n_paths: values.len() })
}
