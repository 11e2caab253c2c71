//! Stationary (discounted, infinite-horizon) solution.
//!
//! The value function is the quadratic
//!
//! ```text
//! V(d, n) = a1 n^2 + a2 n d + a3 n + a4 d^2 + a5 d + a6
//! ```
//!
//! and the optimal trading rate is the affine feedback
//! `gamma = gamma_N n + gamma_D d + gamma_0`. The coefficients are found by
//! a cascade: `a2` solves a scalar fixed point in which `a1` and `a4` are
//! the admissible roots of their own quadratics, then `(a3, a5)` solve a
//! 2x2 linear system and `a6` follows directly.

use roots::{find_root_brent, SimpleConvergency};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{validate, ModelParams};

const DAMPING: f64 = 0.5;
const FIXED_POINT_TOL: f64 = 1e-12;
const MAX_ITERATIONS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct IHCoefficients {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    pub alpha5: f64,
    pub alpha6: f64,
}

impl IHCoefficients {
    pub fn value(&self, d: f64, n: f64) -> f64 {
        self.alpha1 * n * n
            + self.alpha2 * n * d
            + self.alpha3 * n
            + self.alpha4 * d * d
            + self.alpha5 * d
            + self.alpha6
    }

    pub fn grad_d(&self, d: f64, n: f64) -> f64 {
        self.alpha2 * n + 2.0 * self.alpha4 * d + self.alpha5
    }

    pub fn grad_n(&self, d: f64, n: f64) -> f64 {
        2.0 * self.alpha1 * n + self.alpha2 * d + self.alpha3
    }

    pub fn hess_dd(&self) -> f64 {
        2.0 * self.alpha4
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IHFeedback {
    pub gamma_n: f64,
    pub gamma_d: f64,
    pub gamma_0: f64,
    /// `alpha3 - mu alpha5`, i.e. `2 lam gamma_0`.
    pub c_lin: f64,
}

impl IHFeedback {
    pub fn from_coefficients(coefficients: &IHCoefficients, params: &ModelParams) -> Self {
        let mu = params.mu();
        let lam = params.lam();
        let a = coefficients;
        let c_lin = a.alpha3 - mu * a.alpha5;
        Self {
            gamma_n: (mu * (1.0 - a.alpha2) + 2.0 * a.alpha1) / (2.0 * lam),
            gamma_d: (a.alpha2 - 2.0 * mu * a.alpha4) / (2.0 * lam),
            gamma_0: c_lin / (2.0 * lam),
            c_lin,
        }
    }

    pub fn rate(&self, d: f64, n: f64) -> f64 {
        optimal_rate_ih(d, n, self)
    }
}

/// How the `alpha2` fixed point was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Alpha2Method {
    DampedIteration,
    Bracketing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Alpha2Solution {
    pub alpha2: f64,
    pub iterations: usize,
    /// `|alpha2 - G(alpha2)|` at the returned point.
    pub residual: f64,
    pub method: Alpha2Method,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearTerms {
    pub alpha3: f64,
    pub alpha5: f64,
    pub c_lin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IHSolution {
    pub coefficients: IHCoefficients,
    pub feedback: IHFeedback,
    pub iterations: usize,
    pub fixedpoint_residual: f64,
    pub alpha2_method: Alpha2Method,
    /// `4 lam phi - mu^2 (1 - alpha2)^2`; positive for a returned solution.
    pub concavity_margin: f64,
    /// Published closed form `(r + 2 kappa m lam gamma_D) / (rho - gamma_N + mu gamma_D)`
    /// for `alpha3 - mu alpha5`, kept for comparison against `feedback.c_lin`.
    pub c_closed_form: f64,
    pub drift_matrix: [[f64; 2]; 2],
    pub eigen_real_parts: [f64; 2],
    /// Set when some closed-loop eigenvalue has a nonnegative real part.
    pub unstable: bool,
}

impl IHSolution {
    pub fn rate(&self, d: f64, n: f64) -> f64 {
        self.feedback.rate(d, n)
    }

    pub fn value(&self, d: f64, n: f64) -> f64 {
        self.coefficients.value(d, n)
    }
}

fn concavity_margin(alpha2: f64, params: &ModelParams) -> f64 {
    let s = params.mu() * (1.0 - alpha2);
    4.0 * params.lam() * params.phi - s * s
}

/// Minus-branch root of the `n^2` balance, without the concavity check.
/// `None` when the root is complex.
fn alpha1_branch(alpha2: f64, params: &ModelParams) -> Option<f64> {
    let lam = params.lam();
    let b = lam * params.rho - params.mu() * (1.0 - alpha2);
    let margin = concavity_margin(alpha2, params);
    let disc = b * b + margin;
    if !(disc >= 0.0) {
        return None;
    }
    let sq = disc.sqrt();
    // product of the roots is -margin/4; avoid cancellation when b > 0
    if b > 0.0 {
        Some(-margin / (2.0 * (b + sq)))
    } else {
        Some((b - sq) / 2.0)
    }
}

/// Admissible (negative) root `alpha1` of
/// `4 a1^2 + [4 mu (1 - a2) - 4 lam rho] a1 + mu^2 (1 - a2)^2 - 4 lam phi = 0`.
pub fn alpha1_root(alpha2: f64, params: &ModelParams) -> Result<f64> {
    let margin = concavity_margin(alpha2, params);
    if !(margin > 0.0) {
        return Err(Error::ConcavityViolated { margin });
    }
    alpha1_branch(alpha2, params).ok_or(Error::ConcavityViolated { margin })
}

fn alpha4_branch(alpha2: f64, params: &ModelParams) -> std::result::Result<f64, f64> {
    let mu = params.mu();
    let lk = params.lam() * params.d2_rate();
    let disc = lk * (lk + 2.0 * mu * alpha2);
    if !(disc >= 0.0) {
        return Err(disc);
    }
    // minus root of 4 mu^2 a4^2 - 4 (mu a2 + lam k) a4 + a2^2 = 0 written as
    // a2^2 / (2 (plus-root numerator)); reduces to a2^2 / (4 lam k) at mu = 0
    let denom = 2.0 * ((mu * alpha2 + lk) + disc.sqrt());
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(alpha2 * alpha2 / denom)
}

/// Admissible (nonnegative) root `alpha4` of the `d^2` balance
/// `4 lam k a4 = (a2 - 2 mu a4)^2` with `k = rho + 2 kappa`.
pub fn alpha4_root(alpha2: f64, params: &ModelParams) -> Result<f64> {
    alpha4_branch(alpha2, params).map_err(|discriminant| Error::Alpha4Complex { discriminant })
}

/// Right-hand side `G` of the `nd` balance `alpha2 = G(alpha2)`; `None`
/// where either root is complex.
pub fn alpha2_map(alpha2: f64, params: &ModelParams) -> Option<f64> {
    let mu = params.mu();
    let lam = params.lam();
    let a1 = alpha1_branch(alpha2, params)?;
    let a4 = alpha4_branch(alpha2, params).ok()?;
    let coupling = (mu * (1.0 - alpha2) + 2.0 * a1) * (alpha2 - 2.0 * mu * a4) / (2.0 * lam);
    Some(((params.q + params.kappa) + coupling) / (params.rho + params.kappa))
}

fn alpha2_initial(params: &ModelParams) -> f64 {
    (params.q + params.kappa) / (params.rho + params.kappa)
}

fn damped_iteration(params: &ModelParams) -> std::result::Result<Alpha2Solution, Vec<f64>> {
    let mut alpha2 = alpha2_initial(params);
    let mut trace = Vec::with_capacity(16);
    for iteration in 0..=MAX_ITERATIONS {
        trace.push(alpha2);
        if trace.len() > 10 {
            trace.remove(0);
        }
        let Some(g) = alpha2_map(alpha2, params) else { break };
        let residual = (alpha2 - g).abs();
        if !residual.is_finite() {
            break;
        }
        if residual <= FIXED_POINT_TOL {
            return Ok(Alpha2Solution {
                alpha2,
                iterations: iteration,
                residual,
                method: Alpha2Method::DampedIteration,
            });
        }
        alpha2 = (1.0 - DAMPING) * alpha2 + DAMPING * g;
    }
    Err(trace)
}

/// Brent root-find of `alpha2 - G(alpha2)` on `[0, 2 (q + kappa) / (rho + kappa)]`.
pub fn solve_alpha2_bracketed(params: &ModelParams) -> Result<Alpha2Solution> {
    let f = |a: f64| alpha2_map(a, params).map_or(f64::NAN, |g| a - g);
    let (lo, hi) = (0.0, 2.0 * alpha2_initial(params));
    let (flo, fhi) = (f(lo), f(hi));
    if !(flo.is_finite() && fhi.is_finite()) || flo * fhi > 0.0 {
        return Err(Error::Alpha2Diverged { trace: vec![lo, flo, hi, fhi] });
    }
    let mut conv = SimpleConvergency { eps: 1e-15, max_iter: 500 };
    let alpha2 = find_root_brent(lo, hi, f, &mut conv)
        .map_err(|_| Error::Alpha2Diverged { trace: vec![lo, hi] })?;
    let residual = f(alpha2).abs();
    if !residual.is_finite() {
        return Err(Error::Alpha2Diverged { trace: vec![alpha2] });
    }
    Ok(Alpha2Solution { alpha2, iterations: 0, residual, method: Alpha2Method::Bracketing })
}

/// Damped fixed-point iteration for `alpha2`, falling back to bracketing.
pub fn solve_alpha2(params: &ModelParams) -> Result<Alpha2Solution> {
    match damped_iteration(params) {
        Ok(solution) => Ok(solution),
        Err(trace) => solve_alpha2_bracketed(params).map_err(|_| Error::Alpha2Diverged { trace }),
    }
}

/// Solves the `n` and `d` balances for `(alpha3, alpha5)`:
///
/// ```text
/// rho a3         - gamma_N (a3 - mu a5) = r - kappa m + kappa m a2
/// (rho + kappa) a5 - gamma_D (a3 - mu a5) = 2 kappa m a4
/// ```
pub fn solve_linear_terms(
    alpha1: f64,
    alpha2: f64,
    alpha4: f64,
    params: &ModelParams,
) -> Result<LinearTerms> {
    let mu = params.mu();
    let lam = params.lam();
    let (kappa, m, rho) = (params.kappa, params.m, params.rho);
    let gamma_n = (mu * (1.0 - alpha2) + 2.0 * alpha1) / (2.0 * lam);
    let gamma_d = (alpha2 - 2.0 * mu * alpha4) / (2.0 * lam);

    let (m11, m12) = (rho - gamma_n, mu * gamma_n);
    let (m21, m22) = (-gamma_d, rho + kappa + mu * gamma_d);
    let rhs1 = params.r + kappa * m * (alpha2 - 1.0);
    let rhs2 = 2.0 * kappa * m * alpha4;

    let det = m11 * m22 - m12 * m21;
    let scale = m11.abs().max(m12.abs()) * m21.abs().max(m22.abs());
    if !(det.abs() >= 1e-14 * scale) || scale == 0.0 {
        return Err(Error::LinearSystemSingular { determinant: det });
    }
    let alpha3 = (rhs1 * m22 - m12 * rhs2) / det;
    let alpha5 = (m11 * rhs2 - m21 * rhs1) / det;
    Ok(LinearTerms { alpha3, alpha5, c_lin: alpha3 - mu * alpha5 })
}

/// Constant term `(lam gamma_0^2 + c^2 a4 + kappa m a5) / rho`.
pub fn alpha6(alpha4: f64, alpha5: f64, gamma_0: f64, params: &ModelParams) -> Result<f64> {
    if params.rho == 0.0 {
        return Err(Error::Alpha6Undefined);
    }
    Ok((params.lam() * gamma_0 * gamma_0
        + params.c * params.c * alpha4
        + params.kappa * params.m * alpha5)
        / params.rho)
}

/// Closed-loop drift matrix of `(D, N)` under the feedback.
pub fn closed_loop_matrix(feedback: &IHFeedback, params: &ModelParams) -> [[f64; 2]; 2] {
    let mu = params.mu();
    [
        [-(params.kappa + mu * feedback.gamma_d), -mu * feedback.gamma_n],
        [feedback.gamma_d, feedback.gamma_n],
    ]
}

/// Real parts of the eigenvalues of a 2x2 matrix, ascending.
pub fn eigen_real_parts(m: &[[f64; 2]; 2]) -> [f64; 2] {
    let half_trace = 0.5 * (m[0][0] + m[1][1]);
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let disc = half_trace * half_trace - det;
    if disc >= 0.0 {
        let s = disc.sqrt();
        [half_trace - s, half_trace + s]
    } else {
        [half_trace, half_trace]
    }
}

pub fn solve_ih(params: &ModelParams) -> Result<IHSolution> {
    validate(params).into_result()?;

    let a2 = solve_alpha2(params)?;
    let alpha2 = a2.alpha2;
    let alpha1 = alpha1_root(alpha2, params)?;
    let alpha4 = alpha4_root(alpha2, params)?;
    let linear = solve_linear_terms(alpha1, alpha2, alpha4, params)?;
    let gamma_0 = linear.c_lin / (2.0 * params.lam());
    let alpha6 = alpha6(alpha4, linear.alpha5, gamma_0, params)?;

    let coefficients = IHCoefficients {
        alpha1,
        alpha2,
        alpha3: linear.alpha3,
        alpha4,
        alpha5: linear.alpha5,
        alpha6,
    };
    let feedback = IHFeedback::from_coefficients(&coefficients, params);
    let drift_matrix = closed_loop_matrix(&feedback, params);
    let eigen_real_parts = eigen_real_parts(&drift_matrix);

    let mu = params.mu();
    let c_closed_form = (params.r + 2.0 * params.kappa * params.m * params.lam() * feedback.gamma_d)
        / (params.rho - feedback.gamma_n + mu * feedback.gamma_d);

    Ok(IHSolution {
        coefficients,
        feedback,
        iterations: a2.iterations,
        fixedpoint_residual: a2.residual,
        alpha2_method: a2.method,
        concavity_margin: concavity_margin(alpha2, params),
        c_closed_form,
        drift_matrix,
        eigen_real_parts,
        unstable: eigen_real_parts.iter().any(|&re| re >= 0.0),
    })
}

pub fn optimal_rate_ih(d: f64, n: f64, feedback: &IHFeedback) -> f64 {
    feedback.gamma_n * n + feedback.gamma_d * d + feedback.gamma_0
}

pub fn value_ih(d: f64, n: f64, coefficients: &IHCoefficients) -> f64 {
    coefficients.value(d, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StationaryMoments {
    /// `(E[D], E[N])`.
    pub mean: [f64; 2],
    /// Covariance of `(D, N)`.
    pub covariance: [[f64; 2]; 2],
}

/// Gaussian stationary law of the closed-loop `(D, N)` system.
pub fn stationary_moments(solution: &IHSolution, params: &ModelParams) -> Result<StationaryMoments> {
    stationary_moments_for(&solution.feedback, params)
}

/// As [`stationary_moments`], for an arbitrary affine feedback.
pub fn stationary_moments_for(feedback: &IHFeedback, params: &ModelParams) -> Result<StationaryMoments> {
    let m = closed_loop_matrix(feedback, params);
    let eig = eigen_real_parts(&m);
    if eig.iter().any(|&re| !(re < 0.0)) {
        return Err(Error::NoStationaryDistribution { eigen_real_parts: eig });
    }
    let mu = params.mu();
    let b = [params.kappa * params.m - mu * feedback.gamma_0, feedback.gamma_0];

    // M z = -b
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let mean = [
        (-b[0] * m[1][1] + m[0][1] * b[1]) / det,
        (-m[0][0] * b[1] + m[1][0] * b[0]) / det,
    ];

    // M S + S M^T + Q = 0 in the unknowns (s11, s12, s22)
    let q11 = params.c * params.c;
    let system = [
        [2.0 * m[0][0], 2.0 * m[0][1], 0.0],
        [m[1][0], m[0][0] + m[1][1], m[0][1]],
        [0.0, 2.0 * m[1][0], 2.0 * m[1][1]],
    ];
    let s = solve3(system, [-q11, 0.0, 0.0])
        .ok_or(Error::NoStationaryDistribution { eigen_real_parts: eig })?;
    Ok(StationaryMoments { mean, covariance: [[s[0], s[1]], [s[1], s[2]]] })
}

/// Gaussian elimination with partial pivoting.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col] == 0.0 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let factor = a[row][col] / a[col][col];
            let pivot_row = a[col];
            for (x, p) in a[row].iter_mut().zip(pivot_row).skip(col) {
                *x -= factor * p;
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let tail: f64 = (row + 1..3).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Some(x)
}
