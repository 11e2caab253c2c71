//! Finite-horizon solution: backward integration of the coefficient ODEs.
//!
//! With zero discounting the value function is
//!
//! ```text
//! V(t, d, n) = A(t) n^2 + B(t) n d + C(t) n + E(t) d^2 + F(t) d + G(t)
//! ```
//!
//! with `A(T) = -lamT/2` and every other coefficient zero at `T`. The
//! coefficients obey
//!
//! ```text
//! A' = phi - lam GN^2
//! B' = -(q + kappa) + kappa B - 2 lam GN GD
//! C' = -(r - kappa m) - kappa m B - GN (C - mu F)
//! E' = 2 kappa E - lam GD^2
//! F' = kappa F - 2 kappa m E - GD (C - mu F)
//! G' = -lam G0^2 - c^2 E - kappa m F
//! ```
//!
//! where `2 lam GN = mu (1 - B) + 2A`, `2 lam GD = B - 2 mu E` and
//! `2 lam G0 = C - mu F`. The whole stacked state is advanced with
//! fixed-step classical RK4; `(A, B, E)` never depend on `(C, F, G)` so the
//! triangular structure is preserved automatically.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{validate, ModelParams};

/// Stacked coefficient state `[A, B, C, E, F, G]`.
pub type CoefficientState = [f64; 6];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FHCoefficientPath {
    pub grid: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub e: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub gamma_n: Vec<f64>,
    pub gamma_d: Vec<f64>,
    pub gamma_0: Vec<f64>,
    pub step_count: usize,
    pub horizon: f64,
    /// Aggregate permanent impact used to form `C - mu F`.
    pub mu: f64,
}

/// Feedback gains at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FHFeedback {
    pub gamma_n: f64,
    pub gamma_d: f64,
    pub gamma_0: f64,
}

impl FHFeedback {
    pub fn rate(&self, d: f64, n: f64) -> f64 {
        self.gamma_n * n + self.gamma_d * d + self.gamma_0
    }
}

/// Gains `(GN, GD, G0)` from a coefficient state.
pub fn feedback_gains(state: &CoefficientState, params: &ModelParams) -> FHFeedback {
    let [a, b, c, e, f, _] = *state;
    let mu = params.mu();
    let two_lam = 2.0 * params.lam();
    FHFeedback {
        gamma_n: (mu * (1.0 - b) + 2.0 * a) / two_lam,
        gamma_d: (b - 2.0 * mu * e) / two_lam,
        gamma_0: (c - mu * f) / two_lam,
    }
}

/// Time derivative of the coefficient state.
pub fn coefficient_rhs(state: &CoefficientState, params: &ModelParams) -> CoefficientState {
    let [_, b, c, e, f, _] = *state;
    let lam = params.lam();
    let mu = params.mu();
    let (kappa, m) = (params.kappa, params.m);
    let gains = feedback_gains(state, params);
    let cc = c - mu * f;
    [
        params.phi - lam * gains.gamma_n * gains.gamma_n,
        -(params.q + kappa) + kappa * b - 2.0 * lam * gains.gamma_n * gains.gamma_d,
        -(params.r - kappa * m) - kappa * m * b - gains.gamma_n * cc,
        2.0 * kappa * e - lam * gains.gamma_d * gains.gamma_d,
        kappa * f - 2.0 * kappa * m * e - gains.gamma_d * cc,
        -lam * gains.gamma_0 * gains.gamma_0 - params.c * params.c * e - kappa * m * f,
    ]
}

fn axpy(y: &CoefficientState, h: f64, k: &CoefficientState) -> CoefficientState {
    std::array::from_fn(|i| y[i] + h * k[i])
}

/// One RK4 step of size `h` backward in time (from `t` to `t - h`).
fn rk4_backward(y: &CoefficientState, h: f64, params: &ModelParams) -> CoefficientState {
    let k1 = coefficient_rhs(y, params);
    let k2 = coefficient_rhs(&axpy(y, -0.5 * h, &k1), params);
    let k3 = coefficient_rhs(&axpy(y, -0.5 * h, &k2), params);
    let k4 = coefficient_rhs(&axpy(y, -h, &k3), params);
    std::array::from_fn(|i| y[i] - h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

pub fn terminal_state(params: &ModelParams) -> Result<CoefficientState> {
    Ok([-0.5 * params.lam_t()?, 0.0, 0.0, 0.0, 0.0, 0.0])
}

pub fn integrate_backward(params: &ModelParams, steps: usize) -> Result<FHCoefficientPath> {
    validate(params).into_result()?;
    let horizon = params.horizon()?;
    let terminal = terminal_state(params)?;
    if steps < 10 {
        return Err(Error::InvalidInput(format!("at least 10 steps required, got {steps}")));
    }

    let h = horizon / steps as f64;
    let mut states = vec![terminal; steps + 1];
    let mut y = terminal;
    for i in (0..steps).rev() {
        y = rk4_backward(&y, h, params);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::RiccatiBlowUp { t: node_time(horizon, i, steps) });
        }
        states[i] = y;
    }

    let grid: Vec<f64> = (0..=steps).map(|i| node_time(horizon, i, steps)).collect();
    let column = |k: usize| states.iter().map(|s| s[k]).collect::<Vec<_>>();
    let gains: Vec<FHFeedback> = states.iter().map(|s| feedback_gains(s, params)).collect();
    Ok(FHCoefficientPath {
        grid,
        a: column(0),
        b: column(1),
        c: column(2),
        e: column(3),
        f: column(4),
        g: column(5),
        gamma_n: gains.iter().map(|g| g.gamma_n).collect(),
        gamma_d: gains.iter().map(|g| g.gamma_d).collect(),
        gamma_0: gains.iter().map(|g| g.gamma_0).collect(),
        step_count: steps,
        horizon,
        mu: params.mu(),
    })
}

fn node_time(horizon: f64, i: usize, steps: usize) -> f64 {
    horizon * (i as f64 / steps as f64)
}

/// Position of `t` on the grid as `(left node, weight of right node)`.
fn locate(path: &FHCoefficientPath, t: f64) -> Result<(usize, f64)> {
    if !(0.0..=path.horizon).contains(&t) {
        return Err(Error::OutOfRange { t, horizon: path.horizon });
    }
    let upper = path.grid.partition_point(|&s| s <= t);
    if upper >= path.grid.len() {
        return Ok((path.step_count, 0.0));
    }
    let i = upper - 1;
    let w = (t - path.grid[i]) / (path.grid[i + 1] - path.grid[i]);
    Ok((i, w))
}

fn lerp(values: &[f64], i: usize, w: f64) -> f64 {
    if w == 0.0 {
        values[i]
    } else {
        (1.0 - w) * values[i] + w * values[i + 1]
    }
}

impl FHCoefficientPath {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn state_at_node(&self, i: usize) -> CoefficientState {
        [self.a[i], self.b[i], self.c[i], self.e[i], self.f[i], self.g[i]]
    }

    /// Linearly interpolated coefficient state at `t`.
    pub fn state_at(&self, t: f64) -> Result<CoefficientState> {
        let (i, w) = locate(self, t)?;
        Ok([
            lerp(&self.a, i, w),
            lerp(&self.b, i, w),
            lerp(&self.c, i, w),
            lerp(&self.e, i, w),
            lerp(&self.f, i, w),
            lerp(&self.g, i, w),
        ])
    }

    /// `C - mu F` at every node.
    pub fn cc(&self) -> Vec<f64> {
        self.c.iter().zip(&self.f).map(|(c, f)| c - self.mu * f).collect()
    }
}

pub fn feedback_at(path: &FHCoefficientPath, t: f64) -> Result<FHFeedback> {
    let (i, w) = locate(path, t)?;
    Ok(FHFeedback {
        gamma_n: lerp(&path.gamma_n, i, w),
        gamma_d: lerp(&path.gamma_d, i, w),
        gamma_0: lerp(&path.gamma_0, i, w),
    })
}

pub fn optimal_rate_fh(path: &FHCoefficientPath, t: f64, d: f64, n: f64) -> Result<f64> {
    Ok(feedback_at(path, t)?.rate(d, n))
}

pub fn value_fh(path: &FHCoefficientPath, t: f64, d: f64, n: f64) -> Result<f64> {
    let [a, b, c, e, f, g] = path.state_at(t)?;
    Ok(a * n * n + b * n * d + c * n + e * d * d + f * d + g)
}

fn require_zero_mu(params: &ModelParams) -> Result<()> {
    if params.mu() != 0.0 {
        return Err(Error::RequiresZeroMu { mu: params.mu() });
    }
    Ok(())
}

/// `B(t) = ((q + kappa) / kappa) (1 - exp(-kappa (T - t)))`, exact when `mu = 0`.
pub fn closed_form_b_mu0(t: f64, params: &ModelParams) -> Result<f64> {
    require_zero_mu(params)?;
    let tau = params.horizon()? - t;
    Ok((params.q + params.kappa) / params.kappa * (1.0 - (-params.kappa * tau).exp()))
}

/// The published tanh expression for `A(t)` at `mu = 0`, evaluated as
/// written. It meets `A(T) = -lamT/2` only when `lamT^2 = 2 lam phi`.
pub fn closed_form_a_mu0_tanh(t: f64, params: &ModelParams) -> Result<f64> {
    require_zero_mu(params)?;
    let (lam, phi) = (params.lam(), params.phi);
    let lam_t = params.lam_t()?;
    let root = (lam * phi).sqrt();
    let th = ((phi / lam).sqrt() * (params.horizon()? - t)).tanh();
    // root * root written as lam * phi so the expiry value is exactly -lam phi / lamT
    Ok(-(lam * phi + root * lam_t * th) / (lam_t + root * th))
}

/// Sign convention of the forcing term in the scalar reduction for `C - mu F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ReductionForcing {
    /// `h(s) = r - kappa m (1 - B + 2 mu E)`.
    Printed,
    /// `h(s) = r + kappa m (1 - B + 2 mu E)`, the reference-code variant.
    Appendix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CcDiagnosticPoint {
    pub t: f64,
    pub cc_ode: f64,
    pub cc_integral: f64,
    pub gap: f64,
}

/// Evaluates the scalar integral formula
///
/// ```text
/// Cc(t) = int_t^T h(s) exp( int_t^s [GN - mu GD + mu kappa](u) du ) ds
/// ```
///
/// by trapezoidal quadrature on the path grid and compares it with
/// `C - mu F` from the coupled solve.
pub fn cc_integral_diagnostic(params: &ModelParams, path: &FHCoefficientPath) -> Vec<CcDiagnosticPoint> {
    cc_integral_profile(params, path, ReductionForcing::Printed)
}

pub fn cc_integral_profile(
    params: &ModelParams,
    path: &FHCoefficientPath,
    forcing: ReductionForcing,
) -> Vec<CcDiagnosticPoint> {
    let mu = params.mu();
    let km = params.kappa * params.m;
    let len = path.len();
    let h: Vec<f64> = (0..len)
        .map(|i| {
            let x = km * (1.0 - path.b[i] + 2.0 * mu * path.e[i]);
            match forcing {
                ReductionForcing::Printed => params.r - x,
                ReductionForcing::Appendix => params.r + x,
            }
        })
        .collect();
    let rate: Vec<f64> = (0..len)
        .map(|i| path.gamma_n[i] - mu * path.gamma_d[i] + mu * params.kappa)
        .collect();

    // K(t_i) = int_0^{t_i} rate; Cc(t_i) = exp(-K_i) int_{t_i}^T h(s) exp(K(s)) ds
    let mut cumulative = vec![0.0; len];
    for i in 1..len {
        let dt = path.grid[i] - path.grid[i - 1];
        cumulative[i] = cumulative[i - 1] + 0.5 * dt * (rate[i] + rate[i - 1]);
    }
    let shift = cumulative[len - 1];
    let weighted: Vec<f64> = (0..len).map(|i| h[i] * (cumulative[i] - shift).exp()).collect();
    let mut tail = vec![0.0; len];
    for i in (0..len - 1).rev() {
        let dt = path.grid[i + 1] - path.grid[i];
        tail[i] = tail[i + 1] + 0.5 * dt * (weighted[i] + weighted[i + 1]);
    }

    let cc = path.cc();
    (0..len)
        .map(|i| {
            let cc_integral = tail[i] * (shift - cumulative[i]).exp();
            CcDiagnosticPoint {
                t: path.grid[i],
                cc_ode: cc[i],
                cc_integral,
                gap: cc_integral - cc[i],
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_path(steps: usize) -> FHCoefficientPath {
        integrate_backward(&ModelParams::reference(), steps).unwrap()
    }

    #[test]
    fn terminal_node_is_assigned() {
        let path = reference_path(100);
        assert_eq!(path.state_at_node(100), [-2.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(path.grid[100], 1.0);
        assert_eq!(path.grid[0], 0.0);
        assert_eq!(path.gamma_n[100], (0.3 - 4.0) / 0.2);
        assert_eq!(path.gamma_d[100], 0.0);
        assert_eq!(path.gamma_0[100], 0.0);
    }

    #[test]
    fn gains_match_coefficients_pointwise() {
        let p = ModelParams::reference();
        let path = reference_path(200);
        for i in 0..path.len() {
            let g = feedback_gains(&path.state_at_node(i), &p);
            assert_eq!(g.gamma_n, path.gamma_n[i]);
            assert_eq!(g.gamma_d, path.gamma_d[i]);
            assert_eq!(g.gamma_0, path.gamma_0[i]);
        }
    }

    #[test]
    fn requires_finite_horizon_fields() {
        let p = ModelParams { lam_t: None, ..ModelParams::reference() };
        assert_eq!(integrate_backward(&p, 100), Err(Error::MissingField("lamT")));
        let p = ModelParams { horizon: None, ..ModelParams::reference() };
        assert_eq!(integrate_backward(&p, 100), Err(Error::MissingField("T")));
        assert!(matches!(
            integrate_backward(&ModelParams::reference(), 9),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn feedback_interpolation() {
        let path = reference_path(10);
        let at_node = feedback_at(&path, path.grid[3]).unwrap();
        assert_eq!(at_node.gamma_n, path.gamma_n[3]);
        assert_eq!(at_node.gamma_0, path.gamma_0[3]);

        let mid = 0.5 * (path.grid[3] + path.grid[4]);
        let between = feedback_at(&path, mid).unwrap();
        let mean = 0.5 * (path.gamma_d[3] + path.gamma_d[4]);
        assert!((between.gamma_d - mean).abs() < 1e-12 * mean.abs());

        let end = feedback_at(&path, 1.0).unwrap();
        assert_eq!(end.gamma_n, -18.5);

        assert!(matches!(feedback_at(&path, 1.0 + 1e-12), Err(Error::OutOfRange { .. })));
        assert!(matches!(feedback_at(&path, -1e-12), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn rate_and_value_at_expiry() {
        let path = reference_path(50);
        assert_eq!(optimal_rate_fh(&path, 1.0, 0.123, 1.0).unwrap(), -18.5);
        for d in [-0.1, 0.0, 0.07] {
            assert_eq!(value_fh(&path, 1.0, d, 1.0).unwrap(), -2.0);
        }
        for i in [0, 17, 50] {
            let t = path.grid[i];
            assert_eq!(value_fh(&path, t, 0.0, 0.0).unwrap(), path.g[i]);
            assert_eq!(optimal_rate_fh(&path, t, 0.0, 0.0).unwrap(), path.gamma_0[i]);
        }
    }

    #[test]
    fn closed_form_b() {
        let p = ModelParams::reference().without_permanent_impact();
        assert_eq!(closed_form_b_mu0(1.0, &p).unwrap(), 0.0);
        let expected = 3.0 * (1.0 - (-2.0f64).exp());
        assert!((closed_form_b_mu0(0.0, &p).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 2.593994).abs() < 1e-6);
        let long = ModelParams { horizon: Some(1e3), ..p };
        assert_eq!(closed_form_b_mu0(0.0, &long).unwrap(), 3.0);
        assert!(matches!(
            closed_form_b_mu0(0.0, &ModelParams::reference()),
            Err(Error::RequiresZeroMu { .. })
        ));
    }

    #[test]
    fn tanh_form_at_expiry() {
        let p = ModelParams::reference().without_permanent_impact();
        let at_t = closed_form_a_mu0_tanh(1.0, &p).unwrap();
        assert_eq!(at_t, -p.lam() * p.phi / 4.0);

        let lam_t = (2.0 * p.lam() * p.phi).sqrt();
        let slice = ModelParams { lam_t: Some(lam_t), ..p };
        assert!((closed_form_a_mu0_tanh(1.0, &slice).unwrap() + lam_t / 2.0).abs() < 1e-15);
        assert!(closed_form_a_mu0_tanh(1.0, &ModelParams::reference()).is_err());
    }

    #[test]
    fn cc_integral_vanishes_at_expiry() {
        let p = ModelParams::reference();
        let path = reference_path(200);
        let diag = cc_integral_diagnostic(&p, &path);
        let last = diag.last().unwrap();
        assert_eq!((last.cc_ode, last.cc_integral), (0.0, 0.0));
    }
}
