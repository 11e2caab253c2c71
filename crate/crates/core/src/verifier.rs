//! Residual-based certification of the infinite- and finite-horizon
//! solutions, plus probes that quantify how far alternative closed forms
//! sit from the certified ones.
//!
//! Every check is a pure function of its inputs and returns a
//! [`ResidualReport`]. Checks with `asserted == false` are informational:
//! they are reported but never gate a run.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fh_solver::{
    cc_integral_profile, closed_form_a_mu0_tanh, closed_form_b_mu0, coefficient_rhs, feedback_at,
    integrate_backward, CoefficientState, FHCoefficientPath, ReductionForcing,
};
use crate::ih_solver::{IHCoefficients, IHSolution};
use crate::model::ModelParams;
use crate::simulator::{mc_objective, HorizonKind, McEstimate, Policy, SimConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    pub check_name: String,
    pub max_abs_residual: f64,
    pub grid_spec: String,
    pub tolerance: f64,
    pub passed: bool,
    pub notes: String,
    /// Whether a failure of this check fails the run.
    pub asserted: bool,
}

impl ResidualReport {
    pub fn new(
        check_name: impl Into<String>,
        max_abs_residual: f64,
        tolerance: f64,
        grid_spec: impl Into<String>,
        notes: impl Into<String>,
    ) -> Self {
        Self {
            check_name: check_name.into(),
            max_abs_residual,
            grid_spec: grid_spec.into(),
            tolerance,
            passed: max_abs_residual <= tolerance,
            notes: notes.into(),
            asserted: true,
        }
    }

    pub fn informational(mut self) -> Self {
        self.asserted = false;
        self
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self.passed = self.max_abs_residual <= tolerance;
        self
    }

    /// True unless this is an asserted check that failed.
    pub fn acceptable(&self) -> bool {
        self.passed || !self.asserted
    }
}

/// Rectangular `(d, n)` evaluation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGrid {
    pub d: Vec<f64>,
    pub n: Vec<f64>,
}

impl Default for StateGrid {
    /// `d` in `[-0.1, 0.2]` step 0.01, `n` in `[-2, 4]` step 0.25.
    fn default() -> Self {
        Self {
            d: (0..=30).map(|k| -0.1 + 0.01 * k as f64).collect(),
            n: (0..=24).map(|j| -2.0 + 0.25 * j as f64).collect(),
        }
    }
}

impl StateGrid {
    pub fn spec(&self) -> String {
        let span = |v: &[f64]| match (v.first(), v.last()) {
            (Some(a), Some(b)) => format!("[{a},{b}]x{}", v.len()),
            _ => "empty".to_string(),
        };
        format!("d{} n{}", span(&self.d), span(&self.n))
    }

    fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.d.iter().flat_map(move |&d| self.n.iter().map(move |&n| (d, n)))
    }
}

/// Spatial derivatives of a quadratic value function at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueDerivatives {
    pub v_d: f64,
    pub v_n: f64,
    pub v_dd: f64,
}

/// `max_gamma` of the controlled generator plus running reward, written
/// directly in terms of the value derivatives.
fn maximized_hamiltonian(params: &ModelParams, d: f64, n: f64, dv: &ValueDerivatives) -> f64 {
    let mu = params.mu();
    let p = mu * n - mu * dv.v_d + dv.v_n;
    params.carry_rate(d, 0.0) * n - params.phi * n * n - params.kappa * (d - params.m) * dv.v_d
        + p * p / (4.0 * params.lam())
        + 0.5 * params.c * params.c * dv.v_dd
}

fn ih_derivatives(a: &IHCoefficients, d: f64, n: f64) -> ValueDerivatives {
    ValueDerivatives { v_d: a.grad_d(d, n), v_n: a.grad_n(d, n), v_dd: a.hess_dd() }
}

fn fh_derivatives(state: &CoefficientState, d: f64, n: f64) -> ValueDerivatives {
    let [a, b, c, e, f, _] = *state;
    ValueDerivatives { v_d: b * n + 2.0 * e * d + f, v_n: 2.0 * a * n + b * d + c, v_dd: 2.0 * e }
}

fn quadratic_value(state: &CoefficientState, d: f64, n: f64) -> f64 {
    let [a, b, c, e, f, g] = *state;
    a * n * n + b * n * d + c * n + e * d * d + f * d + g
}

/// Reduced stationary HJB residual `rho V - max H`, normalized by
/// `1 + |rho V|`, over the grid.
pub fn hjb_residual_ih(
    coefficients: &IHCoefficients,
    params: &ModelParams,
    grid: &StateGrid,
) -> ResidualReport {
    let worst = grid
        .points()
        .map(|(d, n)| {
            let rho_v = params.rho * coefficients.value(d, n);
            let h = maximized_hamiltonian(params, d, n, &ih_derivatives(coefficients, d, n));
            (rho_v - h).abs() / (1.0 + rho_v.abs())
        })
        .fold(0.0, f64::max);
    ResidualReport::new(
        "ih_hjb_residual",
        worst,
        1e-8,
        grid.spec(),
        "normalized by 1+|rho V|",
    )
}

/// One collected-coefficient balance of the stationary HJB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonomialBalance {
    pub monomial: &'static str,
    pub lhs: f64,
    pub rhs: f64,
}

impl MonomialBalance {
    pub fn relative_residual(&self) -> f64 {
        (self.lhs - self.rhs).abs() / (1.0 + self.rhs.abs())
    }
}

/// The six monomial balances `n^2, nd, n, d^2, d, 1` of the stationary HJB.
pub fn ih_monomial_balances(solution: &IHSolution, params: &ModelParams) -> [MonomialBalance; 6] {
    let a = &solution.coefficients;
    let fb = &solution.feedback;
    let (rho, kappa, km, lam) = (params.rho, params.kappa, params.kappa * params.m, params.lam());
    [
        MonomialBalance {
            monomial: "n2",
            lhs: rho * a.alpha1,
            rhs: lam * fb.gamma_n * fb.gamma_n - params.phi,
        },
        MonomialBalance {
            monomial: "nd",
            lhs: (rho + kappa) * a.alpha2,
            rhs: params.q + kappa + 2.0 * lam * fb.gamma_n * fb.gamma_d,
        },
        MonomialBalance {
            monomial: "n",
            lhs: rho * a.alpha3,
            rhs: params.r - km + km * a.alpha2 + 2.0 * lam * fb.gamma_n * fb.gamma_0,
        },
        MonomialBalance {
            monomial: "d2",
            lhs: params.d2_rate() * a.alpha4,
            rhs: lam * fb.gamma_d * fb.gamma_d,
        },
        MonomialBalance {
            monomial: "d",
            lhs: (rho + kappa) * a.alpha5,
            rhs: 2.0 * km * a.alpha4 + 2.0 * lam * fb.gamma_d * fb.gamma_0,
        },
        MonomialBalance {
            monomial: "1",
            lhs: rho * a.alpha6,
            rhs: km * a.alpha5 + lam * fb.gamma_0 * fb.gamma_0 + params.c * params.c * a.alpha4,
        },
    ]
}

pub fn ih_coefficient_residuals(solution: &IHSolution, params: &ModelParams) -> Vec<ResidualReport> {
    ih_monomial_balances(solution, params)
        .iter()
        .map(|b| {
            ResidualReport::new(
                format!("ih_balance_{}", b.monomial),
                b.relative_residual(),
                1e-10,
                "coefficients",
                format!("lhs={:.6e} rhs={:.6e}, relative to 1+|rhs|", b.lhs, b.rhs),
            )
        })
        .collect()
}

/// Sign and stability properties of the stationary solution.
pub fn ih_structure(solution: &IHSolution) -> ResidualReport {
    let a = &solution.coefficients;
    let mut failed = Vec::new();
    if !(a.alpha1 < 0.0) {
        failed.push("alpha1<0");
    }
    if !(a.alpha4 >= 0.0) {
        failed.push("alpha4>=0");
    }
    if !(solution.feedback.gamma_d > 0.0) {
        failed.push("gamma_D>0");
    }
    if solution.eigen_real_parts.iter().any(|&re| !(re < 0.0)) {
        failed.push("eigen_re<0");
    }
    let notes = if failed.is_empty() {
        format!(
            "alpha1<0, alpha4>=0, gamma_D>0, eigen_re={:?}",
            solution.eigen_real_parts
        )
    } else {
        format!("violated: {}", failed.join(", "))
    };
    ResidualReport::new("ih_structure", failed.len() as f64, 0.0, "solution", notes)
}

/// Reports the sign of `gamma_N` without asserting it.
pub fn gamma_n_sign(solution: &IHSolution) -> ResidualReport {
    let g = solution.feedback.gamma_n;
    let sign = if g < 0.0 { "negative" } else { "nonnegative" };
    ResidualReport::new("ih_gamma_n_sign", g, f64::INFINITY, "solution", format!("gamma_N={g:.6e} ({sign})"))
        .informational()
}

/// Finite-horizon HJB residual `dV/dt + max H` at interior nodes, with the
/// time derivative from centered differences of the stored coefficients,
/// normalized by `1 + |dV/dt|`. The tolerance is the certificate value for
/// 2000 steps at the reference parameters.
pub fn hjb_residual_fh(path: &FHCoefficientPath, params: &ModelParams, grid: &StateGrid) -> ResidualReport {
    let worst = (1..path.len().saturating_sub(1))
        .map(|i| {
            let span = path.grid[i + 1] - path.grid[i - 1];
            let before = path.state_at_node(i - 1);
            let after = path.state_at_node(i + 1);
            let state = path.state_at_node(i);
            let dstate: CoefficientState = std::array::from_fn(|k| (after[k] - before[k]) / span);
            grid.points()
                .map(|(d, n)| {
                    let dv_dt = quadratic_value(&dstate, d, n);
                    let h = maximized_hamiltonian(params, d, n, &fh_derivatives(&state, d, n));
                    (dv_dt + h).abs() / (1.0 + dv_dt.abs())
                })
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    ResidualReport::new(
        "fh_hjb_residual",
        worst,
        1e-4,
        format!("{} interior nodes x {}", path.len().saturating_sub(2), grid.spec()),
        "centered FD in t, normalized by 1+|dV/dt|",
    )
}

/// `V(T, d, n) + lamT n^2 / 2` over the grid; zero by construction.
pub fn fh_terminal_residual(path: &FHCoefficientPath, params: &ModelParams, grid: &StateGrid) -> Result<ResidualReport> {
    let lam_t = params.lam_t()?;
    let terminal = path.state_at_node(path.len() - 1);
    let worst = grid
        .points()
        .map(|(d, n)| (quadratic_value(&terminal, d, n) + 0.5 * lam_t * n * n).abs())
        .fold(0.0, f64::max);
    Ok(ResidualReport::new("fh_terminal_condition", worst, 0.0, grid.spec(), "exact"))
}

/// Observed order of the FH residual when the step count doubles.
pub fn fh_residual_order(params: &ModelParams, coarse_steps: usize, grid: &StateGrid) -> Result<ResidualReport> {
    let coarse = hjb_residual_fh(&integrate_backward(params, coarse_steps)?, params, grid).max_abs_residual;
    let fine = hjb_residual_fh(&integrate_backward(params, 2 * coarse_steps)?, params, grid).max_abs_residual;
    let order = (coarse / fine).log2();
    Ok(ResidualReport::new(
        "fh_residual_order",
        (order - 2.0).abs(),
        0.25,
        format!("steps {} -> {}", coarse_steps, 2 * coarse_steps),
        format!("residuals {coarse:.3e} -> {fine:.3e}, observed order {order:.3}"),
    ))
}

/// Largest coefficient change between `steps` and `2 steps` at shared nodes.
pub fn fh_refinement(params: &ModelParams, steps: usize) -> Result<ResidualReport> {
    let coarse = integrate_backward(params, steps)?;
    let fine = integrate_backward(params, 2 * steps)?;
    let worst = (0..coarse.len())
        .flat_map(|i| {
            let (a, b) = (coarse.state_at_node(i), fine.state_at_node(2 * i));
            (0..6).map(move |k| (a[k] - b[k]).abs())
        })
        .fold(0.0, f64::max);
    Ok(ResidualReport::new(
        "fh_rk4_refinement",
        worst,
        1e-8,
        format!("steps {} -> {}", steps, 2 * steps),
        "max coefficient change at shared nodes",
    ))
}

/// Zero-permanent-impact probes: the exponential closed form for `B` and
/// the scalar Riccati equation `A' = phi - A^2 / lam` checked by centered
/// differences.
pub fn fh_mu0_oracles(params: &ModelParams, steps: usize) -> Result<Vec<ResidualReport>> {
    let p0 = params.without_permanent_impact();
    let path = integrate_backward(&p0, steps)?;
    let b_gap = (0..path.len())
        .map(|i| Ok((path.b[i] - closed_form_b_mu0(path.grid[i], &p0)?).abs()))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);

    let riccati_residual = |path: &FHCoefficientPath| {
        let h = path.horizon / path.step_count as f64;
        (1..path.len() - 1)
            .map(|i| {
                let fd = (path.a[i + 1] - path.a[i - 1]) / (2.0 * h);
                let rhs = p0.phi - path.a[i] * path.a[i] / p0.lam();
                (fd - rhs).abs() / (1.0 + rhs.abs())
            })
            .fold(0.0, f64::max)
    };
    let coarse = riccati_residual(&path);
    let fine = riccati_residual(&integrate_backward(&p0, 2 * steps)?);
    let order = (coarse / fine).log2();
    Ok(vec![
        // The exponential form drops the -A B / lam term that the nd
        // balance keeps at mu = 0, so the gap is a probe, not a gate.
        ResidualReport::new(
            "fh_mu0_b_closed_form",
            b_gap,
            1e-8,
            format!("{} nodes, mu=0", path.len()),
            "B vs exponential closed form (omits -A B / lam)",
        )
        .informational(),
        ResidualReport::new(
            "fh_mu0_a_riccati",
            (order - 2.0).abs(),
            0.25,
            format!("steps {} -> {}, mu=0", steps, 2 * steps),
            format!(
                "centered FD of A vs phi - A^2/lam, relative to 1+|A'|: {coarse:.3e} -> {fine:.3e}, observed order {order:.3}"
            ),
        ),
    ])
}

/// Hamiltonian `H(gamma)` at a state, built from a value function.
pub trait Hamiltonian {
    fn params(&self) -> &ModelParams;
    fn derivatives(&self, t: f64, d: f64, n: f64) -> Result<ValueDerivatives>;

    fn evaluate(&self, t: f64, d: f64, n: f64, gamma: f64) -> Result<f64> {
        let p = self.params();
        let dv = self.derivatives(t, d, n)?;
        Ok(p.carry_rate(d, gamma) * n - p.lam() * gamma * gamma - p.phi * n * n
            + p.drift_d(d, gamma) * dv.v_d
            + gamma * dv.v_n
            + 0.5 * p.c * p.c * dv.v_dd)
    }

    /// `dH/dgamma = mu n - 2 lam gamma - mu V_d + V_n`.
    fn foc(&self, t: f64, d: f64, n: f64, gamma: f64) -> Result<f64> {
        let p = self.params();
        let dv = self.derivatives(t, d, n)?;
        Ok(p.mu() * n - 2.0 * p.lam() * gamma - p.mu() * dv.v_d + dv.v_n)
    }
}

pub struct IhHamiltonian<'a> {
    pub coefficients: &'a IHCoefficients,
    pub params: &'a ModelParams,
}

impl Hamiltonian for IhHamiltonian<'_> {
    fn params(&self) -> &ModelParams {
        self.params
    }

    fn derivatives(&self, _t: f64, d: f64, n: f64) -> Result<ValueDerivatives> {
        Ok(ih_derivatives(self.coefficients, d, n))
    }
}

pub struct FhHamiltonian<'a> {
    pub path: &'a FHCoefficientPath,
    pub params: &'a ModelParams,
}

impl Hamiltonian for FhHamiltonian<'_> {
    fn params(&self) -> &ModelParams {
        self.params
    }

    fn derivatives(&self, t: f64, d: f64, n: f64) -> Result<ValueDerivatives> {
        Ok(fh_derivatives(&self.path.state_at(t)?, d, n))
    }
}

const FOC_SEARCH_HALF_WIDTH: f64 = 1.0;
const FOC_SEARCH_STEP: f64 = 1e-3;

/// Checks the analytic rate against a brute-force search of the
/// Hamiltonian over `[gamma* - 1, gamma* + 1]` and the first-order
/// condition at `gamma*`.
pub fn foc_optimality<F, H>(
    check_name: &str,
    policy_rate: F,
    hamiltonian: &H,
    sample_points: &[(f64, f64, f64)],
) -> Result<ResidualReport>
where
    F: Fn(f64, f64, f64) -> Result<f64>,
    H: Hamiltonian + ?Sized,
{
    let half = (FOC_SEARCH_HALF_WIDTH / FOC_SEARCH_STEP).round() as i64;
    let (mut worst_foc, mut worst_offset) = (0.0f64, 0.0f64);
    for &(t, d, n) in sample_points {
        let gamma = policy_rate(t, d, n)?;
        worst_foc = worst_foc.max(hamiltonian.foc(t, d, n, gamma)?.abs());
        let mut best = (f64::NEG_INFINITY, 0.0);
        for k in -half..=half {
            let g = gamma + k as f64 * FOC_SEARCH_STEP;
            let h = hamiltonian.evaluate(t, d, n, g)?;
            if h > best.0 {
                best = (h, g);
            }
        }
        worst_offset = worst_offset.max((best.1 - gamma).abs());
    }
    let within_step = worst_offset <= FOC_SEARCH_STEP;
    let mut report = ResidualReport::new(
        check_name,
        worst_foc,
        1e-9,
        format!("{} points, search +-{FOC_SEARCH_HALF_WIDTH} step {FOC_SEARCH_STEP}", sample_points.len()),
        format!("max |argmax - gamma*| = {worst_offset:.1e}"),
    );
    if !within_step {
        // the grid search disagrees: mark failed regardless of the FOC value
        report.max_abs_residual = report.max_abs_residual.max(f64::INFINITY);
        report.passed = false;
    }
    Ok(report)
}

/// Uniform points in the default grid box, reproducible from `seed`.
pub fn sample_states(seed: u64, count: usize) -> Vec<(f64, f64)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (rng.random_range(-0.1..=0.2), rng.random_range(-2.0..=4.0)))
        .collect()
}

/// Gap between the direct linear solve for `alpha3 - mu alpha5` and the
/// closed form `(r + 2 kappa m lam gamma_D) / (rho - gamma_N + mu gamma_D)`.
/// Informational: the HJB residual decides which is right.
pub fn compare_c_formula(solution: &IHSolution, params: &ModelParams) -> ResidualReport {
    let fb = &solution.feedback;
    let denominator = params.rho - fb.gamma_n + params.mu() * fb.gamma_d;
    if denominator.abs() < 1e-14 {
        return ResidualReport::new("c_lin_closed_form", f64::NAN, f64::INFINITY, "solution", "degenerate denominator")
            .informational();
    }
    let closed = (params.r + 2.0 * params.kappa * params.m * params.lam() * fb.gamma_d) / denominator;
    let gap = (fb.c_lin - closed).abs();
    let relative = if fb.c_lin != 0.0 { gap / fb.c_lin.abs() } else { 0.0 };
    ResidualReport::new(
        "c_lin_closed_form",
        gap,
        f64::INFINITY,
        "solution",
        format!("direct={:.10e} closed_form={closed:.10e} relative_gap={relative:.4e}", fb.c_lin),
    )
    .informational()
}

/// Largest relative deviation of `(GN, GD, G0)(t)` from `(gN, gD, g0)` over
/// nodes with `t <= fraction * T`. An empty interval (`fraction <= 0`)
/// gives zeros.
pub fn stationary_deviations(path: &FHCoefficientPath, ih: &IHSolution, fraction: f64) -> [f64; 3] {
    let mut worst = [0.0f64; 3];
    if fraction <= 0.0 {
        return worst;
    }
    let cutoff = fraction * path.horizon;
    let targets = [ih.feedback.gamma_n, ih.feedback.gamma_d, ih.feedback.gamma_0];
    for i in (0..path.len()).take_while(|&i| path.grid[i] <= cutoff) {
        let values = [path.gamma_n[i], path.gamma_d[i], path.gamma_0[i]];
        for k in 0..3 {
            worst[k] = worst[k].max((values[k] - targets[k]).abs() / targets[k].abs());
        }
    }
    worst
}

pub fn convergence_to_stationary(path: &FHCoefficientPath, ih: &IHSolution, fraction: f64) -> ResidualReport {
    let dev = stationary_deviations(path, ih, fraction);
    ResidualReport::new(
        "fh_convergence_to_stationary",
        dev.iter().copied().fold(0.0, f64::max),
        0.10,
        format!("t in [0, {fraction} T], T={}", path.horizon),
        format!("relative deviation GN={:.4e} GD={:.4e} G0={:.4e}", dev[0], dev[1], dev[2]),
    )
}

/// Per-gain convergence reports.
pub fn convergence_by_gain(path: &FHCoefficientPath, ih: &IHSolution, fraction: f64) -> [ResidualReport; 3] {
    let dev = stationary_deviations(path, ih, fraction);
    let spec = format!("t in [0, {fraction} T], T={}", path.horizon);
    let names = ["gamma_n", "gamma_d", "gamma_0"];
    std::array::from_fn(|k| {
        ResidualReport::new(
            format!("fh_convergence_{}", names[k]),
            dev[k],
            0.10,
            spec.clone(),
            "max relative deviation from the stationary gain",
        )
    })
}

/// `GN` strictly decreasing on the last `fraction` of the horizon.
pub fn liquidation_urgency(path: &FHCoefficientPath, fraction: f64) -> ResidualReport {
    let start = (1.0 - fraction) * path.horizon;
    let increases = (1..path.len())
        .filter(|&i| path.grid[i - 1] >= start && !(path.gamma_n[i] < path.gamma_n[i - 1]))
        .count();
    ResidualReport::new(
        "fh_liquidation_urgency",
        increases as f64,
        0.0,
        format!("t in [{start}, {}]", path.horizon),
        format!("GN(T)={:.6}; counts non-decreasing steps", path.gamma_n[path.len() - 1]),
    )
}

/// Monte-Carlo evidence that the FH feedback attains the value function.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McValueStudy {
    pub value: f64,
    pub optimal: McEstimate,
    pub scaled: Vec<(f64, McEstimate)>,
}

pub const DOMINANCE_SCALES: [f64; 4] = [0.5, 0.8, 1.2, 1.5];

impl McValueStudy {
    pub fn run(params: &ModelParams, path: &Arc<FHCoefficientPath>, config: &SimConfig) -> Result<Self> {
        let value = crate::fh_solver::value_fh(path, 0.0, params.d0, params.n0)?;
        let base = Policy::FiniteHorizon(Arc::clone(path));
        let optimal = mc_objective(params, &base, config, HorizonKind::Finite)?;
        let scaled = DOMINANCE_SCALES
            .iter()
            .map(|&s| {
                mc_objective(params, &base.clone().scaled(s), config, HorizonKind::Finite).map(|e| (s, e))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { value, optimal, scaled })
    }

    /// Worst ratio of each gap to its `3 SE` allowance; at most 1 passes.
    pub fn report(&self) -> ResidualReport {
        let ratio = |gap: f64, allowance: f64| {
            if allowance > 0.0 {
                gap / allowance
            } else if gap <= 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        };
        let value_gap = (self.optimal.estimate - self.value).abs();
        let mut worst = ratio(value_gap, 3.0 * self.optimal.std_error);
        let mut notes = format!(
            "MC={:.6e} SE={:.2e} V={:.6e}",
            self.optimal.estimate, self.optimal.std_error, self.value
        );
        for (s, est) in &self.scaled {
            let excess = est.estimate - self.optimal.estimate;
            worst = worst.max(ratio(excess, 3.0 * est.combined_std_error(&self.optimal)));
            notes.push_str(&format!("; x{s}={:.6e}", est.estimate));
        }
        ResidualReport::new(
            "mc_value_consistency",
            worst,
            1.0,
            format!("{} paths", self.optimal.n_paths),
            notes + "; residual is gap / (3 SE)",
        )
    }
}

pub fn mc_value_consistency(
    params: &ModelParams,
    path: &Arc<FHCoefficientPath>,
    config: &SimConfig,
) -> Result<ResidualReport> {
    Ok(McValueStudy::run(params, path, config)?.report())
}

/// Printed formula against its certified counterpart.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerEntry {
    pub formula: String,
    pub printed_value_or_profile: String,
    pub certified_value: String,
    pub gap: f64,
}

pub mod ledger_keys {
    pub const C_LIN_CLOSED_FORM: &str = "c_lin_closed_form";
    pub const B_MU0_EXPONENTIAL: &str = "b_mu0_exponential";
    pub const A_MU0_TANH_PROFILE: &str = "a_mu0_tanh_profile";
    pub const A_MU0_TANH_AT_EXPIRY: &str = "a_mu0_tanh_at_expiry";
    pub const CC_SCALAR_INTEGRAL: &str = "cc_scalar_integral";
    pub const CC_SCALAR_INTEGRAL_ALT_SIGN: &str = "cc_scalar_integral_alt_sign";
    pub const D2_BALANCE_WITH_KAPPA_STAR: &str = "d2_balance_with_kappa_star";
    pub const N_BALANCE_WITHOUT_MEAN_TERM: &str = "n_balance_without_mean_term";
    pub const E_ODE_WITH_DIFFUSION_TERM: &str = "e_ode_with_diffusion_term";
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

/// Minus root of `mu^2 a^2 - (lam k + mu a2) a + a2^2 / 4 = 0`.
fn alpha4_with_rate(alpha2: f64, rate: f64, params: &ModelParams) -> f64 {
    let b = params.lam() * rate + params.mu() * alpha2;
    let disc = b * b - params.mu() * params.mu() * alpha2 * alpha2;
    alpha2 * alpha2 / (2.0 * (b + disc.max(0.0).sqrt()))
}

/// Discrepancy probes of published closed forms and balances against the
/// certified solutions. `fh_path` is the solution for `params`.
pub fn discrepancy_ledger(
    params: &ModelParams,
    ih: &IHSolution,
    fh_path: &FHCoefficientPath,
) -> Result<Vec<LedgerEntry>> {
    use ledger_keys::*;
    let mut entries = Vec::new();

    let c_report = compare_c_formula(ih, params);
    entries.push(LedgerEntry {
        formula: C_LIN_CLOSED_FORM.into(),
        printed_value_or_profile: fmt(ih.c_closed_form),
        certified_value: fmt(ih.feedback.c_lin),
        gap: c_report.max_abs_residual,
    });

    // tanh form for A against the integrated A with mu switched off
    let p0 = params.without_permanent_impact();
    let path0 = integrate_backward(&p0, fh_path.step_count)?;
    let profile_gap = (0..path0.len())
        .map(|i| Ok((closed_form_a_mu0_tanh(path0.grid[i], &p0)? - path0.a[i]).abs()))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let printed_t0 = closed_form_a_mu0_tanh(0.0, &p0)?;
    entries.push(LedgerEntry {
        formula: A_MU0_TANH_PROFILE.into(),
        printed_value_or_profile: format!("A(0)={}", fmt(printed_t0)),
        certified_value: format!("A(0)={}", fmt(path0.a[0])),
        gap: profile_gap,
    });
    let (mut b_gap, mut b_at) = (0.0f64, 0usize);
    for i in 0..path0.len() {
        let g = (closed_form_b_mu0(path0.grid[i], &p0)? - path0.b[i]).abs();
        if g > b_gap {
            (b_gap, b_at) = (g, i);
        }
    }
    entries.push(LedgerEntry {
        formula: B_MU0_EXPONENTIAL.into(),
        printed_value_or_profile: format!(
            "B({})={}",
            path0.grid[b_at],
            fmt(closed_form_b_mu0(path0.grid[b_at], &p0)?)
        ),
        certified_value: format!("B({})={}", path0.grid[b_at], fmt(path0.b[b_at])),
        gap: b_gap,
    });
    let horizon = p0.horizon()?;
    let printed_t = closed_form_a_mu0_tanh(horizon, &p0)?;
    let certified_t = -0.5 * p0.lam_t()?;
    entries.push(LedgerEntry {
        formula: A_MU0_TANH_AT_EXPIRY.into(),
        printed_value_or_profile: fmt(printed_t),
        certified_value: fmt(certified_t),
        gap: (printed_t - certified_t).abs(),
    });

    let cc_ode = fh_path.cc()[0];
    for (key, forcing) in [
        (CC_SCALAR_INTEGRAL, ReductionForcing::Printed),
        (CC_SCALAR_INTEGRAL_ALT_SIGN, ReductionForcing::Appendix),
    ] {
        let profile = cc_integral_profile(params, fh_path, forcing);
        let gap = profile.iter().map(|p| p.gap.abs()).fold(0.0, f64::max);
        entries.push(LedgerEntry {
            formula: key.into(),
            printed_value_or_profile: format!("Cc(0)={}", fmt(profile[0].cc_integral)),
            certified_value: format!("Cc(0)={}", fmt(cc_ode)),
            gap,
        });
    }

    let a = &ih.coefficients;
    let printed_a4 = alpha4_with_rate(a.alpha2, params.kappa_star(), params);
    entries.push(LedgerEntry {
        formula: D2_BALANCE_WITH_KAPPA_STAR.into(),
        printed_value_or_profile: format!("alpha4={}", fmt(printed_a4)),
        certified_value: format!("alpha4={}", fmt(a.alpha4)),
        gap: (printed_a4 - a.alpha4).abs(),
    });

    let km = params.kappa * params.m;
    let printed_rhs = params.r + km * a.alpha2;
    let certified_rhs = params.r - km + km * a.alpha2;
    entries.push(LedgerEntry {
        formula: N_BALANCE_WITHOUT_MEAN_TERM.into(),
        printed_value_or_profile: format!("rhs={}", fmt(printed_rhs)),
        certified_value: format!("rhs={}", fmt(certified_rhs)),
        gap: (printed_rhs - certified_rhs).abs(),
    });

    // extra -c^2 E in E' evaluated along the certified path
    let c2 = params.c * params.c;
    let (mut gap, mut at) = (0.0f64, 0usize);
    for i in 0..fh_path.len() {
        let g = c2 * fh_path.e[i].abs();
        if g > gap {
            (gap, at) = (g, i);
        }
    }
    let certified_rate = coefficient_rhs(&fh_path.state_at_node(at), params)[3];
    entries.push(LedgerEntry {
        formula: E_ODE_WITH_DIFFUSION_TERM.into(),
        printed_value_or_profile: format!("E'={} at t={}", fmt(certified_rate - c2 * fh_path.e[at]), fh_path.grid[at]),
        certified_value: format!("E'={}", fmt(certified_rate)),
        gap,
    });

    Ok(entries)
}

/// Inputs to [`run_battery`].
#[derive(Debug, Clone)]
pub struct BatteryOptions {
    /// Steps for the finite-horizon certificate.
    pub fh_steps: usize,
    /// Horizon used for the convergence-to-stationarity check.
    pub convergence_horizon: f64,
    pub sim: SimConfig,
    pub run_monte_carlo: bool,
    pub foc_samples: usize,
    pub sample_seed: u64,
    pub tolerance_overrides: BTreeMap<String, f64>,
}

impl Default for BatteryOptions {
    fn default() -> Self {
        Self {
            fh_steps: 2000,
            convergence_horizon: 3.0,
            sim: SimConfig::default(),
            run_monte_carlo: true,
            foc_samples: 100,
            sample_seed: 7,
            tolerance_overrides: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatteryOutcome {
    pub reports: Vec<ResidualReport>,
    pub ledger: Vec<LedgerEntry>,
}

impl BatteryOutcome {
    pub fn all_asserted_pass(&self) -> bool {
        self.reports.iter().all(ResidualReport::acceptable)
    }
}

/// Runs every check on `params` (which must carry `lamT` and `T`).
///
/// The gamma_0 part of convergence-to-stationarity is informational:
/// `G0` relaxes through the slow closed-loop mode and is still well short
/// of `g0` at `T/2` for a three-unit horizon.
pub fn run_battery(params: &ModelParams, ih: &IHSolution, options: &BatteryOptions) -> Result<BatteryOutcome> {
    if params.lam_t.is_none() {
        return Err(Error::MissingField("lamT"));
    }
    let grid = StateGrid::default();
    let mut reports = vec![hjb_residual_ih(&ih.coefficients, params, &grid)];
    reports.extend(ih_coefficient_residuals(ih, params));
    reports.push(ih_structure(ih));
    reports.push(gamma_n_sign(ih));
    reports.push(compare_c_formula(ih, params));

    let path = Arc::new(integrate_backward(params, options.fh_steps)?);
    reports.push(fh_terminal_residual(&path, params, &grid)?);
    reports.push(hjb_residual_fh(&path, params, &grid));
    reports.push(fh_residual_order(params, options.fh_steps / 2, &grid)?);
    reports.push(fh_refinement(params, options.fh_steps / 2)?);
    reports.extend(fh_mu0_oracles(params, options.fh_steps)?);

    let ih_points: Vec<(f64, f64, f64)> = sample_states(options.sample_seed, options.foc_samples)
        .into_iter()
        .map(|(d, n)| (0.0, d, n))
        .collect();
    let ih_h = IhHamiltonian { coefficients: &ih.coefficients, params };
    reports.push(foc_optimality("ih_foc_optimality", |_, d, n| Ok(ih.rate(d, n)), &ih_h, &ih_points)?);
    let horizon = path.horizon;
    let fh_points: Vec<(f64, f64, f64)> = [0.0, 0.5 * horizon, horizon]
        .iter()
        .flat_map(|&t| sample_states(options.sample_seed + 1, 10).into_iter().map(move |(d, n)| (t, d, n)))
        .collect();
    let fh_h = FhHamiltonian { path: &path, params };
    reports.push(foc_optimality(
        "fh_foc_optimality",
        |t, d, n| Ok(feedback_at(&path, t)?.rate(d, n)),
        &fh_h,
        &fh_points,
    )?);

    let long = ModelParams { horizon: Some(options.convergence_horizon), ..*params };
    let long_steps = (options.fh_steps as f64 * options.convergence_horizon / horizon).round() as usize;
    let long_path = integrate_backward(&long, long_steps.max(10))?;
    let [gn, gd, g0] = convergence_by_gain(&long_path, ih, 0.5);
    reports.push(gn);
    reports.push(gd);
    reports.push(g0.informational());
    reports.push(liquidation_urgency(&long_path, 0.1));

    if options.run_monte_carlo {
        let sim_path = if options.sim.steps == path.step_count {
            Arc::clone(&path)
        } else {
            Arc::new(integrate_backward(params, options.sim.steps)?)
        };
        reports.push(mc_value_consistency(params, &sim_path, &options.sim)?);
    }

    let reports = reports
        .into_iter()
        .map(|r| match options.tolerance_overrides.get(&r.check_name) {
            Some(&tol) => r.with_tolerance(tol),
            None => r,
        })
        .collect();
    let ledger = discrepancy_ledger(params, ih, &path)?;
    Ok(BatteryOutcome { reports, ledger })
}
