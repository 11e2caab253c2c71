//! Model constants, admissibility checks and the controlled state dynamics.
//!
//! The state is the basis `D` (perpetual minus spot), the hedged position
//! `N` and the net wealth `X`. The control is the trading rate `gamma`:
//!
//! ```text
//! dD = [-kappa (D - m) - mu gamma] dt + c dW
//! dN = gamma dt
//! dX = [((q + kappa) D - kappa m + r + mu gamma) N - lam gamma^2] dt - c N dW
//! ```
//!
//! Only the aggregates `mu = mu1 + mu2` and `lam = lam1 + lam2` enter the
//! control problem; the per-leg split is kept for P&L attribution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Discount rate.
    pub rho: f64,
    /// Basis mean-reversion speed.
    pub kappa: f64,
    /// Long-run basis level.
    pub m: f64,
    /// Permanent impact, spot leg.
    pub mu1: f64,
    /// Permanent impact, perpetual leg.
    pub mu2: f64,
    /// Temporary impact, spot leg.
    pub lam1: f64,
    /// Temporary impact, perpetual leg.
    pub lam2: f64,
    /// Staking yield per unit position.
    pub r: f64,
    /// Funding sensitivity to the basis.
    pub q: f64,
    /// Basis volatility.
    pub c: f64,
    /// Inventory penalty weight.
    pub phi: f64,
    /// Terminal liquidation-cost coefficient (finite horizon only).
    #[serde(rename = "lamT", alias = "lam_t", default, skip_serializing_if = "Option::is_none")]
    pub lam_t: Option<f64>,
    /// Horizon length (finite horizon only).
    #[serde(rename = "T", alias = "horizon", default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    pub d0: f64,
    pub n0: f64,
    pub x0: f64,
}

impl ModelParams {
    /// The reference parameter set used throughout the figures: aggregate
    /// impacts `mu = 0.3`, `lam = 0.1` split evenly across the two legs.
    pub fn reference() -> Self {
        Self {
            rho: 0.05,
            kappa: 2.0,
            m: 0.04,
            mu1: 0.15,
            mu2: 0.15,
            lam1: 0.05,
            lam2: 0.05,
            r: 0.04,
            q: 4.0,
            c: 0.1,
            phi: 0.5,
            lam_t: Some(4.0),
            horizon: Some(1.0),
            d0: 0.04,
            n0: 0.0,
            x0: 0.0,
        }
    }

    /// Aggregate permanent impact.
    pub fn mu(&self) -> f64 {
        self.mu1 + self.mu2
    }

    /// Aggregate temporary impact.
    pub fn lam(&self) -> f64 {
        self.lam1 + self.lam2
    }

    /// Stability margin `rho + 2 kappa - c^2`.
    pub fn kappa_star(&self) -> f64 {
        self.rho + 2.0 * self.kappa - self.c * self.c
    }

    /// Rate multiplying the `d^2` coefficient in the stationary HJB balance,
    /// `rho + 2 kappa`. The diffusion term `c^2/2 * V_dd` is constant in the
    /// state for a quadratic value function, so it does not enter here.
    pub fn d2_rate(&self) -> f64 {
        self.rho + 2.0 * self.kappa
    }

    pub fn lam_t(&self) -> Result<f64> {
        self.lam_t.ok_or(Error::MissingField("lamT"))
    }

    pub fn horizon(&self) -> Result<f64> {
        self.horizon.ok_or(Error::MissingField("T"))
    }

    /// Copy with the permanent impact switched off on both legs.
    pub fn without_permanent_impact(&self) -> Self {
        Self { mu1: 0.0, mu2: 0.0, ..*self }
    }

    pub fn drift_d(&self, d: f64, gamma: f64) -> f64 {
        -self.kappa * (d - self.m) - self.mu() * gamma
    }

    pub fn drift_x(&self, d: f64, n: f64, gamma: f64) -> f64 {
        self.carry_rate(d, gamma) * n - self.lam() * gamma * gamma
    }

    /// Per-unit running gain `(q + kappa) d - kappa m + r + mu gamma`.
    pub fn carry_rate(&self, d: f64, gamma: f64) -> f64 {
        (self.q + self.kappa) * d - self.kappa * self.m + self.r + self.mu() * gamma
    }

    pub fn diffusion_d(&self) -> f64 {
        self.c
    }

    pub fn diffusion_x(&self, n: f64) -> f64 {
        -self.c * n
    }

    /// Splits the impact gains and slippage of trading at `gamma` with
    /// position `n` between the spot and perpetual legs.
    pub fn leg_attribution(&self, n: f64, gamma: f64) -> LegAttribution {
        LegAttribution {
            spot_impact_gain: self.mu1 * gamma * n,
            perp_impact_gain: self.mu2 * gamma * n,
            spot_slippage: self.lam1 * gamma * gamma,
            perp_slippage: self.lam2 * gamma * gamma,
        }
    }
}

pub fn drift_n(gamma: f64) -> f64 {
    gamma
}

/// Instantaneous P&L rates by leg.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LegAttribution {
    pub spot_impact_gain: f64,
    pub perp_impact_gain: f64,
    pub spot_slippage: f64,
    pub perp_slippage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub constraint: String,
    pub observed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub kappa_star: f64,
    /// Constraints whose failure makes the control problem ill-posed.
    pub violations: Vec<Violation>,
    /// Sign hypotheses of the economic model (`m, r, q, c > 0`, `rho > 0`)
    /// that the solution formulas do not need. Reported, never gating.
    pub advisories: Vec<Violation>,
}

impl ValidationReport {
    pub fn into_result(self) -> Result<Self> {
        if self.passed {
            Ok(self)
        } else {
            let list: Vec<String> = self
                .violations
                .iter()
                .map(|v| format!("{} (observed {})", v.constraint, v.observed))
                .collect();
            Err(Error::InvalidParams(list.join(", ")))
        }
    }
}

pub fn validate(params: &ModelParams) -> ValidationReport {
    let mut violations = Vec::new();
    let mut advisories = Vec::new();
    let mut check = |ok: bool, name: &str, observed: f64, hard: bool| {
        if !ok {
            let v = Violation { constraint: name.to_string(), observed };
            if hard {
                violations.push(v);
            } else {
                advisories.push(v);
            }
        }
    };

    let p = params;
    let fields = [
        ("rho", p.rho),
        ("kappa", p.kappa),
        ("m", p.m),
        ("mu1", p.mu1),
        ("mu2", p.mu2),
        ("lam1", p.lam1),
        ("lam2", p.lam2),
        ("r", p.r),
        ("q", p.q),
        ("c", p.c),
        ("phi", p.phi),
        ("d0", p.d0),
        ("n0", p.n0),
        ("x0", p.x0),
    ];
    for (name, value) in fields {
        check(value.is_finite(), &format!("{name} finite"), value, true);
    }

    check(p.rho >= 0.0, "rho>=0", p.rho, true);
    check(p.kappa > 0.0, "kappa>0", p.kappa, true);
    check(p.mu1 >= 0.0, "mu1>=0", p.mu1, true);
    check(p.mu2 >= 0.0, "mu2>=0", p.mu2, true);
    check(p.lam1 >= 0.0, "lam1>=0", p.lam1, true);
    check(p.lam2 >= 0.0, "lam2>=0", p.lam2, true);
    check(p.lam() > 0.0, "lam>0", p.lam(), true);
    check(p.phi > 0.0, "phi>0", p.phi, true);
    check(p.c >= 0.0, "c>=0", p.c, true);
    let kappa_star = p.kappa_star();
    check(kappa_star > 0.0, "kappa_star>0", kappa_star, true);
    if let Some(lam_t) = p.lam_t {
        check(lam_t.is_finite() && lam_t > 0.0, "lamT>0", lam_t, true);
    }
    if let Some(horizon) = p.horizon {
        check(horizon.is_finite() && horizon > 0.0, "T>0", horizon, true);
    }

    check(p.rho > 0.0, "rho>0 (infinite horizon)", p.rho, false);
    check(p.m > 0.0, "m>0", p.m, false);
    check(p.r > 0.0, "r>0", p.r, false);
    check(p.q > 0.0, "q>0", p.q, false);
    check(p.c > 0.0, "c>0", p.c, false);

    ValidationReport {
        passed: violations.is_empty(),
        kappa_star,
        violations,
        advisories,
    }
}

/// Inventory penalty equivalent to a mean-variance objective with risk
/// aversion `eta`: `phi = c^2 eta / 2`.
pub fn phi_from_risk_aversion(c: f64, eta: f64) -> Result<f64> {
    if !(c > 0.0) || !(eta > 0.0) {
        return Err(Error::InvalidInput(format!(
            "c and eta must be positive (c={c}, eta={eta})"
        )));
    }
    Ok(0.5 * c * c * eta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_params_validate() {
        let report = validate(&ModelParams::reference());
        assert!(report.passed, "{report:?}");
        assert!(report.advisories.is_empty());
        assert!((report.kappa_star - 4.04).abs() < 1e-15);
        assert_eq!(ModelParams::reference().mu(), 0.3);
        assert_eq!(ModelParams::reference().lam(), 0.1);
    }

    #[test]
    fn zero_kappa_is_a_violation() {
        let p = ModelParams { kappa: 0.0, ..ModelParams::reference() };
        let report = validate(&p);
        assert!(!report.passed);
        assert!(report.violations.iter().any(|v| v.constraint == "kappa>0"));
    }

    #[test]
    fn kappa_star_boundary_is_a_violation() {
        // c^2 = rho + 2 kappa exactly: rho = 0.25, kappa = 0.375, c = 1
        let p = ModelParams { rho: 0.25, kappa: 0.375, c: 1.0, ..ModelParams::reference() };
        let report = validate(&p);
        assert_eq!(report.kappa_star, 0.0);
        assert!(report.violations.iter().any(|v| v.constraint == "kappa_star>0"));
    }

    #[test]
    fn degenerate_economics_are_advisories() {
        let p = ModelParams { r: 0.0, m: 0.0, c: 0.0, ..ModelParams::reference() };
        let report = validate(&p);
        assert!(report.passed);
        assert_eq!(report.advisories.len(), 3);
        assert!(report.clone().into_result().is_ok());
    }

    #[test]
    fn validate_is_idempotent() {
        let p = ModelParams { kappa: -1.0, ..ModelParams::reference() };
        assert_eq!(validate(&p), validate(&p));
        assert!(validate(&p).into_result().is_err());
    }

    #[test]
    fn phi_from_risk_aversion_examples() {
        assert!((phi_from_risk_aversion(0.1, 100.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(phi_from_risk_aversion(1.0, 2.0).unwrap(), 1.0);
        assert!(phi_from_risk_aversion(0.1, 0.0).is_err());
        assert!(phi_from_risk_aversion(-0.1, 1.0).is_err());
    }

    #[test]
    fn drift_examples() {
        let p = ModelParams::reference();
        assert_eq!(p.drift_d(p.m, 0.0), 0.0);
        assert!((p.drift_x(p.m, 1.0, 0.0) - 0.20).abs() < 1e-15);
        for gamma in [-3.0, -0.5, 0.0, 0.7, 2.0] {
            assert_eq!(p.drift_x(0.03, 0.0, gamma), -p.lam() * gamma * gamma);
        }
        assert_eq!(drift_n(1.25), 1.25);
        assert_eq!(p.diffusion_d(), 0.1);
        assert_eq!(p.diffusion_x(2.0), -0.2);
    }

    #[test]
    fn drift_d_is_affine_with_expected_slopes() {
        let p = ModelParams::reference();
        let base = p.drift_d(0.01, 0.2);
        assert!((p.drift_d(0.02, 0.2) - base - (-p.kappa * 0.01)).abs() < 1e-15);
        assert!((p.drift_d(0.01, 0.3) - base - (-p.mu() * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn wealth_drift_maximised_at_mu_n_over_two_lam() {
        let p = ModelParams::reference();
        let (d, n) = (0.05, 1.7);
        let argmax = p.mu() * n / (2.0 * p.lam());
        let best = p.drift_x(d, n, argmax);
        for delta in [-1e-2, -1e-4, 1e-4, 1e-2] {
            assert!(p.drift_x(d, n, argmax + delta) < best);
        }
    }

    #[test]
    fn leg_attribution_sums_to_aggregates() {
        let p = ModelParams { mu1: 0.1, mu2: 0.2, lam1: 0.03, lam2: 0.07, ..ModelParams::reference() };
        let a = p.leg_attribution(2.0, 0.5);
        assert!((a.spot_impact_gain + a.perp_impact_gain - p.mu() * 0.5 * 2.0).abs() < 1e-15);
        assert!((a.spot_slippage + a.perp_slippage - p.lam() * 0.25).abs() < 1e-15);
    }

    #[test]
    fn json_field_names() {
        let json = r#"{"rho":0.05,"kappa":2.0,"m":0.04,"mu1":0.15,"mu2":0.15,
            "lam1":0.05,"lam2":0.05,"r":0.04,"q":4.0,"c":0.1,"phi":0.5,
            "lamT":4.0,"T":1.0,"d0":0.04,"n0":0.0,"x0":0.0}"#;
        let p: ModelParams = serde_json::from_str(json).unwrap();
        assert_eq!(p, ModelParams::reference());

        let no_fh = json.replace(r#""lamT":4.0,"T":1.0,"#, "");
        let p: ModelParams = serde_json::from_str(&no_fh).unwrap();
        assert!(p.lam_t().is_err() && p.horizon().is_err());

        let unknown = json.replace(r#""x0":0.0"#, r#""x0":0.0,"sigma":1"#);
        assert!(serde_json::from_str::<ModelParams>(&unknown).is_err());
    }
}
