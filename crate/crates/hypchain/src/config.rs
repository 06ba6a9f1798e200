//! Physical configuration of the three-subsystem chain and the structural
//! checks that gate the rest of the pipeline.
//!
//! The chain consists of subsystems `i = 1, 2, 3` on `x ∈ [0, 1]`:
//!
//! ```text
//! ∂t u_i + λ_i ∂x u_i = σ_i⁺(x) v_i
//! ∂t v_i − μ_i ∂x v_i = σ_i⁻(x) u_i
//! u_i(t,0) = q_ii v_i(t,0) + q_{i,i-1} u_{i-1}(t,1)
//! v_i(t,1) = 1_{i=1} U(t) + ρ_ii u_i(t,1) + ρ_{i,i+1} v_{i+1}(t,0)
//! ```
//!
//! with `q_10 = ρ_34 = 0`. The control `U` enters at the right end of the
//! first subsystem.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Artificial-delay slack: when the input delay does not exceed the longest
/// state delay the control is delayed so that it strictly does.
pub const EPS_PAD: f64 = 1e-6;

/// Closed-form or sampled description of an in-domain coupling function.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaToken {
    Constant { value: f64 },
    /// Polynomial in `x` with `coeffs[k]` multiplying `x^k`.
    Poly { coeffs: Vec<f64> },
    Samples { values: Vec<f64> },
}

/// An in-domain coupling `σ(x)` on `[0, 1]`: the defining token plus samples
/// on the uniform node grid used by the kernel solver.
#[derive(Debug, Clone)]
pub struct SigmaProfile {
    token: SigmaToken,
    samples: Vec<f64>,
}

impl SigmaProfile {
    pub fn from_token(token: SigmaToken, n: usize) -> Result<Self> {
        let samples = match &token {
            SigmaToken::Constant { value } => vec![*value; n + 1],
            SigmaToken::Poly { coeffs } => (0..=n)
                .map(|i| {
                    let x = i as f64 / n as f64;
                    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
                })
                .collect(),
            SigmaToken::Samples { values } => {
                if values.len() < 2 {
                    return Err(Error::Validation(
                        "sigma sample arrays need at least 2 nodes".into(),
                    ));
                }
                // Resample onto the solver grid.
                let m = values.len() - 1;
                (0..=n)
                    .map(|i| {
                        let pos = i as f64 / n as f64 * m as f64;
                        let j = (pos.floor() as usize).min(m - 1);
                        let t = pos - j as f64;
                        values[j] * (1.0 - t) + values[j + 1] * t
                    })
                    .collect()
            }
        };
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("sigma samples must be finite".into()));
        }
        Ok(Self { token, samples })
    }

    pub fn zero(n: usize) -> Self {
        Self {
            token: SigmaToken::Constant { value: 0.0 },
            samples: vec![0.0; n + 1],
        }
    }

    /// Evaluate at `x ∈ [0, 1]`; closed-form tokens are evaluated exactly,
    /// sampled ones by linear interpolation.
    pub fn eval(&self, x: f64) -> f64 {
        match &self.token {
            SigmaToken::Constant { value } => *value,
            SigmaToken::Poly { coeffs } => coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c),
            SigmaToken::Samples { .. } => {
                let n = self.samples.len() - 1;
                let pos = (x.clamp(0.0, 1.0)) * n as f64;
                let j = (pos.floor() as usize).min(n - 1);
                let t = pos - j as f64;
                self.samples[j] * (1.0 - t) + self.samples[j + 1] * t
            }
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn token(&self) -> &SigmaToken {
        &self.token
    }

    pub fn is_zero(&self) -> bool {
        self.samples.iter().all(|v| *v == 0.0)
    }
}

/// Tolerance knobs shared across the pipeline.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum ToleranceProfile {
    Fast,
    Strict,
}

impl ToleranceProfile {
    pub fn tol_kernel(self) -> f64 {
        match self {
            ToleranceProfile::Fast => 1e-9,
            ToleranceProfile::Strict => 1e-10,
        }
    }
    pub fn max_picard(self) -> usize {
        200
    }
    pub fn cond_max(self) -> f64 {
        1e10
    }
    pub fn clip_tol(self) -> f64 {
        1e-9
    }
    /// Nodes per unit length when sampling 1D delay kernels and gains.
    pub fn segment_density(self) -> f64 {
        match self {
            ToleranceProfile::Fast => 16.0,
            ToleranceProfile::Strict => 32.0,
        }
    }
}

/// Token for initial PDE data, one entry per state component.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialToken {
    Constant { value: f64 },
    Poly { coeffs: Vec<f64> },
    /// `amplitude * sin(pi * harmonics * x)`
    Sine { amplitude: f64, harmonics: f64 },
}

impl InitialToken {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            InitialToken::Constant { value } => *value,
            InitialToken::Poly { coeffs } => coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c),
            InitialToken::Sine {
                amplitude,
                harmonics,
            } => amplitude * (std::f64::consts::PI * harmonics * x).sin(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVelocities {
    lambda: [f64; 3],
    mu: [f64; 3],
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSigma {
    s1_plus: SigmaToken,
    s1_minus: SigmaToken,
    s2_plus: SigmaToken,
    s2_minus: SigmaToken,
    s3_plus: SigmaToken,
    s3_minus: SigmaToken,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBoundaryQ {
    q11: f64,
    q21: f64,
    q22: f64,
    q32: f64,
    q33: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBoundaryRho {
    rho11: f64,
    rho12: f64,
    rho22: f64,
    rho23: f64,
    rho33: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNumerics {
    resolution: usize,
    #[serde(default = "default_profile")]
    tolerance_profile: ToleranceProfile,
}

fn default_profile() -> ToleranceProfile {
    ToleranceProfile::Strict
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInitial {
    u1: InitialToken,
    v1: InitialToken,
    u2: InitialToken,
    v2: InitialToken,
    u3: InitialToken,
    v3: InitialToken,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    velocities: RawVelocities,
    sigma: RawSigma,
    boundary_q: RawBoundaryQ,
    boundary_rho: RawBoundaryRho,
    numerics: RawNumerics,
    initial: Option<RawInitial>,
}

/// Validated physical configuration.
#[derive(Debug, Clone)]
pub struct SystemConfig {
    pub lambda: [f64; 3],
    pub mu: [f64; 3],
    pub sigma_plus: [SigmaProfile; 3],
    pub sigma_minus: [SigmaProfile; 3],
    pub q11: f64,
    pub q21: f64,
    pub q22: f64,
    pub q32: f64,
    pub q33: f64,
    pub rho11: f64,
    pub rho12: f64,
    pub rho22: f64,
    pub rho23: f64,
    pub rho33: f64,
    pub resolution: usize,
    pub profile: ToleranceProfile,
    pub initial: [InitialToken; 6],
    canonical: String,
}

impl SystemConfig {
    /// Parse and validate a TOML config document. Unknown keys are errors.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        Self::from_raw(raw, text)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    fn from_raw(raw: RawConfig, text: &str) -> Result<Self> {
        for (name, v) in [
            ("lambda[1]", raw.velocities.lambda[0]),
            ("lambda[2]", raw.velocities.lambda[1]),
            ("lambda[3]", raw.velocities.lambda[2]),
            ("mu[1]", raw.velocities.mu[0]),
            ("mu[2]", raw.velocities.mu[1]),
            ("mu[3]", raw.velocities.mu[2]),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Validation(format!(
                    "{name} = {v} must be a positive real transport speed"
                )));
            }
        }
        if raw.boundary_q.q21 == 0.0 || raw.boundary_q.q32 == 0.0 {
            return Err(Error::Validation(
                "q21 and q32 must be non-zero so the input reaches the downstream \
                 subsystems (Assumption 2)"
                    .into(),
            ));
        }
        if raw.boundary_q.q11 == 0.0 {
            return Err(Error::Validation(
                "q11 must be non-zero so the control acts through the boundary \
                 couplings (Assumption 3)"
                    .into(),
            ));
        }
        let n = raw.numerics.resolution;
        if n < 8 {
            return Err(Error::Validation(format!(
                "numerics.resolution = {n} is below the minimum of 8"
            )));
        }
        let sp = |t: &SigmaToken| SigmaProfile::from_token(t.clone(), n);
        let cfg = SystemConfig {
            lambda: raw.velocities.lambda,
            mu: raw.velocities.mu,
            sigma_plus: [
                sp(&raw.sigma.s1_plus)?,
                sp(&raw.sigma.s2_plus)?,
                sp(&raw.sigma.s3_plus)?,
            ],
            sigma_minus: [
                sp(&raw.sigma.s1_minus)?,
                sp(&raw.sigma.s2_minus)?,
                sp(&raw.sigma.s3_minus)?,
            ],
            q11: raw.boundary_q.q11,
            q21: raw.boundary_q.q21,
            q22: raw.boundary_q.q22,
            q32: raw.boundary_q.q32,
            q33: raw.boundary_q.q33,
            rho11: raw.boundary_rho.rho11,
            rho12: raw.boundary_rho.rho12,
            rho22: raw.boundary_rho.rho22,
            rho23: raw.boundary_rho.rho23,
            rho33: raw.boundary_rho.rho33,
            resolution: n,
            profile: raw.numerics.tolerance_profile,
            initial: match raw.initial {
                Some(init) => [init.u1, init.v1, init.u2, init.v2, init.u3, init.v3],
                None => std::array::from_fn(|_| InitialToken::Sine {
                    amplitude: 1.0,
                    harmonics: 1.0,
                }),
            },
            canonical: text.trim().to_string(),
        };
        Ok(cfg)
    }

    pub fn all_sigma_zero(&self) -> bool {
        self.sigma_plus.iter().all(|s| s.is_zero()) && self.sigma_minus.iter().all(|s| s.is_zero())
    }

    /// SHA-256 of the canonical config text, used as the cache key prefix.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.canonical.as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Transport times of the chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransportTimes {
    /// `τ_i = 1/λ_i + 1/μ_i`
    pub tau: [f64; 3],
    /// Input delay `τ_1 + 1/λ_2`.
    pub tau_u: f64,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl TransportTimes {
    pub fn swapped(&self) -> bool {
        self.tau[1] > self.tau[2]
    }

    /// Sum of the two state delays, the support length of `N`.
    pub fn tau_sum(&self) -> f64 {
        self.tau[1] + self.tau[2]
    }
}

/// `τ_i = 1/λ_i + 1/μ_i`, `τ_u = τ_1 + 1/λ_2`.
pub fn transport_times(cfg: &SystemConfig) -> TransportTimes {
    let tau = [
        1.0 / cfg.lambda[0] + 1.0 / cfg.mu[0],
        1.0 / cfg.lambda[1] + 1.0 / cfg.mu[1],
        1.0 / cfg.lambda[2] + 1.0 / cfg.mu[2],
    ];
    TransportTimes {
        tau,
        tau_u: tau[0] + 1.0 / cfg.lambda[1],
        tau_min: tau[1].min(tau[2]),
        tau_max: tau[1].max(tau[2]),
    }
}

/// Result of the structural checks.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    /// Largest real part over the roots of the pointwise-delay part of the
    /// reduced equation; `-inf` when all three coefficients vanish.
    pub assumption1_margin: f64,
    pub assumption2_ok: bool,
    pub assumption3_ok: bool,
    pub tau_order_swapped: bool,
    /// Artificial delay added to the control so the input delay strictly
    /// exceeds the longest state delay; zero when none is needed.
    pub input_delay_padding: f64,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn synthesis_admissible(&self) -> bool {
        self.assumption1_margin < 0.0 && self.assumption2_ok && self.assumption3_ok
    }
}

/// Run the structural checks. Failures are carried in the report rather
/// than returned as errors; `SystemConfig` construction already rejects
/// configurations breaking Assumptions 2-3 outright.
pub fn validate(cfg: &SystemConfig) -> ValidationReport {
    let times = transport_times(cfg);
    let rc = crate::reduction::reduced_coefficients_unchecked(cfg);
    let margin = crate::spectral::principal_stability(&rc);
    let mut warnings = Vec::new();

    let padding = if times.tau_u <= times.tau_sum() {
        let pad = times.tau_sum() - times.tau_u + EPS_PAD;
        warnings.push(format!(
            "input delay {:.6} does not exceed the state delay {:.6}; \
             control is artificially delayed by {:.6}",
            times.tau_u,
            times.tau_sum(),
            pad
        ));
        pad
    } else {
        0.0
    };
    if margin >= 0.0 {
        warnings.push(format!(
            "pointwise-delay part is not exponentially stable (margin {margin:.4}); \
             gain synthesis is refused for this configuration"
        ));
    }
    if cfg.rho33 == 0.0 && !cfg.sigma_minus[2].is_zero() {
        warnings.push(
            "rho33 = 0 with a non-zero sigma3- makes the third subsystem's kernel \
             trace equation degenerate; the kernel solve may fail"
                .into(),
        );
    }

    ValidationReport {
        assumption1_margin: margin,
        assumption2_ok: cfg.q21 != 0.0 && cfg.q32 != 0.0,
        assumption3_ok: cfg.q11 != 0.0,
        tau_order_swapped: times.swapped(),
        input_delay_padding: padding,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn minimal_toml() -> String {
        r#"
[velocities]
lambda = [1.0, 1.0, 1.0]
mu = [1.0, 1.0, 1.0]

[sigma]
s1_plus = { kind = "constant", value = 0.0 }
s1_minus = { kind = "constant", value = 0.0 }
s2_plus = { kind = "constant", value = 0.0 }
s2_minus = { kind = "constant", value = 0.0 }
s3_plus = { kind = "constant", value = 0.0 }
s3_minus = { kind = "constant", value = 0.0 }

[boundary_q]
q11 = 0.5
q21 = 0.5
q22 = 0.0
q32 = 0.5
q33 = 0.0

[boundary_rho]
rho11 = 0.0
rho12 = 0.0
rho22 = 0.0
rho23 = 0.0
rho33 = 0.0

[numerics]
resolution = 16
"#
        .to_string()
    }

    #[test]
    fn minimal_config_is_valid() {
        let cfg = SystemConfig::from_toml_str(&minimal_toml()).unwrap();
        assert!(cfg.all_sigma_zero());
        assert_eq!(cfg.resolution, 16);
    }

    #[test]
    fn q21_zero_cites_assumption_2() {
        let text = minimal_toml().replace("q21 = 0.5", "q21 = 0.0");
        let err = SystemConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("Assumption 2"), "{err}");
    }

    #[test]
    fn q11_zero_cites_assumption_3() {
        let text = minimal_toml().replace("q11 = 0.5", "q11 = 0.0");
        let err = SystemConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("Assumption 3"), "{err}");
    }

    #[test]
    fn negative_speed_rejected() {
        let text = minimal_toml().replace("lambda = [1.0, 1.0, 1.0]", "lambda = [1.0, -1.0, 1.0]");
        let err = SystemConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("positive"), "{err}");
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = minimal_toml() + "\n[extra]\nfoo = 1\n";
        assert!(SystemConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn transport_times_unit_speeds() {
        let cfg = SystemConfig::from_toml_str(&minimal_toml()).unwrap();
        let t = transport_times(&cfg);
        assert_eq!(t.tau, [2.0, 2.0, 2.0]);
        assert_eq!(t.tau_u, 3.0);
    }

    #[test]
    fn transport_times_mixed_speeds() {
        let text = minimal_toml()
            .replace("lambda = [1.0, 1.0, 1.0]", "lambda = [2.0, 2.0, 1.0]")
            .replace("mu = [1.0, 1.0, 1.0]", "mu = [1.0, 2.0, 1.0]");
        let cfg = SystemConfig::from_toml_str(&text).unwrap();
        let t = transport_times(&cfg);
        assert!((t.tau[0] - 1.5).abs() < 1e-15);
        assert_eq!(t.tau[1], 1.0);
        assert_eq!(t.tau[2], 2.0);
        assert!((t.tau_u - 2.0).abs() < 1e-15);
        assert!(!t.swapped());
    }

    #[test]
    fn tau_product_identity() {
        // τ_i λ_i μ_i = λ_i + μ_i
        for (l, m) in [(1.0f64, 1.0f64), (2.0, 0.5), (0.4, 1.6), (3.0, 7.0)] {
            let tau = 1.0 / l + 1.0 / m;
            assert!((tau * l * m - (l + m)).abs() < 1e-12 * (l + m));
        }
    }

    #[test]
    fn padding_rule() {
        // λ = (10,1,1), μ = (10,1,1): τ_u = 1.2 < τ2+τ3 = 4
        let text = minimal_toml()
            .replace("lambda = [1.0, 1.0, 1.0]", "lambda = [10.0, 1.0, 1.0]")
            .replace("mu = [1.0, 1.0, 1.0]", "mu = [10.0, 1.0, 1.0]");
        let cfg = SystemConfig::from_toml_str(&text).unwrap();
        let report = validate(&cfg);
        assert!((report.input_delay_padding - (2.8 + EPS_PAD)).abs() < 1e-12);
    }

    #[test]
    fn validate_is_idempotent() {
        let cfg = SystemConfig::from_toml_str(&minimal_toml()).unwrap();
        let a = validate(&cfg);
        let b = validate(&cfg);
        assert_eq!(a.assumption1_margin.to_bits(), b.assumption1_margin.to_bits());
        assert_eq!(a.warnings, b.warnings);
    }

    #[test]
    fn sigma_poly_sampling() {
        let s = SigmaProfile::from_token(
            SigmaToken::Poly {
                coeffs: vec![1.0, -2.0, 1.0],
            },
            10,
        )
        .unwrap();
        // (1 - x)^2 at x = 0.5
        assert!((s.eval(0.5) - 0.25).abs() < 1e-15);
        assert_eq!(s.samples().len(), 11);
    }
}
