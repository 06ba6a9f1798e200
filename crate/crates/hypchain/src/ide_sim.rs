//! Time stepping of the reduced scalar equation
//!
//! ```text
//! x(t) = a3 x(t−τ3) + a2 x(t−τ2) + a23 x(t−τ2−τ3) + b Ubar(t−Tu)
//!        + ∫ M~(ν) Ubar(t−ν) dν + ∫ N(ν) x(t−ν) dν
//! ```
//!
//! with the optional history feedback
//! `Ubar(t) = ∫ g(ν) Ubar(t−ν) dν + ∫ f(ν) x(t−ν) dν`.
//!
//! All delays are positive, so each step is explicit up to the quadrature
//! endpoint at lag zero, whose (O(dt)-weighted) contribution is absorbed by
//! a scalar division.

use serde::Serialize;

use crate::history::HistoryBuffer;
use crate::piecewise::PiecewiseKernel;
use crate::reduction::ReducedIde;
use crate::synthesis::GainPair;
use crate::{Error, Result};

/// Time-stamped records of one simulation run.
#[derive(Debug, Clone, Serialize)]
pub struct SimulationTrace {
    pub dt: f64,
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    pub u_bar: Vec<f64>,
    /// `(window center, windowed rms of (x, u_bar))`
    pub window_norms: Vec<(f64, f64)>,
}

impl SimulationTrace {
    pub fn sup_x(&self) -> f64 {
        self.x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Sup of `|x|` over `t ∈ [t0, t1]`.
    pub fn sup_x_in(&self, t0: f64, t1: f64) -> f64 {
        self.times
            .iter()
            .zip(&self.x)
            .filter(|(t, _)| **t >= t0 && **t <= t1)
            .fold(0.0f64, |m, (_, v)| m.max(v.abs()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,u_bar,window_norm\n");
        let mut w = 0usize;
        let mut current = 0.0;
        for k in 0..self.times.len() {
            while w < self.window_norms.len() && self.window_norms[w].0 <= self.times[k] {
                current = self.window_norms[w].1;
                w += 1;
            }
            out.push_str(&format!(
                "{:.9},{:.12e},{:.12e},{:.12e}\n",
                self.times[k], self.x[k], self.u_bar[k], current
            ));
        }
        out
    }
}

/// Trapezoid weights `(lag, coeff)` of `∫ K(ν) z(t−ν) dν` on the kernel's
/// own sample nodes, so breakpoints are respected exactly.
fn quad_weights(kernel: &PiecewiseKernel) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for seg in kernel.segments() {
        let m = seg.values.len() - 1;
        let h = (seg.b - seg.a) / m as f64;
        for (i, v) in seg.values.iter().enumerate() {
            let w = if i == 0 || i == m { 0.5 * h } else { h };
            if *v != 0.0 {
                out.push((seg.a + h * i as f64, w * v));
            }
        }
    }
    out
}

/// Split weights into an explicit part (lag ≥ dt) and the coefficient the
/// lag-below-dt part puts on the still-unknown current value.
struct SplitWeights {
    /// `(lag - dt, coeff)` pairs evaluated against the history buffer.
    explicit: Vec<(f64, f64)>,
    /// Multiplies the unknown current value.
    implicit_coeff: f64,
    /// `(coeff on the newest stored sample)` from interpolated sub-dt lags.
    newest_coeff: f64,
}

fn split_weights(weights: &[(f64, f64)], dt: f64) -> SplitWeights {
    let mut explicit = Vec::with_capacity(weights.len());
    let mut implicit_coeff = 0.0;
    let mut newest_coeff = 0.0;
    for &(lag, coeff) in weights {
        if lag >= dt - 1e-15 {
            explicit.push((lag - dt, coeff));
        } else {
            let frac = lag / dt;
            implicit_coeff += coeff * (1.0 - frac);
            newest_coeff += coeff * frac;
        }
    }
    SplitWeights {
        explicit,
        implicit_coeff,
        newest_coeff,
    }
}

fn apply(hist: &HistoryBuffer, sw: &SplitWeights) -> f64 {
    let mut acc = sw.newest_coeff * hist.latest();
    for &(lag, coeff) in &sw.explicit {
        acc += coeff * hist.value_at_lag(lag);
    }
    acc
}

/// Default step: an eighth of the smallest kernel-breakpoint gap, floored
/// so pathological unions cannot stall the run.
pub fn default_dt(ide: &ReducedIde) -> f64 {
    let mut gap = ide.rc.delays.tau_min;
    for bp in [ide.n_kernel.breakpoints(), ide.m_tilde.breakpoints()] {
        for w in bp.windows(2) {
            let g = w[1] - w[0];
            if g > 1e-9 {
                gap = gap.min(g);
            }
        }
    }
    (gap / 8.0).max(ide.tau_sum() * 2e-4)
}

/// Simulate the reduced equation; `gains = None` runs open loop
/// (`Ubar ≡ 0` beyond its seeded history).
pub fn simulate(
    ide: &ReducedIde,
    gains: Option<&GainPair>,
    x_init: &dyn Fn(f64) -> f64,
    ubar_init: &dyn Fn(f64) -> f64,
    t_final: f64,
    dt: Option<f64>,
) -> Result<SimulationTrace> {
    let dt = dt.unwrap_or_else(|| default_dt(ide));
    if !(dt > 0.0) || t_final <= dt {
        return Err(Error::Simulation(format!("bad time grid: dt {dt}, T {t_final}")));
    }
    let t = ide.rc.delays;
    if dt > 0.5 * t.tau_min {
        return Err(Error::Simulation(format!(
            "dt {dt} is incompatible with the smallest state delay {}",
            t.tau_min
        )));
    }
    let tsum = t.tau_sum();
    let tau_u = ide.tau_u_eff;

    let n_w = split_weights(&quad_weights(&ide.n_kernel), dt);
    let m_w = split_weights(&quad_weights(&ide.m_tilde), dt);
    let (g_w, f_w) = match gains {
        Some(gp) => (
            Some(split_weights(&quad_weights(&gp.g), dt)),
            Some(quad_weights(&gp.f)),
        ),
        None => (None, None),
    };

    let mut x_hist = HistoryBuffer::new(dt, tsum + 2.0 * dt);
    x_hist.seed(x_init);
    let mut u_hist = HistoryBuffer::new(dt, tau_u + 2.0 * dt);
    u_hist.seed(ubar_init);

    let steps = (t_final / dt).ceil() as usize;
    let mut trace = SimulationTrace {
        dt,
        times: Vec::with_capacity(steps),
        x: Vec::with_capacity(steps),
        u_bar: Vec::with_capacity(steps),
        window_norms: Vec::new(),
    };

    for k in 1..=steps {
        let time = k as f64 * dt;
        // Pointwise delays measured from the new time; histories lag by dt.
        let mut rhs = ide.rc.a3 * x_hist.value_at_lag(t.tau[2] - dt)
            + ide.rc.a2 * x_hist.value_at_lag(t.tau[1] - dt)
            + ide.rc.a23 * x_hist.value_at_lag(tsum - dt)
            + ide.rc.b * u_hist.value_at_lag(tau_u - dt);
        // M~ vanishes below 1/λ2, so its sub-dt mass is (at most) a
        // first-order correction evaluated on the newest control sample.
        rhs += apply(&u_hist, &m_w) + m_w.implicit_coeff * u_hist.latest();
        rhs += apply(&x_hist, &n_w);
        let x_new = rhs / (1.0 - n_w.implicit_coeff);
        if !x_new.is_finite() {
            return Err(Error::Simulation(format!(
                "state diverged to a non-finite value at t = {time:.4}"
            )));
        }
        x_hist.push(x_new);

        let u_new = match (&g_w, &f_w) {
            (Some(gw), Some(fw)) => {
                let mut acc = apply(&u_hist, gw);
                // f reads x up to lag 0, where x(t) is already known.
                for &(lag, coeff) in fw {
                    acc += coeff * x_hist.value_at_lag(lag);
                }
                acc / (1.0 - gw.implicit_coeff)
            }
            _ => 0.0,
        };
        if !u_new.is_finite() {
            return Err(Error::Simulation(format!(
                "control diverged to a non-finite value at t = {time:.4}"
            )));
        }
        u_hist.push(u_new);

        trace.times.push(time);
        trace.x.push(x_new);
        trace.u_bar.push(u_new);
    }
    trace.window_norms = window_norms(&trace, tsum);
    Ok(trace)
}

fn window_norms(trace: &SimulationTrace, window: f64) -> Vec<(f64, f64)> {
    let dt = trace.dt;
    let per = (window / dt).round().max(1.0) as usize;
    let mut out = Vec::new();
    let mut k = 0;
    while k + per <= trace.times.len() {
        let mut acc = 0.0;
        for i in k..k + per {
            acc += trace.x[i] * trace.x[i] + trace.u_bar[i] * trace.u_bar[i];
        }
        let rms = (acc / per as f64).sqrt();
        let center = 0.5 * (trace.times[k] + trace.times[k + per - 1]);
        out.push((center, rms));
        k += per;
    }
    out
}

/// Least-squares slope of `ln(windowed norm)` over the last two thirds of
/// the trace. Negative rate means decay; `r2` is the fit quality.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DecayEstimate {
    pub rate: f64,
    pub r2: f64,
    /// True when the trace fully converged (norm underflow); `rate` is then
    /// a large-negative sentinel.
    pub underflow: bool,
}

pub fn estimate_decay_rate(trace: &SimulationTrace) -> Result<DecayEstimate> {
    let norms = &trace.window_norms;
    if norms.len() < 3 {
        return Err(Error::Simulation(
            "trace too short for a decay fit (needs 3 windows)".into(),
        ));
    }
    let start = norms.len() / 3;
    let pts: Vec<(f64, f64)> = norms[start..]
        .iter()
        .filter(|(_, n)| *n > 0.0)
        .map(|(t, n)| (*t, n.ln()))
        .collect();
    if pts.len() < norms.len() - start || pts.len() < 3 {
        return Ok(DecayEstimate {
            rate: -1e6,
            r2: 1.0,
            underflow: true,
        });
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|(t, _)| t).sum();
    let sy: f64 = pts.iter().map(|(_, y)| y).sum();
    let sxx: f64 = pts.iter().map(|(t, _)| t * t).sum();
    let sxy: f64 = pts.iter().map(|(t, y)| t * y).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-300 {
        return Err(Error::Simulation("degenerate time grid in decay fit".into()));
    }
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    let mean_y = sy / n;
    let ss_tot: f64 = pts.iter().map(|(_, y)| (y - mean_y).powi(2)).sum();
    let ss_res: f64 = pts
        .iter()
        .map(|(t, y)| (y - (intercept + slope * t)).powi(2))
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(DecayEstimate {
        rate: slope,
        r2,
        underflow: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::transport_times;
    use crate::config::SystemConfig;
    use crate::reduction::ReducedCoefficients;

    fn plain_ide(a2: f64, a3: f64, a23: f64) -> ReducedIde {
        let cfg = SystemConfig::from_toml_str(
            &r#"
[velocities]
lambda = [0.5, 1.0, 1.0]
mu = [0.5, 1.0, 1.0]

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
q22 = 0.3
q32 = 0.5
q33 = 0.3

[boundary_rho]
rho11 = 0.0
rho12 = 0.0
rho22 = 0.0
rho23 = 0.0
rho33 = 0.0

[numerics]
resolution = 16
"#
            .to_string(),
        )
        .unwrap();
        let delays = transport_times(&cfg);
        ReducedIde {
            rc: ReducedCoefficients {
                a2,
                a3,
                a23,
                b: 0.125,
                delays,
            },
            n_kernel: PiecewiseKernel::zero("N", delays.tau_sum()),
            m_tilde: PiecewiseKernel::zero("Mt", delays.tau_u),
            tau_u_eff: delays.tau_u,
            pad: 0.0,
        }
    }

    #[test]
    fn no_feedback_terms_give_zero() {
        let ide = plain_ide(0.0, 0.0, 0.0);
        let tr = simulate(&ide, None, &|_| 1.0, &|_| 0.0, 10.0, Some(0.01)).unwrap();
        assert!(tr.sup_x() == 0.0);
    }

    #[test]
    fn staircase_decay() {
        // x(t) = 0.5 x(t − 2) with unit history: 0.5 on (0,2], 0.25 on (2,4] ...
        let ide = plain_ide(0.0, 0.5, 0.0);
        let tr = simulate(&ide, None, &|_| 1.0, &|_| 0.0, 10.0, Some(0.005)).unwrap();
        for (t, expected) in [(1.0, 0.5), (3.0, 0.25), (5.0, 0.125), (9.0, 0.03125)] {
            let k = tr.times.iter().position(|x| (*x - t).abs() < 1e-9).unwrap();
            assert!(
                (tr.x[k] - expected).abs() < 1e-12,
                "t = {t}: {} vs {expected}",
                tr.x[k]
            );
        }
    }

    #[test]
    fn staircase_growth() {
        let ide = plain_ide(0.0, 1.2, 0.0);
        let tr = simulate(&ide, None, &|_| 1.0, &|_| 0.0, 20.0, Some(0.01)).unwrap();
        let k9 = tr.times.iter().position(|x| (*x - 9.0).abs() < 1e-9).unwrap();
        // 5 delay periods minus epsilon: 1.2^5
        assert!((tr.x[k9] - 1.2f64.powi(5)).abs() < 1e-9);
    }

    #[test]
    fn decay_rate_of_synthetic_exponential() {
        let ide = plain_ide(0.0, 0.5, 0.0);
        let mut tr = simulate(&ide, None, &|_| 1.0, &|_| 0.0, 40.0, Some(0.01)).unwrap();
        for (k, t) in tr.times.clone().iter().enumerate() {
            tr.x[k] = (-0.5 * t).exp();
            tr.u_bar[k] = 0.0;
        }
        tr.window_norms = super::window_norms(&tr, 4.0);
        let est = estimate_decay_rate(&tr).unwrap();
        assert!(
            (est.rate + 0.5).abs() < 0.01,
            "rate {} should be -0.5",
            est.rate
        );
        assert!(est.r2 > 0.999);
    }

    #[test]
    fn decay_rate_of_staircase_matches_geometric_envelope() {
        let ide = plain_ide(0.0, 0.5, 0.0);
        let tr = simulate(&ide, None, &|_| 1.0, &|_| 0.0, 60.0, Some(0.01)).unwrap();
        let est = estimate_decay_rate(&tr).unwrap();
        let expect = (0.5f64).ln() / 2.0;
        assert!(
            (est.rate - expect).abs() < 0.05 * expect.abs(),
            "rate {} vs {expect}",
            est.rate
        );
    }

    #[test]
    fn constant_trace_rate_is_zero() {
        let ide = plain_ide(0.0, 1.0, 0.0);
        let tr = simulate(&ide, None, &|_| 1.0, &|_| 0.0, 30.0, Some(0.01)).unwrap();
        let est = estimate_decay_rate(&tr).unwrap();
        assert!(est.rate.abs() < 1e-6, "rate {}", est.rate);
    }

    #[test]
    fn refinement_halves_error() {
        // Distributed kernel engaged: compare dt and dt/2 against dt/8.
        let mut ide = plain_ide(0.0, 0.4, 0.0);
        ide.n_kernel =
            PiecewiseKernel::sample("N", &[0.0, 4.0], 64.0, |nu, _| 0.05 * (1.0 + nu));
        let probe = |dt: f64| {
            simulate(&ide, None, &|t| 1.0 + 0.3 * t, &|_| 0.0, 8.0, Some(dt)).unwrap()
        };
        let fine = probe(0.0025);
        let sample_err = |tr: &SimulationTrace| {
            let mut worst = 0.0f64;
            for t in [2.5, 5.0, 7.5] {
                let k = tr.times.iter().position(|x| (*x - t).abs() < 1e-9).unwrap();
                let kf = fine
                    .times
                    .iter()
                    .position(|x| (*x - t).abs() < 1e-9)
                    .unwrap();
                worst = worst.max((tr.x[k] - fine.x[kf]).abs());
            }
            worst
        };
        let e1 = sample_err(&probe(0.02));
        let e2 = sample_err(&probe(0.01));
        assert!(e2 < 0.7 * e1, "no first-order refinement: {e1} vs {e2}");
    }
}
