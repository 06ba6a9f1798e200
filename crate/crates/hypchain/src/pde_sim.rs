//! Exact-shift simulator of the physical chain, used in closed loop with
//! the synthesized gains and as the independent oracle for the reduction.
//!
//! Each state component lives on its own grid with spacing `speed · dt`, so
//! transport is an exact one-cell shift per step and all scheme error sits
//! in the midpoint-rule source coupling. This requires the six speeds to be
//! rationally commensurable: `dt` is planned from continued-fraction
//! rationalizations of the speeds.
//!
//! The boundary input applies the full control law
//!
//! ```text
//! U(t) = Ubar(t) − ρ11 α1(t,1) − ρ12 β2(t,0)
//!        − ∫ Σ_i α_i(t,y) J1i(y) + β_i(t,y) C1i(y) dy
//! Ubar(t) = ∫ g(ν) Ubar(t−ν) dν + ∫ f(ν) x3(t−ν) dν
//! ```
//!
//! chosen so that the transformed boundary trace `β1(t,1)` equals `Ubar(t)`
//! exactly; the simulator records the defect between the two as a running
//! consistency check of the whole reduction.

use nalgebra::DVector;
use serde::Serialize;

use crate::config::SystemConfig;
use crate::history::HistoryBuffer;
use crate::kernels::{DirectKernels, VU, VV};
use crate::reduction::{BoundaryKernels, ReducedIde};
use crate::synthesis::GainPair;
use crate::transform::TransformMatrix;
use crate::{Error, Result};

/// Continued-fraction rationalization `x ≈ p/q` with `q ≤ max_den`.
fn rationalize(x: f64, max_den: u64) -> Option<(u64, u64)> {
    let (mut p0, mut q0, mut p1, mut q1) = (0u64, 1u64, 1u64, 0u64);
    let mut frac = x;
    for _ in 0..64 {
        let a = frac.floor() as u64;
        let (p2, q2) = (a.checked_mul(p1)?.checked_add(p0)?, a.checked_mul(q1)?.checked_add(q0)?);
        if q2 > max_den {
            break;
        }
        p0 = p1;
        q0 = q1;
        p1 = p2;
        q1 = q2;
        let rem = frac - a as f64;
        if rem.abs() < 1e-12 {
            break;
        }
        frac = 1.0 / rem;
    }
    if q1 == 0 {
        return None;
    }
    let approx = p1 as f64 / q1 as f64;
    ((approx - x).abs() <= 1e-9 * x.max(1.0)).then_some((p1, q1))
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Plan the exact-shift grids: returns `(dt, cells per direction)` with
/// `speed_j · dt = 1 / cells_j` exactly (in the rationalized speeds).
pub fn plan_grids(cfg: &SystemConfig, dt_request: f64) -> Result<(f64, [usize; 6])> {
    let speeds = [
        cfg.lambda[0],
        cfg.lambda[1],
        cfg.lambda[2],
        cfg.mu[0],
        cfg.mu[1],
        cfg.mu[2],
    ];
    let mut nums = [0u64; 6];
    let mut dens = [0u64; 6];
    for (k, s) in speeds.iter().enumerate() {
        let (p, q) = rationalize(*s, 4000).ok_or_else(|| {
            Error::Simulation(format!(
                "speed {s} is not rationally representable; the exact-shift \
                 grids need commensurable speeds"
            ))
        })?;
        nums[k] = p;
        dens[k] = q;
    }
    // 1/dt = k * lcm(numerators) makes every cells_j = (1/dt) q_j / p_j integral.
    let mut l: u64 = 1;
    for p in nums {
        let g = gcd(l, p);
        let next = l as u128 / g as u128 * p as u128;
        if next > 1_000_000 {
            return Err(Error::Simulation(
                "speed ratios too intricate for exact-shift grids".into(),
            ));
        }
        l = next as u64;
    }
    let k = ((1.0 / (l as f64 * dt_request)).ceil() as u64).max(1);
    let rate = k * l;
    let dt = 1.0 / rate as f64;
    let mut cells = [0usize; 6];
    for j in 0..6 {
        let c = (rate as u128 * dens[j] as u128 / nums[j] as u128) as usize;
        if c < 2 || c > 400_000 {
            return Err(Error::Simulation(format!(
                "cell count {c} out of range for speed {}; adjust dt",
                speeds[j]
            )));
        }
        cells[j] = c;
    }
    Ok((dt, cells))
}

/// Per-direction sample arrays of the six state components.
#[derive(Debug, Clone)]
pub struct PdeState {
    pub dt: f64,
    /// `u[i]` has `cells[i] + 1` nodes with spacing `λ_i dt`.
    pub u: [Vec<f64>; 3],
    pub v: [Vec<f64>; 3],
    pub time: f64,
}

/// Linear interpolation of a directional sample array at `x ∈ [0, 1]`.
pub fn interp_at(arr: &[f64], x: f64) -> f64 {
    interp1(arr, x)
}

fn interp1(arr: &[f64], x: f64) -> f64 {
    let m = arr.len() - 1;
    let pos = (x.clamp(0.0, 1.0)) * m as f64;
    let j = (pos.floor() as usize).min(m - 1);
    let t = pos - j as f64;
    arr[j] * (1.0 - t) + arr[j + 1] * t
}

fn trapz_sq(arr: &[f64]) -> f64 {
    let m = arr.len() - 1;
    let h = 1.0 / m as f64;
    let mut acc = 0.0;
    for (i, v) in arr.iter().enumerate() {
        let w = if i == 0 || i == m { 0.5 * h } else { h };
        acc += w * v * v;
    }
    acc
}

impl PdeState {
    pub fn from_initial(cfg: &SystemConfig, dt: f64, cells: &[usize; 6]) -> Self {
        let sample = |token_idx: usize, m: usize| -> Vec<f64> {
            (0..=m)
                .map(|k| cfg.initial[token_idx].eval(k as f64 / m as f64))
                .collect()
        };
        PdeState {
            dt,
            u: [sample(0, cells[0]), sample(2, cells[1]), sample(4, cells[2])],
            v: [sample(1, cells[3]), sample(3, cells[4]), sample(5, cells[5])],
            time: 0.0,
        }
    }

    /// Zero-order compatibility defects of the initial data at the
    /// boundaries (warned about, not enforced).
    pub fn compatibility_defects(&self, cfg: &SystemConfig) -> Vec<(String, f64)> {
        let u_end = |i: usize| *self.u[i].last().unwrap();
        let v0 = |i: usize| self.v[i][0];
        let mut out = Vec::new();
        out.push((
            "u1(0) = q11 v1(0)".into(),
            (self.u[0][0] - cfg.q11 * v0(0)).abs(),
        ));
        out.push((
            "u2(0) = q22 v2(0) + q21 u1(1)".into(),
            (self.u[1][0] - cfg.q22 * v0(1) - cfg.q21 * u_end(0)).abs(),
        ));
        out.push((
            "u3(0) = q33 v3(0) + q32 u2(1)".into(),
            (self.u[2][0] - cfg.q33 * v0(2) - cfg.q32 * u_end(1)).abs(),
        ));
        out.push((
            "v3(1) = rho33 u3(1)".into(),
            (*self.v[2].last().unwrap() - cfg.rho33 * u_end(2)).abs(),
        ));
        out
    }

    /// One exact-shift step with midpoint source coupling; `u_input` is the
    /// boundary value entering `v1(t+dt, 1)`.
    pub fn step(&mut self, cfg: &SystemConfig, u_input: f64) -> Result<()> {
        let dt = self.dt;
        for i in 0..3 {
            let (l, m) = (cfg.lambda[i], cfg.mu[i]);
            let nu = self.u[i].len() - 1;
            let nv = self.v[i].len() - 1;
            let hu = 1.0 / nu as f64;
            let hv = 1.0 / nv as f64;
            let mut un = vec![0.0; nu + 1];
            let mut vn = vec![0.0; nv + 1];
            for k in 1..=nu {
                let xm = (k as f64 - 0.5) * hu;
                let v_mid = interp1(&self.v[i], xm + 0.5 * m * dt);
                un[k] = self.u[i][k - 1] + dt * cfg.sigma_plus[i].eval(xm) * v_mid;
            }
            for k in 0..nv {
                let xm = (k as f64 + 0.5) * hv;
                let u_mid = interp1(&self.u[i], xm - 0.5 * l * dt);
                vn[k] = self.v[i][k + 1] + dt * cfg.sigma_minus[i].eval(xm) * u_mid;
            }
            self.u[i] = un;
            self.v[i] = vn;
        }
        // Boundary inflows at the new time; every right-hand side below is
        // an outflow value already computed by the shifts.
        let u1_end = self.u[0][self.u[0].len() - 1];
        let u2_end = self.u[1][self.u[1].len() - 1];
        let u3_end = self.u[2][self.u[2].len() - 1];
        self.u[0][0] = cfg.q11 * self.v[0][0];
        self.u[1][0] = cfg.q22 * self.v[1][0] + cfg.q21 * u1_end;
        self.u[2][0] = cfg.q33 * self.v[2][0] + cfg.q32 * u2_end;
        let v3_last = self.v[2].len() - 1;
        self.v[2][v3_last] = cfg.rho33 * u3_end;
        let v2_last = self.v[1].len() - 1;
        self.v[1][v2_last] = cfg.rho22 * u2_end + cfg.rho23 * self.v[2][0];
        let v1_last = self.v[0].len() - 1;
        self.v[0][v1_last] = u_input + cfg.rho11 * u1_end + cfg.rho12 * self.v[1][0];
        self.time += dt;
        for arr in self.u.iter().chain(self.v.iter()) {
            if arr.iter().any(|x| !x.is_finite()) {
                return Err(Error::Simulation(format!(
                    "state diverged at t = {:.4}",
                    self.time
                )));
            }
        }
        Ok(())
    }

    /// `L²` norm of the full state.
    pub fn l2_norm(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..3 {
            acc += trapz_sq(&self.u[i]) + trapz_sq(&self.v[i]);
        }
        acc.sqrt()
    }

    /// Resample all components onto the transform's uniform grid.
    pub fn stacked(&self, n: usize) -> DVector<f64> {
        let mut out = DVector::zeros(6 * (n + 1));
        let comps = [
            &self.u[0], &self.v[0], &self.u[1], &self.v[1], &self.u[2], &self.v[2],
        ];
        for (c, arr) in comps.iter().enumerate() {
            for j in 0..=n {
                out[c * (n + 1) + j] = interp1(arr, j as f64 / n as f64);
            }
        }
        out
    }
}

/// Transformed views of a PDE state.
#[derive(Debug, Clone)]
pub struct Views {
    pub n: usize,
    pub data: DVector<f64>,
}

impl Views {
    pub fn component(&self, c: usize) -> &[f64] {
        &self.data.as_slice()[c * (self.n + 1)..(c + 1) * (self.n + 1)]
    }
    pub fn alpha(&self, subsystem: usize) -> &[f64] {
        self.component(2 * subsystem)
    }
    pub fn beta(&self, subsystem: usize) -> &[f64] {
        self.component(2 * subsystem + 1)
    }
    /// `x3 = α3(·, 0)`.
    pub fn x3(&self) -> f64 {
        self.alpha(2)[0]
    }
    pub fn l2_norm(&self) -> f64 {
        (0..6).map(|c| trapz_sq(self.component(c))).sum::<f64>().sqrt()
    }
}

/// Apply the discretized transform to the current state.
pub fn forward_transform_views(state: &PdeState, t: &TransformMatrix) -> Views {
    let n = t.layout.n;
    Views {
        n,
        data: t.apply(&state.stacked(n)),
    }
}

/// Everything the boundary controller needs at run time.
pub struct ControlContext<'a> {
    pub cfg: &'a SystemConfig,
    pub transform: &'a TransformMatrix,
    pub boundary: &'a BoundaryKernels,
    pub ide: &'a ReducedIde,
    pub gains: Option<&'a GainPair>,
    /// Trace rows of `K1^{vu}(1,·)`, `K1^{vv}(1,·)` for the β1(1) check.
    pub k1vu_top: Vec<f64>,
    pub k1vv_top: Vec<f64>,
}

impl<'a> ControlContext<'a> {
    pub fn new(
        cfg: &'a SystemConfig,
        dk: &DirectKernels,
        transform: &'a TransformMatrix,
        boundary: &'a BoundaryKernels,
        ide: &'a ReducedIde,
        gains: Option<&'a GainPair>,
    ) -> Self {
        let n = dk.n;
        ControlContext {
            cfg,
            transform,
            boundary,
            ide,
            gains,
            k1vu_top: (0..=n).map(|j| dk.k[0][VU].get(n, j)).collect(),
            k1vv_top: (0..=n).map(|j| dk.k[0][VV].get(n, j)).collect(),
        }
    }

    /// `∫ Σ_i α_i J1i + β_i C1i dy` by trapezoid on the view grid.
    fn jc_integral(&self, views: &Views) -> f64 {
        let n = views.n;
        let h = 1.0 / n as f64;
        let b = self.boundary;
        let mut acc = 0.0;
        let js = [&b.j11, &b.j12, &b.j13];
        let cs = [&b.c11, &b.c12, &b.c13];
        for i in 0..3 {
            let a = views.alpha(i);
            let be = views.beta(i);
            for j in 0..=n {
                let w = if j == 0 || j == n { 0.5 * h } else { h };
                acc += w * (a[j] * js[i][j] + be[j] * cs[i][j]);
            }
        }
        acc
    }

    /// Physical input from the new control `u_bar` and the current views:
    /// the boundary-reflection and integral terms convert `Ubar` into `U`.
    pub fn physical_input(&self, u_bar: f64, views: &Views) -> f64 {
        let n = views.n;
        let alpha1_end = views.alpha(0)[n];
        let beta2_start = views.beta(1)[0];
        u_bar - self.cfg.rho11 * alpha1_end - self.cfg.rho12 * beta2_start
            - self.jc_integral(views)
    }

    /// `β1(t, 1)` computed from the physical state; equals `Ubar(t)` when
    /// the transform, the kernels and the input conversion are consistent.
    pub fn beta1_end(&self, state: &PdeState, views: &Views) -> f64 {
        let n = views.n;
        let h = 1.0 / n as f64;
        let stacked = state.stacked(n);
        let v1_end = stacked[(n + 1) + n];
        let mut acc = v1_end;
        for j in 0..=n {
            let w = if j == 0 || j == n { 0.5 * h } else { h };
            acc -= w * (self.k1vu_top[j] * stacked[j] + self.k1vv_top[j] * stacked[(n + 1) + j]);
        }
        acc
    }
}

/// Closed- or open-loop trace of the PDE run.
#[derive(Debug, Clone, Serialize)]
pub struct PdeTrace {
    pub dt: f64,
    pub times: Vec<f64>,
    pub norm: Vec<f64>,
    pub x3: Vec<f64>,
    pub u: Vec<f64>,
    pub u_bar: Vec<f64>,
    /// Sup over recorded steps of `|β1(t,1) − Ubar(t)|` past the initial
    /// transport transient.
    pub consistency_sup: f64,
    pub window_norms: Vec<(f64, f64)>,
}

impl PdeTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,pde_norm,x3,u,u_bar\n");
        for k in 0..self.times.len() {
            out.push_str(&format!(
                "{:.9},{:.12e},{:.12e},{:.12e},{:.12e}\n",
                self.times[k], self.norm[k], self.x3[k], self.u[k], self.u_bar[k]
            ));
        }
        out
    }
}

/// Run the chain with the boundary law (or open loop when `control_on` is
/// false). Histories of `x3` and `Ubar` start at zero before `t = 0`.
pub fn simulate_closed_loop(
    ctx: &ControlContext,
    t_final: f64,
    dt_request: f64,
    control_on: bool,
) -> Result<PdeTrace> {
    let cfg = ctx.cfg;
    let (dt, cells) = plan_grids(cfg, dt_request)?;
    let mut state = PdeState::from_initial(cfg, dt, &cells);

    let tau_sum = ctx.ide.tau_sum();
    let tau_u = ctx.ide.tau_u_eff;
    let mut x_hist = HistoryBuffer::new(dt, tau_sum + 2.0 * dt);
    let mut u_hist = HistoryBuffer::new(dt, tau_u + ctx.ide.pad + 2.0 * dt);

    // Quadrature weights of the gain integrals on the kernel nodes.
    let gain_weights = ctx.gains.map(|gp| {
        let gw: Vec<(f64, f64)> = gp
            .g
            .segments()
            .iter()
            .flat_map(|seg| {
                let m = seg.values.len() - 1;
                let h = (seg.b - seg.a) / m as f64;
                seg.values
                    .iter()
                    .enumerate()
                    .map(move |(i, v)| {
                        let w = if i == 0 || i == m { 0.5 * h } else { h };
                        (seg.a + h * i as f64, w * v)
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let fw: Vec<(f64, f64)> = gp
            .f
            .segments()
            .iter()
            .flat_map(|seg| {
                let m = seg.values.len() - 1;
                let h = (seg.b - seg.a) / m as f64;
                seg.values
                    .iter()
                    .enumerate()
                    .map(move |(i, v)| {
                        let w = if i == 0 || i == m { 0.5 * h } else { h };
                        (seg.a + h * i as f64, w * v)
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        (gw, fw)
    });

    let steps = (t_final / dt).ceil() as usize;
    let mut trace = PdeTrace {
        dt,
        times: Vec::with_capacity(steps),
        norm: Vec::with_capacity(steps),
        x3: Vec::with_capacity(steps),
        u: Vec::with_capacity(steps),
        u_bar: Vec::with_capacity(steps),
        consistency_sup: 0.0,
        window_norms: Vec::new(),
    };

    let transient = tau_u + tau_sum;
    let mut u_prev = 0.0;
    for _ in 1..=steps {
        state.step(cfg, u_prev)?;
        let views = forward_transform_views(&state, ctx.transform);
        let x3 = views.x3();
        x_hist.push(x3);

        let u_bar = if control_on {
            match (&ctx.gains, &gain_weights) {
                (Some(_), Some((gw, fw))) => {
                    let mut acc = 0.0;
                    let mut implicit = 0.0;
                    for &(lag, coeff) in gw {
                        if lag >= dt - 1e-15 {
                            acc += coeff * u_hist.value_at_lag(lag - dt);
                        } else {
                            let frac = lag / dt;
                            implicit += coeff * (1.0 - frac);
                            acc += coeff * frac * u_hist.latest();
                        }
                    }
                    for &(lag, coeff) in fw {
                        acc += coeff * x_hist.value_at_lag(lag);
                    }
                    acc / (1.0 - implicit)
                }
                _ => 0.0,
            }
        } else {
            0.0
        };
        u_hist.push(u_bar);
        // With artificial input padding the physical input lags behind.
        let u_bar_phys = if ctx.ide.pad > 0.0 {
            u_hist.value_at_lag(ctx.ide.pad)
        } else {
            u_bar
        };

        let u_new = if control_on {
            ctx.physical_input(u_bar_phys, &views)
        } else {
            0.0
        };
        // Re-impose the controlled boundary with the freshly computed input.
        let u1_end = *state.u[0].last().unwrap();
        let v2_start = state.v[1][0];
        let v1_last = state.v[0].len() - 1;
        state.v[0][v1_last] = u_new + cfg.rho11 * u1_end + cfg.rho12 * v2_start;

        if control_on && state.time > transient {
            let b1 = ctx.beta1_end(&state, &views);
            trace.consistency_sup = trace.consistency_sup.max((b1 - u_bar_phys).abs());
        }

        trace.times.push(state.time);
        trace.norm.push(state.l2_norm());
        trace.x3.push(x3);
        trace.u.push(u_new);
        trace.u_bar.push(u_bar_phys);
        u_prev = u_new;
    }

    let per = (tau_sum / dt).round().max(1.0) as usize;
    let mut k = 0;
    while k + per <= trace.times.len() {
        let mut acc = 0.0;
        for i in k..k + per {
            acc += trace.norm[i] * trace.norm[i];
        }
        trace
            .window_norms
            .push((trace.times[k + per / 2], (acc / per as f64).sqrt()));
        k += per;
    }
    Ok(trace)
}

/// Fit of `ln(windowed L² norm)` over the last two thirds of the run.
pub fn fit_norm_decay(trace: &PdeTrace) -> Result<(f64, f64)> {
    if trace.window_norms.len() < 3 {
        return Err(Error::Simulation("trace too short for a decay fit".into()));
    }
    let start = trace.window_norms.len() / 3;
    let pts: Vec<(f64, f64)> = trace.window_norms[start..]
        .iter()
        .filter(|(_, n)| *n > 1e-300)
        .map(|(t, n)| (*t, n.ln()))
        .collect();
    if pts.len() < 3 {
        return Ok((-1e6, 1.0));
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|(t, _)| t).sum();
    let sy: f64 = pts.iter().map(|(_, y)| y).sum();
    let sxx: f64 = pts.iter().map(|(t, _)| t * t).sum();
    let sxy: f64 = pts.iter().map(|(t, y)| t * y).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    let mean = sy / n;
    let ss_tot: f64 = pts.iter().map(|(_, y)| (y - mean).powi(2)).sum();
    let ss_res: f64 = pts
        .iter()
        .map(|(t, y)| (y - intercept - slope * t).powi(2))
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok((slope, r2))
}
