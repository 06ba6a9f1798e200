//! Reduction of the boundary-coupled target system to a scalar integral
//! difference equation in `x(t) = α3(t,0)`.
//!
//! Three stages:
//! 1. boundary kernels `P/W/J/C` — direct substitutions of inverse-kernel
//!    traces;
//! 2. delay kernels `H33, H2b3, H23, M, H22, H22b` — changes of variables
//!    along the transport characteristics, stretching by the speeds and
//!    reflecting the leftward directions;
//! 3. the composite kernels `N` on `[0, τ2+τ3]` and `M~` on `[0, τ_u]`,
//!    plus the pointwise coefficients `a2, a3, a23, b`.
//!
//! The `N` assembly uses the eliminated form of the chain: writing
//! `y(t) = q32 x2(t−1/λ2)` and `F03 = 1 − a3 e^{−τ3 s} − H33^`, the Laplace
//! identity
//!
//! ```text
//! F03 (1 − a2 e^{−τ2 s} − H22^ − ρ22 H22b^ e^{−s/λ2})
//!   − (q22 q32 e^{−τ2 s} + q32 H22b^ e^{−s/λ2}) (ρ23 ρ33 e^{−τ3 s} + H2b3^)
//!   = 1 − a3 e^{−τ3 s} − a2 e^{−τ2 s} − a23 e^{−(τ2+τ3) s} − N^
//! ```
//!
//! expands into twelve time-domain pieces, all supported inside
//! `[0, τ2+τ3]`.

use serde::Serialize;

use crate::config::{transport_times, SystemConfig, TransportTimes, EPS_PAD};
use crate::piecewise::PiecewiseKernel;
use crate::transform::InverseTraces;
use crate::{Error, Result};

/// Pointwise coefficients of the reduced equation.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ReducedCoefficients {
    pub a2: f64,
    pub a3: f64,
    pub a23: f64,
    pub b: f64,
    pub delays: TransportTimes,
}

/// `a2 = q22 ρ22`, `a3 = q33 ρ33`, `a23 = q22 (q32 ρ23 ρ33 − q33 ρ33 ρ22)`,
/// `b = q32 q21 q11`.
pub fn reduced_coefficients_unchecked(cfg: &SystemConfig) -> ReducedCoefficients {
    ReducedCoefficients {
        a2: cfg.q22 * cfg.rho22,
        a3: cfg.q33 * cfg.rho33,
        a23: cfg.q22 * (cfg.q32 * cfg.rho23 * cfg.rho33 - cfg.q33 * cfg.rho33 * cfg.rho22),
        b: cfg.q32 * cfg.q21 * cfg.q11,
        delays: transport_times(cfg),
    }
}

pub fn reduced_coefficients(cfg: &SystemConfig) -> Result<ReducedCoefficients> {
    let rc = reduced_coefficients_unchecked(cfg);
    if rc.b == 0.0 {
        return Err(Error::Validation(
            "input gain b = q32 q21 q11 vanishes; Assumptions 2-3 exclude this".into(),
        ));
    }
    Ok(rc)
}

/// Boundary kernels of the target system, sampled on the `n+1` node grid.
#[derive(Debug, Clone)]
pub struct BoundaryKernels {
    pub n: usize,
    pub p21: Vec<f64>,
    pub w21: Vec<f64>,
    pub p22: Vec<f64>,
    pub w22: Vec<f64>,
    pub p23: Vec<f64>,
    pub w23: Vec<f64>,
    pub p33: Vec<f64>,
    pub w33: Vec<f64>,
    pub j11: Vec<f64>,
    pub c11: Vec<f64>,
    pub j12: Vec<f64>,
    pub c12: Vec<f64>,
    pub j13: Vec<f64>,
    pub c13: Vec<f64>,
    pub j23: Vec<f64>,
    pub c23: Vec<f64>,
}

impl BoundaryKernels {
    pub fn sup_abs(&self) -> f64 {
        self.named()
            .iter()
            .flat_map(|(_, v)| v.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn named(&self) -> Vec<(&'static str, &Vec<f64>)> {
        vec![
            ("P21", &self.p21),
            ("W21", &self.w21),
            ("P22", &self.p22),
            ("W22", &self.w22),
            ("P23", &self.p23),
            ("W23", &self.w23),
            ("P33", &self.p33),
            ("W33", &self.w33),
            ("J11", &self.j11),
            ("C11", &self.c11),
            ("J12", &self.j12),
            ("C12", &self.c12),
            ("J13", &self.j13),
            ("C13", &self.c13),
            ("J23", &self.j23),
            ("C23", &self.c23),
        ]
    }
}

fn combo(scale_a: f64, a: &[f64], scale_b: f64, b: &[f64]) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(x, y)| scale_a * x + scale_b * y)
        .collect()
}

/// Assemble the boundary kernels from the inverse-transform traces.
pub fn boundary_kernels(tr: &InverseTraces, cfg: &SystemConfig) -> BoundaryKernels {
    let scaled = |s: f64, v: &[f64]| -> Vec<f64> { v.iter().map(|x| s * x).collect() };
    let p33 = (0..=tr.n)
        .map(|j| -cfg.q32 * tr.su_at1[j] - cfg.q33 * tr.l3ba_at0[j] + tr.l3aa_at0[j])
        .collect();
    let w33 = (0..=tr.n)
        .map(|j| -cfg.q32 * tr.tu_at1[j] - cfg.q33 * tr.l3bb_at0[j] + tr.l3ab_at0[j])
        .collect();
    let j23 = (0..=tr.n)
        .map(|j| tr.sv_at1[j] - cfg.rho23 * tr.l3ba_at0[j] - cfg.rho22 * tr.su_at1[j])
        .collect();
    let c23 = (0..=tr.n)
        .map(|j| tr.tv_at1[j] - cfg.rho23 * tr.l3bb_at0[j] - cfg.rho22 * tr.tu_at1[j])
        .collect();
    BoundaryKernels {
        n: tr.n,
        p21: scaled(-cfg.q21, &tr.l1aa_at1),
        w21: scaled(-cfg.q21, &tr.l1ab_at1),
        p22: combo(1.0, &tr.l2aa_at0, -cfg.q22, &tr.l2ba_at0),
        w22: combo(1.0, &tr.l2ab_at0, -cfg.q22, &tr.l2bb_at0),
        p23: combo(1.0, &tr.su_at0, -cfg.q22, &tr.sv_at0),
        w23: combo(1.0, &tr.tu_at0, -cfg.q22, &tr.tv_at0),
        p33,
        w33,
        j11: combo(1.0, &tr.l1ba_at1, -cfg.rho11, &tr.l1aa_at1),
        c11: combo(1.0, &tr.l1bb_at1, -cfg.rho11, &tr.l1ab_at1),
        j12: scaled(-cfg.rho12, &tr.l2ba_at0),
        c12: scaled(-cfg.rho12, &tr.l2bb_at0),
        j13: scaled(-cfg.rho12, &tr.sv_at0),
        c13: scaled(-cfg.rho12, &tr.tv_at0),
        j23,
        c23,
    }
}

fn trace_eval(trace: &[f64], x: f64) -> f64 {
    let n = trace.len() - 1;
    let pos = (x.clamp(0.0, 1.0)) * n as f64;
    let j = (pos.floor() as usize).min(n - 1);
    let t = pos - j as f64;
    trace[j] * (1.0 - t) + trace[j + 1] * t
}

/// Sample density (nodes per unit lag) tied to the kernel resolution, so
/// the delay kernels, the composite kernels and the gain collocation all
/// share one lattice.
pub fn sampling_density(cfg: &SystemConfig, n: usize) -> f64 {
    cfg.profile.segment_density() * (n as f64 / 32.0).max(1.0)
}

/// The six delay kernels of the method-of-characteristics rewrite.
#[derive(Debug, Clone)]
pub struct DelayKernels {
    /// `H33` on `[0, τ3]`: self-coupling of `x3`.
    pub h33: PiecewiseKernel,
    /// `H2b3` on `[0, τ3]`: `x3` entering `x2-bar`.
    pub h2b3: PiecewiseKernel,
    /// `H23` on `[0, τ3]`: `x3` entering `x2`.
    pub h23: PiecewiseKernel,
    /// `M` on `[0, τ1]`: control history entering `x2`.
    pub m: PiecewiseKernel,
    /// `H22` on `[0, 1/λ2]`.
    pub h22: PiecewiseKernel,
    /// `H22b` on `[0, 1/μ2]`.
    pub h22b: PiecewiseKernel,
}

/// Build the delay kernels by the stated changes of variables. Leftward
/// transport reflects the argument (`1 − ν μ` forms); the `β3`-carried
/// branches pick up the `ρ33` reflection factor.
pub fn delay_kernels(bk: &BoundaryKernels, cfg: &SystemConfig) -> DelayKernels {
    let (l1, m1) = (cfg.lambda[0], cfg.mu[0]);
    let (l2, m2) = (cfg.lambda[1], cfg.mu[1]);
    let (l3, m3) = (cfg.lambda[2], cfg.mu[2]);
    let t = transport_times(cfg);
    let density = sampling_density(cfg, bk.n);

    let two_branch = |name: &str,
                      cut: f64,
                      end: f64,
                      first: &dyn Fn(f64) -> f64,
                      second: &dyn Fn(f64) -> f64| {
        PiecewiseKernel::sample(name, &[0.0, cut, end], density, |nu, mid| {
            if mid < cut {
                first(nu)
            } else {
                second(nu)
            }
        })
    };

    let h33 = two_branch(
        "H33",
        1.0 / l3,
        t.tau[2],
        &|nu| l3 * trace_eval(&bk.p33, nu * l3),
        &|nu| m3 * cfg.rho33 * trace_eval(&bk.w33, 1.0 - nu * m3 + m3 / l3),
    );
    let h2b3 = two_branch(
        "H2b3",
        1.0 / l3,
        t.tau[2],
        &|nu| l3 * trace_eval(&bk.j23, nu * l3),
        &|nu| m3 * cfg.rho33 * trace_eval(&bk.c23, 1.0 - nu * m3 + m3 / l3),
    );
    let h23 = two_branch(
        "H23",
        1.0 / l3,
        t.tau[2],
        &|nu| l3 * trace_eval(&bk.p23, nu * l3),
        &|nu| m3 * cfg.rho33 * trace_eval(&bk.w23, 1.0 - nu * m3 + m3 / l3),
    );
    let m = two_branch(
        "M",
        1.0 / m1,
        t.tau[0],
        &|nu| m1 * trace_eval(&bk.w21, 1.0 - m1 * nu),
        &|nu| l1 * cfg.q11 * trace_eval(&bk.p21, nu * l1 - l1 / m1),
    );
    let h22 = PiecewiseKernel::sample("H22", &[0.0, 1.0 / l2], density, |nu, _| {
        l2 * trace_eval(&bk.p22, nu * l2)
    });
    let h22b = PiecewiseKernel::sample("H22b", &[0.0, 1.0 / m2], density, |nu, _| {
        m2 * trace_eval(&bk.w22, 1.0 - m2 * nu)
    });

    DelayKernels {
        h33,
        h2b3,
        h23,
        m,
        h22,
        h22b,
    }
}

/// Assemble `N` on `[0, τ2+τ3]` from the twelve elimination pieces.
pub fn assemble_n(
    dk: &DelayKernels,
    rc: &ReducedCoefficients,
    cfg: &SystemConfig,
) -> Result<PiecewiseKernel> {
    let t = rc.delays;
    let inv_l2 = 1.0 / cfg.lambda[1];
    let (tau2, tau3) = (t.tau[1], t.tau[2]);
    let t_end = tau2 + tau3;

    let h22b_sh = dk.h22b.shift(inv_l2, "H22b_sh");
    let pieces: Vec<PiecewiseKernel> = vec![
        dk.h33.clone(),
        dk.h22.clone(),
        h22b_sh.scale(cfg.rho22, "p3"),
        dk.h22.shift(tau3, "p4").scale(-rc.a3, "p4"),
        dk.h22b
            .shift(inv_l2 + tau3, "p5")
            .scale(-rc.a3 * cfg.rho22, "p5"),
        dk.h33.shift(tau2, "p6").scale(-rc.a2, "p6"),
        dk.h33.convolve(&dk.h22, "p7").scale(-1.0, "p7"),
        dk.h33.convolve(&h22b_sh, "p8").scale(-cfg.rho22, "p8"),
        dk.h2b3
            .shift(tau2, "p9")
            .scale(cfg.q22 * cfg.q32, "p9"),
        dk.h22b
            .shift(inv_l2 + tau3, "p10")
            .scale(cfg.q32 * cfg.rho23 * cfg.rho33, "p10"),
        h22b_sh.convolve(&dk.h2b3, "p11").scale(cfg.q32, "p11"),
        dk.h23.shift(inv_l2, "p12").scale(cfg.q32, "p12"),
    ];

    let mut n = PiecewiseKernel::zero("N", t_end);
    for p in &pieces {
        n = n.add(p, "N");
    }
    let clip_tol = cfg.profile.clip_tol();
    let (clipped, excess) = n.clip(t_end, "N");
    if excess > clip_tol {
        return Err(Error::Solver(format!(
            "N has mass {excess:.3e} beyond its support end {t_end:.6}; \
             the delay kernels are inconsistent"
        )));
    }
    Ok(clipped)
}

/// `M~ = q32 M(· − 1/λ2 − pad)` on `[0, τ_u + pad]`. A positive `pad`
/// artificially delays the control so the input delay strictly exceeds the
/// longest state delay.
pub fn assemble_mtilde(
    m: &PiecewiseKernel,
    rc: &ReducedCoefficients,
    cfg: &SystemConfig,
    pad: f64,
) -> PiecewiseKernel {
    let shift = 1.0 / cfg.lambda[1] + pad;
    let _ = rc;
    m.shift(shift, "Mtilde").scale(cfg.q32, "Mtilde")
}

/// Complete data of the reduced scalar equation.
#[derive(Debug, Clone)]
pub struct ReducedIde {
    pub rc: ReducedCoefficients,
    pub n_kernel: PiecewiseKernel,
    pub m_tilde: PiecewiseKernel,
    /// Effective input delay: `τ_u + pad`.
    pub tau_u_eff: f64,
    pub pad: f64,
}

impl ReducedIde {
    pub fn tau_sum(&self) -> f64 {
        self.rc.delays.tau_sum()
    }
}

/// Build the full reduced-equation data from the inverse-transform traces,
/// applying the artificial input delay when needed.
pub fn build_reduced_ide(cfg: &SystemConfig, tr: &InverseTraces) -> Result<ReducedIde> {
    let rc = reduced_coefficients(cfg)?;
    let bk = boundary_kernels(tr, cfg);
    let dk = delay_kernels(&bk, cfg);
    let n_kernel = assemble_n(&dk, &rc, cfg)?;
    let t = rc.delays;
    let pad = if t.tau_u <= t.tau_sum() {
        t.tau_sum() - t.tau_u + EPS_PAD
    } else {
        0.0
    };
    let m_tilde = assemble_mtilde(&dk.m, &rc, cfg, pad);
    Ok(ReducedIde {
        rc,
        n_kernel,
        m_tilde,
        tau_u_eff: t.tau_u + pad,
        pad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SystemConfig;

    fn base_cfg() -> SystemConfig {
        SystemConfig::from_toml_str(
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
q22 = 0.3
q32 = 0.5
q33 = 0.5

[boundary_rho]
rho11 = 0.0
rho12 = 0.0
rho22 = 0.0
rho23 = 0.0
rho33 = 0.4

[numerics]
resolution = 16
"#,
        )
        .unwrap()
    }

    #[test]
    fn coefficient_products() {
        let mut cfg = base_cfg();
        cfg.q33 = 0.5;
        cfg.rho33 = 0.4;
        let rc = reduced_coefficients(&cfg).unwrap();
        assert_eq!(rc.a3, 0.2);
        assert_eq!(rc.b, 0.125);
        // q22 = 0 kills a2 and a23 regardless of the rho values
        cfg.q22 = 0.0;
        cfg.rho22 = 0.7;
        cfg.rho23 = 0.9;
        let rc = reduced_coefficients(&cfg).unwrap();
        assert_eq!(rc.a2, 0.0);
        assert_eq!(rc.a23, 0.0);
    }

    fn synthetic_boundary(n: usize) -> BoundaryKernels {
        BoundaryKernels {
            n,
            p21: vec![0.0; n + 1],
            w21: vec![0.0; n + 1],
            p22: vec![0.0; n + 1],
            w22: vec![0.0; n + 1],
            p23: vec![0.0; n + 1],
            w23: vec![0.0; n + 1],
            p33: vec![0.0; n + 1],
            w33: vec![0.0; n + 1],
            j11: vec![0.0; n + 1],
            c11: vec![0.0; n + 1],
            j12: vec![0.0; n + 1],
            c12: vec![0.0; n + 1],
            j13: vec![0.0; n + 1],
            c13: vec![0.0; n + 1],
            j23: vec![0.0; n + 1],
            c23: vec![0.0; n + 1],
        }
    }

    #[test]
    fn h33_constant_p33() {
        // constant P33 = p, W33 = 0, λ3 = 2: H33 = 2p on [0, 1/2], 0 after
        let mut cfg = base_cfg();
        cfg.lambda[2] = 2.0;
        let mut bk = synthetic_boundary(16);
        bk.p33 = vec![0.7; 17];
        let dk = delay_kernels(&bk, &cfg);
        assert!((dk.h33.eval(0.2) - 1.4).abs() < 1e-12);
        assert!((dk.h33.eval(0.49) - 1.4).abs() < 1e-12);
        assert_eq!(dk.h33.eval(0.8), 0.0);
        // support is the full transport time of subsystem 3
        assert!((dk.h33.support_end() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn h23_two_sided_jump() {
        let cfg = base_cfg();
        let mut bk = synthetic_boundary(16);
        bk.p23 = vec![0.5; 17];
        bk.w23 = vec![0.3; 17];
        let dk = delay_kernels(&bk, &cfg);
        // left limit at 1/λ3: λ3 P23(1) = 0.5; right: μ3 ρ33 W23(1) = 0.12
        assert!((dk.h23.eval_left_limit(1.0) - 0.5).abs() < 1e-10);
        assert!((dk.h23.eval(1.0) - 0.4 * 0.3).abs() < 1e-10);
    }

    #[test]
    fn mtilde_shift_and_scale() {
        let mut cfg = base_cfg();
        cfg.q32 = 2.0;
        let mut bk = synthetic_boundary(16);
        // M = 1 on [0, τ1]: choose W21, P21 so both branches give 1.
        bk.w21 = vec![1.0; 17]; // first branch: μ1 W21(1-ν μ1) = 1
        bk.p21 = vec![2.0; 17]; // second: λ1 q11 P21 = 1*0.5*2 = 1
        let dk = delay_kernels(&bk, &cfg);
        let rc = reduced_coefficients(&cfg).unwrap();
        let mt = assemble_mtilde(&dk.m, &rc, &cfg, 0.0);
        assert_eq!(mt.eval(0.5), 0.0);
        assert!((mt.eval(1.5) - 2.0).abs() < 1e-10);
        // support ends exactly at τ_u = τ1 + 1/λ2 = 3
        assert!((mt.support_end() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn n_reduces_to_h33_when_other_kernels_vanish() {
        // a2 = 0 (rho22 = 0) so the shifted-H33 piece drops too.
        let cfg = base_cfg();
        let rc = reduced_coefficients(&cfg).unwrap();
        let mut bk = synthetic_boundary(16);
        for v in bk.p33.iter_mut() {
            *v = 0.4;
        }
        for v in bk.w33.iter_mut() {
            *v = 0.2;
        }
        let dk = delay_kernels(&bk, &cfg);
        let n = assemble_n(&dk, &rc, &cfg).unwrap();
        for nu in [0.1, 0.9, 1.3, 1.9] {
            assert!(
                (n.eval(nu) - dk.h33.eval(nu)).abs() < 1e-9,
                "nu = {nu}: {} vs {}",
                n.eval(nu),
                dk.h33.eval(nu)
            );
        }
        for nu in [2.3, 3.1, 3.9] {
            assert!(n.eval(nu).abs() < 1e-9);
        }
        assert!((n.support_end() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn n_convolution_oracle_constant_kernels() {
        // With constant H33 = h3 and H22 = h2 only, N = h3 + h2 − h3 h2 ν on
        // [0, min(1/λ2, τ3)); computed here against the quadrature pipeline.
        let cfg = base_cfg();
        let rc = reduced_coefficients(&cfg).unwrap();
        let (h3v, h2v) = (0.6, -0.4);
        let dk = DelayKernels {
            h33: PiecewiseKernel::sample("H33", &[0.0, 2.0], 64.0, |_, _| h3v),
            h2b3: PiecewiseKernel::zero("H2b3", 2.0),
            h23: PiecewiseKernel::zero("H23", 2.0),
            m: PiecewiseKernel::zero("M", 2.0),
            h22: PiecewiseKernel::sample("H22", &[0.0, 1.0], 64.0, |_, _| h2v),
            h22b: PiecewiseKernel::zero("H22b", 1.0),
        };
        let n = assemble_n(&dk, &rc, &cfg).unwrap();
        for nu in [0.1, 0.45, 0.8] {
            let expect = h3v + h2v - h3v * h2v * nu;
            assert!(
                (n.eval(nu) - expect).abs() < 1e-8,
                "nu = {nu}: {} vs {expect}",
                n.eval(nu)
            );
        }
    }

    #[test]
    fn zero_delay_kernels_give_zero_n() {
        let cfg = base_cfg();
        let rc = reduced_coefficients(&cfg).unwrap();
        let bk = synthetic_boundary(16);
        let dk = delay_kernels(&bk, &cfg);
        let n = assemble_n(&dk, &rc, &cfg).unwrap();
        assert!(n.sup_abs() < 1e-12);
        let mt = assemble_mtilde(&dk.m, &rc, &cfg, 0.0);
        assert!(mt.sup_abs() < 1e-12);
    }
}
