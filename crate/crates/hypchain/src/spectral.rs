//! Characteristic functions of the reduced equation and root scans.
//!
//! `F0(s) = 1 − a3 e^{−τ3 s} − a2 e^{−τ2 s} − a23 e^{−(τ2+τ3) s} − ∫ N e^{−ν s}`
//! `F1(s) = b e^{−τ_u s} + ∫ M~ e^{−ν s}`
//!
//! The pointwise-delay ("principal") part of `F0` governs the open-loop
//! margin required before synthesis; the synthesized gains must collapse
//! the closed-loop determinant `det Q = F0 (1 − g^) − F1 f^` back onto the
//! principal part.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::piecewise::PiecewiseKernel;
use crate::reduction::{ReducedCoefficients, ReducedIde};
use crate::synthesis::GainPair;
use crate::{Error, Result};

/// Sentinel margin when the principal part has no delay terms at all.
pub const MARGIN_NONE: f64 = f64::NEG_INFINITY;

fn principal(s: Complex64, rc: &ReducedCoefficients) -> Complex64 {
    let t = rc.delays;
    Complex64::new(1.0, 0.0)
        - rc.a3 * (-t.tau[2] * s).exp()
        - rc.a2 * (-t.tau[1] * s).exp()
        - rc.a23 * (-(t.tau[1] + t.tau[2]) * s).exp()
}

/// `F0` including the distributed kernel.
pub fn eval_f0(s: Complex64, rc: &ReducedCoefficients, n_kernel: &PiecewiseKernel) -> Complex64 {
    principal(s, rc) - n_kernel.laplace(s)
}

/// `F1` with the effective (possibly padded) input delay.
pub fn eval_f1(
    s: Complex64,
    rc: &ReducedCoefficients,
    m_tilde: &PiecewiseKernel,
    tau_u_eff: f64,
) -> Complex64 {
    rc.b * (-tau_u_eff * s).exp() + m_tilde.laplace(s)
}

impl ReducedIde {
    pub fn f0(&self, s: Complex64) -> Complex64 {
        eval_f0(s, &self.rc, &self.n_kernel)
    }
    pub fn f1(&self, s: Complex64) -> Complex64 {
        eval_f1(s, &self.rc, &self.m_tilde, self.tau_u_eff)
    }
}

/// No root of the principal part has a real part above this value
/// (`Σ |a_i| e^{−τ_i σ} < 1` beyond it, any imaginary part).
pub fn certified_upper_bound(rc: &ReducedCoefficients) -> f64 {
    let t = rc.delays;
    let total = rc.a2.abs() + rc.a3.abs() + rc.a23.abs();
    if total == 0.0 {
        return MARGIN_NONE;
    }
    let phi = |sigma: f64| -> f64 {
        rc.a2.abs() * (-t.tau[1] * sigma).exp()
            + rc.a3.abs() * (-t.tau[2] * sigma).exp()
            + rc.a23.abs() * (-(t.tau[1] + t.tau[2]) * sigma).exp()
            - 1.0
    };
    // phi is strictly decreasing with a single zero.
    let (mut lo, mut hi) = (-50.0 / t.tau_min, 50.0 / t.tau_min);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if phi(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn newton_refine<F>(f: &F, mut s: Complex64, iters: usize) -> Complex64
where
    F: Fn(Complex64) -> Complex64,
{
    // Complex Newton with a centered-difference derivative and step damping.
    let h = 1e-6;
    for _ in 0..iters {
        let fs = f(s);
        if fs.norm() < 1e-15 {
            break;
        }
        let d = (f(s + Complex64::new(h, 0.0)) - f(s - Complex64::new(h, 0.0)))
            / Complex64::new(2.0 * h, 0.0);
        if d.norm() < 1e-300 {
            break;
        }
        let mut step = fs / d;
        let mut damp = 1.0;
        while damp > 1e-4 && f(s - step * damp).norm() >= fs.norm() {
            damp *= 0.5;
        }
        s -= step * damp;
        step *= damp;
        if step.norm() < 1e-14 {
            break;
        }
    }
    s
}

/// Winding number of `f` around the rectangle `[re0, re1] x [im0, im1]`,
/// i.e. the number of zeros inside.
fn winding_count<F>(f: &F, re0: f64, re1: f64, im0: f64, im1: f64) -> Result<usize>
where
    F: Fn(Complex64) -> Complex64,
{
    let corners = [
        Complex64::new(re0, im0),
        Complex64::new(re1, im0),
        Complex64::new(re1, im1),
        Complex64::new(re0, im1),
        Complex64::new(re0, im0),
    ];
    let mut total = 0.0;
    for seg in corners.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let mut steps = 256usize;
        'retry: loop {
            let mut acc = 0.0;
            let mut prev = f(a);
            if prev.norm() < 1e-13 {
                return Err(Error::Solver("zero on contour".into()));
            }
            for k in 1..=steps {
                let z = a + (b - a) * (k as f64 / steps as f64);
                let cur = f(z);
                if cur.norm() < 1e-13 {
                    return Err(Error::Solver("zero on contour".into()));
                }
                let dphi = (cur / prev).arg();
                if dphi.abs() > std::f64::consts::FRAC_PI_2 && steps < 1 << 20 {
                    steps *= 4;
                    continue 'retry;
                }
                acc += dphi;
                prev = cur;
            }
            total += acc;
            break;
        }
    }
    Ok((total / (2.0 * std::f64::consts::PI)).round().max(0.0) as usize)
}

/// Largest real part over the roots of the principal (pointwise-delay)
/// part. Scans the band `Im ∈ [0, ω_max]` (conjugate symmetry covers the
/// rest), refines candidates by damped Newton and certifies with the
/// argument principle that no root of the band lies right of the result.
pub fn principal_stability(rc: &ReducedCoefficients) -> f64 {
    match principal_stability_checked(rc) {
        Ok(m) => m,
        Err(_) => certified_upper_bound(rc),
    }
}

pub fn principal_stability_checked(rc: &ReducedCoefficients) -> Result<f64> {
    let t = rc.delays;
    if rc.a2.abs() + rc.a3.abs() + rc.a23.abs() < 1e-300 {
        return Ok(MARGIN_NONE);
    }
    let f = |s: Complex64| principal(s, rc);
    let sigma_max = certified_upper_bound(rc);
    let omega_max = 100.0 / t.tau_min;
    let tau_sum = t.tau_sum();

    let d_sigma = (0.05 / tau_sum).min(0.05);
    let d_omega = std::f64::consts::PI / (4.0 * tau_sum);
    let mut depth = 6.0 / t.tau_min;
    let mut roots: Vec<Complex64> = Vec::new();
    for _attempt in 0..4 {
        let sigma_lo = sigma_max - depth;
        let n_sig = ((sigma_max - sigma_lo) / d_sigma).ceil() as usize + 2;
        let n_om = (omega_max / d_omega).ceil() as usize + 2;
        let candidates: Vec<Complex64> = (0..=n_sig)
            .into_par_iter()
            .flat_map_iter(|i| {
                let sig = sigma_lo + (sigma_max + 2.0 * d_sigma - sigma_lo) * i as f64
                    / n_sig as f64;
                (0..=n_om).filter_map(move |j| {
                    let om = omega_max * j as f64 / n_om as f64;
                    let s = Complex64::new(sig, om);
                    let r = newton_refine(&f, s, 50);
                    (f(r).norm() < 1e-10).then_some(r)
                })
            })
            .collect();
        for r in candidates {
            let r = Complex64::new(r.re, r.im.abs());
            if r.im <= omega_max + 1.0
                && !roots.iter().any(|q| (q - r).norm() < 1e-6)
            {
                roots.push(r);
            }
        }
        if !roots.is_empty() {
            break;
        }
        depth *= 3.0;
    }
    if roots.is_empty() {
        return Err(Error::Solver(
            "principal-part root scan found no roots within budget".into(),
        ));
    }
    let margin = roots.iter().map(|r| r.re).fold(f64::NEG_INFINITY, f64::max);

    // Certify: no roots in the band strictly right of margin + delta.
    let delta = 1e-6;
    let count = winding_count(
        &f,
        margin + delta,
        sigma_max + 0.5,
        -(omega_max + 0.25),
        omega_max + 0.25,
    )
    .unwrap_or(0);
    if count > 0 {
        // A root right of the scan result: fall back to the certified bound.
        return Ok(sigma_max);
    }
    Ok(margin)
}

/// Rectangle scan summary of the rank condition surrogate.
#[derive(Debug, Clone, Serialize)]
pub struct ControllabilityReport {
    pub re_range: (f64, f64),
    pub im_range: (f64, f64),
    /// Minimum over scan nodes of `max(|F0|, |F1|)`.
    pub min_joint: f64,
    pub at: (f64, f64),
    pub rank_tol: f64,
    pub flagged: bool,
}

/// Scan `max(|F0|, |F1|)` over a rectangle; flag near-common zeros after a
/// local refinement of `F0`.
pub fn controllability_scan(
    ide: &ReducedIde,
    re_range: (f64, f64),
    im_max: f64,
    nodes: usize,
) -> ControllabilityReport {
    let rank_tol = 1e-6 * (1.0 + ide.rc.b.abs());
    let results: Vec<(f64, f64, f64)> = (0..=nodes)
        .into_par_iter()
        .flat_map_iter(|i| {
            let re = re_range.0 + (re_range.1 - re_range.0) * i as f64 / nodes as f64;
            (0..=nodes).map(move |j| {
                let im = im_max * j as f64 / nodes as f64;
                (re, im, i + j)
            })
        })
        .map(|(re, im, _)| {
            let s = Complex64::new(re, im);
            let joint = ide.f0(s).norm().max(ide.f1(s).norm());
            (re, im, joint)
        })
        .collect();
    let mut min_joint = f64::INFINITY;
    let mut at = (0.0, 0.0);
    for (re, im, j) in results {
        if j < min_joint {
            min_joint = j;
            at = (re, im);
        }
    }
    // Local refinement: chase the nearest F0 root and re-evaluate F1 there.
    let f0 = |s: Complex64| ide.f0(s);
    let refined = newton_refine(&f0, Complex64::new(at.0, at.1), 50);
    let mut flagged = false;
    if ide.f0(refined).norm() < rank_tol {
        let joint = ide.f1(refined).norm();
        if joint < rank_tol {
            flagged = true;
            min_joint = min_joint.min(joint);
            at = (refined.re, refined.im);
        }
    }
    ControllabilityReport {
        re_range,
        im_range: (0.0, im_max),
        min_joint,
        at,
        rank_tol,
        flagged,
    }
}

/// `det Q(s) = F0 (1 − g^) − F1 f^`.
pub fn det_q(s: Complex64, ide: &ReducedIde, gains: &GainPair) -> Complex64 {
    let g_hat = gains.g.laplace(s);
    let f_hat = gains.f.laplace(s);
    ide.f0(s) * (Complex64::new(1.0, 0.0) - g_hat) - ide.f1(s) * f_hat
}

/// Sup over a rectangular grid of `|det Q − principal part|`. This is the
/// synthesis correctness oracle: perfect gains collapse the characteristic
/// function onto the pointwise-delay part.
pub fn closed_loop_identity_check(
    ide: &ReducedIde,
    gains: &GainPair,
    re_range: (f64, f64),
    im_max: f64,
    nodes: usize,
) -> f64 {
    (0..=nodes)
        .into_par_iter()
        .map(|i| {
            let re = re_range.0 + (re_range.1 - re_range.0) * i as f64 / nodes as f64;
            let mut worst = 0.0f64;
            for j in 0..=nodes {
                let im = im_max * j as f64 / nodes as f64;
                let s = Complex64::new(re, im);
                let dev = (det_q(s, ide, gains) - principal(s, &ide.rc)).norm();
                worst = worst.max(dev);
            }
            worst
        })
        .reduce(|| 0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::transport_times;
    use crate::config::SystemConfig;

    fn rc_with(a2: f64, a3: f64, a23: f64, taus: [f64; 3]) -> ReducedCoefficients {
        let text = format!(
            r#"
[velocities]
lambda = [{}, {}, {}]
mu = [{}, {}, {}]

[sigma]
s1_plus = {{ kind = "constant", value = 0.0 }}
s1_minus = {{ kind = "constant", value = 0.0 }}
s2_plus = {{ kind = "constant", value = 0.0 }}
s2_minus = {{ kind = "constant", value = 0.0 }}
s3_plus = {{ kind = "constant", value = 0.0 }}
s3_minus = {{ kind = "constant", value = 0.0 }}

[boundary_q]
q11 = 0.5
q21 = 0.5
q22 = 0.1
q32 = 0.5
q33 = 0.1

[boundary_rho]
rho11 = 0.0
rho12 = 0.0
rho22 = 0.0
rho23 = 0.0
rho33 = 0.0

[numerics]
resolution = 16
"#,
            2.0 / taus[0],
            2.0 / taus[1],
            2.0 / taus[2],
            2.0 / taus[0],
            2.0 / taus[1],
            2.0 / taus[2]
        );
        let cfg = SystemConfig::from_toml_str(&text).unwrap();
        ReducedCoefficients {
            a2,
            a3,
            a23,
            b: 0.125,
            delays: transport_times(&cfg),
        }
    }

    #[test]
    fn f0_at_zero_with_zero_kernel() {
        let rc = rc_with(0.2, 0.3, 0.1, [2.0, 2.0, 2.0]);
        let n = PiecewiseKernel::zero("N", 4.0);
        let v = eval_f0(Complex64::new(0.0, 0.0), &rc, &n);
        assert!((v.re - (1.0 - 0.3 - 0.2 - 0.1)).abs() < 1e-14);
        assert!(v.im.abs() < 1e-14);
    }

    #[test]
    fn f0_closed_form_root() {
        // a2 = a23 = 0, N = 0: F0 vanishes at s = ln(a3)/τ3.
        let rc = rc_with(0.0, 0.5, 0.0, [2.0, 2.0, 2.0]);
        let n = PiecewiseKernel::zero("N", 4.0);
        let s = Complex64::new((0.5f64).ln() / 2.0, 0.0);
        assert!(eval_f0(s, &rc, &n).norm() < 1e-14);
    }

    #[test]
    fn f0_constant_kernel_at_zero() {
        let rc = rc_with(0.2, 0.3, 0.1, [2.0, 2.0, 2.0]);
        let n = PiecewiseKernel::sample("N", &[0.0, 4.0], 512.0, |_, _| 0.05);
        let v = eval_f0(Complex64::new(0.0, 0.0), &rc, &n);
        assert!((v.re - (1.0 - 0.6 - 0.05 * 4.0)).abs() < 1e-10, "{v}");
    }

    #[test]
    fn f1_basics() {
        let rc = rc_with(0.0, 0.0, 0.0, [2.0, 2.0, 2.0]);
        let mt = PiecewiseKernel::zero("Mt", 3.0);
        let v = eval_f1(Complex64::new(0.0, 0.0), &rc, &mt, 3.0);
        assert!((v.re - rc.b).abs() < 1e-14);
        // constant M~ = 0.2 on [1, 3]: F1(0) = b + 0.2 (3 - 1)
        let mt = PiecewiseKernel::sample("Mt", &[0.0, 1.0, 3.0], 64.0, |_, mid| {
            if mid < 1.0 {
                0.0
            } else {
                0.2
            }
        });
        let v = eval_f1(Complex64::new(0.0, 0.0), &rc, &mt, 3.0);
        assert!((v.re - (0.125 + 0.2 * 2.0)).abs() < 1e-9, "{v}");
    }

    #[test]
    fn conjugate_symmetry() {
        let rc = rc_with(0.2, -0.3, 0.05, [1.5, 2.0, 2.5]);
        let n = PiecewiseKernel::sample("N", &[0.0, 4.5], 64.0, |nu, _| 0.1 * nu);
        for (re, im) in [(0.3, 1.7), (-0.5, 4.0)] {
            let s = Complex64::new(re, im);
            let a = eval_f0(s, &rc, &n);
            let b = eval_f0(s.conj(), &rc, &n);
            assert!((a.conj() - b).norm() < 1e-12);
        }
    }

    #[test]
    fn margin_sentinel_without_delay_terms() {
        let rc = rc_with(0.0, 0.0, 0.0, [2.0, 2.0, 2.0]);
        assert_eq!(principal_stability(&rc), MARGIN_NONE);
    }

    #[test]
    fn margin_single_term_stable() {
        let rc = rc_with(0.0, 0.5, 0.0, [2.0, 2.0, 2.0]);
        let margin = principal_stability(&rc);
        let exact = (0.5f64).ln() / 2.0;
        assert!(
            (margin - exact).abs() < 1e-6,
            "margin {margin}, exact {exact}"
        );
    }

    #[test]
    fn margin_single_term_unstable() {
        let rc = rc_with(0.0, 1.5, 0.0, [2.0, 2.0, 2.0]);
        let margin = principal_stability(&rc);
        let exact = (1.5f64).ln() / 2.0;
        assert!(
            (margin - exact).abs() < 1e-6,
            "margin {margin}, exact {exact}"
        );
    }

    #[test]
    fn margin_two_terms_is_certified_below_bound() {
        let rc = rc_with(0.25, 0.3, -0.1, [1.5, 2.0, 2.5]);
        let margin = principal_stability(&rc);
        assert!(margin < 0.0, "dissipative couplings must be stable: {margin}");
        assert!(margin <= certified_upper_bound(&rc) + 1e-12);
    }

    #[test]
    fn controllability_no_flag_for_nonzero_b() {
        let rc = rc_with(0.0, 0.5, 0.0, [2.0, 2.0, 2.0]);
        let ide = ReducedIde {
            rc,
            n_kernel: PiecewiseKernel::zero("N", 4.0),
            m_tilde: PiecewiseKernel::zero("Mt", 5.0),
            tau_u_eff: 5.0,
            pad: 0.0,
        };
        let rep = controllability_scan(&ide, (-1.0, 1.0), 20.0, 40);
        assert!(!rep.flagged);
        assert!(rep.min_joint > rep.rank_tol);
    }

    #[test]
    fn controllability_flags_degenerate_input() {
        // b = 0 and M~ = 0 make F1 vanish identically.
        let mut rc = rc_with(0.0, 0.5, 0.0, [2.0, 2.0, 2.0]);
        rc.b = 0.0;
        let ide = ReducedIde {
            rc,
            n_kernel: PiecewiseKernel::zero("N", 4.0),
            m_tilde: PiecewiseKernel::zero("Mt", 5.0),
            tau_u_eff: 5.0,
            pad: 0.0,
        };
        let rep = controllability_scan(&ide, (-1.0, 1.0), 20.0, 40);
        assert!(rep.flagged);
    }
}
