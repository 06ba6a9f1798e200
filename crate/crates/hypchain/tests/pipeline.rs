//! Cross-module properties: reduction fidelity, spectral/simulation
//! consistency, determinism and caching.

use hypchain::config::{transport_times, SystemConfig};
use hypchain::pipeline::{self, Pipeline};
use hypchain::reduction::ReducedCoefficients;
use hypchain::{ide_sim, kernels, pde_sim, reduction, spectral, synthesis, transform};
use num_complex::Complex64;

fn demo(name: &str) -> SystemConfig {
    let text = match name {
        "zero" => pipeline::DEMO_SIGMA_ZERO,
        "destab" => pipeline::DEMO_DESTABILIZING,
        "swapped" => pipeline::DEMO_SWAPPED_TAU,
        _ => pipeline::DEMO_FAST_CHAIN,
    };
    SystemConfig::from_toml_str(text).unwrap()
}

#[test]
fn swapped_tau_chain_stabilizes() {
    let cfg = demo("swapped");
    let p = Pipeline::new(cfg.clone()).with_resolution(48).with_cache_dir(None);
    let report = p.validate();
    assert!(report.tau_order_swapped);
    assert!(report.assumption1_margin < 0.0);

    let cl = pipeline::build_closed_loop(&cfg, 48).unwrap();
    assert!(
        !cl.gains.layout.f3.is_empty(),
        "distinct transport times must activate the middle gain piece"
    );
    assert!(cl.synth.residuals.sup() < 1e-4);
    let (err, pde, _) = pipeline::cross_simulator_check(&cl, 40.0, 0.005).unwrap();
    assert!(err < 0.05, "cross-simulator error {err}");
    assert!(pde.consistency_sup < 1e-4);
    let (rate, r2) = {
        let ctx = pde_sim::ControlContext::new(
            &cfg,
            &cl.stage.kernels,
            &cl.stage.transform,
            &cl.boundary,
            &cl.ide,
            Some(&cl.gains),
        );
        let closed = pde_sim::simulate_closed_loop(&ctx, 60.0, 0.02, true).unwrap();
        pde_sim::fit_norm_decay(&closed).unwrap()
    };
    assert!(rate < 0.0 && r2 > 0.9, "rate {rate}, r2 {r2}");
}

#[test]
fn principal_margin_matches_open_loop_decay() {
    // The sign of the scan margin must agree with the simulated pure
    // difference equation over a battery of coefficient samples.
    let cfg = demo("zero");
    let delays = transport_times(&cfg);
    let battery = [
        (0.3, 0.4, 0.1),
        (-0.5, 0.3, -0.2),
        (0.7, 0.6, 0.0),
        (0.9, 0.4, 0.2),
        (-1.1, 0.3, 0.1),
        (0.2, -0.8, 0.3),
    ];
    for (a2, a3, a23) in battery {
        let rc = ReducedCoefficients {
            a2,
            a3,
            a23,
            b: 0.125,
            delays,
        };
        let margin = spectral::principal_stability(&rc);
        if margin.abs() < 0.05 {
            continue;
        }
        let ide = reduction::ReducedIde {
            rc,
            n_kernel: hypchain::PiecewiseKernel::zero("N", delays.tau_sum()),
            m_tilde: hypchain::PiecewiseKernel::zero("Mt", delays.tau_u),
            tau_u_eff: delays.tau_u,
            pad: 0.0,
        };
        let tr = ide_sim::simulate(&ide, None, &|t| (1.0 + t).cos(), &|_| 0.0, 80.0, Some(0.01))
            .unwrap();
        let early = tr.sup_x_in(0.0, 8.0).max(1e-12);
        let late = tr.sup_x_in(72.0, 80.0);
        let decays = late < early;
        assert_eq!(
            margin < 0.0,
            decays,
            "coefficients ({a2},{a3},{a23}): margin {margin}, early {early}, late {late}"
        );
    }
}

#[test]
fn f0_quadrature_second_order_in_kernel_sampling() {
    let cfg = demo("zero");
    let delays = transport_times(&cfg);
    let rc = ReducedCoefficients {
        a2: 0.1,
        a3: 0.2,
        a23: 0.0,
        b: 0.125,
        delays,
    };
    let smooth = |nu: f64| (0.7 * nu).sin() * (-0.3 * nu).exp();
    let tsum = delays.tau_sum();
    let build = |d: f64| {
        hypchain::PiecewiseKernel::sample("N", &[0.0, tsum], d, |nu, _| smooth(nu))
    };
    let s = Complex64::new(0.4, 3.0);
    let coarse = spectral::eval_f0(s, &rc, &build(16.0));
    let mid = spectral::eval_f0(s, &rc, &build(32.0));
    let fine = spectral::eval_f0(s, &rc, &build(64.0));
    let d1 = (coarse - fine).norm();
    let d2 = (mid - fine).norm();
    assert!(
        d2 < 0.35 * d1,
        "doubling the quadrature nodes should reduce the change at second \
         order: {d1:.3e} vs {d2:.3e}"
    );
}

#[test]
fn f1_dominant_term_at_large_imaginary_part() {
    // Riemann-Lebesgue: the kernel integral decays, leaving b e^{-Tu s}.
    let cfg = demo("destab");
    let p = Pipeline::new(cfg.clone()).with_resolution(32).with_cache_dir(None);
    let stage = p.kernels().unwrap();
    let (_, ide) = p.reduce(&stage).unwrap();
    assert!(ide.m_tilde.sup_abs() > 1e-3, "test needs a non-trivial kernel");
    for re in [-0.5, 0.0, 0.5] {
        let s = Complex64::new(re, 1e3);
        let dominant = ide.rc.b.abs() * (-ide.tau_u_eff * re).exp();
        // At ω = 1e3 the trapezoid rule aliases (ω h >> 1); the exact
        // per-cell transform of the stored kernel is the meaningful value.
        let got = (ide.rc.b * (-ide.tau_u_eff * s).exp() + ide.m_tilde.laplace_exact(s)).norm();
        assert!(
            (got - dominant).abs() <= 0.05 * dominant,
            "Re {re}: |F1| = {got:.5}, dominant {dominant:.5}"
        );
    }
}

#[test]
fn identity_check_detects_perturbed_gains() {
    let cfg = demo("fast");
    let cl = pipeline::build_closed_loop(&cfg, 48).unwrap();
    let clean =
        spectral::closed_loop_identity_check(&cl.ide, &cl.gains, (-1.0, 1.0), 30.0, 60);
    let mut values = cl.gains.values.clone();
    let mid = cl.gains.layout.g.len() / 2;
    values[mid] += 0.1;
    let perturbed_gains = synthesis::GainPair::from_values(cl.gains.layout.clone(), values);
    let perturbed =
        spectral::closed_loop_identity_check(&cl.ide, &perturbed_gains, (-1.0, 1.0), 30.0, 60);
    assert!(
        perturbed > 10.0 * clean,
        "perturbation must be visible: clean {clean:.3e}, perturbed {perturbed:.3e}"
    );
}

#[test]
fn transform_commutes_with_transport() {
    // In target variables the evolution is pure transport: advancing one
    // step and shifting along the characteristic agree to O(dt).
    let cfg = demo("destab");
    let p = Pipeline::new(cfg.clone()).with_resolution(48).with_cache_dir(None);
    let stage = p.kernels().unwrap();
    let (dt, cells) = pde_sim::plan_grids(&cfg, 0.01).unwrap();
    let mut state = pde_sim::PdeState::from_initial(&cfg, dt, &cells);
    // settle a couple of steps so boundary values are populated
    for _ in 0..4 {
        state.step(&cfg, 0.0).unwrap();
    }
    let before = pde_sim::forward_transform_views(&state, &stage.transform);
    state.step(&cfg, 0.0).unwrap();
    let after = pde_sim::forward_transform_views(&state, &stage.transform);
    let n = before.n;
    let lam3 = cfg.lambda[2];
    let mut worst = 0.0f64;
    for j in 0..=n {
        let x = j as f64 / n as f64;
        let x_src = x - lam3 * dt;
        if x_src < 0.0 {
            continue;
        }
        let pos = x_src * n as f64;
        let k = (pos.floor() as usize).min(n - 1);
        let t = pos - k as f64;
        let shifted = before.alpha(2)[k] * (1.0 - t) + before.alpha(2)[k + 1] * t;
        worst = worst.max((after.alpha(2)[j] - shifted).abs());
    }
    assert!(worst < 10.0 * dt, "commutation defect {worst} at dt {dt}");
}

#[test]
fn norm_equivalence_within_transform_condition() {
    let cfg = demo("destab");
    let p = Pipeline::new(cfg.clone()).with_resolution(40).with_cache_dir(None);
    let stage = p.kernels().unwrap();
    let (dt, cells) = pde_sim::plan_grids(&cfg, 0.02).unwrap();
    let mut state = pde_sim::PdeState::from_initial(&cfg, dt, &cells);
    for k in 0..40 {
        state.step(&cfg, (0.3 * k as f64).sin()).unwrap();
        let views = pde_sim::forward_transform_views(&state, &stage.transform);
        let phys = state.l2_norm();
        let target = views.l2_norm();
        let c = stage.transform.condition;
        assert!(
            target <= c * phys + 1e-12 && phys <= c * target + 1e-12,
            "norms fell outside the condition bound: {phys} vs {target} (cond {c})"
        );
    }
}

#[test]
fn reflection_cancellation_without_couplings() {
    // With zero sigma everywhere and rho11 the only right-end reflection,
    // the law collapses to U = -rho11 u1(t,1): the controlled boundary
    // transports nothing back.
    let mut cfg = demo("zero");
    cfg.rho11 = 1.0;
    let p = Pipeline::new(cfg.clone()).with_resolution(32).with_cache_dir(None);
    let stage = p.kernels().unwrap();
    let (bk, ide) = p.reduce(&stage).unwrap();
    let gains = synthesis::GainPair::zero(&ide);
    let ctx = pde_sim::ControlContext::new(
        &cfg,
        &stage.kernels,
        &stage.transform,
        &bk,
        &ide,
        Some(&gains),
    );
    let trace = pde_sim::simulate_closed_loop(&ctx, 10.0, 0.05, true).unwrap();
    // U(t) = -u1(t,1); v1(t,1) = U + rho11 u1(t,1) = 0. The cancelled
    // boundary drains subsystem 1, so probe while the initial bump is
    // still inside.
    let early_sup = trace
        .times
        .iter()
        .zip(&trace.u)
        .filter(|(t, _)| **t < 1.5)
        .fold(0.0f64, |m, (_, u)| m.max(u.abs()));
    assert!(early_sup > 1e-3, "control must be active early on");
    // Re-simulate recording v1(1): the simplest check is that beta1(1) = Ubar = 0,
    // which the consistency defect already witnesses.
    assert!(
        trace.consistency_sup < 1e-10,
        "boundary trace defect {}",
        trace.consistency_sup
    );
}

#[test]
fn boundary_kernel_traces_match_inverse_kernels() {
    // P21 is the (scaled) trace of the subsystem-1 inverse kernel.
    let text = pipeline::DEMO_SIGMA_ZERO
        .replace(
            "s1_plus = { kind = \"constant\", value = 0.0 }",
            "s1_plus = { kind = \"constant\", value = 0.4 }",
        )
        .replace(
            "s1_minus = { kind = \"constant\", value = 0.0 }",
            "s1_minus = { kind = \"constant\", value = 0.3 }",
        );
    let cfg = SystemConfig::from_toml_str(&text).unwrap();
    let p = Pipeline::new(cfg.clone()).with_resolution(24).with_cache_dir(None);
    let stage = p.kernels().unwrap();
    let bk = reduction::boundary_kernels(&stage.traces, &cfg);
    for j in 0..=24 {
        let expect = -cfg.q21 * stage.traces.l1aa_at1[j];
        assert!((bk.p21[j] - expect).abs() < 1e-12);
    }
    assert!(bk.p21.iter().any(|v| v.abs() > 1e-3), "trace must be non-trivial");
}

#[test]
fn deterministic_artifacts() {
    let cfg = demo("destab");
    let run = || {
        let p = Pipeline::new(cfg.clone()).with_resolution(24).with_cache_dir(None);
        let stage = p.kernels().unwrap();
        let (bk, ide) = p.reduce(&stage).unwrap();
        let _ = &bk;
        (
            stage.kernels.k[2][kernels::UU].to_csv(),
            ide.n_kernel.to_csv(),
        )
    };
    let (a1, a2) = run();
    let (b1, b2) = run();
    assert_eq!(a1, b1);
    assert_eq!(a2, b2);
}

#[test]
fn kernel_cache_round_trip() {
    let cfg = demo("destab");
    let dir = std::env::temp_dir().join(format!("hypchain_cache_test_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    let p = Pipeline::new(cfg.clone())
        .with_resolution(24)
        .with_cache_dir(Some(dir.clone()));
    let first = p.kernels().unwrap();
    assert!(!first.cache_hit);
    let second = p.kernels().unwrap();
    assert!(second.cache_hit, "second solve must come from the cache");
    let d = first
        .kernels
        .k
        .iter()
        .flatten()
        .zip(second.kernels.k.iter().flatten())
        .map(|(a, b)| a.sup_diff(b))
        .fold(0.0f64, f64::max);
    assert!(d <= 1e-15, "cached kernels differ by {d}");
    assert!(
        (first.transform.condition - second.transform.condition).abs() < 1e-12
    );
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn config_hash_tracks_every_field() {
    let base = SystemConfig::from_toml_str(pipeline::DEMO_DESTABILIZING).unwrap();
    let edited = SystemConfig::from_toml_str(
        &pipeline::DEMO_DESTABILIZING.replace("q21 = 0.8", "q21 = 0.81"),
    )
    .unwrap();
    assert_ne!(base.content_hash(), edited.content_hash());
    let again = SystemConfig::from_toml_str(pipeline::DEMO_DESTABILIZING).unwrap();
    assert_eq!(base.content_hash(), again.content_hash());
}

#[test]
fn transform_round_trip_on_states() {
    let cfg = demo("destab");
    let dk = kernels::solve_direct(&cfg, 32).unwrap();
    let t = transform::invert(transform::assemble_forward(&dk), 1e10).unwrap();
    let n = 32;
    let dim = t.layout.dim();
    let mut w = nalgebra::DVector::zeros(dim);
    for c in 0..6 {
        for j in 0..=n {
            let x = j as f64 / n as f64;
            w[c * (n + 1) + j] = ((c + 1) as f64 * x * 2.1).sin() + 0.5 * x;
        }
    }
    let round = t.apply_inverse(&t.apply(&w));
    assert!((round - w).amax() < 1e-10);
}

#[test]
fn synthesis_refused_when_principal_part_unstable() {
    // a3 = q33 rho33 = 1.44: the pointwise-delay part has the real root
    // ln(1.44)/tau3 > 0 and the gain solve must refuse.
    let text = pipeline::DEMO_SIGMA_ZERO
        .replace("q33 = 0.3", "q33 = 1.2")
        .replace("rho33 = 0.3", "rho33 = 1.2")
        .replace("q22 = 0.3", "q22 = 0.0")
        .replace("rho23 = 0.2", "rho23 = 0.0");
    let cfg = SystemConfig::from_toml_str(&text).unwrap();
    let p = Pipeline::new(cfg.clone()).with_resolution(16).with_cache_dir(None);
    let report = p.validate();
    let exact = (1.44f64).ln() / 2.0;
    assert!(
        (report.assumption1_margin - exact).abs() < 1e-6,
        "margin {} vs {exact}",
        report.assumption1_margin
    );
    let stage = p.kernels().unwrap();
    let (_, ide) = p.reduce(&stage).unwrap();
    let err = p.synthesize(&ide).unwrap_err();
    assert!(err.to_string().contains("refused"), "{err}");
}

#[test]
fn dissipative_mixed_sign_couplings_are_stable() {
    let text = pipeline::DEMO_SIGMA_ZERO
        .replace("q22 = 0.3", "q22 = 0.3")
        .replace("rho22 = -0.3", "rho22 = 0.3")
        .replace("rho23 = 0.2", "rho23 = -0.3")
        .replace("q33 = 0.3", "q33 = -0.3");
    let cfg = SystemConfig::from_toml_str(&text).unwrap();
    let report = hypchain::config::validate(&cfg);
    assert!(
        report.assumption1_margin < 0.0,
        "margin {}",
        report.assumption1_margin
    );
}
