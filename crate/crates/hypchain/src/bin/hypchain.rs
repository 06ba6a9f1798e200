//! Batch front end: validate a configuration, solve kernels, reduce, scan,
//! synthesize gains and simulate, writing CSV artifacts and JSON reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use hypchain::config::SystemConfig;
use hypchain::pipeline::{self, Pipeline};
use hypchain::report::{PipelineManifest, StageInfo};
use hypchain::{ide_sim, pde_sim, Error};

#[derive(Parser)]
#[command(
    name = "hypchain",
    about = "Boundary stabilization pipeline for a chain of three coupled \
             hyperbolic transport systems"
)]
struct Cli {
    /// Configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for artifacts and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override the kernel grid resolution from the config.
    #[arg(long, global = true)]
    resolution: Option<usize>,
    /// Requested simulation step.
    #[arg(long, global = true)]
    dt: Option<f64>,
    /// Simulation horizon.
    #[arg(long, global = true)]
    t_final: Option<f64>,
    /// Tolerance profile override: fast | strict.
    #[arg(long, global = true)]
    tolerance_profile: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Structural checks and the principal stability margin.
    Validate,
    /// Solve the backstepping kernels and the state transform.
    Kernels,
    /// Assemble boundary/delay kernels and the reduced equation data.
    Reduce,
    /// Characteristic-function scans and margins.
    Spectrum,
    /// Solve for the controller gains and verify them spectrally.
    Synthesize,
    /// Simulate the reduced scalar equation (open and closed loop).
    SimulateIde,
    /// Simulate the full chain in closed loop.
    SimulatePde {
        /// Write full-field snapshots every this many steps.
        #[arg(long)]
        snapshot_stride: Option<usize>,
    },
    /// Run the acceptance battery.
    Verify {
        /// Smaller resolutions, for smoke runs.
        #[arg(long)]
        quick: bool,
    },
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Parse(_) | Error::Validation(_) => 2,
        _ => 3,
    }
}

fn load_config(cli: &Cli) -> Result<SystemConfig, Error> {
    let path = cli.config.as_ref().ok_or_else(|| {
        Error::Validation("--config is required for this subcommand".into())
    })?;
    let mut cfg = SystemConfig::from_path(path)?;
    if let Some(profile) = &cli.tolerance_profile {
        cfg.profile = match profile.as_str() {
            "fast" => hypchain::config::ToleranceProfile::Fast,
            "strict" => hypchain::config::ToleranceProfile::Strict,
            other => {
                return Err(Error::Validation(format!(
                    "unknown tolerance profile '{other}'"
                )))
            }
        };
    }
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn record_stage(out: &Path, name: &str, key: &str, secs: f64, artifacts: Vec<String>, hit: bool) {
    let path = out.join("manifest.json");
    let mut manifest: PipelineManifest = std::fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();
    manifest.config_hash = key.split('_').next().unwrap_or("").to_string();
    manifest.stages.insert(
        name.to_string(),
        StageInfo {
            key: key.to_string(),
            seconds: secs,
            artifacts,
            cache_hit: hit,
        },
    );
    let _ = write(&path, &serde_json::to_string_pretty(&manifest).unwrap());
}

fn pipeline_for(cli: &Cli, cfg: SystemConfig) -> Pipeline {
    let mut p = Pipeline::new(cfg);
    if let Some(n) = cli.resolution {
        p = p.with_resolution(n);
    }
    if std::env::var_os("HYPCHAIN_CACHE").is_none() {
        p = p.with_cache_dir(Some(cli.out.join(".cache")));
    }
    p
}

fn run(cli: &Cli) -> Result<bool, Error> {
    match &cli.cmd {
        Cmd::Validate => {
            let cfg = load_config(cli)?;
            let p = pipeline_for(cli, cfg);
            let report = p.validate();
            let json = serde_json::to_string_pretty(&report).unwrap();
            write(&cli.out.join("validation.json"), &json)?;
            println!("{json}");
            Ok(report.synthesis_admissible())
        }
        Cmd::Kernels => {
            let cfg = load_config(cli)?;
            let p = pipeline_for(cli, cfg.clone());
            let t0 = Instant::now();
            let stage = p.kernels()?;
            let mut artifacts = Vec::new();
            for (name, grid) in stage.kernels.named_grids() {
                let path = cli.out.join("kernels").join(format!("{name}.csv"));
                write(&path, &grid.to_csv())?;
                artifacts.push(path.display().to_string());
            }
            let report = hypchain::report::KernelReport {
                resolution: stage.kernels.n,
                condition_violation_sup: stage.kernels.condition_sup,
                transform_condition: stage.transform.condition,
                pde_residuals: hypchain::kernels::kernel_residual(&stage.kernels, &cfg),
                cache_hit: stage.cache_hit,
            };
            write(
                &cli.out.join("kernels.json"),
                &serde_json::to_string_pretty(&report).unwrap(),
            )?;
            record_stage(
                &cli.out,
                "kernels",
                &p.cache_key(),
                t0.elapsed().as_secs_f64(),
                artifacts,
                stage.cache_hit,
            );
            println!(
                "kernels solved at n = {}: condition violations {:.2e}, \
                 transform condition {:.2e}{}",
                stage.kernels.n,
                stage.kernels.condition_sup,
                stage.transform.condition,
                if stage.cache_hit { " (cached)" } else { "" }
            );
            Ok(true)
        }
        Cmd::Reduce => {
            let cfg = load_config(cli)?;
            let p = pipeline_for(cli, cfg);
            let t0 = Instant::now();
            let stage = p.kernels()?;
            let (bk, ide) = p.reduce(&stage)?;
            let mut artifacts = Vec::new();
            for (name, vals) in bk.named() {
                let mut csv = String::from("y,value\n");
                let n = vals.len() - 1;
                for (j, v) in vals.iter().enumerate() {
                    csv.push_str(&format!("{:.9},{v:.12e}\n", j as f64 / n as f64));
                }
                let path = cli.out.join("reduction").join(format!("{name}.csv"));
                write(&path, &csv)?;
                artifacts.push(path.display().to_string());
            }
            for k in [&ide.n_kernel, &ide.m_tilde] {
                let path = cli.out.join("reduction").join(format!("{}.csv", k.name));
                write(&path, &k.to_csv())?;
                artifacts.push(path.display().to_string());
            }
            let report = hypchain::report::ReductionReport {
                coefficients: ide.rc,
                n_support: ide.n_kernel.support_end(),
                n_sup: ide.n_kernel.sup_abs(),
                m_tilde_support: ide.m_tilde.support_end(),
                m_tilde_sup: ide.m_tilde.sup_abs(),
                input_delay_padding: ide.pad,
            };
            write(
                &cli.out.join("reduction.json"),
                &serde_json::to_string_pretty(&report).unwrap(),
            )?;
            record_stage(
                &cli.out,
                "reduce",
                &p.cache_key(),
                t0.elapsed().as_secs_f64(),
                artifacts,
                stage.cache_hit,
            );
            println!(
                "reduced equation: a2 {:.4}, a3 {:.4}, a23 {:.4}, b {:.4}, \
                 |N| {:.4}, |M~| {:.4}",
                ide.rc.a2,
                ide.rc.a3,
                ide.rc.a23,
                ide.rc.b,
                ide.n_kernel.sup_abs(),
                ide.m_tilde.sup_abs()
            );
            Ok(true)
        }
        Cmd::Spectrum => {
            let cfg = load_config(cli)?;
            let p = pipeline_for(cli, cfg);
            let t0 = Instant::now();
            let stage = p.kernels()?;
            let (_, ide) = p.reduce(&stage)?;
            let report = p.spectrum(&ide);
            // scan CSV over the controllability region
            let mut csv = String::from("re,im,abs_f0,abs_f1\n");
            let (r0, r1) = report.controllability.re_range;
            let im_max = report.controllability.im_range.1;
            for i in 0..=100 {
                let re = r0 + (r1 - r0) * i as f64 / 100.0;
                for j in 0..=100 {
                    let im = im_max * j as f64 / 100.0;
                    let s = num_complex::Complex64::new(re, im);
                    csv.push_str(&format!(
                        "{re:.6},{im:.6},{:.6e},{:.6e}\n",
                        ide.f0(s).norm(),
                        ide.f1(s).norm()
                    ));
                }
            }
            let scan_path = cli.out.join("spectrum_scan.csv");
            write(&scan_path, &csv)?;
            write(
                &cli.out.join("spectrum.json"),
                &serde_json::to_string_pretty(&report).unwrap(),
            )?;
            record_stage(
                &cli.out,
                "spectrum",
                &p.cache_key(),
                t0.elapsed().as_secs_f64(),
                vec![scan_path.display().to_string()],
                stage.cache_hit,
            );
            println!(
                "principal margin {:.6}, certified upper bound {:.6}, \
                 controllability min {:.3e}{}",
                report.principal_margin,
                report.certified_upper_bound,
                report.controllability.min_joint,
                if report.controllability.flagged {
                    " [FLAGGED]"
                } else {
                    ""
                }
            );
            Ok(true)
        }
        Cmd::Synthesize => {
            let cfg = load_config(cli)?;
            let p = pipeline_for(cli, cfg);
            let t0 = Instant::now();
            let stage = p.kernels()?;
            let (_, ide) = p.reduce(&stage)?;
            let (gains, report) = p.synthesize(&ide)?;
            let g_path = cli.out.join("gains_g.csv");
            let mut g_csv = String::from("nu,g\n");
            for seg in gains.g.segments() {
                let m = seg.values.len() - 1;
                for (i, v) in seg.values.iter().enumerate() {
                    let nu = seg.a + (seg.b - seg.a) * i as f64 / m as f64;
                    g_csv.push_str(&format!("{nu:.9},{v:.12e}\n"));
                }
            }
            write(&g_path, &g_csv)?;
            let mut f_csv = String::from("nu,f,piece_id\n");
            for (piece_id, piece) in [
                Some(&gains.f2),
                gains.f3.as_ref(),
                Some(&gains.f23),
            ]
            .iter()
            .enumerate()
            {
                if let Some(pk) = piece {
                    for seg in pk.segments() {
                        let m = seg.values.len() - 1;
                        for (i, v) in seg.values.iter().enumerate() {
                            let nu = seg.a + (seg.b - seg.a) * i as f64 / m as f64;
                            f_csv.push_str(&format!("{nu:.9},{v:.12e},{piece_id}\n"));
                        }
                    }
                }
            }
            let f_path = cli.out.join("gains_f.csv");
            write(&f_path, &f_csv)?;
            write(
                &cli.out.join("synthesis.json"),
                &serde_json::to_string_pretty(&report).unwrap(),
            )?;
            record_stage(
                &cli.out,
                "synthesize",
                &p.cache_key(),
                t0.elapsed().as_secs_f64(),
                vec![g_path.display().to_string(), f_path.display().to_string()],
                stage.cache_hit,
            );
            println!(
                "gains solved ({} unknowns): condition {:.2e}, residual sup {:.2e}, \
                 spectral identity {:.2e}",
                report.unknowns,
                report.condition,
                report.residuals.sup(),
                report.spectral_identity_sup
            );
            Ok(true)
        }
        Cmd::SimulateIde => {
            let cfg = load_config(cli)?;
            let p = pipeline_for(cli, cfg);
            let t0 = Instant::now();
            let stage = p.kernels()?;
            let (_, ide) = p.reduce(&stage)?;
            let t_final = cli.t_final.unwrap_or(30.0 * ide.tau_sum());
            let open = ide_sim::simulate(&ide, None, &|_| 1.0, &|_| 0.0, t_final, cli.dt)?;
            write(&cli.out.join("ide_open.csv"), &open.to_csv())?;
            let mut artifacts = vec!["ide_open.csv".to_string()];
            let validation = p.validate();
            if validation.synthesis_admissible() {
                let (gains, _) = p.synthesize(&ide)?;
                let closed =
                    ide_sim::simulate(&ide, Some(&gains), &|_| 1.0, &|_| 0.0, t_final, cli.dt)?;
                let est = ide_sim::estimate_decay_rate(&closed)?;
                write(&cli.out.join("ide_closed.csv"), &closed.to_csv())?;
                artifacts.push("ide_closed.csv".to_string());
                let report = hypchain::report::SimulationReport {
                    dt: closed.dt,
                    steps: closed.times.len(),
                    final_norm: closed.window_norms.last().map(|w| w.1).unwrap_or(0.0),
                    decay_rate: est.rate,
                    fit_r2: est.r2,
                };
                write(
                    &cli.out.join("ide_simulation.json"),
                    &serde_json::to_string_pretty(&report).unwrap(),
                )?;
                println!(
                    "reduced-equation simulation: closed-loop rate {:.4} (R2 {:.3})",
                    est.rate, est.r2
                );
            } else {
                println!("synthesis not admissible; open-loop trace written");
            }
            record_stage(
                &cli.out,
                "simulate-ide",
                &p.cache_key(),
                t0.elapsed().as_secs_f64(),
                artifacts,
                stage.cache_hit,
            );
            Ok(true)
        }
        Cmd::SimulatePde { snapshot_stride } => {
            let cfg = load_config(cli)?;
            let p = pipeline_for(cli, cfg.clone());
            let t0 = Instant::now();
            let stage = p.kernels()?;
            let (bk, ide) = p.reduce(&stage)?;
            let validation = p.validate();
            let gains = if validation.synthesis_admissible() {
                Some(p.synthesize(&ide)?.0)
            } else {
                None
            };
            let ctx = pde_sim::ControlContext::new(
                &cfg,
                &stage.kernels,
                &stage.transform,
                &bk,
                &ide,
                gains.as_ref(),
            );
            let t_final = cli.t_final.unwrap_or(20.0 * ide.tau_sum());
            let dt = cli.dt.unwrap_or(0.02);
            let trace =
                pde_sim::simulate_closed_loop(&ctx, t_final, dt, gains.is_some())?;
            write(&cli.out.join("pde_trace.csv"), &trace.to_csv())?;
            let mut artifacts = vec!["pde_trace.csv".to_string()];
            if let Some(stride) = snapshot_stride {
                // re-run recording snapshots
                let (dtp, cells) = pde_sim::plan_grids(&cfg, dt)?;
                let mut state = pde_sim::PdeState::from_initial(&cfg, dtp, &cells);
                let mut csv = String::from("t,subsystem,x,u,v\n");
                let steps = (t_final / dtp).ceil() as usize;
                for k in 1..=steps {
                    state.step(&cfg, trace.u.get(k - 1).copied().unwrap_or(0.0))?;
                    if k % stride == 0 {
                        for i in 0..3 {
                            let nu = state.u[i].len() - 1;
                            for (idx, uv) in state.u[i].iter().enumerate() {
                                let x = idx as f64 / nu as f64;
                                let v = pde_sim::interp_at(&state.v[i], x);
                                csv.push_str(&format!(
                                    "{:.6},{},{x:.6},{uv:.9e},{v:.9e}\n",
                                    state.time,
                                    i + 1
                                ));
                            }
                        }
                    }
                }
                let snap = cli.out.join("pde_snapshots.csv");
                write(&snap, &csv)?;
                artifacts.push("pde_snapshots.csv".to_string());
            }
            let (rate, r2) = pde_sim::fit_norm_decay(&trace)?;
            let report = hypchain::report::SimulationReport {
                dt: trace.dt,
                steps: trace.times.len(),
                final_norm: *trace.norm.last().unwrap_or(&0.0),
                decay_rate: rate,
                fit_r2: r2,
            };
            write(
                &cli.out.join("pde_simulation.json"),
                &serde_json::to_string_pretty(&report).unwrap(),
            )?;
            record_stage(
                &cli.out,
                "simulate-pde",
                &p.cache_key(),
                t0.elapsed().as_secs_f64(),
                artifacts,
                stage.cache_hit,
            );
            println!(
                "full-chain simulation: norm decay rate {rate:.4} (R2 {r2:.3}), \
                 boundary-trace defect {:.2e}",
                trace.consistency_sup
            );
            Ok(true)
        }
        Cmd::Verify { quick } => {
            let results = pipeline::acceptance_battery(*quick);
            let mut all_pass = true;
            for r in &results {
                println!("{}", r.line());
                all_pass &= r.pass;
            }
            write(
                &cli.out.join("verify.json"),
                &serde_json::to_string_pretty(&results).unwrap(),
            )?;
            Ok(all_pass)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => match cli.cmd {
            Cmd::Verify { .. } => ExitCode::from(4),
            _ => ExitCode::from(2),
        },
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
