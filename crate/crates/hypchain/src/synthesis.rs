//! Controller-gain synthesis.
//!
//! The closed loop with the history feedback
//! `Ubar(t) = ∫ g Ubar(t−ν) dν + ∫ f x(t−ν) dν` has the characteristic
//! function `det Q = F0 (1 − g^) − F1 f^`. Collapsing it onto the
//! pointwise-delay part means solving `T(g, f) = (−N 1_{[0,τ2+τ3]}, 0, 0, 0)`
//! where the design functionals, written at native lag `w`,
//!
//! ```text
//! D(w) = g(w) 1_{w≤Tu} + b f(w−Tu) 1_{w≥Tu}
//!        − Σ_δ a_δ g(w−δ) 1_{0≤w−δ≤Tu}
//!        − (N ⋆ g)(w) + (M~ ⋆ f)(w)
//! ```
//!
//! must satisfy `D(w) = −N(w) 1_{w≤τ2+τ3}` on `[0, Tu + τ2 + τ3]`. The rows
//! with `w ≤ Tu` are `I1`; the remaining lag windows split into `I2, I3, I23`
//! matching the three pieces of `f`. Discretization: collocation at
//! segment-local nodes with trapezoid weights; shifted evaluations use
//! linear interpolation between nodes.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

use crate::piecewise::PiecewiseKernel;
use crate::reduction::ReducedIde;
use crate::{Error, Result};

/// Collocation node positions of the four unknown blocks.
#[derive(Debug, Clone)]
pub struct NodeLayout {
    /// `g` on `[0, Tu]`.
    pub g: Vec<f64>,
    /// `f2` on `[0, τ_min]`, `f3` on `[τ_min, τ_max]`,
    /// `f23` on `[τ_max, τ2+τ3]`.
    pub f2: Vec<f64>,
    pub f3: Vec<f64>,
    pub f23: Vec<f64>,
    pub tau_u: f64,
}

impl NodeLayout {
    pub fn dim(&self) -> usize {
        self.g.len() + self.f2.len() + self.f3.len() + self.f23.len()
    }
    fn offsets(&self) -> [usize; 4] {
        let g = self.g.len();
        let f2 = self.f2.len();
        let f3 = self.f3.len();
        [0, g, g + f2, g + f2 + f3]
    }
    fn blocks(&self) -> [(usize, &[f64]); 4] {
        let off = self.offsets();
        [
            (off[0], self.g.as_slice()),
            (off[1], self.f2.as_slice()),
            (off[2], self.f3.as_slice()),
            (off[3], self.f23.as_slice()),
        ]
    }
    /// Smallest node gap excluding the doubled-node jump cells.
    fn quad_step(&self) -> f64 {
        let mut gap = f64::INFINITY;
        for (_, nodes) in self.blocks() {
            for w in nodes.windows(2) {
                let g = w[1] - w[0];
                if g > 10.0 * JUMP_EPS {
                    gap = gap.min(g);
                }
            }
        }
        gap
    }
}

/// Half-width of the doubled-node cells that carry the gain jumps.
const JUMP_EPS: f64 = 5e-8;

/// Uniform nodes plus kink breakpoints (single nodes) plus straddled node
/// pairs `w ± ε` at the known jump abscissae, so the piecewise-linear basis
/// can represent the discontinuities of the exact gains.
fn uniform_with(breaks: &[f64], jumps: &[f64], lo: f64, hi: f64, density: f64) -> Vec<f64> {
    let m = (((hi - lo) * density).ceil() as usize).max(8);
    let tol = 0.2 * (hi - lo) / m as f64;
    let mut nodes: Vec<f64> = (0..=m)
        .map(|k| lo + (hi - lo) * k as f64 / m as f64)
        .filter(|x| {
            !jumps
                .iter()
                .any(|j| (x - j).abs() < tol && *j > lo + tol && *j < hi - tol)
        })
        .collect();
    for &b in breaks {
        if b > lo + tol
            && b < hi - tol
            && !nodes.iter().any(|x| (x - b).abs() < tol)
            && !jumps.iter().any(|j| (b - j).abs() < tol)
        {
            nodes.push(b);
        }
    }
    for &j in jumps {
        if j > lo + tol && j < hi - tol {
            nodes.push(j - JUMP_EPS);
            nodes.push(j + JUMP_EPS);
        }
    }
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    nodes.dedup_by(|a, b| (*a - *b).abs() < 0.5 * JUMP_EPS);
    nodes
}

fn dedup_sorted(mut v: Vec<f64>, tol: f64) -> Vec<f64> {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup_by(|a, b| (*a - *b).abs() < tol);
    v
}

/// Jump abscissae of `g`: the right-hand side `−N·1_{[0,τ2+τ3]}` jumps
/// where `N` genuinely jumps and at the indicator end (when `N` does not
/// vanish there); each jump reappears shifted by the pointwise delays
/// through the `a_δ g(ν−δ)` terms, whose switch-on points also inject
/// `a_δ g(0)` jumps. Mere kinks stay single collocation nodes — a doubled
/// node at a continuous point would make two rows nearly identical.
fn g_jump_set(ide: &ReducedIde) -> Vec<f64> {
    let t = ide.rc.delays;
    let tau_u = ide.tau_u_eff;
    let tsum = t.tau_sum();
    let n = &ide.n_kernel;
    let scale = n.sup_abs().max(1e-12);
    let mut base: Vec<f64> = n
        .breakpoints()
        .into_iter()
        .filter(|b| {
            *b > 1e-12
                && *b < tsum - 1e-12
                && (n.eval_right_limit(*b) - n.eval_left_limit(*b)).abs() > 1e-9 * scale
        })
        .collect();
    if n.eval_left_limit(tsum).abs() > 1e-9 * scale {
        base.push(tsum);
    }
    let deltas = [(t.tau[1], ide.rc.a2), (t.tau[2], ide.rc.a3), (tsum, ide.rc.a23)];
    if n.eval(0.0).abs() > 1e-9 * scale {
        for (d, a) in deltas {
            if a.abs() > 1e-12 {
                base.push(d);
            }
        }
    }
    let mut all = base.clone();
    let mut frontier = base;
    for _ in 0..8 {
        let mut next = Vec::new();
        for &w in &frontier {
            for (d, a) in deltas {
                if a.abs() < 1e-12 {
                    continue;
                }
                let cand = w + d;
                if cand < tau_u - 1e-9 && !all.iter().any(|x| (x - cand).abs() < 1e-9) {
                    next.push(cand);
                    all.push(cand);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    dedup_sorted(all, 1e-9)
}

/// Jump abscissae of the `f` pieces: pullbacks of the `g` jumps through the
/// shifted terms `a_δ g(ν + Tu − δ)` of the stated block.
fn f_jump_set(ide: &ReducedIde, g_jumps: &[f64], deltas: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let tau_u = ide.tau_u_eff;
    let mut out = Vec::new();
    for &d in deltas {
        for &j in g_jumps {
            let cand = j - tau_u + d;
            if cand > lo + 1e-9 && cand < hi - 1e-9 {
                out.push(cand);
            }
        }
    }
    dedup_sorted(out, 1e-9)
}

/// Build the collocation layout: uniform nodes per block plus the delay
/// offsets and kernel breakpoints (kinks), plus doubled nodes at the jump
/// abscissae.
pub fn build_layout(ide: &ReducedIde, density: f64) -> NodeLayout {
    let t = ide.rc.delays;
    let tau_u = ide.tau_u_eff;
    let (m1, m2) = (t.tau_min, t.tau_max);
    let tsum = t.tau_sum();
    let mut g_breaks = vec![tau_u - tsum, t.tau[1], t.tau[2], tsum];
    g_breaks.extend(ide.m_tilde.breakpoints());
    g_breaks.extend(ide.n_kernel.breakpoints());
    let g_jumps = g_jump_set(ide);
    let f_breaks = ide.n_kernel.breakpoints();
    let deltas = [t.tau[1], t.tau[2], tsum];
    let d_f3: Vec<f64> = deltas
        .iter()
        .copied()
        .filter(|d| *d >= t.tau_max - 1e-12)
        .collect();
    NodeLayout {
        g: uniform_with(&g_breaks, &g_jumps, 0.0, tau_u, density),
        f2: uniform_with(
            &f_breaks,
            &f_jump_set(ide, &g_jumps, &deltas, 0.0, m1),
            0.0,
            m1,
            density,
        ),
        f3: if m2 - m1 > 1e-12 {
            uniform_with(
                &f_breaks,
                &f_jump_set(ide, &g_jumps, &d_f3, m1, m2),
                m1,
                m2,
                density,
            )
        } else {
            Vec::new()
        },
        f23: uniform_with(
            &f_breaks,
            &f_jump_set(ide, &g_jumps, &[tsum], m2, tsum),
            m2,
            tsum,
            density,
        ),
        tau_u,
    }
}

/// Linear-interpolation stencil of `x` in `nodes`; `None` outside.
fn stencil(nodes: &[f64], x: f64) -> Option<[(usize, f64); 2]> {
    if nodes.is_empty() {
        return None;
    }
    let (lo, hi) = (nodes[0], nodes[nodes.len() - 1]);
    if x < lo - 1e-12 || x > hi + 1e-12 {
        return None;
    }
    let x = x.clamp(lo, hi);
    let mut k = match nodes.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
        Ok(k) => k,
        Err(k) => k.saturating_sub(1),
    };
    if k + 1 >= nodes.len() {
        k = nodes.len() - 2;
    }
    let (x0, x1) = (nodes[k], nodes[k + 1]);
    let t = ((x - x0) / (x1 - x0)).clamp(0.0, 1.0);
    Some([(k, 1.0 - t), (k + 1, t)])
}

/// Accumulate trapezoid weights of `sign · ∫ F(η) K(w−η) dη` into `row`,
/// where `F` is piecewise linear on the given blocks. The η-axis is cut at
/// the block nodes and at `w − breakpoints(K)`, then subdivided to the
/// quadrature step.
fn add_conv_weights(
    row: &mut [f64],
    sign: f64,
    w: f64,
    kernel: &PiecewiseKernel,
    blocks: &[(usize, &[f64])],
    h_sub: f64,
) {
    let k_start = kernel.support_start();
    let k_end = kernel.support_end();
    for (offset, nodes) in blocks {
        if nodes.len() < 2 {
            continue;
        }
        let lo = nodes[0].max(w - k_end);
        let hi = nodes[nodes.len() - 1].min(w - k_start);
        if hi <= lo + 1e-14 {
            continue;
        }
        let mut cuts: Vec<f64> = nodes.iter().copied().filter(|x| *x > lo && *x < hi).collect();
        for b in kernel.breakpoints() {
            let x = w - b;
            if x > lo && x < hi {
                cuts.push(x);
            }
        }
        cuts.push(lo);
        cuts.push(hi);
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-13);
        for pair in cuts.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if b - a < 1e-14 {
                continue;
            }
            let mid_k = w - 0.5 * (a + b);
            let steps = ((b - a) / h_sub).ceil() as usize;
            let steps = steps.max(1);
            let dh = (b - a) / steps as f64;
            for p in 0..=steps {
                let eta = a + dh * p as f64;
                let wq = if p == 0 || p == steps { 0.5 * dh } else { dh };
                let kv = kernel.eval_inside(w - eta, mid_k);
                if kv == 0.0 {
                    continue;
                }
                if let Some(st) = stencil(nodes, eta) {
                    for (idx, sw) in st {
                        row[offset + idx] += sign * wq * kv * sw;
                    }
                }
            }
        }
    }
}

/// The discretized operator and right-hand side.
#[derive(Debug, Clone)]
pub struct OperatorSystem {
    pub layout: NodeLayout,
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub condition: f64,
}

/// Delay/coefficient pairs of the pointwise part.
fn delay_pairs(ide: &ReducedIde) -> [(f64, f64); 3] {
    let t = ide.rc.delays;
    [
        (t.tau[1], ide.rc.a2),
        (t.tau[2], ide.rc.a3),
        (t.tau_sum(), ide.rc.a23),
    ]
}

/// Assemble the collocation system for `T(g,f) = (−N·1, 0, 0, 0)`.
pub fn assemble_operator(ide: &ReducedIde, density: f64) -> Result<OperatorSystem> {
    let t = ide.rc.delays;
    let tsum = t.tau_sum();
    if ide.tau_u_eff <= tsum {
        return Err(Error::Validation(format!(
            "input delay {:.6} must exceed the state delay {tsum:.6}; \
             padding was not applied",
            ide.tau_u_eff
        )));
    }
    let layout = build_layout(ide, density);
    let dim = layout.dim();
    let tau_u = layout.tau_u;
    let pairs = delay_pairs(ide);
    let h_sub = layout
        .quad_step()
        .min(ide.n_kernel.finest_step())
        .min(ide.m_tilde.finest_step());

    let mut a = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    let off = layout.offsets();
    let g_block = [(off[0], layout.g.as_slice())];
    let f_blocks = [
        (off[1], layout.f2.as_slice()),
        (off[2], layout.f3.as_slice()),
        (off[3], layout.f23.as_slice()),
    ];

    let mut row_buf = vec![0.0; dim];
    let write_row = |a: &mut DMatrix<f64>, r: usize, buf: &mut Vec<f64>| {
        for (c, v) in buf.iter_mut().enumerate() {
            if *v != 0.0 {
                a[(r, c)] += *v;
                *v = 0.0;
            }
        }
    };

    // I1 rows: one per g node.
    for (k, &nu) in layout.g.iter().enumerate() {
        let r = off[0] + k;
        row_buf[off[0] + k] += 1.0;
        for (delta, a_d) in pairs {
            if nu > delta + 1e-12 {
                if let Some(st) = stencil(&layout.g, nu - delta) {
                    for (idx, sw) in st {
                        row_buf[off[0] + idx] -= a_d * sw;
                    }
                }
            }
        }
        add_conv_weights(&mut row_buf, -1.0, nu, &ide.n_kernel, &g_block, h_sub);
        add_conv_weights(&mut row_buf, 1.0, nu, &ide.m_tilde, &f_blocks, h_sub);
        rhs[r] = if nu <= tsum + 1e-12 {
            -ide.n_kernel.eval(nu)
        } else {
            0.0
        };
        write_row(&mut a, r, &mut row_buf);
    }

    // I2 / I3 / I23 rows: allowed pointwise-shift pairs per block.
    let b_coef = ide.rc.b;
    for (which, (boff, nodes)) in f_blocks.iter().enumerate() {
        for (k, &nu) in nodes.iter().enumerate() {
            let r = boff + k;
            row_buf[boff + k] += b_coef;
            for (delta, a_d) in pairs {
                let included = match which {
                    0 => nu <= delta + 1e-12,
                    1 => delta >= t.tau_max - 1e-12 && nu <= delta + 1e-12,
                    _ => (delta - tsum).abs() < 1e-12,
                };
                if included {
                    if let Some(st) = stencil(&layout.g, nu + tau_u - delta) {
                        for (idx, sw) in st {
                            row_buf[off[0] + idx] -= a_d * sw;
                        }
                    }
                }
            }
            let w = nu + tau_u;
            add_conv_weights(&mut row_buf, -1.0, w, &ide.n_kernel, &g_block, h_sub);
            add_conv_weights(&mut row_buf, 1.0, w, &ide.m_tilde, &f_blocks, h_sub);
            write_row(&mut a, r, &mut row_buf);
        }
    }

    Ok(OperatorSystem {
        layout,
        matrix: a,
        rhs,
        condition: f64::NAN,
    })
}

/// Synthesized gains: `g` on `[0, Tu]` and the three pieces of `f`.
#[derive(Debug, Clone)]
pub struct GainPair {
    pub g: PiecewiseKernel,
    pub f: PiecewiseKernel,
    pub f2: PiecewiseKernel,
    pub f3: Option<PiecewiseKernel>,
    pub f23: PiecewiseKernel,
    pub layout: NodeLayout,
    pub values: Vec<f64>,
}

impl GainPair {
    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn zero(ide: &ReducedIde) -> Self {
        let layout = build_layout(ide, 8.0);
        let values = vec![0.0; layout.dim()];
        Self::from_values(layout, values)
    }

    pub fn from_values(layout: NodeLayout, values: Vec<f64>) -> Self {
        let off = layout.offsets();
        let g = PiecewiseKernel::from_nodes("g", &layout.g, &values[off[0]..off[1]]);
        let f2 = PiecewiseKernel::from_nodes("f2", &layout.f2, &values[off[1]..off[2]]);
        let f3 = (layout.f3.len() >= 2)
            .then(|| PiecewiseKernel::from_nodes("f3", &layout.f3, &values[off[2]..off[3]]));
        let f23 = PiecewiseKernel::from_nodes("f23", &layout.f23, &values[off[3]..]);
        let mut segs = f2.segments().to_vec();
        if let Some(f3k) = &f3 {
            segs.extend(f3k.segments().to_vec());
        }
        segs.extend(f23.segments().to_vec());
        let f = PiecewiseKernel::from_segments("f", segs);
        GainPair {
            g,
            f,
            f2,
            f3,
            f23,
            layout,
            values,
        }
    }

    pub fn g_laplace(&self, s: Complex64) -> Complex64 {
        self.g.laplace(s)
    }
    pub fn f_laplace(&self, s: Complex64) -> Complex64 {
        self.f.laplace(s)
    }
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|c| m.column(c).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Dense solve of the collocation system.
pub fn solve_gains(mut sys: OperatorSystem, cond_max: f64) -> Result<(GainPair, OperatorSystem)> {
    let lu = sys.matrix.clone().lu();
    let sol = lu.solve(&sys.rhs).ok_or_else(|| {
        Error::Solver(
            "gain system is singular; the rank condition on (F0, F1) likely fails".into(),
        )
    })?;
    let inv = lu.try_inverse().ok_or_else(|| {
        Error::Solver(
            "gain system is singular; the rank condition on (F0, F1) likely fails".into(),
        )
    })?;
    let cond = norm1(&sys.matrix) * norm1(&inv);
    if !cond.is_finite() || cond >= cond_max {
        return Err(Error::Solver(format!(
            "gain system condition number {cond:.3e} exceeds {cond_max:.1e}; \
             the rank condition on (F0, F1) likely fails"
        )));
    }
    sys.condition = cond;
    let gains = GainPair::from_values(sys.layout.clone(), sol.iter().copied().collect());
    Ok((gains, sys))
}

/// Residual norms of the four design functionals, re-evaluated with doubled
/// quadrature resolution at off-node collocation points.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ResidualReport {
    pub i1: f64,
    pub i2: f64,
    pub i3: f64,
    pub i23: f64,
}

impl ResidualReport {
    pub fn sup(&self) -> f64 {
        self.i1.max(self.i2).max(self.i3).max(self.i23)
    }
}

/// Direct quadrature of `∫ F(η) K(w−η) dη` for a piecewise-linear `F`.
fn eval_conv(f: &PiecewiseKernel, kernel: &PiecewiseKernel, w: f64, h_sub: f64) -> f64 {
    let lo = f.support_start().max(w - kernel.support_end());
    let hi = f.support_end().min(w - kernel.support_start());
    if hi <= lo + 1e-14 {
        return 0.0;
    }
    let mut cuts: Vec<f64> = f
        .breakpoints()
        .into_iter()
        .filter(|x| *x > lo && *x < hi)
        .collect();
    for b in kernel.breakpoints() {
        let x = w - b;
        if x > lo && x < hi {
            cuts.push(x);
        }
    }
    cuts.push(lo);
    cuts.push(hi);
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-13);
    let mut acc = 0.0;
    for pair in cuts.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b - a < 1e-14 {
            continue;
        }
        let steps = ((b - a) / h_sub).ceil().max(1.0) as usize;
        let dh = (b - a) / steps as f64;
        let mid_f = 0.5 * (a + b);
        let mid_k = w - mid_f;
        for p in 0..=steps {
            let eta = a + dh * p as f64;
            let wq = if p == 0 || p == steps { 0.5 * dh } else { dh };
            acc += wq * f.eval_inside(eta, mid_f) * kernel.eval_inside(w - eta, mid_k);
        }
    }
    acc
}

/// Which design functional a collocation row belongs to; the functional
/// splits determine which pointwise terms fire at the shared abscissae.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    I1,
    I2,
    I3,
    I23,
}

/// Evaluate `I_k(ν) + N(ν) 1_{[0,τ2+τ3]}` for `I1` rows, `I_k(ν)` otherwise,
/// by direct quadrature at step `h_sub`.
pub fn functional_at(
    gains: &GainPair,
    ide: &ReducedIde,
    kind: RowKind,
    nu: f64,
    h_sub: f64,
) -> f64 {
    let t = ide.rc.delays;
    let tau_u = gains.layout.tau_u;
    let tsum = t.tau_sum();
    let mut v;
    let w;
    match kind {
        RowKind::I1 => {
            w = nu;
            v = gains.g.eval(nu);
            for (delta, a_d) in delay_pairs(ide) {
                if nu > delta + 1e-12 {
                    v -= a_d * gains.g.eval(nu - delta);
                }
            }
            if nu <= tsum + 1e-12 {
                v += ide.n_kernel.eval(nu);
            }
        }
        _ => {
            w = nu + tau_u;
            let piece = match kind {
                RowKind::I2 => &gains.f2,
                RowKind::I3 => gains.f3.as_ref().unwrap_or(&gains.f),
                _ => &gains.f23,
            };
            v = ide.rc.b * piece.eval(nu);
            for (delta, a_d) in delay_pairs(ide) {
                let included = match kind {
                    RowKind::I2 => nu <= delta + 1e-12,
                    RowKind::I3 => delta >= t.tau_max - 1e-12 && nu <= delta + 1e-12,
                    _ => (delta - tsum).abs() < 1e-12,
                };
                if included {
                    v -= a_d * gains.g.eval(nu + tau_u - delta);
                }
            }
        }
    }
    v -= eval_conv(&gains.g, &ide.n_kernel, w, h_sub);
    v += eval_conv(&gains.f, &ide.m_tilde, w, h_sub);
    v
}

/// Sup-norm residuals on a refined independent grid: node midpoints are
/// added as off-node collocation probes and the quadrature step is halved.
pub fn residual(gains: &GainPair, ide: &ReducedIde) -> ResidualReport {
    let layout = &gains.layout;
    let h_sub = 0.5
        * layout
            .quad_step()
            .min(ide.n_kernel.finest_step())
            .min(ide.m_tilde.finest_step());
    let refine = |nodes: &[f64], kind: RowKind| -> f64 {
        let mut sup = 0.0f64;
        for k in 0..nodes.len() {
            let mut probes = vec![nodes[k]];
            // Midpoint probe, except inside the doubled-node jump cells
            // where the exact gain is discontinuous.
            if k + 1 < nodes.len() && nodes[k + 1] - nodes[k] > 10.0 * JUMP_EPS {
                probes.push(0.5 * (nodes[k] + nodes[k + 1]));
            }
            for nu in probes {
                sup = sup.max(functional_at(gains, ide, kind, nu, h_sub).abs());
            }
        }
        sup
    };
    ResidualReport {
        i1: refine(&layout.g, RowKind::I1),
        i2: refine(&layout.f2, RowKind::I2),
        i3: refine(&layout.f3, RowKind::I3),
        i23: refine(&layout.f23, RowKind::I23),
    }
}

/// Rearrangement identity behind the lag regrouping: the tensor trapezoid
/// sum of `∫∫ z(η) P(ν) e^{−(ν+η)s}` equals the lag-grouped three-part sum
/// when both factors are sampled on a common step.
pub fn fubini_identity_check(
    z: &[f64],
    theta: f64,
    p: &[f64],
    delta: f64,
    s: Complex64,
) -> Result<f64> {
    let mz = z.len() - 1;
    let mp = p.len() - 1;
    let hz = theta / mz as f64;
    let hp = delta / mp as f64;
    if ((hz - hp) / hz).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "sampling steps must agree for the exact lag regrouping \
             ({hz:.3e} vs {hp:.3e})"
        )));
    }
    let h = hz;
    let wz = |i: usize| if i == 0 || i == mz { 0.5 * h } else { h };
    let wp = |j: usize| if j == 0 || j == mp { 0.5 * h } else { h };

    let mut lhs = Complex64::new(0.0, 0.0);
    let ez: Vec<Complex64> = (0..=mz)
        .map(|i| (-s * (i as f64 * h)).exp() * wz(i) * z[i])
        .collect();
    let ep: Vec<Complex64> = (0..=mp)
        .map(|j| (-s * (j as f64 * h)).exp() * wp(j) * p[j])
        .collect();
    let sz: Complex64 = ez.iter().sum();
    let sp: Complex64 = ep.iter().sum();
    lhs += sz * sp;

    // Regrouped by total lag w = (i+j) h, split at min and max of (θ, δ).
    let kmin = mz.min(mp);
    let kmax = mz.max(mp);
    let mut parts = [Complex64::new(0.0, 0.0); 3];
    for k in 0..=(mz + mp) {
        let mut inner = 0.0;
        let i_lo = k.saturating_sub(mp);
        let i_hi = k.min(mz);
        for i in i_lo..=i_hi {
            inner += wz(i) * z[i] * wp(k - i) * p[k - i];
        }
        let e = (-s * (k as f64 * h)).exp();
        let slot = if k <= kmin {
            0
        } else if k <= kmax {
            1
        } else {
            2
        };
        parts[slot] += e * inner;
    }
    let rhs = parts[0] + parts[1] + parts[2];
    Ok((lhs - rhs).norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::transport_times;
    use crate::config::SystemConfig;
    use crate::reduction::ReducedCoefficients;

    fn test_ide(n_const: f64, m_const: f64) -> ReducedIde {
        let cfg = SystemConfig::from_toml_str(
            r#"
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
rho22 = 0.2
rho23 = 0.1
rho33 = 0.4

[numerics]
resolution = 16
"#,
        )
        .unwrap();
        // τ = (4, 2, 2), Tu = 5 > 4
        let delays = transport_times(&cfg);
        let rc = ReducedCoefficients {
            a2: cfg.q22 * cfg.rho22,
            a3: cfg.q33 * cfg.rho33,
            a23: cfg.q22 * (cfg.q32 * cfg.rho23 * cfg.rho33 - cfg.q33 * cfg.rho33 * cfg.rho22),
            b: cfg.q32 * cfg.q21 * cfg.q11,
            delays,
        };
        let tsum = delays.tau_sum();
        let n_kernel = if n_const == 0.0 {
            PiecewiseKernel::zero("N", tsum)
        } else {
            PiecewiseKernel::sample("N", &[0.0, tsum], 32.0, |_, _| n_const)
        };
        let m_tilde = if m_const == 0.0 {
            PiecewiseKernel::zero("Mt", delays.tau_u)
        } else {
            PiecewiseKernel::sample("Mt", &[0.0, delays.tau_u - 1.0], 32.0, |_, _| m_const)
                .shift(1.0, "Mt")
        };
        ReducedIde {
            rc,
            n_kernel,
            m_tilde,
            tau_u_eff: delays.tau_u,
            pad: 0.0,
        }
    }

    #[test]
    fn homogeneous_solve_is_zero() {
        let ide = test_ide(0.0, 0.0);
        let sys = assemble_operator(&ide, 12.0).unwrap();
        let (gains, _) = solve_gains(sys, 1e10).unwrap();
        assert!(gains.sup_abs() <= 1e-12, "sup {}", gains.sup_abs());
    }

    #[test]
    fn zero_couplings_give_identity_blocks() {
        let mut ide = test_ide(0.0, 0.0);
        ide.rc.a2 = 0.0;
        ide.rc.a3 = 0.0;
        ide.rc.a23 = 0.0;
        let sys = assemble_operator(&ide, 10.0).unwrap();
        let ng = sys.layout.g.len();
        let dim = sys.layout.dim();
        for r in 0..dim {
            for c in 0..dim {
                let expect = if r != c {
                    0.0
                } else if r < ng {
                    1.0
                } else {
                    ide.rc.b
                };
                assert!(
                    (sys.matrix[(r, c)] - expect).abs() < 1e-12,
                    "entry ({r},{c}) = {}",
                    sys.matrix[(r, c)]
                );
            }
        }
        assert!(sys.rhs.amax() == 0.0);
    }

    #[test]
    fn b_sign_flip_negates_f_diagonal() {
        let ide = test_ide(0.1, 0.05);
        let sys_pos = assemble_operator(&ide, 10.0).unwrap();
        let mut ide_neg = ide.clone();
        ide_neg.rc.b = -ide.rc.b;
        let sys_neg = assemble_operator(&ide_neg, 10.0).unwrap();
        let ng = sys_pos.layout.g.len();
        let dim = sys_pos.layout.dim();
        for r in ng..dim {
            let d = sys_pos.matrix[(r, r)] + sys_neg.matrix[(r, r)];
            // Diagonal entries of the f blocks are b plus the (b-independent)
            // self-convolution weight, so the b parts cancel in the sum.
            let conv_part = sys_pos.matrix[(r, r)] - ide.rc.b;
            assert!(
                (d - 2.0 * conv_part).abs() < 1e-12,
                "row {r}: {d} vs {}",
                2.0 * conv_part
            );
        }
    }

    #[test]
    fn matrix_row_matches_direct_functional_for_constants() {
        // Apply the assembled matrix to constant (g, f) and compare against
        // the independent quadrature of the design functional.
        let ide = test_ide(0.08, 0.1);
        let sys = assemble_operator(&ide, 14.0).unwrap();
        let dim = sys.layout.dim();
        let ng = sys.layout.g.len();
        let gamma = 0.7;
        let phi = -0.4;
        let mut v = DVector::<f64>::zeros(dim);
        for k in 0..dim {
            v[k] = if k < ng { gamma } else { phi };
        }
        let gains = GainPair::from_values(sys.layout.clone(), v.iter().copied().collect());
        let applied = &sys.matrix * &v;
        let h_sub = sys.layout.quad_step().min(ide.n_kernel.finest_step());
        for (k, &nu) in sys.layout.g.iter().enumerate().step_by(7) {
            // functional_at returns I1(ν) + N(ν)·1; the matrix row gives the
            // I1 operator part alone.
            let indicator = if nu <= ide.tau_sum() + 1e-12 {
                ide.n_kernel.eval(nu)
            } else {
                0.0
            };
            let direct = functional_at(&gains, &ide, RowKind::I1, nu, h_sub) - indicator;
            assert!(
                (applied[k] - direct).abs() < 1e-10,
                "row {k} (nu = {nu}): {} vs {direct}",
                applied[k]
            );
        }
        // and one f2 row
        let off_f2 = sys.layout.g.len();
        for (k, &nu) in sys.layout.f2.iter().enumerate().step_by(5) {
            let direct = functional_at(&gains, &ide, RowKind::I2, nu, h_sub);
            assert!(
                (applied[off_f2 + k] - direct).abs() < 1e-10,
                "f2 row {k} (nu = {nu}): {} vs {direct}",
                applied[off_f2 + k]
            );
        }
    }

    #[test]
    fn linearity_of_solve() {
        let ide = test_ide(0.08, 0.1);
        let sys = assemble_operator(&ide, 10.0).unwrap();
        let (g1, sys1) = solve_gains(sys.clone(), 1e10).unwrap();
        let mut sys2 = sys;
        sys2.rhs *= 2.5;
        let (g2, _) = solve_gains(sys2, 1e10).unwrap();
        for (a, b) in g1.values.iter().zip(&g2.values) {
            assert!((2.5 * a - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
        assert!(sys1.condition.is_finite());
    }

    #[test]
    fn synthesized_gains_satisfy_functionals() {
        let ide = test_ide(0.08, 0.1);
        let sys = assemble_operator(&ide, 16.0).unwrap();
        let (gains, _) = solve_gains(sys, 1e10).unwrap();
        let res = residual(&gains, &ide);
        assert!(res.sup() < 2e-3, "residuals {res:?}");
        // g(0) = -N(0): the I1 functional at lag zero has no other terms.
        assert!(
            (gains.g.eval(0.0) + ide.n_kernel.eval(0.0)).abs() < 1e-9,
            "g(0) = {}, N(0) = {}",
            gains.g.eval(0.0),
            ide.n_kernel.eval(0.0)
        );
    }

    #[test]
    fn residual_refines_under_density() {
        let ide = test_ide(0.12, 0.08);
        let (gc, _) = solve_gains(assemble_operator(&ide, 8.0).unwrap(), 1e10).unwrap();
        let (gf, _) = solve_gains(assemble_operator(&ide, 16.0).unwrap(), 1e10).unwrap();
        let rc = residual(&gc, &ide).sup();
        let rf = residual(&gf, &ide).sup();
        assert!(
            rf < 0.7 * rc,
            "coarse residual {rc:.3e} should shrink, fine {rf:.3e}"
        );
    }

    #[test]
    fn fubini_constants() {
        let z = vec![1.0; 65];
        let p = vec![1.0; 129];
        // θ = 1, δ = 2, same step
        let dev =
            fubini_identity_check(&z, 1.0, &p, 2.0, Complex64::new(0.0, 0.0)).unwrap();
        assert!(dev <= 1e-12, "deviation {dev}");
    }

    #[test]
    fn fubini_complex_s() {
        let m = 64;
        let z: Vec<f64> = (0..=m).map(|i| (i as f64 / m as f64) * 0.8 - 0.3).collect();
        let p: Vec<f64> = (0..=2 * m)
            .map(|j| ((j as f64 / m as f64) - 1.0).abs())
            .collect();
        let dev =
            fubini_identity_check(&z, 1.0, &p, 2.0, Complex64::new(1.0, 2.0)).unwrap();
        assert!(dev <= 1e-10, "deviation {dev}");
    }
}
