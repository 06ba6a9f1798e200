//! Discretized state transform.
//!
//! The transform maps the stacked samples of `(u1, v1, u2, v2, u3, v3)` to
//! `(α1, β1, α2, β2, α3, β3)`: identity minus trapezoid quadrature of the
//! Volterra integrals (lower limits for subsystem 1, upper for 2 and 3) and
//! of the affine integrals carrying the subsystem-3 state into subsystem 2.
//! The inverse is computed as a dense matrix inverse; the inverse kernels
//! are read back off the inverse matrix's integral blocks.

use nalgebra::{DMatrix, DVector};

use crate::grid::{Domain, KernelGrid};
use crate::kernels::{DirectKernels, UU, UV, VU, VV};
use crate::{Error, Result};

/// Stacked-state layout: six blocks of `n+1` samples.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub n: usize,
}

impl Layout {
    pub fn block_len(&self) -> usize {
        self.n + 1
    }
    pub fn dim(&self) -> usize {
        6 * (self.n + 1)
    }
    /// Offset of component `c` (0: u1, 1: v1, 2: u2, 3: v2, 4: u3, 5: v3).
    pub fn offset(&self, c: usize) -> usize {
        c * (self.n + 1)
    }
}

#[derive(Debug, Clone)]
pub struct TransformMatrix {
    pub layout: Layout,
    pub forward: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    /// `‖F‖_1 · ‖F^{-1}‖_1`
    pub condition: f64,
}

fn w_full(n: usize, j: usize) -> f64 {
    let h = 1.0 / n as f64;
    if j == 0 || j == n {
        0.5 * h
    } else {
        h
    }
}

/// Trapezoid weight of node `j` in `∫_0^{x_i}` (lower Volterra).
fn w_lower(n: usize, i: usize, j: usize) -> f64 {
    if i == 0 || j > i {
        return 0.0;
    }
    let h = 1.0 / n as f64;
    if j == 0 || j == i {
        0.5 * h
    } else {
        h
    }
}

/// Trapezoid weight of node `j` in `∫_{x_i}^1` (upper Volterra).
fn w_upper(n: usize, i: usize, j: usize) -> f64 {
    if i == n || j < i {
        return 0.0;
    }
    let h = 1.0 / n as f64;
    if j == i || j == n {
        0.5 * h
    } else {
        h
    }
}

/// Assemble the forward transform from the direct kernels.
pub fn assemble_forward(dk: &DirectKernels) -> TransformMatrix {
    let n = dk.n;
    let layout = Layout { n };
    let dim = layout.dim();
    let mut f = DMatrix::<f64>::identity(dim, dim);

    let mut volterra = |row_block: usize,
                        col_u: usize,
                        col_v: usize,
                        ku: &KernelGrid,
                        kv: &KernelGrid,
                        lower: bool| {
        for i in 0..=n {
            let r = layout.offset(row_block) + i;
            for j in 0..=n {
                let w = if lower {
                    w_lower(n, i, j)
                } else {
                    w_upper(n, i, j)
                };
                if w != 0.0 {
                    f[(r, layout.offset(col_u) + j)] -= w * ku.get(i, j);
                    f[(r, layout.offset(col_v) + j)] -= w * kv.get(i, j);
                }
            }
        }
    };

    // Subsystem 1: α1, β1 rows touch only u1, v1.
    volterra(0, 0, 1, &dk.k[0][UU], &dk.k[0][UV], true);
    volterra(1, 0, 1, &dk.k[0][VU], &dk.k[0][VV], true);
    // Subsystem 2 Volterra part.
    volterra(2, 2, 3, &dk.k[1][UU], &dk.k[1][UV], false);
    volterra(3, 2, 3, &dk.k[1][VU], &dk.k[1][VV], false);
    // Subsystem 3.
    volterra(4, 4, 5, &dk.k[2][UU], &dk.k[2][UV], false);
    volterra(5, 4, 5, &dk.k[2][VU], &dk.k[2][VV], false);

    // Affine part: subsystem-3 state entering α2, β2 over the full interval.
    // All four junction kernels vanish identically on the x = 1 edge, so the
    // rows at i = n stay pure identity (solver corner values are a
    // convention there and must not leak into the transform).
    for i in 0..n {
        for j in 0..=n {
            let w = w_full(n, j);
            f[(layout.offset(2) + i, layout.offset(4) + j)] -= w * dk.q_alpha.get(i, j);
            f[(layout.offset(2) + i, layout.offset(5) + j)] -= w * dk.r_alpha.get(i, j);
            f[(layout.offset(3) + i, layout.offset(4) + j)] -= w * dk.q_beta.get(i, j);
            f[(layout.offset(3) + i, layout.offset(5) + j)] -= w * dk.r_beta.get(i, j);
        }
    }

    TransformMatrix {
        layout,
        inverse: DMatrix::zeros(0, 0),
        condition: f64::NAN,
        forward: f,
    }
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|c| m.column(c).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Invert the forward transform; fails above the condition cap.
pub fn invert(mut t: TransformMatrix, cond_max: f64) -> Result<TransformMatrix> {
    let f = t.forward.clone();
    let inv = f
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Solver("transform matrix is singular".into()))?;
    let cond = norm1(&f) * norm1(&inv);
    if !cond.is_finite() || cond >= cond_max {
        return Err(Error::Solver(format!(
            "transform condition number {cond:.3e} exceeds the cap {cond_max:.1e}"
        )));
    }
    t.inverse = inv;
    t.condition = cond;
    Ok(t)
}

impl TransformMatrix {
    pub fn apply(&self, state: &DVector<f64>) -> DVector<f64> {
        &self.forward * state
    }
    pub fn apply_inverse(&self, target: &DVector<f64>) -> DVector<f64> {
        &self.inverse * target
    }
}

/// Traces of the inverse kernels needed by the boundary-kernel assembly.
/// All are sampled on the `n+1` node grid of `[0, 1]`.
#[derive(Debug, Clone)]
pub struct InverseTraces {
    pub n: usize,
    /// `L1^{αα}(1,·), L1^{αβ}(1,·), L1^{βα}(1,·), L1^{ββ}(1,·)`
    pub l1aa_at1: Vec<f64>,
    pub l1ab_at1: Vec<f64>,
    pub l1ba_at1: Vec<f64>,
    pub l1bb_at1: Vec<f64>,
    /// `L2^{··}(0,·)`
    pub l2aa_at0: Vec<f64>,
    pub l2ab_at0: Vec<f64>,
    pub l2ba_at0: Vec<f64>,
    pub l2bb_at0: Vec<f64>,
    /// `L3^{··}(0,·)`
    pub l3aa_at0: Vec<f64>,
    pub l3ab_at0: Vec<f64>,
    pub l3ba_at0: Vec<f64>,
    pub l3bb_at0: Vec<f64>,
    /// Affine inverse kernels at `x = 0` and `x = 1`.
    pub su_at0: Vec<f64>,
    pub sv_at0: Vec<f64>,
    pub tu_at0: Vec<f64>,
    pub tv_at0: Vec<f64>,
    pub su_at1: Vec<f64>,
    pub sv_at1: Vec<f64>,
    pub tu_at1: Vec<f64>,
    pub tv_at1: Vec<f64>,
}

/// Read a kernel trace off one row of the inverse matrix.
/// `u_row = α_block-applied row`: `inv[r, c_j] = δ − w_j K(x_r, y_j)`.
fn extract_row(
    inv: &DMatrix<f64>,
    layout: Layout,
    row_block: usize,
    row_i: usize,
    col_block: usize,
    diag: bool,
) -> Vec<f64> {
    let n = layout.n;
    let r = layout.offset(row_block) + row_i;
    (0..=n)
        .map(|j| {
            let w = w_full(n, j);
            let e = inv[(r, layout.offset(col_block) + j)];
            let id = if diag && j == row_i { 1.0 } else { 0.0 };
            (id - e) / w
        })
        .collect()
}

/// Extract all inverse-kernel traces used downstream.
pub fn inverse_traces(t: &TransformMatrix) -> InverseTraces {
    let layout = t.layout;
    let n = layout.n;
    let inv = &t.inverse;
    InverseTraces {
        n,
        l1aa_at1: extract_row(inv, layout, 0, n, 0, true),
        l1ab_at1: extract_row(inv, layout, 0, n, 1, false),
        l1ba_at1: extract_row(inv, layout, 1, n, 0, false),
        l1bb_at1: extract_row(inv, layout, 1, n, 1, true),
        l2aa_at0: extract_row(inv, layout, 2, 0, 2, true),
        l2ab_at0: extract_row(inv, layout, 2, 0, 3, false),
        l2ba_at0: extract_row(inv, layout, 3, 0, 2, false),
        l2bb_at0: extract_row(inv, layout, 3, 0, 3, true),
        l3aa_at0: extract_row(inv, layout, 4, 0, 4, true),
        l3ab_at0: extract_row(inv, layout, 4, 0, 5, false),
        l3ba_at0: extract_row(inv, layout, 5, 0, 4, false),
        l3bb_at0: extract_row(inv, layout, 5, 0, 5, true),
        su_at0: extract_row(inv, layout, 2, 0, 4, false),
        sv_at0: extract_row(inv, layout, 3, 0, 4, false),
        tu_at0: extract_row(inv, layout, 2, 0, 5, false),
        tv_at0: extract_row(inv, layout, 3, 0, 5, false),
        su_at1: extract_row(inv, layout, 2, n, 4, false),
        sv_at1: extract_row(inv, layout, 3, n, 4, false),
        tu_at1: extract_row(inv, layout, 2, n, 5, false),
        tv_at1: extract_row(inv, layout, 3, n, 5, false),
    }
}

/// Full inverse-kernel grids (for export and inspection).
#[derive(Debug, Clone)]
pub struct InverseKernels {
    pub n: usize,
    pub l: [[KernelGrid; 4]; 3],
    pub su: KernelGrid,
    pub sv: KernelGrid,
    pub tu: KernelGrid,
    pub tv: KernelGrid,
}

pub const INVERSE_NAMES: [[&str; 4]; 3] = [
    ["L1aa", "L1ab", "L1ba", "L1bb"],
    ["L2aa", "L2ab", "L2ba", "L2bb"],
    ["L3aa", "L3ab", "L3ba", "L3bb"],
];

pub fn extract_inverse_kernels(t: &TransformMatrix) -> InverseKernels {
    let layout = t.layout;
    let n = layout.n;
    let inv = &t.inverse;
    let mut out = InverseKernels {
        n,
        l: [
            std::array::from_fn(|_| KernelGrid::zeros(n, Domain::LowerTriangle)),
            std::array::from_fn(|_| KernelGrid::zeros(n, Domain::UpperTriangle)),
            std::array::from_fn(|_| KernelGrid::zeros(n, Domain::UpperTriangle)),
        ],
        su: KernelGrid::zeros(n, Domain::UnitSquare),
        sv: KernelGrid::zeros(n, Domain::UnitSquare),
        tu: KernelGrid::zeros(n, Domain::UnitSquare),
        tv: KernelGrid::zeros(n, Domain::UnitSquare),
    };
    // Volterra blocks: weights depend on (i, j) and the triangle orientation.
    for s in 0..3 {
        let (row_u, row_v, col_a, col_b, lower) = match s {
            0 => (0, 1, 0, 1, true),
            1 => (2, 3, 2, 3, false),
            _ => (4, 5, 4, 5, false),
        };
        for i in 0..=n {
            for j in 0..=n {
                let w = if lower {
                    w_lower(n, i, j)
                } else {
                    w_upper(n, i, j)
                };
                if w == 0.0 {
                    continue;
                }
                let cases = [
                    (0usize, row_u, col_a),
                    (1, row_u, col_b),
                    (2, row_v, col_a),
                    (3, row_v, col_b),
                ];
                for (k, rb, cb) in cases {
                    let r = layout.offset(rb) + i;
                    let c = layout.offset(cb) + j;
                    let id = if (k == 0 || k == 3) && j == i { 1.0 } else { 0.0 };
                    out.l[s][k].set(i, j, (id - inv[(r, c)]) / w);
                }
            }
        }
    }
    for i in 0..=n {
        for j in 0..=n {
            let w = w_full(n, j);
            out.su
                .set(i, j, -inv[(layout.offset(2) + i, layout.offset(4) + j)] / w);
            out.tu
                .set(i, j, -inv[(layout.offset(2) + i, layout.offset(5) + j)] / w);
            out.sv
                .set(i, j, -inv[(layout.offset(3) + i, layout.offset(4) + j)] / w);
            out.tv
                .set(i, j, -inv[(layout.offset(3) + i, layout.offset(5) + j)] / w);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SystemConfig;
    use crate::kernels::solve_direct;

    fn cfg(n: usize, sigma: f64) -> SystemConfig {
        let text = format!(
            r#"
[velocities]
lambda = [1.0, 1.0, 1.0]
mu = [1.0, 1.0, 1.0]

[sigma]
s1_plus = {{ kind = "constant", value = {sigma} }}
s1_minus = {{ kind = "constant", value = 0.2 }}
s2_plus = {{ kind = "constant", value = 0.15 }}
s2_minus = {{ kind = "constant", value = 0.1 }}
s3_plus = {{ kind = "constant", value = {sigma} }}
s3_minus = {{ kind = "constant", value = 0.25 }}

[boundary_q]
q11 = 0.5
q21 = 0.5
q22 = 0.3
q32 = 0.5
q33 = 0.3

[boundary_rho]
rho11 = 0.1
rho12 = 0.1
rho22 = 0.2
rho23 = 0.2
rho33 = 0.4

[numerics]
resolution = {n}
"#
        );
        SystemConfig::from_toml_str(&text).unwrap()
    }

    #[test]
    fn zero_kernels_give_identity() {
        let c = cfg(12, 0.0);
        let mut c0 = c;
        for s in 0..3 {
            c0.sigma_plus[s] = crate::config::SigmaProfile::zero(12);
            c0.sigma_minus[s] = crate::config::SigmaProfile::zero(12);
        }
        let dk = solve_direct(&c0, 12).unwrap();
        let t = assemble_forward(&dk);
        assert!((t.forward.clone() - DMatrix::<f64>::identity(78, 78)).amax() < 1e-12);
        let t = invert(t, 1e10).unwrap();
        let traces = inverse_traces(&t);
        assert!(traces.l1aa_at1.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn subsystem1_rows_touch_only_subsystem1_columns() {
        let c = cfg(10, 0.3);
        let dk = solve_direct(&c, 10).unwrap();
        let t = assemble_forward(&dk);
        let bl = t.layout.block_len();
        for i in 0..2 * bl {
            for j in 2 * bl..6 * bl {
                assert_eq!(t.forward[(i, j)], 0.0, "({i},{j})");
            }
        }
    }

    #[test]
    fn round_trip_matrix_identity() {
        let c = cfg(16, 0.3);
        let dk = solve_direct(&c, 16).unwrap();
        let t = invert(assemble_forward(&dk), 1e10).unwrap();
        let id = &t.forward * &t.inverse;
        let dev = (id - DMatrix::<f64>::identity(t.layout.dim(), t.layout.dim())).amax();
        assert!(dev < 1e-10, "F F^-1 deviates by {dev}");
    }

    #[test]
    fn applying_to_constant_state_matches_direct_quadrature() {
        let c = cfg(16, 0.3);
        let n = 16;
        let dk = solve_direct(&c, n).unwrap();
        let t = assemble_forward(&dk);
        let state = DVector::from_element(t.layout.dim(), 1.0);
        let out = t.apply(&state);
        // α3 at x_i = 1 - ∫_{x_i}^1 (K3uu + K3uv) dy by trapezoid
        let h = 1.0 / n as f64;
        for i in [0usize, 5, n - 1] {
            let mut acc = 0.0;
            for j in i..=n {
                let w = if j == i || j == n { 0.5 * h } else { h };
                acc += w * (dk.k[2][UU].get(i, j) + dk.k[2][UV].get(i, j));
            }
            let expect = 1.0 - acc;
            let got = out[t.layout.offset(4) + i];
            assert!((got - expect).abs() < 1e-12, "row {i}: {got} vs {expect}");
        }
    }

    #[test]
    fn inverse_trace_extraction_consistent_with_inverse_matrix() {
        let c = cfg(14, 0.3);
        let dk = solve_direct(&c, 14).unwrap();
        let t = invert(assemble_forward(&dk), 1e10).unwrap();
        let tr = inverse_traces(&t);
        let ik = extract_inverse_kernels(&t);
        let n = 14;
        for j in 0..=n {
            assert!((tr.l1aa_at1[j] - ik.l[0][0].get(n, j)).abs() < 1e-12);
            assert!((tr.su_at1[j] - ik.su.get(n, j)).abs() < 1e-12);
        }
        // Sv(1,·), Tv(1,·) vanish: the β2 transform has no affine residue at
        // x = 1 (its transform row is pure identity).
        for j in 0..=n {
            assert!(tr.sv_at1[j].abs() < 1e-8, "Sv(1,y_{j}) = {}", tr.sv_at1[j]);
            assert!(tr.tv_at1[j].abs() < 1e-8, "Tv(1,y_{j}) = {}", tr.tv_at1[j]);
        }
    }
}
