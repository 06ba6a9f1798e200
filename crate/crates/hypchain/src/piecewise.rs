//! Piecewise 1D kernels on `[0, T]` with explicit breakpoints.
//!
//! Delay kernels produced by the reduction have kinks and jumps exactly at
//! indicator endpoints and at sums of breakpoints of convolved factors, so
//! the representation stores one uniform sample array per smooth segment.
//! Evaluation is right-continuous at interior breakpoints and zero outside
//! the support.

use num_complex::Complex64;

/// One smooth segment `[a, b]` with `values.len() >= 2` uniform samples.
#[derive(Debug, Clone)]
pub struct Segment {
    pub a: f64,
    pub b: f64,
    pub values: Vec<f64>,
}

impl Segment {
    fn eval(&self, x: f64) -> f64 {
        let m = self.values.len() - 1;
        let w = (x - self.a) / (self.b - self.a);
        let pos = (w * m as f64).clamp(0.0, m as f64);
        let j = (pos.floor() as usize).min(m - 1);
        let t = pos - j as f64;
        self.values[j] * (1.0 - t) + self.values[j + 1] * t
    }

    fn step(&self) -> f64 {
        (self.b - self.a) / (self.values.len() - 1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct PiecewiseKernel {
    pub name: String,
    segments: Vec<Segment>,
}

/// Minimum sample count per segment, so short segments never collapse.
const MIN_NODES: usize = 8;

fn nodes_for(len: f64, density: f64) -> usize {
    ((len * density).ceil() as usize + 1).max(MIN_NODES)
}

impl PiecewiseKernel {
    /// Zero kernel on `[0, t_sup]`.
    pub fn zero(name: &str, t_sup: f64) -> Self {
        Self {
            name: name.to_string(),
            segments: vec![Segment {
                a: 0.0,
                b: t_sup.max(f64::MIN_POSITIVE),
                values: vec![0.0; 2],
            }],
        }
    }

    /// Sample `f` on the given sorted breakpoints (must start at 0).
    /// `f(x, mid)` is called with the segment midpoint so branch formulas can
    /// resolve which side of a jump the segment lies on.
    pub fn sample(
        name: &str,
        breakpoints: &[f64],
        density: f64,
        mut f: impl FnMut(f64, f64) -> f64,
    ) -> Self {
        let bps = clean_breakpoints(breakpoints);
        let mut segments = Vec::new();
        for w in bps.windows(2) {
            let (a, b) = (w[0], w[1]);
            let m = nodes_for(b - a, density);
            let mid = 0.5 * (a + b);
            let values = (0..m)
                .map(|i| {
                    let x = a + (b - a) * i as f64 / (m - 1) as f64;
                    f(x, mid)
                })
                .collect();
            segments.push(Segment { a, b, values });
        }
        Self {
            name: name.to_string(),
            segments,
        }
    }

    pub fn support_end(&self) -> f64 {
        self.segments.last().map(|s| s.b).unwrap_or(0.0)
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        let mut bps: Vec<f64> = self.segments.iter().map(|s| s.a).collect();
        bps.push(self.support_end());
        bps
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Right-continuous evaluation; zero outside the segment span.
    pub fn eval(&self, x: f64) -> f64 {
        if x < 0.0 || x > self.support_end() {
            return 0.0;
        }
        // Right continuity: an interior breakpoint belongs to the segment
        // starting there; the support end belongs to the last segment.
        for (k, s) in self.segments.iter().enumerate() {
            let is_last = k + 1 == self.segments.len();
            if x < s.b || (is_last && x <= s.b) {
                if x < s.a - 1e-14 {
                    return 0.0;
                }
                return s.eval(x);
            }
        }
        0.0
    }

    /// Start of the first segment (kernels built from shifted nodes may not
    /// start at zero).
    pub fn support_start(&self) -> f64 {
        self.segments.first().map(|s| s.a).unwrap_or(0.0)
    }

    /// Limit from the left at `x` (used to record jump sizes).
    pub fn eval_left_limit(&self, x: f64) -> f64 {
        for s in &self.segments {
            if x > s.a && x <= s.b {
                return s.eval(x);
            }
        }
        0.0
    }

    pub fn eval_right_limit(&self, x: f64) -> f64 {
        self.eval(x)
    }

    pub fn sup_abs(&self) -> f64 {
        self.segments
            .iter()
            .flat_map(|s| s.values.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn finest_step(&self) -> f64 {
        self.segments
            .iter()
            .map(|s| s.step())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn scale(&self, c: f64, name: &str) -> Self {
        let mut out = self.clone();
        out.name = name.to_string();
        for s in &mut out.segments {
            for v in &mut s.values {
                *v *= c;
            }
        }
        out
    }

    /// `K(· − delta)` on `[0, T + delta]`, zero before `delta`.
    pub fn shift(&self, delta: f64, name: &str) -> Self {
        assert!(delta >= 0.0);
        let mut segments = Vec::new();
        if delta > 0.0 {
            segments.push(Segment {
                a: 0.0,
                b: delta,
                values: vec![0.0; 2],
            });
        }
        for s in &self.segments {
            segments.push(Segment {
                a: s.a + delta,
                b: s.b + delta,
                values: s.values.clone(),
            });
        }
        Self {
            name: name.to_string(),
            segments,
        }
    }

    /// Restrict to `[0, t_end]`, verifying the discarded tail stays below
    /// `clip_tol`. Returns the largest discarded magnitude.
    pub fn clip(&self, t_end: f64, name: &str) -> (Self, f64) {
        let density = 1.0 / self.finest_step();
        let mut bps: Vec<f64> = self
            .breakpoints()
            .into_iter()
            .filter(|b| *b < t_end)
            .collect();
        bps.push(t_end);
        let clipped = Self::sample(name, &bps, density, |x, mid| {
            let probe = if mid.is_finite() { mid } else { x };
            let _ = probe;
            self.eval_inside(x, mid)
        });
        let mut excess = 0.0f64;
        for s in &self.segments {
            for (i, v) in s.values.iter().enumerate() {
                let x = s.a + (s.b - s.a) * i as f64 / (s.values.len() - 1) as f64;
                if x > t_end {
                    excess = excess.max(v.abs());
                }
            }
        }
        (clipped, excess)
    }

    /// Piecewise-linear function through `(pos, val)` nodes, one segment per
    /// node interval (so later resampling preserves the values exactly).
    pub fn from_nodes(name: &str, pos: &[f64], val: &[f64]) -> Self {
        assert_eq!(pos.len(), val.len());
        assert!(pos.len() >= 2);
        let mut segments = Vec::with_capacity(pos.len() - 1);
        for k in 0..pos.len() - 1 {
            if pos[k + 1] - pos[k] < 1e-14 {
                continue;
            }
            segments.push(Segment {
                a: pos[k],
                b: pos[k + 1],
                values: vec![val[k], val[k + 1]],
            });
        }
        Self {
            name: name.to_string(),
            segments,
        }
    }

    pub fn from_segments(name: &str, segments: Vec<Segment>) -> Self {
        assert!(!segments.is_empty());
        Self {
            name: name.to_string(),
            segments,
        }
    }

    /// Segment-aware evaluation: picks the segment containing `mid`, then
    /// interpolates that segment at `x`. Exact across jumps when refining
    /// onto a union partition.
    pub(crate) fn eval_inside(&self, x: f64, mid: f64) -> f64 {
        if mid < 0.0 || mid > self.support_end() {
            return 0.0;
        }
        for (k, s) in self.segments.iter().enumerate() {
            let is_last = k + 1 == self.segments.len();
            if mid < s.b || (is_last && mid <= s.b) {
                return s.eval(x.clamp(s.a, s.b));
            }
        }
        0.0
    }

    /// Pointwise sum on the union partition of breakpoints.
    pub fn add(&self, other: &Self, name: &str) -> Self {
        let mut bps = self.breakpoints();
        bps.extend(other.breakpoints());
        let t_end = self.support_end().max(other.support_end());
        bps.push(t_end);
        let bps = clean_breakpoints(&bps);
        let density = 1.0 / self.finest_step().min(other.finest_step());
        Self::sample(name, &bps, density, |x, mid| {
            self.eval_inside(x, mid) + other.eval_inside(x, mid)
        })
    }

    /// Convolution `(self ⋆ other)(w) = ∫ self(η) other(w−η) dη` with
    /// breakpoints at all pairwise sums of the factors' breakpoints.
    pub fn convolve(&self, other: &Self, name: &str) -> Self {
        let bp1 = self.breakpoints();
        let bp2 = other.breakpoints();
        let mut bps = Vec::with_capacity(bp1.len() * bp2.len());
        for &a in &bp1 {
            for &b in &bp2 {
                bps.push(a + b);
            }
        }
        let bps = clean_breakpoints(&bps);
        let h = self.finest_step().min(other.finest_step());
        let density = 1.0 / h;
        Self::sample(name, &bps, density, |w, _| {
            convolve_at(self, other, w, h)
        })
    }

    /// Exact transform of the piecewise-linear interpolant: per sample cell,
    /// `∫ (c0 + c1 ν) e^{−νs} dν` in closed form. Valid at arbitrarily large
    /// `|Im s|`, where the trapezoid rule aliases.
    pub fn laplace_exact(&self, s: Complex64) -> Complex64 {
        if s.norm() < 1e-8 {
            return Complex64::new(self.integral(), 0.0);
        }
        let mut acc = Complex64::new(0.0, 0.0);
        for seg in &self.segments {
            let m = seg.values.len() - 1;
            let h = seg.step();
            for i in 0..m {
                let a = seg.a + h * i as f64;
                let (va, vb) = (seg.values[i], seg.values[i + 1]);
                let slope = (vb - va) / h;
                // ∫_a^{a+h} (va + slope (ν−a)) e^{−νs} dν
                let ea = (-a * s).exp();
                let eb = (-(a + h) * s).exp();
                acc += (va * ea - vb * eb) / s + slope * (ea - eb) / (s * s);
            }
        }
        acc
    }

    /// `∫_0^T K(ν) e^{−νs} dν` by per-segment trapezoid on the stored nodes.
    pub fn laplace(&self, s: Complex64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for seg in &self.segments {
            let m = seg.values.len() - 1;
            let h = seg.step();
            for i in 0..=m {
                let nu = seg.a + h * i as f64;
                let w = if i == 0 || i == m { 0.5 * h } else { h };
                acc += w * seg.values[i] * (-nu * s).exp();
            }
        }
        acc
    }

    /// `∫_0^T K(ν) dν`.
    pub fn integral(&self) -> f64 {
        self.laplace(Complex64::new(0.0, 0.0)).re
    }

    /// CSV rows `(nu, value, segment_id)`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("nu,value,segment_id\n");
        for (k, s) in self.segments.iter().enumerate() {
            let m = s.values.len() - 1;
            for (i, v) in s.values.iter().enumerate() {
                let nu = s.a + (s.b - s.a) * i as f64 / m as f64;
                out.push_str(&format!("{nu:.12e},{v:.12e},{k}\n"));
            }
        }
        out
    }
}

/// Trapezoid quadrature of `∫ f(η) g(w−η) dη` respecting both factors'
/// smooth pieces: the η-axis is cut at `bp(f)` and at `w − bp(g)`.
fn convolve_at(f: &PiecewiseKernel, g: &PiecewiseKernel, w: f64, h: f64) -> f64 {
    let lo = (w - g.support_end()).max(0.0);
    let hi = w.min(f.support_end());
    if hi <= lo {
        return 0.0;
    }
    let mut cuts: Vec<f64> = f
        .breakpoints()
        .into_iter()
        .filter(|x| *x > lo && *x < hi)
        .collect();
    for b in g.breakpoints() {
        let x = w - b;
        if x > lo && x < hi {
            cuts.push(x);
        }
    }
    cuts.push(lo);
    cuts.push(hi);
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-14);

    let mut acc = 0.0;
    for pair in cuts.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b - a < 1e-15 {
            continue;
        }
        let steps = ((b - a) / h).ceil() as usize + 1;
        let steps = steps.max(2);
        let mid = 0.5 * (a + b);
        let dh = (b - a) / (steps - 1) as f64;
        let mut seg_acc = 0.0;
        for i in 0..steps {
            let eta = a + dh * i as f64;
            // Use the subinterval midpoint to pin the smooth piece on both
            // factors, so jumps at the cut points are handled one-sidedly.
            let val = f.eval_inside(eta, mid) * g.eval_inside(w - eta, w - mid);
            let wgt = if i == 0 || i + 1 == steps { 0.5 } else { 1.0 };
            seg_acc += wgt * val;
        }
        acc += seg_acc * dh;
    }
    acc
}

fn clean_breakpoints(bps: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = bps.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    if v.is_empty() || v[0] > 1e-12 {
        v.insert(0, 0.0);
    } else {
        v[0] = 0.0;
    }
    assert!(v.len() >= 2, "kernel needs a non-empty support");
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn eval_outside_support_is_zero() {
        let k = PiecewiseKernel::sample("k", &[0.0, 1.0], 8.0, |x, _| x + 1.0);
        assert_eq!(k.eval(-0.1), 0.0);
        assert_eq!(k.eval(1.1), 0.0);
        assert!((k.eval(1.0) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn right_continuity_at_breakpoints() {
        // Jump from 1 to 3 at x = 0.5.
        let k = PiecewiseKernel::sample("k", &[0.0, 0.5, 1.0], 8.0, |_, mid| {
            if mid < 0.5 {
                1.0
            } else {
                3.0
            }
        });
        assert_eq!(k.eval(0.5), 3.0);
        assert_eq!(k.eval_left_limit(0.5), 1.0);
    }

    #[test]
    fn convolution_of_constants() {
        // h3 on [0,2] against h2 on [0,0.5]: value at w <= 0.5 is h3*h2*w.
        let h3 = PiecewiseKernel::sample("h3", &[0.0, 2.0], 32.0, |_, _| 0.7);
        let h2 = PiecewiseKernel::sample("h2", &[0.0, 0.5], 32.0, |_, _| -1.3);
        let c = h3.convolve(&h2, "c");
        for w in [0.1, 0.25, 0.4] {
            assert!((c.eval(w) - 0.7 * (-1.3) * w).abs() < 1e-10, "w={w}");
        }
        // Plateau for 0.5 <= w <= 2: h3*h2*0.5
        assert!((c.eval(1.0) - 0.7 * (-1.3) * 0.5).abs() < 1e-10);
        assert!((c.support_end() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn shift_and_scale() {
        let m = PiecewiseKernel::sample("m", &[0.0, 2.0], 8.0, |_, _| 1.0);
        let mt = m.shift(0.5, "mt").scale(2.0, "mt");
        assert_eq!(mt.eval(0.25), 0.0);
        assert!((mt.eval(0.5) - 2.0).abs() < 1e-14);
        assert!((mt.eval(2.5) - 2.0).abs() < 1e-14);
        assert!((mt.support_end() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn laplace_of_constant() {
        let k = PiecewiseKernel::sample("k", &[0.0, 1.5], 256.0, |_, _| 2.0);
        let s = Complex64::new(0.7, 1.3);
        let exact = 2.0 * (1.0 - (-1.5 * s).exp()) / s;
        let got = k.laplace(s);
        assert!((got - exact).norm() < 1e-4, "got {got}, exact {exact}");
        assert!((k.integral() - 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn stored_nodes_reproduce_exactly(vals in proptest::collection::vec(-5.0f64..5.0, 4..12)) {
            let k = PiecewiseKernel {
                name: "p".into(),
                segments: vec![Segment { a: 0.0, b: 1.0, values: vals.clone() }],
            };
            let m = vals.len() - 1;
            for (i, v) in vals.iter().enumerate() {
                let x = i as f64 / m as f64;
                prop_assert!((k.eval(x) - v).abs() <= 1e-12 * (1.0 + v.abs()));
            }
        }

        #[test]
        fn add_is_pointwise(c1 in -3.0f64..3.0, c2 in -3.0f64..3.0, x in 0.0f64..1.0) {
            let k1 = PiecewiseKernel::sample("a", &[0.0, 0.4, 1.0], 16.0, |_, _| c1);
            let k2 = PiecewiseKernel::sample("b", &[0.0, 0.7, 1.0], 16.0, |_, _| c2);
            let s = k1.add(&k2, "s");
            prop_assert!((s.eval(x) - (c1 + c2)).abs() < 1e-10);
        }
    }
}
