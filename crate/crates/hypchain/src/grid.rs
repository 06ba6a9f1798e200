//! Sampled 2D kernels on the unit square or one of its triangles.

use serde::{Deserialize, Serialize};

/// Domain of definition of a kernel grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    /// `0 <= y <= x <= 1`
    LowerTriangle,
    /// `x <= y <= 1`
    UpperTriangle,
    UnitSquare,
}

impl Domain {
    pub fn contains(self, x: f64, y: f64) -> bool {
        let inside = (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y);
        inside
            && match self {
                Domain::LowerTriangle => y <= x + 1e-12,
                Domain::UpperTriangle => x <= y + 1e-12,
                Domain::UnitSquare => true,
            }
    }
}

/// Uniform `(n+1) x (n+1)` sample array indexed by `(x-node, y-node)`.
/// Out-of-domain nodes hold a constant extension of the nearest diagonal
/// value so that interpolation near the domain edge stays first-order.
#[derive(Debug, Clone)]
pub struct KernelGrid {
    pub n: usize,
    pub domain: Domain,
    values: Vec<f64>,
}

impl KernelGrid {
    pub fn zeros(n: usize, domain: Domain) -> Self {
        Self {
            n,
            domain,
            values: vec![0.0; (n + 1) * (n + 1)],
        }
    }

    #[inline]
    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * (self.n + 1) + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * (self.n + 1) + j] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Row of samples at fixed `y = j/n` as a function of `x`.
    pub fn x_trace(&self, j: usize) -> Vec<f64> {
        (0..=self.n).map(|i| self.get(i, j)).collect()
    }

    /// Column of samples at fixed `x = i/n` as a function of `y`.
    pub fn y_trace(&self, i: usize) -> Vec<f64> {
        (0..=self.n).map(|j| self.get(i, j)).collect()
    }

    /// Linear interpolation along the row `y = y_j`, clamped to the domain.
    pub fn interp_row(&self, x: f64, j: usize) -> f64 {
        let n = self.n;
        let y = j as f64 / n as f64;
        let x = match self.domain {
            Domain::LowerTriangle => x.clamp(y, 1.0),
            Domain::UpperTriangle => x.clamp(0.0, y),
            Domain::UnitSquare => x.clamp(0.0, 1.0),
        };
        let pos = x * n as f64;
        let i = (pos.floor() as usize).min(n - 1);
        let t = pos - i as f64;
        self.get(i, j) * (1.0 - t) + self.get(i + 1, j) * t
    }

    /// Bilinear interpolation with domain clamping.
    pub fn interp(&self, x: f64, y: f64) -> f64 {
        let n = self.n;
        let y = y.clamp(0.0, 1.0);
        let posy = y * n as f64;
        let j = (posy.floor() as usize).min(n - 1);
        let ty = posy - j as f64;
        self.interp_row(x, j) * (1.0 - ty) + self.interp_row(x, j + 1) * ty
    }

    pub fn sup_abs(&self) -> f64 {
        let n = self.n;
        let mut m = 0.0f64;
        for i in 0..=n {
            for j in 0..=n {
                let x = i as f64 / n as f64;
                let y = j as f64 / n as f64;
                if self.domain.contains(x, y) {
                    m = m.max(self.get(i, j).abs());
                }
            }
        }
        m
    }

    /// Sup over in-domain nodes of `|self - other|`, interpolating `other`
    /// when resolutions differ.
    pub fn sup_diff(&self, other: &KernelGrid) -> f64 {
        let n = self.n;
        let mut m = 0.0f64;
        for i in 0..=n {
            for j in 0..=n {
                let x = i as f64 / n as f64;
                let y = j as f64 / n as f64;
                if self.domain.contains(x, y) {
                    m = m.max((self.get(i, j) - other.interp(x, y)).abs());
                }
            }
        }
        m
    }

    /// CSV rows `(x, y, value)` over in-domain nodes.
    pub fn to_csv(&self) -> String {
        let n = self.n;
        let mut out = String::from("x,y,value\n");
        for i in 0..=n {
            for j in 0..=n {
                let x = i as f64 / n as f64;
                let y = j as f64 / n as f64;
                if self.domain.contains(x, y) {
                    out.push_str(&format!("{x:.9},{y:.9},{:.12e}\n", self.get(i, j)));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interp_reproduces_bilinear() {
        let mut g = KernelGrid::zeros(4, Domain::UnitSquare);
        for i in 0..=4 {
            for j in 0..=4 {
                let (x, y) = (i as f64 / 4.0, j as f64 / 4.0);
                g.set(i, j, 2.0 * x - 3.0 * y + 0.5);
            }
        }
        assert!((g.interp(0.3, 0.7) - (2.0 * 0.3 - 3.0 * 0.7 + 0.5)).abs() < 1e-14);
        assert!((g.interp_row(0.55, 2) - (2.0 * 0.55 - 3.0 * 0.5 + 0.5)).abs() < 1e-14);
    }

    #[test]
    fn domain_membership() {
        assert!(Domain::LowerTriangle.contains(0.6, 0.4));
        assert!(!Domain::LowerTriangle.contains(0.4, 0.6));
        assert!(Domain::UpperTriangle.contains(0.4, 0.6));
        assert!(Domain::UnitSquare.contains(0.4, 0.6));
    }
}
