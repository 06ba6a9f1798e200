//! Uniform-step ring buffer for delayed state lookups.

/// Stores samples at uniform `dt`; lookups at arbitrary lags interpolate
/// linearly and fall back to the pre-history value beyond the stored depth.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    dt: f64,
    ring: Vec<f64>,
    head: usize,
    filled: usize,
    pre_value: f64,
}

impl HistoryBuffer {
    /// Buffer able to resolve lags up to `max_lag`.
    pub fn new(dt: f64, max_lag: f64) -> Self {
        let depth = (max_lag / dt).ceil() as usize + 3;
        Self {
            dt,
            ring: vec![0.0; depth],
            head: 0,
            filled: 0,
            pre_value: 0.0,
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Seed the buffer with `f(t)` for `t = -k dt, k = depth-1 .. 0`, so the
    /// most recent sample is `f(0)`.
    pub fn seed(&mut self, f: impl Fn(f64) -> f64) {
        let depth = self.ring.len();
        self.head = depth - 1;
        self.filled = depth;
        for k in 0..depth {
            let t = -((depth - 1 - k) as f64) * self.dt;
            self.ring[k] = f(t);
        }
    }

    pub fn push(&mut self, value: f64) {
        self.head = (self.head + 1) % self.ring.len();
        self.ring[self.head] = value;
        self.filled = (self.filled + 1).min(self.ring.len());
    }

    fn sample_back(&self, k: usize) -> f64 {
        if k >= self.filled {
            return self.pre_value;
        }
        let idx = (self.head + self.ring.len() - k) % self.ring.len();
        self.ring[idx]
    }

    /// Value at `lag >= 0` behind the most recent sample.
    pub fn value_at_lag(&self, lag: f64) -> f64 {
        debug_assert!(lag >= -1e-12);
        let pos = (lag / self.dt).max(0.0);
        let k = pos.floor() as usize;
        let frac = pos - k as f64;
        let a = self.sample_back(k);
        if frac <= 1e-12 {
            return a;
        }
        let b = self.sample_back(k + 1);
        a * (1.0 - frac) + b * frac
    }

    pub fn latest(&self) -> f64 {
        self.sample_back(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_lookup_and_interpolation() {
        let mut h = HistoryBuffer::new(0.5, 4.0);
        h.seed(|t| t);
        assert_eq!(h.value_at_lag(0.0), 0.0);
        assert!((h.value_at_lag(1.0) + 1.0).abs() < 1e-12);
        assert!((h.value_at_lag(0.75) + 0.75).abs() < 1e-12);
    }

    #[test]
    fn pre_history_defaults_to_zero() {
        let mut h = HistoryBuffer::new(0.1, 1.0);
        h.push(5.0);
        assert_eq!(h.value_at_lag(0.0), 5.0);
        assert_eq!(h.value_at_lag(5.0), 0.0);
    }

    #[test]
    fn push_rolls_forward() {
        let mut h = HistoryBuffer::new(1.0, 3.0);
        h.seed(|_| 1.0);
        h.push(2.0);
        h.push(3.0);
        assert_eq!(h.latest(), 3.0);
        assert_eq!(h.value_at_lag(1.0), 2.0);
        assert_eq!(h.value_at_lag(2.0), 1.0);
    }
}
