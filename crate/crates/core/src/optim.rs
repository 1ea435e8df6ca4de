//! Adam over flat parameter slices.

/// Adam with bias correction; state is kept per slot, created on first use.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Advance the shared step counter; call once before the step's updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Update `param` in place. Entries with `trainable[i] == false` are left
    /// untouched and their moments stay zero.
    pub fn update(&mut self, slot: usize, param: &mut [f64], grad: &[f64], lr: f64, trainable: Option<&[bool]>) {
        assert!(self.t > 0, "begin_step before update");
        assert_eq!(param.len(), grad.len());
        if self.moments.len() <= slot {
            self.moments.resize_with(slot + 1, Default::default);
        }
        let (m, v) = &mut self.moments[slot];
        if m.len() != param.len() {
            *m = vec![0.0; param.len()];
            *v = vec![0.0; param.len()];
        }
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..param.len() {
            if trainable.is_some_and(|t| !t[i]) {
                continue;
            }
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            param[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut opt = Adam::new();
        let mut x = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.begin_step();
            opt.update(0, &mut x, &g, 0.05, None);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3), "{x:?}");
    }

    #[test]
    fn masked_entries_untouched() {
        let mut opt = Adam::new();
        let mut x = vec![1.0, 1.0];
        opt.begin_step();
        opt.update(0, &mut x, &[1.0, 1.0], 0.1, Some(&[true, false]));
        assert!(x[0] < 1.0);
        assert_eq!(x[1].to_bits(), 1.0f64.to_bits());
    }
}
