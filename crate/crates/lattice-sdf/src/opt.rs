//! Adaptive moment estimation with per-group learning rates.

/// Adam hyperparameters. Hash tables use a smaller epsilon so the tiny
/// feature magnitudes early in training still take meaningful steps.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn for_tables(lr: f64) -> Self {
        AdamParams {
            lr,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-15,
        }
    }
    pub fn for_mlps(lr: f64) -> Self {
        AdamParams {
            lr,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub hyper: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, hyper: AdamParams) -> Self {
        Adam {
            hyper,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One update over a flat parameter group. `lr_scale` applies schedule
    /// decay on top of the base rate.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr_scale: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.t as i32);
        let bc2 = 1.0 - h.beta2.powi(self.t as i32);
        let lr = h.lr * lr_scale;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = h.beta1 * self.m[i] + (1.0 - h.beta1) * g;
            self.v[i] = h.beta2 * self.v[i] + (1.0 - h.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + h.eps);
        }
    }
}

/// Cosine decay factor from 1.0 down to `floor` over `total` steps.
pub fn cosine_decay(step: usize, total: usize, floor: f64) -> f64 {
    if total == 0 || step >= total {
        return floor;
    }
    let c = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
    floor + (1.0 - floor) * c
}
