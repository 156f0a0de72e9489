use super::config::AdamConfig;
use crate::autodiff::Tensor;

/// Adaptive-moment optimiser with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::new([3], vec![1.0, -2.0, 0.5]);
        let g = Tensor::new([3], vec![0.3, -7.0, 0.0]);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(vec![&mut p], &[g]);
        // bias-corrected first step is lr · sign(g)
        assert!((p.data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p.data()[1] - (-2.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(p.data()[2], 0.5);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Tensor::new([2], vec![3.0, -4.0]);
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() });
        for _ in 0..2000 {
            let g = p.map(|x| 2.0 * x);
            opt.step(vec![&mut p], &[g]);
        }
        assert!(p.data().iter().all(|x| x.abs() < 1e-2));
    }
}
