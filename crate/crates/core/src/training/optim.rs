use crate::numerics::Matrix;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    steps: u32,
}

impl AdamW {
    pub fn new(shapes: &[(usize, usize)], weight_decay: f64) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            first: zeros(),
            second: zeros(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix], lr: f64) {
        assert_eq!(params.len(), grads.len(), "AdamW::step: tensor count");
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        let shrink = 1.0 - lr * self.weight_decay;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let ps = p.as_mut_slice();
            let (ms, vs) = (m.as_mut_slice(), v.as_mut_slice());
            for (k, &gk) in g.as_slice().iter().enumerate() {
                ms[k] = self.beta1 * ms[k] + (1.0 - self.beta1) * gk;
                vs[k] = self.beta2 * vs[k] + (1.0 - self.beta2) * gk * gk;
                let update = (ms[k] / bc1) / ((vs[k] / bc2).sqrt() + self.eps);
                ps[k] = ps[k] * shrink - lr * update;
            }
        }
    }
}

/// Rescales `grads` in place so their joint Frobenius norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.norm_fro().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Step decay: `initial · γ^{⌊epoch / step⌋}`.
pub fn step_lr(initial: f64, gamma: f64, step: usize, epoch: usize) -> f64 {
    initial * gamma.powi((epoch / step.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_at_epoch_100() {
        assert!((step_lr(1e-3, 0.9, 50, 100) - 8.1e-4).abs() < 1e-18);
        assert_eq!(step_lr(1e-3, 0.9, 50, 49), 1e-3);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = vec![Matrix::from_rows(&[&[2.0, -4.0]])];
        let mut opt = AdamW::new(&[(1, 2)], 1e-3);
        opt.step(&mut p, &[Matrix::zeros(1, 2)], 0.5);
        assert_eq!(p[0].as_slice(), &[2.0 * (1.0 - 5e-4), -4.0 * (1.0 - 5e-4)]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![Matrix::from_rows(&[&[1.0, 1.0]])];
        let mut opt = AdamW::new(&[(1, 2)], 0.0);
        opt.step(&mut p, &[Matrix::from_rows(&[&[3.0, -0.2]])], 0.01);
        assert!((p[0][(0, 0)] - 0.99).abs() < 1e-9);
        assert!((p[0][(0, 1)] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![Matrix::from_rows(&[&[5.0, -3.0]])];
        let mut opt = AdamW::new(&[(1, 2)], 0.0);
        for _ in 0..3000 {
            let g = p[0].scale(2.0);
            opt.step(&mut p, &[g], 0.01);
        }
        assert!(p[0].max_abs() < 1e-2);
    }

    proptest! {
        #[test]
        fn clipped_norm_is_bounded(vals in proptest::collection::vec(-100.0f64..100.0, 1..20), max in 0.01f64..5.0) {
            let mut g = vec![Matrix::row_vector(&vals), Matrix::row_vector(&vals)];
            let before = clip_global_norm(&mut g, max);
            let after = g.iter().map(|m| m.norm_fro().powi(2)).sum::<f64>().sqrt();
            prop_assert!(after <= max + 1e-12);
            if before <= max {
                prop_assert_eq!(after, before);
            }
        }
    }
}
