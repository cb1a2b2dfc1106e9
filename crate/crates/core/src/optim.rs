//! Adaptive-moment first-order updates over flat parameter blocks.

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl Adam {
    /// One moment buffer per block, sized by `lens`.
    pub fn new(lens: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// Moves each block along `-grad` (descent); pass negated gradients to
    /// ascend. `lr_scale` multiplies the step per block.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64, lr_scale: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let scale = lr_scale.get(k).copied().unwrap_or(1.0) * lr;
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / b1t;
                let vh = v[i] / b2t;
                p[i] -= scale * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales all blocks together so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Cosine decay from `lr` at step 0 to zero at `total` steps.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    0.5 * lr * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(&[2]);
        for _ in 0..2000 {
            let g = vec![2.0 * (x[0] - 1.0), 8.0 * (x[1] + 0.5)];
            opt.update(&mut [&mut x], &[&g], 0.05, &[]);
        }
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut x = vec![0.0];
        let mut opt = Adam::new(&[1]);
        opt.update(&mut [&mut x], &[&[123.0]], 0.1, &[]);
        assert!((x[0] + 0.1).abs() < 1e-9);
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-12 && (g[1][0] - 0.8).abs() < 1e-12);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 200), 0.1);
        assert!(cosine_lr(0.1, 200, 200).abs() < 1e-15);
        assert!((cosine_lr(0.1, 100, 200) - 0.05).abs() < 1e-15);
    }
}
