//! Adam with bias correction and global-norm gradient clipping.

use crate::nn::ParamStore;

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// First and second moment estimates, shaped like the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().chain(&self.v).all(|b| b.iter().all(|x| x.is_finite()))
    }

    pub fn matches(&self, params: &ParamStore) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params.iter().zip(&self.m).zip(&self.v).all(|((p, m), v)| p.len() == m.len() && p.len() == v.len())
    }

    /// One update at learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f32>], lr: f32) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - (ADAM_BETA1 as f64).powi(t);
        let bc2 = 1.0 - (ADAM_BETA2 as f64).powi(t);
        let step_size = (lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &g), m), v) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *w -= step_size * *m / (v.sqrt() / bc2_sqrt + ADAM_EPS);
            }
        }
    }
}

/// Scales `grads` in place so their global ℓ2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f32) -> f32 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt() as f32;
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= scale);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.register("w", &[3], Init::Constant { value: 1.0 });
        let mut adam = AdamState::new(&store);
        adam.step(&mut store, &[vec![0.5, -2.0, 0.0]], 0.1);
        let w = store.get(id);
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 1.1).abs() < 1e-6);
        assert_eq!(w[2], 1.0);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.register("w", &[2], Init::Constant { value: 3.0 });
        let mut adam = AdamState::new(&store);
        for _ in 0..2000 {
            let g: Vec<f32> = store.get(id).iter().map(|w| 2.0 * (w - 0.5)).collect();
            adam.step(&mut store, &[g], 0.01);
        }
        assert!(store.get(id).iter().all(|w| (w - 0.5).abs() < 1e-2));
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![vec![3.0, 4.0], vec![0.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-6 && (g[0][1] - 0.8).abs() < 1e-6);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small[0][0], 0.1);
    }
}
