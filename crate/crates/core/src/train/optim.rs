use crate::tensor::{Grads, NdArray, ParamStore};

/// `scale · d_model^−0.5 · min(s^−0.5, s · warmup^−1.5)` for step `s ≥ 1`.
pub fn learning_rate(step: u64, d_model: usize, warmup: u64, scale: f64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    scale * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// First and second moment estimates, aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<NdArray>,
    pub v: Vec<NdArray>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros_like(store: &ParamStore) -> Self {
        let zeros: Vec<NdArray> = store.iter().map(|(_, v)| NdArray::zeros(v.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            state: AdamState::zeros_like(store),
        }
    }

    /// One bias-corrected Adam update.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.iter() {
            let i = id.index();
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g.data()[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g.data()[k] * g.data()[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_formula() {
        let d: f64 = 32.0;
        for s in [1u64, 17, 400, 401, 2999] {
            let expect = 2.0 * d.powf(-0.5) * (s as f64).powf(-0.5).min(s as f64 * 400f64.powf(-1.5));
            assert_eq!(learning_rate(s, 32, 400, 2.0), expect);
        }
        // peak at the end of warmup
        assert!(learning_rate(400, 32, 400, 1.0) > learning_rate(399, 32, 400, 1.0));
        assert!(learning_rate(400, 32, 400, 1.0) > learning_rate(401, 32, 400, 1.0));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("p", NdArray::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut grads = Grads::zeros_like(&store);
        grads.add(id, &NdArray::new(vec![2], vec![0.5, -3.0]).unwrap());
        let mut adam = Adam::new(&store, 0.9, 0.98, 1e-9);
        adam.update(&mut store, &grads, 0.1);
        let p = store.get(id).data();
        assert!((p[0] - 0.9).abs() < 1e-8);
        assert!((p[1] + 0.9).abs() < 1e-8);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut store = ParamStore::new();
        let id = store.add("p", NdArray::zeros(&[2]));
        let mut grads = Grads::zeros_like(&store);
        grads.add(id, &NdArray::new(vec![2], vec![3.0, 4.0]).unwrap());
        assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }
}
