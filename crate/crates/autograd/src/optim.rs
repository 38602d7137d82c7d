use crate::params::{ParamId, ParamKind, ParamStore};
use crate::Tensor;

/// Adam with bias-corrected moments. The learning rate is supplied per step
/// so that schedules live with the caller.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient keep their value
    /// and moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads {
            if store.entry(*id).kind != ParamKind::Trainable {
                continue;
            }
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = store.get_mut(*id);
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamKind::Trainable, Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        let mut adam = Adam::default();
        let g = Tensor::from_vec(&[2], vec![0.3, -5.0]).unwrap();
        adam.step(&mut store, &[(id, g)], 0.01);
        let p = store.get(id).data();
        assert!((p[0] - 0.99).abs() < 1e-7);
        assert!((p[1] + 0.99).abs() < 1e-7);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamKind::Trainable, Tensor::from_vec(&[1], vec![5.0]).unwrap());
        let mut adam = Adam::default();
        for _ in 0..2000 {
            let w = store.get(id).data()[0];
            let g = Tensor::from_vec(&[1], vec![2.0 * (w - 2.0)]).unwrap();
            adam.step(&mut store, &[(id, g)], 0.05);
        }
        assert!((store.get(id).data()[0] - 2.0).abs() < 1e-2);
    }
}
