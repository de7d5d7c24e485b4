use super::ParamStore;

/// Adam moment estimates for every entry of a [`ParamStore`], in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
    /// Per-parameter multiplier on `lr`, in store order.
    pub lr_scale: Vec<f64>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Adam {
            lr,
            lr_scale: vec![1.0; zeros.len()],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState {
                step: 0,
                m: zeros.clone(),
                v: zeros,
            },
        }
    }

    pub fn set_lr_scale(&mut self, id: super::ParamId, scale: f64) {
        self.lr_scale[id.0] = scale;
    }

    /// Applies one update to every trainable parameter from its gradient
    /// buffer. Gradients are left in place.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.trainable)).collect();
        for (id, trainable) in ids {
            if !trainable {
                continue;
            }
            let p = store.get_mut(id);
            let lr = self.lr * self.lr_scale[id.0];
            let m = &mut self.state.m[id.0];
            let v = &mut self.state.v[id.0];
            for ((x, g), (mi, vi)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(&p.grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
