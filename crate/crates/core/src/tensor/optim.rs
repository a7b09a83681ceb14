use crate::tensor::{Matrix, ParamStore};

/// Adaptive moment estimation over the trainable entries of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the global gradient norm down to this value before the update.
    pub clip_norm: Option<f64>,
    step: u64,
    first: Vec<Option<Matrix>>,
    second: Vec<Option<Matrix>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(1e-3, 0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            clip_norm: None,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn with_lr(lr: f64) -> Self {
        Adam {
            lr,
            ..Adam::default()
        }
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update from the accumulated gradients, then zero them.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        let clip_scale = match self.clip_norm {
            Some(max) => {
                let norm = store
                    .iter()
                    .filter(|(_, p)| p.trainable)
                    .map(|(_, p)| p.grad.data().iter().map(|g| g * g).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.trainable_ids();
        for id in ids {
            let p = store.get_mut(id);
            let (r, c) = p.value.shape();
            let m = self.first[id.index()].get_or_insert_with(|| Matrix::zeros(r, c));
            let v = self.second[id.index()].get_or_insert_with(|| Matrix::zeros(r, c));
            let grads = p.grad.data();
            let vals = p.value.data_mut();
            for (((x, &g0), mi), vi) in vals
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g0 * clip_scale;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        store.zero_grad();
    }
}
