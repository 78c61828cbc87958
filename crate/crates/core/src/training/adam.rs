use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    /// First and second moments, indexed by parameter id.
    pub moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and non-negative",
                cfg.lr
            )));
        }
        Ok(Self {
            cfg,
            step: 0,
            moments: Vec::new(),
        })
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        self.step += 1;
        let (b1, b2) = self.cfg.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (
            T::of(b1),
            T::of(b2),
            T::of(self.cfg.lr),
            T::of(self.cfg.eps),
        );
        let (c1, c2) = (T::of(c1), T::of(c2));
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        for (id, g) in grads {
            let slot = &mut self.moments[id.index()];
            let (m, v) = slot.get_or_insert_with(|| {
                (
                    Tensor::zeros(g.shape().to_vec()),
                    Tensor::zeros(g.shape().to_vec()),
                )
            });
            let p = store.get_mut(*id);
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
