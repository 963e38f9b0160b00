use super::params::ParamStore;
use super::tensor::{Real, Tensor4};

/// Adam with bias correction. Only trainable parameters are updated.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor4<T>>,
    v: Vec<Tensor4<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<_> = store.iter().map(|(_, p)| Tensor4::zeros(p.value.dims())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor4<T>]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, lr, eps) = (T::one(), T::lit(self.lr), T::lit(self.eps));
        let (c1, c2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
        for id in store.trainable_ids() {
            let g = &grads[id.0];
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            for (((p, &gv), mv), vv) in store.get_mut(id).data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv * c1;
                let vhat = *vv * c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
