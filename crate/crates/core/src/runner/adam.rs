use crate::diffcore::{Float, ParamStore, Tensor};

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(store: &ParamStore<F>, lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.tensor.shape().to_vec())).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update from the gradients accumulated in `store`.
    pub fn update(&mut self, store: &mut ParamStore<F>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (one, wd) = (F::one(), F::of(self.weight_decay));
        let step_size = F::of(self.lr / c1);
        let c2_sqrt = F::of(c2.sqrt());
        let eps = F::of(self.eps);
        for ((param, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let tensor = &mut param.tensor;
            let grad = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i] + wd * data[i];
                let mi = b1 * m.data()[i] + (one - b1) * g;
                let vi = b2 * v.data()[i] + (one - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                data[i] -= step_size * mi / (vi.sqrt() / c2_sqrt + eps);
            }
        }
    }
}
