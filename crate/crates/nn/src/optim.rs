use crate::{Module, Scalar};

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Apply one update to every parameter of `modules` from its accumulated
    /// gradient. Moment slots follow the concatenated visitation order.
    pub fn update(&mut self, modules: &mut [&mut dyn Module<T>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let lr = T::lit(self.lr * c2.sqrt() / c1);
        let (b1, b2, eps) = (T::lit(self.beta1), T::lit(self.beta2), T::lit(self.eps * c2.sqrt()));
        let mut slot = 0;
        for module in modules.iter_mut() {
            module.visit_params(&mut |p| {
                if self.first.len() <= slot {
                    self.first.push(vec![T::zero(); p.len()]);
                    self.second.push(vec![T::zero(); p.len()]);
                }
                let m = &mut self.first[slot];
                let v = &mut self.second[slot];
                assert_eq!(m.len(), p.len(), "optimizer slot {slot} ({}) changed size", p.name);
                for i in 0..p.len() {
                    let g = p.grad[i];
                    m[i] = b1 * m[i] + (T::one() - b1) * g;
                    v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                    p.value[i] -= lr * m[i] / (v[i].sqrt() + eps);
                }
                slot += 1;
            });
        }
    }
}
