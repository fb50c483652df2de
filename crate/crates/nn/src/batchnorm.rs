use crate::{Module, Param, Scalar, Tensor};

const MOMENTUM: f64 = 0.1;
const EPS: f64 = 1e-5;

/// Per-channel batch normalization over `(N, H, W)`.
///
/// Training mode normalizes with batch statistics and updates the running
/// estimates; inference mode uses the running estimates only.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new("gamma", vec![channels], vec![T::one(); channels]),
            beta: Param::new("beta", vec![channels], vec![T::zero(); channels]),
            running_mean: Param::buffer("running_mean", vec![channels], vec![T::zero(); channels]),
            running_var: Param::buffer("running_var", vec![channels], vec![T::one(); channels]),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.gamma.len(), "batchnorm channels");
        let count = n * h * w;
        let eps = T::lit(EPS);
        let mut y = Tensor::zeros(x.shape());
        if !train {
            for ch in 0..c {
                let inv = T::one() / (self.running_var.value[ch] + eps).sqrt();
                let scale = self.gamma.value[ch] * inv;
                let shift = self.beta.value[ch] - self.running_mean.value[ch] * scale;
                for s in 0..n {
                    for (o, &v) in y.plane_mut(s, ch).iter_mut().zip(x.plane(s, ch)) {
                        *o = v * scale + shift;
                    }
                }
            }
            self.cache = None;
            return y;
        }
        let mut xhat = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(c);
        let momentum = T::lit(MOMENTUM);
        for ch in 0..c {
            // f64 accumulation keeps f32 statistics stable on large planes
            let mut sum = 0.0f64;
            for s in 0..n {
                sum += x.plane(s, ch).iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = sum / count as f64;
            let mut sq = 0.0f64;
            for s in 0..n {
                sq += x
                    .plane(s, ch)
                    .iter()
                    .map(|v| (v.as_f64() - mean).powi(2))
                    .sum::<f64>();
            }
            let var = sq / count as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            let (mean_t, inv_t) = (T::lit(mean), T::lit(inv));
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for s in 0..n {
                let src = x.plane(s, ch);
                let xh = xhat.plane_mut(s, ch);
                for (d, &v) in xh.iter_mut().zip(src) {
                    *d = (v - mean_t) * inv_t;
                }
                for (o, &v) in y.plane_mut(s, ch).iter_mut().zip(xhat.plane(s, ch)) {
                    *o = v * g + b;
                }
            }
            let unbiased = if count > 1 {
                var * count as f64 / (count - 1) as f64
            } else {
                var
            };
            let rm = &mut self.running_mean.value[ch];
            *rm = (T::one() - momentum) * *rm + momentum * mean_t;
            let rv = &mut self.running_var.value[ch];
            *rv = (T::one() - momentum) * *rv + momentum * T::lit(unbiased);
            inv_std.push(inv_t);
        }
        self.cache = Some(BnCache { xhat, inv_std });
        y
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Tensor<T> {
        let BnCache { xhat, inv_std } = self
            .cache
            .take()
            .expect("batchnorm backward without a training forward");
        let [n, c, h, w] = xhat.shape();
        assert_eq!(gy.shape(), xhat.shape(), "batchnorm grad shape");
        let m = T::lit((n * h * w) as f64);
        let mut gx = Tensor::zeros(xhat.shape());
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for s in 0..n {
                for (&g, &xh) in gy.plane(s, ch).iter().zip(xhat.plane(s, ch)) {
                    sum_dy += g;
                    sum_dy_xhat += g * xh;
                }
            }
            self.beta.grad[ch] += sum_dy;
            self.gamma.grad[ch] += sum_dy_xhat;
            let k = self.gamma.value[ch] * inv_std[ch] / m;
            for s in 0..n {
                let dst = gx.plane_mut(s, ch);
                for ((d, &g), &xh) in dst.iter_mut().zip(gy.plane(s, ch)).zip(xhat.plane(s, ch)) {
                    *d = k * (m * g - sum_dy - xh * sum_dy_xhat);
                }
            }
        }
        gx
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_output_is_standardized() {
        let x = Tensor::from_vec([2, 1, 1, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let mut bn = BatchNorm2d::new(1);
        let y = bn.forward(&x, true);
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
        assert!((bn.running_mean.value[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let data: Vec<f64> = (0..24).map(|i| ((i * 7919) % 23) as f64 / 7.0 - 1.5).collect();
        let x = Tensor::from_vec([2, 3, 2, 2], data).unwrap();
        let r: Vec<f64> = (0..24).map(|i| ((i * 31) % 11) as f64 / 5.0 - 1.0).collect();
        let mut bn = BatchNorm2d::new(3);
        bn.gamma.value = vec![0.5, 1.5, -1.0];
        bn.beta.value = vec![0.1, 0.0, 0.3];
        let loss = |bn: &mut BatchNorm2d<f64>, x: &Tensor<f64>| -> f64 {
            bn.forward(x, true).data().iter().zip(&r).map(|(a, b)| a * b * a).sum()
        };
        let y = bn.forward(&x, true);
        let gy: Vec<f64> = y.data().iter().zip(&r).map(|(a, b)| 2.0 * a * b).collect();
        let gx = bn.backward(&Tensor::from_vec(x.shape(), gy).unwrap());
        let h = 1e-6;
        for i in 0..24 {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let num = (loss(&mut bn, &xp) - loss(&mut bn, &xm)) / (2.0 * h);
            assert!((num - gx.data()[i]).abs() < 1e-5, "coord {i}: {num} vs {}", gx.data()[i]);
        }
    }
}
