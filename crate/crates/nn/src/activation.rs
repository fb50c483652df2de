use crate::{Scalar, Tensor};

#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    output: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self { output: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.output = if train { Some(y.clone()) } else { None };
        y
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Tensor<T> {
        let y = self.output.take().expect("relu backward without forward");
        let mut gx = gy.clone();
        for (g, &v) in gx.data_mut().iter_mut().zip(y.data()) {
            if v <= T::zero() {
                *g = T::zero();
            }
        }
        gx
    }
}

/// Logistic squashing into `(0, 1)`.
#[derive(Debug, Clone, Default)]
pub struct Sigmoid<T> {
    output: Option<Tensor<T>>,
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Sigmoid<T> {
    pub fn new() -> Self {
        Self { output: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let y = x.map(sigmoid);
        self.output = if train { Some(y.clone()) } else { None };
        y
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Tensor<T> {
        let y = self.output.take().expect("sigmoid backward without forward");
        let mut gx = gy.clone();
        for (g, &s) in gx.data_mut().iter_mut().zip(y.data()) {
            *g *= s * (T::one() - s);
        }
        gx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1000.0f32), 1.0);
        assert_eq!(sigmoid(-1000.0f32), 0.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn relu_gates_gradient() {
        let x = Tensor::from_vec([1, 1, 1, 3], vec![-1.0f64, 0.0, 2.0]).unwrap();
        let mut r = Relu::new();
        r.forward(&x, true);
        let g = r.backward(&Tensor::full([1, 1, 1, 3], 1.0));
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }
}
