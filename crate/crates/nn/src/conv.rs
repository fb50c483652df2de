use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Module, Param, Scalar, Tensor};

/// Stride-1 square convolution with "same" zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// Fan-in scaled Gaussian initialization, `std = sqrt(2 / fan_in)`.
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        let fan_in = in_ch * kernel * kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let weight: Vec<T> = (0..out_ch * fan_in)
            .map(|_| T::lit(normal.sample(rng)))
            .collect();
        Self {
            weight: Param::new("weight", vec![out_ch, in_ch, kernel, kernel], weight),
            bias: Param::new("bias", vec![out_ch], vec![T::zero(); out_ch]),
            in_ch,
            out_ch,
            kernel,
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        assert_eq!(x.c(), self.in_ch, "conv input channels");
        let [n, _, h, w] = x.shape();
        let hw = h * w;
        let kc = self.in_ch * self.kernel * self.kernel;
        let mut y = Tensor::zeros([n, self.out_ch, h, w]);
        let mut cols = Vec::new();
        for s in 0..n {
            let col: &[T] = if self.kernel == 1 {
                x.sample(s)
            } else {
                im2col(x.sample(s), self.in_ch, h, w, self.kernel, &mut cols);
                &cols
            };
            let out = y.sample_mut(s);
            for (o, plane) in out.chunks_mut(hw).enumerate() {
                plane.fill(self.bias.value[o]);
            }
            T::gemm(
                self.out_ch,
                kc,
                hw,
                T::one(),
                &self.weight.value,
                kc as isize,
                1,
                col,
                hw as isize,
                1,
                T::one(),
                out,
                hw as isize,
                1,
            );
        }
        self.input = if train { Some(x.clone()) } else { None };
        y
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Tensor<T> {
        let x = self
            .input
            .take()
            .expect("conv backward without a training forward");
        let [n, _, h, w] = x.shape();
        assert_eq!(gy.shape(), [n, self.out_ch, h, w], "conv grad shape");
        let hw = h * w;
        let kc = self.in_ch * self.kernel * self.kernel;
        let mut gx = Tensor::zeros(x.shape());
        let mut cols = Vec::new();
        let mut gcols = vec![T::zero(); kc * hw];
        for s in 0..n {
            let g = gy.sample(s);
            for (o, plane) in g.chunks(hw).enumerate() {
                self.bias.grad[o] += plane.iter().copied().sum();
            }
            let col: &[T] = if self.kernel == 1 {
                x.sample(s)
            } else {
                im2col(x.sample(s), self.in_ch, h, w, self.kernel, &mut cols);
                &cols
            };
            // dW += gy * cols^T
            T::gemm(
                self.out_ch,
                hw,
                kc,
                T::one(),
                g,
                hw as isize,
                1,
                col,
                1,
                hw as isize,
                T::one(),
                &mut self.weight.grad,
                kc as isize,
                1,
            );
            // dcols = W^T * gy
            let target: &mut [T] = if self.kernel == 1 {
                gx.sample_mut(s)
            } else {
                &mut gcols
            };
            T::gemm(
                kc,
                self.out_ch,
                hw,
                T::one(),
                &self.weight.value,
                1,
                kc as isize,
                g,
                hw as isize,
                1,
                T::zero(),
                target,
                hw as isize,
                1,
            );
            if self.kernel != 1 {
                col2im(&gcols, self.in_ch, h, w, self.kernel, gx.sample_mut(s));
            }
        }
        gx
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

fn im2col<T: Scalar>(x: &[T], ch: usize, h: usize, w: usize, k: usize, cols: &mut Vec<T>) {
    let pad = k / 2;
    let hw = h * w;
    cols.clear();
    cols.resize(ch * k * k * hw, T::zero());
    for c in 0..ch {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw;
                let dst = &mut cols[row..row + hw];
                // valid x range: 0 <= xo + kx - pad < w
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for yo in 0..h {
                    let ys = yo + ky;
                    if ys < pad || ys - pad >= h {
                        continue;
                    }
                    let src_row = (ys - pad) * w;
                    let xs_lo = x_lo + kx - pad;
                    dst[yo * w + x_lo..yo * w + x_hi]
                        .copy_from_slice(&plane[src_row + xs_lo..src_row + xs_lo + (x_hi - x_lo)]);
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], ch: usize, h: usize, w: usize, k: usize, gx: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for c in 0..ch {
        let plane = &mut gx[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw;
                let src = &cols[row..row + hw];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for yo in 0..h {
                    let ys = yo + ky;
                    if ys < pad || ys - pad >= h {
                        continue;
                    }
                    let dst_row = (ys - pad) * w + x_lo + kx - pad;
                    let s = &src[yo * w + x_lo..yo * w + x_hi];
                    for (d, &v) in plane[dst_row..dst_row + s.len()].iter_mut().zip(s) {
                        *d += v;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let [n, ci, h, w] = x.shape();
        let k = conv.kernel as isize;
        let pad = k / 2;
        let mut y = Tensor::zeros([n, conv.out_ch, h, w]);
        for s in 0..n {
            for o in 0..conv.out_ch {
                for yy in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = conv.bias.value[o];
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = yy + ky - pad;
                                    let sx = xx + kx - pad;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let wi = ((o * ci + c) * k as usize + ky as usize)
                                        * k as usize
                                        + kx as usize;
                                    acc += conv.weight.value[wi]
                                        * x.at(s, c, sy as usize, sx as usize);
                                }
                            }
                        }
                        y.set(s, o, yy as usize, xx as usize, acc);
                    }
                }
            }
        }
        y
    }

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [1, 3, 5] {
            let mut conv = Conv2d::<f64>::new(3, 4, k, &mut rng);
            conv.bias.value.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
            let x = random_tensor([2, 3, 5, 7], &mut rng);
            let fast = conv.forward(&x, false);
            let slow = naive_conv(&conv, &x);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "k={k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, &mut rng);
        let x = random_tensor([2, 2, 4, 5], &mut rng);
        let r = random_tensor([2, 3, 4, 5], &mut rng);
        let loss = |conv: &mut Conv2d<f64>, x: &Tensor<f64>| -> f64 {
            conv.forward(x, false)
                .data()
                .iter()
                .zip(r.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        conv.forward(&x, true);
        let gx = conv.backward(&r);
        let h = 1e-6;
        for i in [0, 7, 20, 53] {
            let orig = conv.weight.value[i];
            conv.weight.value[i] = orig + h;
            let lp = loss(&mut conv, &x);
            conv.weight.value[i] = orig - h;
            let lm = loss(&mut conv, &x);
            conv.weight.value[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            assert!((num - conv.weight.grad[i]).abs() < 1e-6);
        }
        for i in [0, 13, 39, 79] {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let num = (loss(&mut conv, &xp) - loss(&mut conv, &xm)) / (2.0 * h);
            assert!((num - gx.data()[i]).abs() < 1e-6);
        }
        let bias_num: f64 = r.plane(0, 1).iter().chain(r.plane(1, 1)).sum();
        assert!((conv.bias.grad[1] - bias_num).abs() < 1e-12);
    }
}
