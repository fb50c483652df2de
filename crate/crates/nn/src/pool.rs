use crate::{Scalar, Tensor};

/// Argmax positions recorded by a 2x2 max-pooling stage.
///
/// `argmax[i]` is the flat in-plane offset (in the pooled stage's input) of
/// the element selected for output position `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndices {
    pub input_shape: [usize; 4],
    pub argmax: Vec<u32>,
}

/// 2x2 stride-2 max pooling that records argmax positions for unpooling.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2d {
    cache: Option<PoolIndices>,
}

impl MaxPool2d {
    pub fn new() -> Self {
        Self { cache: None }
    }

    /// Ties resolve to the first maximum in row-major window order.
    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>, train: bool) -> (Tensor<T>, PoolIndices) {
        let [n, c, h, w] = x.shape();
        assert!(h % 2 == 0 && w % 2 == 0, "max pool needs even spatial size, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for s in 0..n {
            for ch in 0..c {
                let src = x.plane(s, ch);
                let dst = y.plane_mut(s, ch);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let base = 2 * oy * w + 2 * ox;
                        let mut best = base;
                        for off in [base + 1, base + w, base + w + 1] {
                            if src[off] > src[best] {
                                best = off;
                            }
                        }
                        dst[oy * ow + ox] = src[best];
                        argmax.push(best as u32);
                    }
                }
            }
        }
        let idx = PoolIndices {
            input_shape: x.shape(),
            argmax,
        };
        self.cache = if train { Some(idx.clone()) } else { None };
        (y, idx)
    }

    pub fn backward<T: Scalar>(&mut self, gy: &Tensor<T>) -> Tensor<T> {
        let idx = self.cache.take().expect("max pool backward without forward");
        scatter(gy, &idx)
    }
}

fn scatter<T: Scalar>(values: &Tensor<T>, idx: &PoolIndices) -> Tensor<T> {
    let [n, c, h, w] = idx.input_shape;
    assert_eq!(values.shape(), [n, c, h / 2, w / 2], "unpool operand shape");
    let mut out = Tensor::zeros(idx.input_shape);
    let per_plane = (h / 2) * (w / 2);
    for s in 0..n {
        for ch in 0..c {
            let src = values.plane(s, ch);
            let arg = &idx.argmax[(s * c + ch) * per_plane..(s * c + ch + 1) * per_plane];
            let dst = out.plane_mut(s, ch);
            for (&v, &a) in src.iter().zip(arg) {
                dst[a as usize] += v;
            }
        }
    }
    out
}

fn gather<T: Scalar>(full: &Tensor<T>, idx: &PoolIndices) -> Tensor<T> {
    let [n, c, h, w] = idx.input_shape;
    assert_eq!(full.shape(), idx.input_shape, "unpool grad shape");
    let mut out = Tensor::zeros([n, c, h / 2, w / 2]);
    let per_plane = (h / 2) * (w / 2);
    for s in 0..n {
        for ch in 0..c {
            let src = full.plane(s, ch);
            let arg = &idx.argmax[(s * c + ch) * per_plane..(s * c + ch + 1) * per_plane];
            for (d, &a) in out.plane_mut(s, ch).iter_mut().zip(arg) {
                *d = src[a as usize];
            }
        }
    }
    out
}

/// Index-based max unpooling: each value returns to the position its pooling
/// stage selected; every other position is zero.
#[derive(Debug, Clone, Default)]
pub struct MaxUnpool2d {
    cache: Option<PoolIndices>,
}

impl MaxUnpool2d {
    pub fn new() -> Self {
        Self { cache: None }
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>, idx: &PoolIndices, train: bool) -> Tensor<T> {
        let y = scatter(x, idx);
        self.cache = if train { Some(idx.clone()) } else { None };
        y
    }

    pub fn backward<T: Scalar>(&mut self, gy: &Tensor<T>) -> Tensor<T> {
        let idx = self.cache.take().expect("unpool backward without forward");
        gather(gy, &idx)
    }
}

fn bin_range(i: usize, bins: usize, len: usize) -> (usize, usize) {
    let start = i * len / bins;
    let end = ((i + 1) * len).div_ceil(bins);
    (start, end.max(start + 1).min(len))
}

/// Average pooling onto a fixed `bins x bins` grid (overlapping bins when the
/// input is not divisible).
pub fn adaptive_avg_pool<T: Scalar>(x: &Tensor<T>, bins: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let mut y = Tensor::zeros([n, c, bins, bins]);
    for s in 0..n {
        for ch in 0..c {
            let src = x.plane(s, ch);
            for by in 0..bins {
                let (y0, y1) = bin_range(by, bins, h);
                for bx in 0..bins {
                    let (x0, x1) = bin_range(bx, bins, w);
                    let mut acc = T::zero();
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            acc += src[yy * w + xx];
                        }
                    }
                    let area = T::lit(((y1 - y0) * (x1 - x0)) as f64);
                    y.set(s, ch, by, bx, acc / area);
                }
            }
        }
    }
    y
}

pub fn adaptive_avg_pool_backward<T: Scalar>(gy: &Tensor<T>, input_shape: [usize; 4]) -> Tensor<T> {
    let [n, c, h, w] = input_shape;
    let bins = gy.h();
    let mut gx = Tensor::zeros(input_shape);
    for s in 0..n {
        for ch in 0..c {
            for by in 0..bins {
                let (y0, y1) = bin_range(by, bins, h);
                for bx in 0..bins {
                    let (x0, x1) = bin_range(bx, bins, w);
                    let area = T::lit(((y1 - y0) * (x1 - x0)) as f64);
                    let g = gy.at(s, ch, by, bx) / area;
                    let dst = gx.plane_mut(s, ch);
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            dst[yy * w + xx] += g;
                        }
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_then_unpool_keeps_only_maxima() {
        let x = Tensor::from_vec(
            [1, 1, 2, 4],
            vec![1.0f32, 5.0, 2.0, 2.0, 3.0, 4.0, 7.0, 0.0],
        )
        .unwrap();
        let mut pool = MaxPool2d::new();
        let (y, idx) = pool.forward(&x, false);
        assert_eq!(y.data(), &[5.0, 7.0]);
        assert_eq!(idx.argmax, vec![1, 6]);
        let mut unpool = MaxUnpool2d::new();
        let up = unpool.forward(&y, &idx, false);
        assert_eq!(up.data(), &[0.0, 5.0, 0.0, 0.0, 0.0, 0.0, 7.0, 0.0]);
    }

    #[test]
    fn ties_pick_first_position() {
        let x = Tensor::full([1, 1, 2, 2], 1.0f64);
        let (_, idx) = MaxPool2d::new().forward(&x, false);
        assert_eq!(idx.argmax, vec![0]);
    }

    #[test]
    fn unpool_backward_is_adjoint() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![0.3f64, 0.1, 0.9, 0.2]).unwrap();
        let (_, idx) = MaxPool2d::new().forward(&x, false);
        let v = Tensor::from_vec([1, 1, 1, 1], vec![2.0]).unwrap();
        let g = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut un = MaxUnpool2d::new();
        let up = un.forward(&v, &idx, true);
        let lhs: f64 = up.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let back = un.backward(&g);
        assert_eq!(lhs, back.data()[0] * 2.0);
    }

    #[test]
    fn adaptive_pool_backward_is_adjoint() {
        let x = Tensor::from_vec([1, 1, 3, 5], (0..15).map(|v| v as f64 * 0.1).collect()).unwrap();
        let g = Tensor::from_vec([1, 1, 2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let y = adaptive_avg_pool(&x, 2);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let gx = adaptive_avg_pool_backward(&g, x.shape());
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        assert!((adaptive_avg_pool(&x, 1).data()[0] - 0.7).abs() < 1e-12);
    }
}
