use crate::{NnError, Scalar};

/// Dense `N x C x H x W` tensor in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self, NnError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(NnError::Shape(format!(
                "tensor of shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous `H x W` plane for sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    /// All channels of sample `n` as one `C x H x W` slice.
    pub fn sample(&self, n: usize) -> &[T] {
        let chw = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * chw..(n + 1) * chw]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let chw = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[n * chw..(n + 1) * chw]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self, NnError> {
        let first = parts
            .first()
            .ok_or_else(|| NnError::Shape("concat of zero tensors".into()))?;
        let [n, _, h, w] = first.shape;
        for p in parts {
            if p.n() != n || p.h() != h || p.w() != w {
                return Err(NnError::Shape(format!(
                    "concat mismatch: {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
        }
        let c: usize = parts.iter().map(|p| p.c()).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for s in 0..n {
            for p in parts {
                data.extend_from_slice(p.sample(s));
            }
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Inverse of [`Tensor::concat_channels`]: split into groups of the given channel counts.
    pub fn split_channels(&self, counts: &[usize]) -> Result<Vec<Self>, NnError> {
        let total: usize = counts.iter().sum();
        if total != self.c() {
            return Err(NnError::Shape(format!(
                "split counts {counts:?} do not sum to {} channels",
                self.c()
            )));
        }
        let hw = self.h() * self.w();
        let mut out: Vec<Self> = counts
            .iter()
            .map(|&c| Self::zeros([self.n(), c, self.h(), self.w()]))
            .collect();
        for s in 0..self.n() {
            let src = self.sample(s);
            let mut offset = 0;
            for (part, &c) in out.iter_mut().zip(counts) {
                part.sample_mut(s)
                    .copy_from_slice(&src[offset * hw..(offset + c) * hw]);
                offset += c;
            }
        }
        Ok(out)
    }

    /// Copy out a spatial window `[top, top+h) x [left, left+w)` of every plane.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self, NnError> {
        if top + h > self.h() || left + w > self.w() || h == 0 || w == 0 {
            return Err(NnError::Shape(format!(
                "crop window {h}x{w} at ({top},{left}) outside {}x{}",
                self.h(),
                self.w()
            )));
        }
        let mut out = Self::zeros([self.n(), self.c(), h, w]);
        for n in 0..self.n() {
            for c in 0..self.c() {
                let src = self.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in 0..h {
                    let s = (top + y) * self.w() + left;
                    dst[y * w..(y + 1) * w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`Tensor::crop`]: place `self` into a zero tensor of size `full_h x full_w`.
    pub fn uncrop(&self, top: usize, left: usize, full_h: usize, full_w: usize) -> Self {
        let mut out = Self::zeros([self.n(), self.c(), full_h, full_w]);
        for n in 0..self.n() {
            for c in 0..self.c() {
                let src = self.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in 0..self.h() {
                    let d = (top + y) * full_w + left;
                    dst[d..d + self.w()].copy_from_slice(&src[y * self.w()..(y + 1) * self.w()]);
                }
            }
        }
        out
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }
}
