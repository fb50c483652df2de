use crate::{Scalar, Tensor};

/// Sampling taps along one axis for half-pixel-centred bilinear resampling.
#[derive(Debug, Clone)]
struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisTaps {
    fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for o in 0..dst {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            lo.push(i0);
            hi.push((i0 + 1).min(src - 1));
            frac.push(pos - i0 as f64);
        }
        Self { lo, hi, frac }
    }
}

/// Bilinearly resample one `sh x sw` plane into a `dh x dw` plane.
///
/// Same-size resampling reproduces the input bit for bit.
pub fn bilinear_plane<T: Scalar>(src: &[T], sh: usize, sw: usize, dst: &mut [T], dh: usize, dw: usize) {
    assert_eq!(src.len(), sh * sw);
    assert_eq!(dst.len(), dh * dw);
    let ty = AxisTaps::new(sh, dh);
    let tx = AxisTaps::new(sw, dw);
    let fx: Vec<T> = tx.frac.iter().map(|&f| T::lit(f)).collect();
    for oy in 0..dh {
        let r0 = &src[ty.lo[oy] * sw..(ty.lo[oy] + 1) * sw];
        let r1 = &src[ty.hi[oy] * sw..(ty.hi[oy] + 1) * sw];
        let wy = T::lit(ty.frac[oy]);
        let row = &mut dst[oy * dw..(oy + 1) * dw];
        for (ox, d) in row.iter_mut().enumerate() {
            let (a, b) = (tx.lo[ox], tx.hi[ox]);
            let wx = fx[ox];
            let top = r0[a] * (T::one() - wx) + r0[b] * wx;
            let bot = r1[a] * (T::one() - wx) + r1[b] * wx;
            *d = top * (T::one() - wy) + bot * wy;
        }
    }
}

/// Adjoint of [`bilinear_plane`]: accumulate `grad` (on the `dh x dw` grid) back
/// onto the `sh x sw` source grid.
pub fn bilinear_plane_adjoint<T: Scalar>(
    grad: &[T],
    dh: usize,
    dw: usize,
    out: &mut [T],
    sh: usize,
    sw: usize,
) {
    assert_eq!(grad.len(), dh * dw);
    assert_eq!(out.len(), sh * sw);
    let ty = AxisTaps::new(sh, dh);
    let tx = AxisTaps::new(sw, dw);
    for oy in 0..dh {
        let wy = T::lit(ty.frac[oy]);
        let (y0, y1) = (ty.lo[oy], ty.hi[oy]);
        for ox in 0..dw {
            let g = grad[oy * dw + ox];
            let wx = T::lit(tx.frac[ox]);
            let (x0, x1) = (tx.lo[ox], tx.hi[ox]);
            let gt = g * (T::one() - wy);
            let gb = g * wy;
            out[y0 * sw + x0] += gt * (T::one() - wx);
            out[y0 * sw + x1] += gt * wx;
            out[y1 * sw + x0] += gb * (T::one() - wx);
            out[y1 * sw + x1] += gb * wx;
        }
    }
}

pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    if x.h() == h && x.w() == w {
        return x.clone();
    }
    let mut y = Tensor::zeros([x.n(), x.c(), h, w]);
    for s in 0..x.n() {
        for c in 0..x.c() {
            bilinear_plane(x.plane(s, c), x.h(), x.w(), y.plane_mut(s, c), h, w);
        }
    }
    y
}

pub fn resize_bilinear_backward<T: Scalar>(gy: &Tensor<T>, input_shape: [usize; 4]) -> Tensor<T> {
    let [n, c, h, w] = input_shape;
    if gy.h() == h && gy.w() == w {
        return gy.clone();
    }
    let mut gx = Tensor::zeros(input_shape);
    for s in 0..n {
        for ch in 0..c {
            bilinear_plane_adjoint(gy.plane(s, ch), gy.h(), gy.w(), gx.plane_mut(s, ch), h, w);
        }
    }
    gx
}

/// Mirror an out-of-range coordinate back into `[0, len)` without repeating
/// the edge sample; repeats periodically for arbitrarily large offsets.
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Reflect-pad on the bottom and right edges up to `h x w`.
pub fn pad_reflect<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    assert!(h >= x.h() && w >= x.w());
    if h == x.h() && w == x.w() {
        return x.clone();
    }
    let (sh, sw) = (x.h(), x.w());
    let mut y = Tensor::zeros([x.n(), x.c(), h, w]);
    for s in 0..x.n() {
        for c in 0..x.c() {
            let src = x.plane(s, c);
            let dst = y.plane_mut(s, c);
            for yy in 0..h {
                let sy = reflect_index(yy as isize, sh);
                for xx in 0..w {
                    dst[yy * w + xx] = src[sy * sw + reflect_index(xx as isize, sw)];
                }
            }
        }
    }
    y
}

pub fn pad_reflect_backward<T: Scalar>(gy: &Tensor<T>, input_shape: [usize; 4]) -> Tensor<T> {
    let [n, c, sh, sw] = input_shape;
    let (h, w) = (gy.h(), gy.w());
    if h == sh && w == sw {
        return gy.clone();
    }
    let mut gx = Tensor::zeros(input_shape);
    for s in 0..n {
        for ch in 0..c {
            let src = gy.plane(s, ch);
            let dst = gx.plane_mut(s, ch);
            for yy in 0..h {
                let sy = reflect_index(yy as isize, sh);
                for xx in 0..w {
                    dst[sy * sw + reflect_index(xx as isize, sw)] += src[yy * w + xx];
                }
            }
        }
    }
    gx
}
