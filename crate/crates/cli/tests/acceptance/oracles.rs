//! Brute-force reference implementations of the evaluation metrics.
//!
//! Written without reference to the library code paths: direct 2D sums
//! instead of separable passes, widest-path relaxation instead of per-threshold
//! flood fills, and union-find instead of BFS component labelling.

pub fn sad(p: &[f32], g: &[f32], h: usize, w: usize) -> f64 {
    let mut acc = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            acc += (p[y * w + x] as f64 - g[y * w + x] as f64).abs();
        }
    }
    acc / (h * w) as f64
}

pub fn mse(p: &[f32], g: &[f32], h: usize, w: usize) -> f64 {
    let mut acc = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let d = p[y * w + x] as f64 - g[y * w + x] as f64;
            acc += d * d;
        }
    }
    acc / (h * w) as f64
}

fn mirror(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Gradient magnitude from explicit 2D derivative-of-Gaussian kernels.
fn grad_mag(a: &[f32], h: usize, w: usize, sigma: f64, truncate: f64) -> Vec<f64> {
    let r = (truncate * sigma).ceil() as i64;
    let gauss = |t: i64| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp();
    let norm: f64 = (-r..=r).map(gauss).sum();
    let smooth = |t: i64| gauss(t) / norm;
    // derivative taps -t*G(t), rescaled so that correlating f(x) = x gives 1
    let ramp: f64 = (-r..=r).map(|t| (t as f64) * (-(t as f64) * smooth(t))).sum();
    let deriv = |t: i64| -(t as f64) * smooth(t) / ramp;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut gx, mut gy) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let v = a[mirror(y as i64 + dy, h) * w + mirror(x as i64 + dx, w)] as f64;
                    gx += smooth(dy) * deriv(dx) * v;
                    gy += deriv(dy) * smooth(dx) * v;
                }
            }
            out[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

pub fn gradient_error(p: &[f32], g: &[f32], h: usize, w: usize, sigma: f64, truncate: f64) -> f64 {
    let a = grad_mag(p, h, w, sigma, truncate);
    let b = grad_mag(g, h, w, sigma, truncate);
    let mut acc = 0.0;
    for i in 0..h * w {
        acc += (a[i] - b[i]) * (a[i] - b[i]);
    }
    acc / (h * w) as f64
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Largest 4-connected component of `mask`; ties go to the component whose
/// first pixel in raster order comes first.
fn largest_component(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut parent: Vec<usize> = (0..h * w).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask[i] {
                continue;
            }
            for j in [(x + 1 < w).then(|| i + 1), (y + 1 < h).then(|| i + w)].into_iter().flatten() {
                if mask[j] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut size = vec![0usize; h * w];
    let mut first = vec![usize::MAX; h * w];
    for i in 0..h * w {
        if mask[i] {
            let r = find(&mut parent, i);
            size[r] += 1;
            first[r] = first[r].min(i);
        }
    }
    let mut best: Option<usize> = None;
    for r in 0..h * w {
        if size[r] == 0 {
            continue;
        }
        best = match best {
            Some(b) if size[b] > size[r] || (size[b] == size[r] && first[b] < first[r]) => Some(b),
            _ => Some(r),
        };
    }
    (0..h * w)
        .map(|i| mask[i] && best.is_some_and(|b| find(&mut parent, i) == b))
        .collect()
}

/// Bottleneck (widest-path) value from the source set to every pixel.
fn widest_path(a: &[f64], source: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut best: Vec<f64> = (0..h * w).map(|i| if source[i] { a[i] } else { f64::NEG_INFINITY }).collect();
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let mut nbrs = Vec::with_capacity(4);
                if y > 0 {
                    nbrs.push(i - w);
                }
                if y + 1 < h {
                    nbrs.push(i + w);
                }
                if x > 0 {
                    nbrs.push(i - 1);
                }
                if x + 1 < w {
                    nbrs.push(i + 1);
                }
                for j in nbrs {
                    let cand = best[j].min(a[i]);
                    if cand > best[i] {
                        best[i] = cand;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return best;
        }
    }
}

fn phi(a: &[f32], source: &[bool], h: usize, w: usize, step: f64, cutoff: f64) -> Vec<f64> {
    let vals: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let bottleneck = widest_path(&vals, source, h, w);
    let levels: Vec<f64> = (0..(1.0 / step).round() as usize).map(|k| k as f64 * step).collect();
    (0..h * w)
        .map(|i| {
            // highest swept threshold at which pixel i is still connected
            let l = levels.iter().copied().filter(|&t| bottleneck[i] >= t).fold(0.0, f64::max);
            let d = vals[i] - l;
            if d >= cutoff {
                1.0 - d
            } else {
                1.0
            }
        })
        .collect()
}

pub fn connectivity_error(p: &[f32], g: &[f32], h: usize, w: usize, step: f64, cutoff: f64, pure: f32) -> f64 {
    let opaque: Vec<bool> = g.iter().map(|&v| v >= 1.0 - pure).collect();
    let mut source = largest_component(&opaque, h, w);
    if !source.iter().any(|&s| s) {
        let half: Vec<bool> = g.iter().map(|&v| v >= 0.5).collect();
        source = largest_component(&half, h, w);
    }
    let a = phi(p, &source, h, w, step, cutoff);
    let b = phi(g, &source, h, w, step, cutoff);
    let mut acc = 0.0;
    for i in 0..h * w {
        acc += (a[i] - b[i]).abs();
    }
    acc / (h * w) as f64
}
