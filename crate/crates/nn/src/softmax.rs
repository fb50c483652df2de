use crate::{NnError, Scalar, Tensor};

/// Softmax across the channel axis at every pixel, stabilized by subtracting
/// the per-pixel maximum logit.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    if !logits.all_finite() {
        return Err(NnError::NonFinite("softmax logits".into()));
    }
    let [n, c, h, w] = logits.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(logits.shape());
    let mut buf = vec![T::zero(); c];
    for s in 0..n {
        let src = logits.sample(s);
        let dst = out.sample_mut(s);
        for p in 0..hw {
            let mut max = src[p];
            for k in 1..c {
                max = max.max(src[k * hw + p]);
            }
            let mut total = T::zero();
            for k in 0..c {
                buf[k] = (src[k * hw + p] - max).exp();
                total += buf[k];
            }
            for k in 0..c {
                dst[k * hw + p] = buf[k] / total;
            }
        }
    }
    Ok(out)
}

/// Gradient with respect to logits given probabilities and the gradient with
/// respect to those probabilities.
pub fn softmax_channels_backward<T: Scalar>(probs: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    assert_eq!(probs.shape(), grad.shape());
    let [n, c, h, w] = probs.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(probs.shape());
    for s in 0..n {
        let p = probs.sample(s);
        let g = grad.sample(s);
        let dst = out.sample_mut(s);
        for px in 0..hw {
            let mut dot = T::zero();
            for k in 0..c {
                dot += p[k * hw + px] * g[k * hw + px];
            }
            for k in 0..c {
                dst[k * hw + px] = p[k * hw + px] * (g[k * hw + px] - dot);
            }
        }
    }
    out
}

/// Mean per-pixel cross entropy of `softmax(logits)` against integer labels
/// (laid out `N x H x W`), with its gradient with respect to the logits.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> Result<(f64, Tensor<T>), NnError> {
    let [n, c, h, w] = logits.shape();
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(NnError::Shape(format!(
            "{} labels for a {n}x{h}x{w} logit map",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(NnError::Shape(format!("label {bad} outside {c} classes")));
    }
    let probs = softmax_channels(logits)?;
    let count = (n * hw) as f64;
    let inv = T::lit(1.0 / count);
    let mut loss = 0.0f64;
    let mut grad = probs.clone();
    for s in 0..n {
        let src = logits.sample(s);
        let g = grad.sample_mut(s);
        for px in 0..hw {
            let label = labels[s * hw + px] as usize;
            let mut max = src[px].as_f64();
            for k in 1..c {
                max = max.max(src[k * hw + px].as_f64());
            }
            let lse = (0..c)
                .map(|k| (src[k * hw + px].as_f64() - max).exp())
                .sum::<f64>()
                .ln()
                + max;
            loss += lse - src[label * hw + px].as_f64();
            g[label * hw + px] -= T::one();
            for k in 0..c {
                g[k * hw + px] *= inv;
            }
        }
    }
    Ok((loss / count, grad))
}
