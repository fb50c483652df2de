//! Criteria that exercise the library directly, without a dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shm::imaging::{AlphaMatte, Image, Raster};
use shm::loss::LossWeights;
use shm::metrics::{connectivity_error, gradient_error, mse, sad, MetricParams};
use shm::model::fusion::{fuse_pixel, fuse_pixel_conditional};
use shm::model::infer::working_size;
use shm::model::{MNet, MNetConfig, MattePredictor, ShmModel, TNet, TNetConfig, TrimapInput};
use shm::synthdata::{gen_foreground, ForegroundStyle};
use shm::train::{e2e_gradients, E2eBatch, E2eOptions, Window};
use shm::trimap::{make_trimap, TrimapClass, PURE_TOLERANCE};
use shm_nn::gradcheck::{central_difference, relative_error};
use shm_nn::{Module, Tensor};

use crate::oracles;
use crate::{ensure, Check};

pub fn fusion_algebra() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut compared) = (0.0f64, 0);
    for _ in 0..10_000 {
        // uniform point on the probability simplex
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        let (lo, hi) = (a.min(b), a.max(b));
        let (fs, bs, us) = (lo, hi - lo, 1.0 - hi);
        let ar: f64 = rng.random();
        let p = fuse_pixel(fs, us, ar);
        ensure((0.0..=1.0).contains(&p), || format!("alpha_p {p} out of range at {fs} {bs} {us} {ar}"))?;
        if fs + bs >= 1e-6 {
            let err = (p - fuse_pixel_conditional(fs, bs, us, ar)).abs();
            ensure(err <= 1e-6, || format!("forms differ by {err} at {fs} {bs} {us} {ar}"))?;
            worst = worst.max(err);
            compared += 1;
        }
        // limit cases: no unknown mass, and all unknown mass
        let total = fs + bs;
        let (f0, b0) = if total > 0.0 { (fs / total, bs / total) } else { (1.0, 0.0) };
        ensure(fuse_pixel(f0, 0.0, ar) == f0, || format!("Us = 0 must return Fs exactly ({f0})"))?;
        ensure(fuse_pixel_conditional(f0, b0, 0.0, ar) == f0 / (f0 + b0), || "Us = 0 conditional form".into())?;
        ensure(fuse_pixel(0.0, 1.0, ar) == ar, || format!("Us = 1 must return alpha_r exactly ({ar})"))?;
    }
    Ok(format!("10000 tuples, {compared} compared, max |diff| {worst:.2e}"))
}

fn random_tensor(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn param_count(net: &mut dyn Module<f64>) -> usize {
    net.flat_params().len()
}

pub fn e2e_gradient_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tcfg = TNetConfig {
        base_channels: 2,
        depth: 2,
        ..TNetConfig::default()
    };
    let mcfg = MNetConfig {
        width_multiplier: 1.0 / 64.0,
        ..MNetConfig::default()
    };
    let mut tnet = TNet::<f64>::new(&tcfg).map_err(|e| e.to_string())?;
    let mut mnet = MNet::<f64>::new(&mcfg).map_err(|e| e.to_string())?;
    let (n, side, inner) = (2, 8, 8);
    let windows: Vec<Window> = (0..n)
        .map(|_| {
            let s = rng.random_range(4..=side);
            Window {
                top: rng.random_range(0..=side - s),
                left: rng.random_range(0..=side - s),
                side: s,
            }
        })
        .collect();
    let batch = E2eBatch {
        image: random_tensor([n, 3, side, side], 0.0, 1.0, &mut rng),
        labels: (0..n * side * side).map(|_| rng.random_range(0..3u8)).collect(),
        windows,
        alpha: random_tensor([n, 1, inner, inner], 0.0, 1.0, &mut rng),
        fg: random_tensor([n, 3, inner, inner], 0.0, 1.0, &mut rng),
        bg: random_tensor([n, 3, inner, inner], 0.0, 1.0, &mut rng),
    };
    let opts = E2eOptions {
        inner_size: inner,
        fusion: true,
        trimap_input: TrimapInput::Probabilities,
        weights: LossWeights::default(),
    };
    e2e_gradients(&mut tnet, &mut mnet, &batch, &opts).map_err(|e| e.to_string())?;
    let (tg, mg) = (tnet.flat_grads(), mnet.flat_grads());
    let nt = param_count(&mut tnet);
    let total = nt + param_count(&mut mnet);

    let mut worst = 0.0f64;
    let (mut in_t, mut in_m) = (0, 0);
    for _ in 0..50 {
        let i = rng.random_range(0..total);
        let analytic = if i < nt { tg[i] } else { mg[i - nt] };
        let base = if i < nt { tnet.flat_params()[i] } else { mnet.flat_params()[i - nt] };
        let mut loss_at = |v: f64| {
            if i < nt {
                tnet.with_param_coord(i, &mut |p: &mut f64| *p = v);
            } else {
                mnet.with_param_coord(i - nt, &mut |p: &mut f64| *p = v);
            }
            e2e_gradients(&mut tnet, &mut mnet, &batch, &opts).expect("finite loss").total
        };
        let numeric = central_difference(&mut loss_at, base, 1e-5);
        loss_at(base);
        let err = relative_error(analytic, numeric, 1e-6);
        ensure(err < 1e-3, || format!("coordinate {i}: analytic {analytic:e}, numeric {numeric:e}, rel {err:e}"))?;
        worst = worst.max(err);
        if i < nt {
            in_t += 1;
        } else {
            in_m += 1;
        }
    }
    Ok(format!("50 coordinates ({in_t} T-Net, {in_m} M-Net), max relative error {worst:.2e}"))
}

/// Random 16x16 matte pair with opaque and clear plateaus most of the time.
fn random_pair(rng: &mut ChaCha8Rng, k: usize) -> (AlphaMatte, AlphaMatte) {
    let s = 16;
    let bumps: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..4))
        .map(|_| {
            (
                rng.random_range(0.0..16.0),
                rng.random_range(0.0..16.0),
                rng.random_range(1.5..5.0),
                rng.random_range(0.5..2.5),
            )
        })
        .collect();
    let gt: Vec<f32> = (0..s * s)
        .map(|i| {
            let (y, x) = ((i / s) as f64, (i % s) as f64);
            let v: f64 = bumps
                .iter()
                .map(|&(cy, cx, r, amp)| amp * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * r * r)).exp())
                .sum();
            // every fifth pair has no opaque pixel, exercising the source fallback
            let cap = if k % 5 == 4 { 0.9 } else { 1.0 };
            (v.clamp(0.0, cap)) as f32
        })
        .collect();
    let noise: f32 = rng.random_range(0.0..0.4);
    let pred: Vec<f32> = gt
        .iter()
        .map(|&g| (g + rng.random_range(-noise..=noise)).clamp(0.0, 1.0))
        .collect();
    (AlphaMatte::new(s, s, pred).unwrap(), AlphaMatte::new(s, s, gt).unwrap())
}

pub fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = MetricParams::default();
    let (mut d_sad, mut d_mse, mut d_grad) = (0.0f64, 0.0f64, 0.0f64);
    let mut nonzero_conn = 0;
    for k in 0..100 {
        let (pred, gt) = random_pair(&mut rng, k);
        let (pd, gd) = (pred.data(), gt.data());
        let e = |r: shm::Result<f64>| r.map_err(|e| e.to_string());
        let a = e(sad(&pred, &gt))?;
        let b = oracles::sad(pd, gd, 16, 16);
        d_sad = d_sad.max((a - b).abs());
        let a = e(mse(&pred, &gt))?;
        let b = oracles::mse(pd, gd, 16, 16);
        d_mse = d_mse.max((a - b).abs());
        let a = e(gradient_error(&pred, &gt, &p))?;
        let b = oracles::gradient_error(pd, gd, 16, 16, p.grad_sigma, p.grad_truncate);
        d_grad = d_grad.max((a - b).abs());
        let a = e(connectivity_error(&pred, &gt, &p))?;
        let b = oracles::connectivity_error(pd, gd, 16, 16, p.conn_step, p.conn_cutoff, PURE_TOLERANCE);
        ensure(a == b, || format!("pair {k}: connectivity {a} vs oracle {b}"))?;
        if a > 0.0 {
            nonzero_conn += 1;
        }
    }
    ensure(d_sad <= 1e-12 && d_mse <= 1e-12, || format!("SAD/MSE differ by {d_sad:e}/{d_mse:e}"))?;
    ensure(d_grad <= 1e-9, || format!("gradient error differs by {d_grad:e}"))?;
    ensure(nonzero_conn > 50, || format!("only {nonzero_conn} pairs had a non-zero connectivity error"))?;
    Ok(format!(
        "100 pairs; max |diff| SAD {d_sad:.1e}, MSE {d_mse:.1e}, gradient {d_grad:.1e}, connectivity exact ({nonzero_conn} non-zero)"
    ))
}

pub fn trimap_invariants() -> Check {
    let style = ForegroundStyle::default();
    let mut fractional_checked = 0usize;
    for seed in 0..200u64 {
        let alpha = gen_foreground(seed, 48, 48, &style).map_err(|e| e.to_string())?.alpha;
        let mut prev_unknown: Option<Vec<bool>> = None;
        for r in 1..=10 {
            let t = make_trimap(&alpha, r).map_err(|e| e.to_string())?;
            let (f, b, u) = (
                t.count(TrimapClass::Foreground),
                t.count(TrimapClass::Background),
                t.count(TrimapClass::Unknown),
            );
            ensure(f + b + u == 48 * 48, || format!("seed {seed} r {r}: classes do not partition"))?;
            for (i, &a) in alpha.data().iter().enumerate() {
                let class = t.get(i / 48, i % 48);
                let fractional = a > PURE_TOLERANCE && a < 1.0 - PURE_TOLERANCE;
                if fractional {
                    fractional_checked += 1;
                    ensure(class == TrimapClass::Unknown, || {
                        format!("seed {seed} r {r}: fractional pixel {i} ({a}) labelled {class:?}")
                    })?;
                }
                ensure(class != TrimapClass::Foreground || a >= 1.0 - PURE_TOLERANCE, || {
                    format!("seed {seed} r {r}: foreground pixel {i} has alpha {a}")
                })?;
                ensure(class != TrimapClass::Background || a <= PURE_TOLERANCE, || {
                    format!("seed {seed} r {r}: background pixel {i} has alpha {a}")
                })?;
            }
            let unknown = t.mask_of(TrimapClass::Unknown);
            if let Some(prev) = &prev_unknown {
                let grows = prev.iter().zip(&unknown).all(|(&p, &n)| !p || n);
                ensure(grows, || format!("seed {seed}: unknown band at radius {r} misses pixels of radius {}", r - 1))?;
            }
            prev_unknown = Some(unknown);
        }
    }
    Ok(format!("200 mattes x radii 1-10; {fractional_checked} fractional pixel checks"))
}

/// Records the resolution the wrapped model actually runs at.
struct Recording {
    inner: ShmModel,
    seen: Vec<(usize, usize)>,
}

impl MattePredictor for Recording {
    fn name(&self) -> &str {
        "recording"
    }

    fn predict_native(&mut self, img: &Image) -> shm::Result<AlphaMatte> {
        self.seen.push(img.dims());
        self.inner.predict_native(img)
    }
}

pub fn inference_rescale() -> Check {
    let tnet = TNet::new(&TNetConfig::default()).map_err(|e| e.to_string())?;
    let mnet = MNet::new(&MNetConfig::default()).map_err(|e| e.to_string())?;
    let mut model = Recording {
        inner: ShmModel::new(tnet, mnet),
        seen: Vec::new(),
    };
    let (h, w) = (1000, 3000);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = Image::new(h, w, (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap();
    let alpha = model.predict(&img, 1500).map_err(|e| e.to_string())?;
    ensure(model.seen == vec![(500, 1500)], || format!("ran at {:?}, expected 500x1500", model.seen))?;
    ensure(working_size(h, w, 1500) == (500, 1500), || "working size".into())?;
    ensure(alpha.dims() == (h, w), || format!("output is {:?}", alpha.dims()))?;
    let in_range = alpha.data().iter().all(|v| (0.0..=1.0).contains(v));
    ensure(in_range, || "matte leaves [0, 1]".into())?;
    Ok("3000x1000 input ran at 1500x500 and returned a 3000x1000 matte in [0, 1]".into())
}
