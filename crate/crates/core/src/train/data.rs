use rand::Rng;
use rand_chacha::ChaCha8Rng;
use shm_nn::{resize_bilinear, resize_bilinear_backward, Scalar, Tensor};

use super::config::StageConfig;
use crate::error::Result;
use crate::imaging::{nearest_indices, rotate_small, AlphaMatte, Image, Raster};
use crate::model::THead;
use crate::synthdata::{DatasetManifest, LoadedSample, SampleRecord};
use crate::trimap::{make_trimap, TrimapClass, TrimapLabels};

/// A square window `[top, top+side) x [left, left+side)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

/// Summed-area table of the unknown band, for constant-time window queries.
#[derive(Debug, Clone)]
struct UnknownTable {
    width: usize,
    sums: Vec<u32>,
}

impl UnknownTable {
    fn new(labels: &TrimapLabels) -> Self {
        let (h, w) = labels.dims();
        let mut sums = vec![0u32; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += u32::from(labels.get(y, x) == TrimapClass::Unknown);
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Self { width: w + 1, sums }
    }

    fn contains_unknown(&self, win: Window) -> bool {
        let (t, l, b, r) = (win.top, win.left, win.top + win.side, win.left + win.side);
        let s = |y: usize, x: usize| self.sums[y * self.width + x] as i64;
        s(b, r) - s(t, r) - s(b, l) + s(t, l) > 0
    }
}

/// A training sample held in memory with its cached reference trimap.
#[derive(Debug, Clone)]
pub(crate) struct CachedSample {
    pub composite: Image,
    pub alpha: AlphaMatte,
    pub fg: Image,
    pub bg: Image,
    pub trimap: TrimapLabels,
    unknown: UnknownTable,
}

impl CachedSample {
    pub fn load(manifest: &DatasetManifest, record: &SampleRecord, radius: i64) -> Result<Self> {
        let s = LoadedSample::load(manifest, record)?;
        let trimap = make_trimap(&s.alpha, radius)?;
        Ok(Self {
            unknown: UnknownTable::new(&trimap),
            composite: s.composite,
            alpha: s.alpha,
            fg: s.fg,
            bg: s.bg,
            trimap,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.alpha.dims()
    }
}

/// Uniform square window of `side` (clamped to the raster), optionally
/// redrawn up to ten times until it meets the unknown band.
pub(crate) fn pick_window(
    rng: &mut ChaCha8Rng,
    (h, w): (usize, usize),
    side: usize,
    unknown: Option<&dyn Fn(Window) -> bool>,
) -> Window {
    let side = side.min(h).min(w);
    let mut win = Window { top: 0, left: 0, side };
    for _ in 0..10 {
        win.top = rng.random_range(0..=h - side);
        win.left = rng.random_range(0..=w - side);
        match unknown {
            Some(hit) if !hit(win) => continue,
            _ => break,
        }
    }
    win
}

pub(crate) fn sample_window(
    rng: &mut ChaCha8Rng,
    sample: &CachedSample,
    side: usize,
    centering: bool,
) -> Window {
    let hit = |w: Window| sample.unknown.contains_unknown(w);
    pick_window(rng, sample.dims(), side, centering.then_some(&hit as &dyn Fn(Window) -> bool))
}

/// Crop a window of sample `n` and resize it bilinearly to `size x size`.
pub fn crop_resize<T: Scalar>(t: &Tensor<T>, n: usize, win: Window, size: usize) -> Tensor<T> {
    let one = Tensor::from_vec([1, t.c(), t.h(), t.w()], t.sample(n).to_vec()).expect("sample");
    let c = one.crop(win.top, win.left, win.side, win.side).expect("window inside raster");
    resize_bilinear(&c, size, size)
}

/// Adjoint of [`crop_resize`] for one sample: `[1,C,size,size]` to `[1,C,h,w]`.
pub fn crop_resize_backward<T: Scalar>(g: &Tensor<T>, win: Window, h: usize, w: usize) -> Tensor<T> {
    let small = resize_bilinear_backward(g, [1, g.c(), win.side, win.side]);
    small.uncrop(win.top, win.left, h, w)
}

pub(crate) fn raster_tensor<R: Raster>(r: &R) -> Tensor<f32> {
    Tensor::from_vec([1, R::CHANNELS, r.height(), r.width()], r.data().to_vec()).expect("planar")
}

fn crop_resize_raster<R: Raster>(r: &R, win: Window, size: usize) -> Tensor<f32> {
    crop_resize(&raster_tensor(r), 0, win, size)
}

/// Nearest-neighbour crop and resize of a label plane.
fn crop_resize_labels(labels: &[u8], width: usize, win: Window, size: usize) -> Vec<u8> {
    let idx = nearest_indices(win.side, size);
    let mut out = Vec::with_capacity(size * size);
    for &y in &idx {
        for &x in &idx {
            out.push(labels[(win.top + y) * width + win.left + x]);
        }
    }
    out
}

fn flip_tensor(t: &mut Tensor<f32>) {
    let w = t.w();
    for n in 0..t.n() {
        for c in 0..t.c() {
            for row in t.plane_mut(n, c).chunks_mut(w) {
                row.reverse();
            }
        }
    }
}

fn flip_labels(labels: &mut [u8], width: usize) {
    for row in labels.chunks_mut(width) {
        row.reverse();
    }
}

fn stack(parts: &[Tensor<f32>]) -> Tensor<f32> {
    let [_, c, h, w] = parts[0].shape();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::from_vec([parts.len(), c, h, w], data).expect("equal shapes")
}

/// Per-sample augmentation draws.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Draw {
    pub flip: bool,
    pub degrees: f64,
    pub radius: i64,
    pub scale: usize,
}

impl Draw {
    pub fn sample(rng: &mut ChaCha8Rng, cfg: &StageConfig, overfit: bool) -> Self {
        let radius = if cfg.radius_augmentation && !overfit {
            rng.random_range(cfg.radius_range[0]..=cfg.radius_range[1])
        } else {
            cfg.mid_radius()
        };
        let scale = cfg.scales[rng.random_range(0..cfg.scales.len())];
        let flip = rng.random_bool(cfg.flip_prob) && !overfit;
        let degrees = if cfg.rotation_degrees > 0.0 && !overfit {
            rng.random_range(-cfg.rotation_degrees..=cfg.rotation_degrees)
        } else {
            0.0
        };
        Self {
            flip,
            degrees,
            radius,
            scale,
        }
    }
}

/// Segmentation-branch batch: images plus per-pixel targets.
#[derive(Debug, Clone)]
pub(crate) struct TBatch {
    pub image: Tensor<f32>,
    /// Class indices (trimap or binary mask) laid out `N x H x W`.
    pub labels: Vec<u8>,
    /// Regression target for the alpha head.
    pub alpha: Tensor<f32>,
}

pub(crate) fn tnet_item(
    sample: &CachedSample,
    cfg: &StageConfig,
    draw: Draw,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Vec<u8>, Tensor<f32>)> {
    let (composite, alpha, trimap) = if draw.degrees != 0.0 {
        let a = rotate_small(&sample.alpha, draw.degrees)?;
        let t = match cfg.head {
            THead::Trimap => make_trimap(&a, cfg.target_radius)?,
            _ => sample.trimap.clone(),
        };
        (rotate_small(&sample.composite, draw.degrees)?, a, t)
    } else {
        (sample.composite.clone(), sample.alpha.clone(), sample.trimap.clone())
    };
    let win = sample_window(rng, sample, draw.scale, cfg.unknown_centering);
    let size = cfg.crop_size;
    let width = alpha.width();
    let mut labels = match cfg.head {
        THead::Trimap => crop_resize_labels(trimap.codes(), width, win, size),
        THead::Seg | THead::Reg => {
            let mask: Vec<u8> = alpha.data().iter().map(|&a| u8::from(a > 0.0)).collect();
            crop_resize_labels(&mask, width, win, size)
        }
    };
    let mut image = crop_resize_raster(&composite, win, size);
    let mut target = crop_resize_raster(&alpha, win, size);
    if draw.flip {
        flip_tensor(&mut image);
        flip_tensor(&mut target);
        flip_labels(&mut labels, size);
    }
    Ok((image, labels, target))
}

pub(crate) fn tnet_batch(items: Vec<(Tensor<f32>, Vec<u8>, Tensor<f32>)>) -> TBatch {
    let images: Vec<_> = items.iter().map(|i| i.0.clone()).collect();
    let alphas: Vec<_> = items.iter().map(|i| i.2.clone()).collect();
    TBatch {
        image: stack(&images),
        labels: items.into_iter().flat_map(|i| i.1).collect(),
        alpha: stack(&alphas),
    }
}

/// Matting-branch batch with one-hot trimaps and the unknown-band mask.
#[derive(Debug, Clone)]
pub(crate) struct MBatch {
    pub image: Tensor<f32>,
    pub trimap: Tensor<f32>,
    pub alpha: Tensor<f32>,
    pub fg: Tensor<f32>,
    pub bg: Tensor<f32>,
    pub mask: Tensor<f32>,
}

pub(crate) struct MItem {
    image: Tensor<f32>,
    trimap: Tensor<f32>,
    alpha: Tensor<f32>,
    fg: Tensor<f32>,
    bg: Tensor<f32>,
    mask: Tensor<f32>,
}

fn onehot_tensor(labels: &[u8], size: usize) -> Tensor<f32> {
    let hw = size * size;
    let mut t = Tensor::zeros([1, 3, size, size]);
    for (p, &l) in labels.iter().enumerate() {
        t.data_mut()[l as usize * hw + p] = 1.0;
    }
    t
}

pub(crate) fn mnet_item(
    sample: &CachedSample,
    cfg: &StageConfig,
    draw: Draw,
    rng: &mut ChaCha8Rng,
) -> Result<MItem> {
    let trimap = if draw.radius == cfg.target_radius {
        sample.trimap.clone()
    } else {
        make_trimap(&sample.alpha, draw.radius)?
    };
    let win = sample_window(rng, sample, draw.scale, cfg.unknown_centering);
    let size = cfg.crop_size;
    let mut labels = crop_resize_labels(trimap.codes(), sample.alpha.width(), win, size);
    let mut parts = [
        crop_resize_raster(&sample.composite, win, size),
        crop_resize_raster(&sample.alpha, win, size),
        crop_resize_raster(&sample.fg, win, size),
        crop_resize_raster(&sample.bg, win, size),
    ];
    if draw.flip {
        parts.iter_mut().for_each(flip_tensor);
        flip_labels(&mut labels, size);
    }
    let mut mask = Tensor::zeros([1, 1, size, size]);
    for (m, &l) in mask.data_mut().iter_mut().zip(&labels) {
        *m = if l == TrimapClass::Unknown as u8 { 1.0 } else { 0.0 };
    }
    let [image, alpha, fg, bg] = parts;
    Ok(MItem {
        image,
        trimap: onehot_tensor(&labels, size),
        alpha,
        fg,
        bg,
        mask,
    })
}

pub(crate) fn mnet_batch(items: Vec<MItem>) -> MBatch {
    let pick = |f: fn(&MItem) -> &Tensor<f32>| stack(&items.iter().map(|i| f(i).clone()).collect::<Vec<_>>());
    MBatch {
        image: pick(|i| &i.image),
        trimap: pick(|i| &i.trimap),
        alpha: pick(|i| &i.alpha),
        fg: pick(|i| &i.fg),
        bg: pick(|i| &i.bg),
        mask: pick(|i| &i.mask),
    }
}

/// End-to-end batch: outer crops for the segmentation branch, inner windows
/// (in outer-crop coordinates) and inner ground truth for the fused output.
#[derive(Debug, Clone)]
pub struct E2eBatch<T = f32> {
    pub image: Tensor<T>,
    pub labels: Vec<u8>,
    pub windows: Vec<Window>,
    pub alpha: Tensor<T>,
    pub fg: Tensor<T>,
    pub bg: Tensor<T>,
}

pub(crate) struct EItem {
    image: Tensor<f32>,
    labels: Vec<u8>,
    window: Window,
    alpha: Tensor<f32>,
    fg: Tensor<f32>,
    bg: Tensor<f32>,
}

pub(crate) fn e2e_item(
    sample: &CachedSample,
    cfg: &StageConfig,
    draw: Draw,
    rng: &mut ChaCha8Rng,
) -> Result<EItem> {
    let outer = sample_window(rng, sample, cfg.crop_size, false);
    let side = outer.side;
    let crop = |r: &Tensor<f32>| r.crop(outer.top, outer.left, side, side).expect("inside");
    let mut layers = [
        crop(&raster_tensor(&sample.composite)),
        crop(&raster_tensor(&sample.alpha)),
        crop(&raster_tensor(&sample.fg)),
        crop(&raster_tensor(&sample.bg)),
    ];
    let mut labels = sample.trimap.crop(outer.top, outer.left, side, side)?;
    if draw.flip {
        layers.iter_mut().for_each(flip_tensor);
        labels = labels.hflip();
    }
    let inner_side = draw.scale.min(side);
    let hit = |w: Window| {
        (w.top..w.top + w.side)
            .any(|y| (w.left..w.left + w.side).any(|x| labels.get(y, x) == TrimapClass::Unknown))
    };
    let centering = cfg.unknown_centering.then_some(&hit as &dyn Fn(Window) -> bool);
    let window = pick_window(rng, (side, side), inner_side, centering);
    let [image, alpha, fg, bg] = layers;
    let size = cfg.inner_size;
    Ok(EItem {
        alpha: crop_resize(&alpha, 0, window, size),
        fg: crop_resize(&fg, 0, window, size),
        bg: crop_resize(&bg, 0, window, size),
        image,
        labels: labels.codes().to_vec(),
        window,
    })
}

pub(crate) fn e2e_batch(items: Vec<EItem>) -> Result<E2eBatch> {
    let side = items[0].image.h();
    if let Some(bad) = items.iter().find(|i| i.image.h() != side) {
        return Err(crate::Error::Shape(format!(
            "outer crops differ in size ({} vs {side}); images smaller than the crop cannot be batched",
            bad.image.h()
        )));
    }
    let pick = |f: fn(&EItem) -> &Tensor<f32>| stack(&items.iter().map(|i| f(i).clone()).collect::<Vec<_>>());
    Ok(E2eBatch {
        image: pick(|i| &i.image),
        alpha: pick(|i| &i.alpha),
        fg: pick(|i| &i.fg),
        bg: pick(|i| &i.bg),
        windows: items.iter().map(|i| i.window).collect(),
        labels: items.into_iter().flat_map(|i| i.labels).collect(),
    })
}
