//! Ground-truth trimaps and the 3-channel label/probability encodings shared
//! by the segmentation network, the matting network and the losses.

use std::path::Path;

use image::{ImageBuffer, Luma};
use shm_nn::{softmax_channels, Tensor};

use crate::error::{Error, Result};
use crate::imaging::{erode, AlphaMatte, Raster};

/// Alpha values within this distance of 0 or 1 count as pure background or
/// foreground (one 8-bit quantization step).
pub const PURE_TOLERANCE: f32 = 1.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum TrimapClass {
    Foreground = 0,
    Background = 1,
    Unknown = 2,
}

impl TrimapClass {
    pub const ALL: [TrimapClass; 3] = [Self::Foreground, Self::Background, Self::Unknown];

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Foreground),
            1 => Some(Self::Background),
            2 => Some(Self::Unknown),
            _ => None,
        }
    }

    /// Grey level used when a trimap is rendered to PNG.
    pub fn png_code(self) -> u8 {
        match self {
            Self::Foreground => 255,
            Self::Background => 0,
            Self::Unknown => 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrimapLabels {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl TrimapLabels {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "trimap {height}x{width} with {} labels",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&l| l > 2) {
            return Err(Error::Range(format!("trimap label {bad} is not FG/BG/UNK")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, class: TrimapClass) -> Self {
        Self {
            height,
            width,
            data: vec![class as u8; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Raw label codes (`0 = FG`, `1 = BG`, `2 = UNK`).
    pub fn codes(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> TrimapClass {
        TrimapClass::from_code(self.data[y * self.width + x]).expect("validated label")
    }

    pub fn count(&self, class: TrimapClass) -> usize {
        self.data.iter().filter(|&&l| l == class as u8).count()
    }

    /// Boolean mask of one class, row-major.
    pub fn mask_of(&self, class: TrimapClass) -> Vec<bool> {
        self.data.iter().map(|&l| l == class as u8).collect()
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(Error::InvalidArgument(format!(
                "trimap crop {h}x{w} at ({top}, {left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w);
        for y in top..top + h {
            data.extend_from_slice(&self.data[y * self.width + left..y * self.width + left + w]);
        }
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    pub fn hflip(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            data.extend(self.data[y * self.width..(y + 1) * self.width].iter().rev());
        }
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Nearest-neighbour resampling.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("trimap resize to empty size".into()));
        }
        let ys = crate::imaging::nearest_indices(self.height, height);
        let xs = crate::imaging::nearest_indices(self.width, width);
        let mut data = Vec::with_capacity(height * width);
        for &y in &ys {
            for &x in &xs {
                data.push(self.data[y * self.width + x]);
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Single-channel 8-bit PNG with `255 = FG`, `128 = UNK`, `0 = BG`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self
            .data
            .iter()
            .map(|&l| TrimapClass::from_code(l).expect("validated label").png_code())
            .collect();
        ImageBuffer::<Luma<u8>, _>::from_raw(self.width as u32, self.height as u32, raw)
            .expect("sized buffer")
            .save(path)
            .map_err(|e| Error::Codec {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Codec {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img
            .into_raw()
            .into_iter()
            .map(|v| match v {
                255 => Ok(TrimapClass::Foreground as u8),
                0 => Ok(TrimapClass::Background as u8),
                128 => Ok(TrimapClass::Unknown as u8),
                other => Err(Error::Range(format!("trimap PNG code {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(h, w, data)
    }
}

/// Whether a [`TrimapProbs`] holds raw scores or normalized probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbMode {
    Logits,
    Probabilities,
}

/// `3 x H x W` planar map in channel order FG, BG, UNK.
#[derive(Debug, Clone, PartialEq)]
pub struct TrimapProbs {
    height: usize,
    width: usize,
    mode: ProbMode,
    data: Vec<f32>,
}

impl TrimapProbs {
    pub fn new(height: usize, width: usize, mode: ProbMode, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "trimap map {height}x{width}x3 with {} values",
                data.len()
            )));
        }
        if mode == ProbMode::Probabilities {
            let hw = height * width;
            for p in 0..hw {
                let (f, b, u) = (data[p], data[hw + p], data[2 * hw + p]);
                if f < 0.0 || b < 0.0 || u < 0.0 || ((f + b + u) - 1.0).abs() > 1e-5 {
                    return Err(Error::Range(format!(
                        "probability triple ({f}, {b}, {u}) at pixel {p} is not normalized"
                    )));
                }
            }
        }
        Ok(Self {
            height,
            width,
            mode,
            data,
        })
    }

    /// Wrap sample `n` of a `N x 3 x H x W` tensor.
    pub fn from_tensor(t: &Tensor<f32>, n: usize, mode: ProbMode) -> Result<Self> {
        if t.c() != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {}", t.c())));
        }
        Self::new(t.h(), t.w(), mode, t.sample(n).to_vec())
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec([1, 3, self.height, self.width], self.data.clone()).expect("sized")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn mode(&self) -> ProbMode {
        self.mode
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, class: TrimapClass) -> &[f32] {
        let hw = self.height * self.width;
        let c = class as usize;
        &self.data[c * hw..(c + 1) * hw]
    }

    /// Per-pixel most likely class (ties favour FG, then BG).
    pub fn argmax(&self) -> TrimapLabels {
        let hw = self.height * self.width;
        let data = (0..hw)
            .map(|p| {
                let mut best = 0u8;
                for c in 1..3u8 {
                    if self.data[c as usize * hw + p] > self.data[best as usize * hw + p] {
                        best = c;
                    }
                }
                best
            })
            .collect();
        TrimapLabels {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Ground-truth trimap by morphology: FG is the eroded set of pure-foreground
/// pixels, BG the eroded set of pure-background pixels, UNK everything else.
pub fn make_trimap(alpha: &AlphaMatte, radius: i64) -> Result<TrimapLabels> {
    if radius < 1 {
        return Err(Error::InvalidArgument(format!(
            "trimap radius must be at least 1, got {radius}"
        )));
    }
    let fg = erode(&alpha.threshold_at_least(1.0 - PURE_TOLERANCE), radius)?;
    let bg = erode(&alpha.threshold_at_most(PURE_TOLERANCE), radius)?;
    let data = fg
        .data()
        .iter()
        .zip(bg.data())
        .map(|(&f, &b)| {
            if f {
                TrimapClass::Foreground as u8
            } else if b {
                TrimapClass::Background as u8
            } else {
                TrimapClass::Unknown as u8
            }
        })
        .collect();
    Ok(TrimapLabels {
        height: alpha.height(),
        width: alpha.width(),
        data,
    })
}

pub fn encode_onehot(labels: &TrimapLabels) -> TrimapProbs {
    let hw = labels.height * labels.width;
    let mut data = vec![0.0f32; 3 * hw];
    for (p, &l) in labels.data.iter().enumerate() {
        data[l as usize * hw + p] = 1.0;
    }
    TrimapProbs {
        height: labels.height,
        width: labels.width,
        mode: ProbMode::Probabilities,
        data,
    }
}

/// Per-pixel softmax over the FG/BG/UNK scores.
pub fn softmax3(logits: &TrimapProbs) -> Result<TrimapProbs> {
    if logits.mode != ProbMode::Logits {
        return Err(Error::InvalidArgument("softmax3 expects logits".into()));
    }
    let t: Tensor<f64> = logits.to_tensor().cast();
    let p = softmax_channels(&t).map_err(|_| Error::NonFinite("trimap logits".into()))?;
    Ok(TrimapProbs {
        height: logits.height,
        width: logits.width,
        mode: ProbMode::Probabilities,
        data: p.data().iter().map(|&v| v as f32).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn disk(size: usize, radius: f64) -> AlphaMatte {
        let c = (size as f64 - 1.0) / 2.0;
        let data = (0..size * size)
            .map(|i| {
                let (y, x) = ((i / size) as f64, (i % size) as f64);
                if ((y - c).powi(2) + (x - c).powi(2)).sqrt() <= radius {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        AlphaMatte::new(size, size, data).unwrap()
    }

    #[test]
    fn sharp_disk_band_hugs_the_boundary() {
        let alpha = disk(41, 12.0);
        let tri = make_trimap(&alpha, 3).unwrap();
        // brute force: Chebyshev distance from each pixel to the nearest pixel of the other class
        let n = 41usize;
        let dist_to_other = |y: usize, x: usize| -> usize {
            let me = alpha.get(y, x);
            let mut best = usize::MAX;
            for yy in 0..n {
                for xx in 0..n {
                    if alpha.get(yy, xx) != me {
                        best = best.min(y.abs_diff(yy).max(x.abs_diff(xx)));
                    }
                }
            }
            best
        };
        let mut band = 0;
        for y in 0..n {
            for x in 0..n {
                let unk = tri.get(y, x) == TrimapClass::Unknown;
                assert_eq!(unk, dist_to_other(y, x) <= 3, "pixel ({y}, {x})");
                band += unk as usize;
            }
        }
        // annulus of width 6 around a circle of radius 12: roughly 2*pi*12*6
        let expected = 2.0 * std::f64::consts::PI * 12.0 * 6.0;
        assert!((band as f64 - expected).abs() / expected < 0.35, "band {band}");
    }

    #[test]
    fn full_alpha_is_all_foreground() {
        let alpha = AlphaMatte::filled(9, 9, 1.0).unwrap();
        let tri = make_trimap(&alpha, 2).unwrap();
        assert_eq!(tri.count(TrimapClass::Foreground), 81);
    }

    #[test]
    fn half_alpha_is_unknown_at_any_radius() {
        let mut data = vec![0.0; 49];
        data[24] = 0.5;
        let alpha = AlphaMatte::new(7, 7, data).unwrap();
        for r in 1..6 {
            assert_eq!(make_trimap(&alpha, r).unwrap().get(3, 3), TrimapClass::Unknown);
        }
        assert!(make_trimap(&alpha, 0).is_err());
    }

    #[test]
    fn onehot_examples() {
        let labels = TrimapLabels::new(1, 3, vec![0, 1, 2]).unwrap();
        let p = encode_onehot(&labels);
        assert_eq!(p.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(p.argmax(), labels);
        assert!(TrimapLabels::new(1, 1, vec![3]).is_err());
    }

    #[test]
    fn softmax3_examples() {
        let ln2 = 2f32.ln();
        let logits = TrimapProbs::new(1, 3, ProbMode::Logits, vec![0.0, ln2, 1000.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let p = softmax3(&logits).unwrap();
        let at = |px: usize| [p.data()[px], p.data()[3 + px], p.data()[6 + px]];
        for v in at(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
        let b = at(1);
        assert!((b[0] - 0.5).abs() < 1e-6 && (b[1] - 0.25).abs() < 1e-6 && (b[2] - 0.25).abs() < 1e-6);
        assert_eq!(at(2), [1.0, 0.0, 0.0]);
        let bad = TrimapProbs::new(1, 1, ProbMode::Logits, vec![f32::INFINITY, 0.0, 0.0]).unwrap();
        assert!(softmax3(&bad).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let labels = TrimapLabels::new(2, 2, vec![0, 1, 2, 2]).unwrap();
        let path = dir.path().join("t.png");
        labels.save_png(&path).unwrap();
        assert_eq!(TrimapLabels::load_png(&path).unwrap(), labels);
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(
            codes in proptest::collection::vec(-1280i32..1280, 12),
            shifts in proptest::collection::vec(-50i32..50, 4),
        ) {
            // dyadic logits so that adding an integer shift is exact in f32
            let logits: Vec<f32> = codes.iter().map(|&c| c as f32 / 64.0).collect();
            let a = TrimapProbs::new(2, 2, ProbMode::Logits, logits.clone()).unwrap();
            let shifted: Vec<f32> = logits.iter().enumerate().map(|(i, v)| v + shifts[i % 4] as f32).collect();
            let b = TrimapProbs::new(2, 2, ProbMode::Logits, shifted).unwrap();
            let (pa, pb) = (softmax3(&a).unwrap(), softmax3(&b).unwrap());
            for (x, y) in pa.data().iter().zip(pb.data()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
            for px in 0..4 {
                let s: f32 = (0..3).map(|c| pa.data()[c * 4 + px]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}
