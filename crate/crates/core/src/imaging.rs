//! Raster types and deterministic image primitives.
//!
//! All rasters are planar `f32` in `[0, 1]`: an [`Image`] stores its R, G and B
//! planes back to back, an [`AlphaMatte`] a single plane.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use shm_nn::bilinear_plane;

use crate::error::{Error, Result};

/// Planar raster with a fixed channel count.
pub trait Raster: Sized + Clone {
    const CHANNELS: usize;

    fn height(&self) -> usize;
    fn width(&self) -> usize;
    fn data(&self) -> &[f32];

    /// Construct from planar data, validating size and range.
    fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Result<Self>;

    fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    fn plane(&self, c: usize) -> &[f32] {
        let hw = self.height() * self.width();
        &self.data()[c * hw..(c + 1) * hw]
    }
}

fn validate(kind: &str, height: usize, width: usize, channels: usize, data: &[f32]) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Shape(format!("{kind} must be at least 1x1, got {height}x{width}")));
    }
    if data.len() != height * width * channels {
        return Err(Error::Shape(format!(
            "{kind} {height}x{width}x{channels} needs {} values, got {}",
            height * width * channels,
            data.len()
        )));
    }
    if let Some((i, v)) = data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Range(format!("{kind} value {v} at index {i} outside [0, 1]")));
    }
    Ok(())
}

/// `H x W x 3` color raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        validate("image", height, width, 3, &data)?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let hw = height * width;
        let mut data = Vec::with_capacity(3 * hw);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, hw));
        }
        Self::new(height, width, data)
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| codec(path, e))?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
            }
        }
        Self::new(h, w, data)
    }

    /// 8-bit RGB PNG, rounding each channel to the nearest code.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height, self.width);
        let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
            let at = |c: usize| quantize8(self.get(y as usize, x as usize, c));
            Rgb([at(0), at(1), at(2)])
        });
        buf.save(path).map_err(|e| codec(path, e))
    }
}

impl Raster for Image {
    const CHANNELS: usize = 3;

    fn height(&self) -> usize {
        self.height
    }

    fn width(&self) -> usize {
        self.width
    }

    fn data(&self) -> &[f32] {
        &self.data
    }

    fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(height, width, data)
    }
}

/// `H x W` opacity raster.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMatte {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl AlphaMatte {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        validate("alpha matte", height, width, 1, &data)?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Pixels with `value >= threshold`.
    pub fn threshold_at_least(&self, threshold: f32) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&a| a >= threshold).collect(),
        }
    }

    /// Pixels with `value <= threshold`.
    pub fn threshold_at_most(&self, threshold: f32) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&a| a <= threshold).collect(),
        }
    }

    /// Single-channel PNG, 8-bit codes map to `v / 255` and 16-bit to `v / 65535`.
    pub fn load_png(path: &Path) -> Result<Self> {
        let dynimg = image::open(path).map_err(|e| codec(path, e))?;
        let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
        let data: Vec<f32> = match dynimg {
            image::DynamicImage::ImageLuma16(buf) => {
                buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()
            }
            image::DynamicImage::ImageLuma8(buf) => {
                buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()
            }
            other => {
                return Err(Error::Codec {
                    path: path.to_path_buf(),
                    message: format!("expected a single-channel matte, got {:?}", other.color()),
                })
            }
        };
        Self::new(h, w, data)
    }

    pub fn save_png(&self, path: &Path, sixteen_bit: bool) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        if sixteen_bit {
            let raw: Vec<u16> = self.data.iter().map(|&a| quantize16(a)).collect();
            let buf = ImageBuffer::<Luma<u16>, _>::from_raw(w, h, raw).expect("sized buffer");
            buf.save(path).map_err(|e| codec(path, e))
        } else {
            let raw: Vec<u8> = self.data.iter().map(|&a| quantize8(a)).collect();
            let buf = ImageBuffer::<Luma<u8>, _>::from_raw(w, h, raw).expect("sized buffer");
            buf.save(path).map_err(|e| codec(path, e))
        }
    }
}

impl Raster for AlphaMatte {
    const CHANNELS: usize = 1;

    fn height(&self) -> usize {
        self.height
    }

    fn width(&self) -> usize {
        self.width
    }

    fn data(&self) -> &[f32] {
        &self.data
    }

    fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(height, width, data)
    }
}

pub fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn quantize16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn codec(path: &Path, e: image::ImageError) -> Error {
    Error::Codec {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Two-valued `H x W` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

/// `output = alpha * fg + (1 - alpha) * bg` per pixel and channel.
pub fn composite(fg: &Image, bg: &Image, alpha: &AlphaMatte) -> Result<Image> {
    if bg.dims() != fg.dims() {
        return Err(Error::Shape(format!(
            "background is {:?} but foreground is {:?}",
            bg.dims(),
            fg.dims()
        )));
    }
    if alpha.dims() != fg.dims() {
        return Err(Error::Shape(format!(
            "alpha is {:?} but foreground is {:?}",
            alpha.dims(),
            fg.dims()
        )));
    }
    let hw = fg.height * fg.width;
    let mut data = Vec::with_capacity(3 * hw);
    for c in 0..3 {
        for ((&f, &b), &a) in fg.plane(c).iter().zip(bg.plane(c)).zip(&alpha.data) {
            data.push((a * f + (1.0 - a) * b).clamp(0.0, 1.0));
        }
    }
    Image::new(fg.height, fg.width, data)
}

/// Square (Chebyshev) dilation; pixels outside the raster count as unset.
pub fn dilate(mask: &BinaryMask, radius: i64) -> Result<BinaryMask> {
    if radius < 0 {
        return Err(Error::InvalidArgument(format!("negative dilation radius {radius}")));
    }
    let r = radius as usize;
    if r == 0 {
        return Ok(mask.clone());
    }
    let (h, w) = (mask.height, mask.width);
    let rows = sliding_any(&mask.data, h, w, r, true);
    let data = sliding_any(&rows, h, w, r, false);
    Ok(BinaryMask {
        height: h,
        width: w,
        data,
    })
}

/// Erosion as the dual of [`dilate`]: `erode(m, r) = !dilate(!m, r)`.
pub fn erode(mask: &BinaryMask, radius: i64) -> Result<BinaryMask> {
    if radius < 0 {
        return Err(Error::InvalidArgument(format!("negative erosion radius {radius}")));
    }
    Ok(dilate(&mask.complement(), radius)?.complement())
}

/// 1-D windowed "any" along rows (`horizontal`) or columns via prefix counts.
fn sliding_any(src: &[bool], h: usize, w: usize, r: usize, horizontal: bool) -> Vec<bool> {
    let (lines, len) = if horizontal { (h, w) } else { (w, h) };
    let at = |line: usize, i: usize| if horizontal { line * w + i } else { i * w + line };
    let mut out = vec![false; h * w];
    let mut prefix = vec![0u32; len + 1];
    for line in 0..lines {
        for i in 0..len {
            prefix[i + 1] = prefix[i] + src[at(line, i)] as u32;
        }
        for i in 0..len {
            let lo = i.saturating_sub(r);
            let hi = (i + r + 1).min(len);
            out[at(line, i)] = prefix[hi] > prefix[lo];
        }
    }
    out
}

fn check_target(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("target size {h}x{w} must be positive")));
    }
    Ok(())
}

/// Bilinear resampling with half-pixel centres; same-size resampling is the identity.
pub fn resize<R: Raster>(img: &R, height: usize, width: usize) -> Result<R> {
    check_target(height, width)?;
    if img.dims() == (height, width) {
        return Ok(img.clone());
    }
    let mut data = vec![0.0f32; R::CHANNELS * height * width];
    let (sh, sw) = img.dims();
    for (c, dst) in data.chunks_mut(height * width).enumerate() {
        bilinear_plane(img.plane(c), sh, sw, dst, height, width);
        dst.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    R::from_planar(height, width, data)
}

pub fn crop<R: Raster>(img: &R, top: usize, left: usize, height: usize, width: usize) -> Result<R> {
    if height == 0 || width == 0 || top + height > img.height() || left + width > img.width() {
        return Err(Error::InvalidArgument(format!(
            "crop {height}x{width} at ({top}, {left}) outside {}x{} raster",
            img.height(),
            img.width()
        )));
    }
    let mut data = Vec::with_capacity(R::CHANNELS * height * width);
    for c in 0..R::CHANNELS {
        let plane = img.plane(c);
        for y in top..top + height {
            let row = y * img.width();
            data.extend_from_slice(&plane[row + left..row + left + width]);
        }
    }
    R::from_planar(height, width, data)
}

pub fn hflip<R: Raster>(img: &R) -> R {
    let (h, w) = img.dims();
    let mut data = Vec::with_capacity(img.data().len());
    for c in 0..R::CHANNELS {
        let plane = img.plane(c);
        for y in 0..h {
            data.extend(plane[y * w..(y + 1) * w].iter().rev());
        }
    }
    R::from_planar(h, w, data).expect("flip preserves validity")
}

pub const MAX_ROTATION_DEGREES: f64 = 45.0;

/// Rotate about the raster centre with bilinear resampling and edge replication.
pub fn rotate_small<R: Raster>(img: &R, degrees: f64) -> Result<R> {
    if !degrees.is_finite() || degrees.abs() > MAX_ROTATION_DEGREES {
        return Err(Error::InvalidArgument(format!(
            "rotation {degrees} outside [-{MAX_ROTATION_DEGREES}, {MAX_ROTATION_DEGREES}] degrees"
        )));
    }
    if degrees == 0.0 {
        return Ok(img.clone());
    }
    let (h, w) = img.dims();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut data = vec![0.0f32; R::CHANNELS * h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            // inverse mapping: rotate the output coordinate back by -degrees
            let sx = (cos * dx + sin * dy + cx).clamp(0.0, (w - 1) as f64);
            let sy = (-sin * dx + cos * dy + cy).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for c in 0..R::CHANNELS {
                let p = img.plane(c);
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                data[(c * h + y) * w + x] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
            }
        }
    }
    R::from_planar(h, w, data)
}

/// Nearest-neighbour resampling for label rasters (half-pixel centres).
pub fn nearest_indices(src: usize, dst: usize) -> Vec<usize> {
    (0..dst)
        .map(|o| {
            let pos = (o as f64 + 0.5) * src as f64 / dst as f64;
            (pos.floor() as usize).min(src - 1)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient_image(h: usize, w: usize) -> Image {
        let hw = h * w;
        let data = (0..3 * hw)
            .map(|i| ((i * 37) % 101) as f32 / 100.0)
            .collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn composite_limits_and_midpoint() {
        let fg = Image::filled(2, 3, [0.8, 0.8, 0.8]).unwrap();
        let bg = Image::filled(2, 3, [0.4, 0.4, 0.4]).unwrap();
        let one = AlphaMatte::filled(2, 3, 1.0).unwrap();
        let zero = AlphaMatte::filled(2, 3, 0.0).unwrap();
        assert_eq!(composite(&fg, &bg, &one).unwrap(), fg);
        assert_eq!(composite(&fg, &bg, &zero).unwrap(), bg);
        let half = AlphaMatte::filled(2, 3, 0.5).unwrap();
        for &v in composite(&fg, &bg, &half).unwrap().data() {
            assert!((v - 0.6).abs() < 1e-6);
        }
    }

    #[test]
    fn composite_names_mismatched_operand() {
        let fg = Image::filled(2, 2, [0.0; 3]).unwrap();
        let bg = Image::filled(2, 3, [0.0; 3]).unwrap();
        let a = AlphaMatte::filled(2, 2, 0.0).unwrap();
        let err = composite(&fg, &bg, &a).unwrap_err().to_string();
        assert!(err.contains("background"), "{err}");
        let a3 = AlphaMatte::filled(3, 2, 0.0).unwrap();
        let err = composite(&fg, &fg, &a3).unwrap_err().to_string();
        assert!(err.contains("alpha"), "{err}");
    }

    #[test]
    fn out_of_range_values_rejected() {
        assert!(AlphaMatte::new(1, 2, vec![0.5, 1.2]).is_err());
        assert!(Image::new(1, 1, vec![0.0, f32::NAN, 0.0]).is_err());
        assert!(AlphaMatte::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn dilation_examples() {
        let mut m = BinaryMask::filled(5, 5, false);
        m.set(2, 2, true);
        let d = dilate(&m, 1).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let inside = (1..=3).contains(&y) && (1..=3).contains(&x);
                assert_eq!(d.get(y, x), inside);
            }
        }
        assert_eq!(dilate(&m, 0).unwrap(), m);
        let ones = BinaryMask::filled(4, 6, true);
        assert_eq!(dilate(&ones, 3).unwrap(), ones);
        assert!(dilate(&m, -1).is_err());
    }

    #[test]
    fn erosion_examples() {
        let mut block = BinaryMask::filled(5, 5, false);
        for y in 1..=3 {
            for x in 1..=3 {
                block.set(y, x, true);
            }
        }
        let e = erode(&block, 1).unwrap();
        assert_eq!(e.count(), 1);
        assert!(e.get(2, 2));
        assert_eq!(erode(&block, 0).unwrap(), block);
        let zeros = BinaryMask::filled(3, 3, false);
        assert_eq!(erode(&zeros, 2).unwrap(), zeros);
        assert!(erode(&block, -2).is_err());
    }

    #[test]
    fn resize_examples() {
        let c = AlphaMatte::filled(3, 5, 0.3).unwrap();
        for &v in resize(&c, 7, 2).unwrap().data() {
            assert!((v - 0.3).abs() < 1e-6);
        }
        let img = gradient_image(4, 5);
        assert_eq!(resize(&img, 4, 5).unwrap(), img);
        assert!(resize(&img, 0, 5).is_err());
    }

    #[test]
    fn resize_two_by_two_ramp_matches_bilinear_formula() {
        let m = AlphaMatte::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let r = resize(&m, 2, 4).unwrap();
        // brute force: source x = (ox + 0.5) * 2/4 - 0.5 clamped to [0, 1]
        let expected: Vec<f32> = (0..4)
            .map(|ox| ((ox as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0) as f32)
            .collect();
        assert_eq!(expected, vec![0.0, 0.25, 0.75, 1.0]);
        for y in 0..2 {
            for x in 0..4 {
                assert!((r.get(y, x) - expected[x]).abs() < 1e-7);
            }
            assert!(r.get(y, 1) < r.get(y, 2));
        }
    }

    #[test]
    fn crop_flip_rotate_identities() {
        let img = gradient_image(6, 7);
        assert_eq!(crop(&img, 0, 0, 6, 7).unwrap(), img);
        assert!(crop(&img, 1, 0, 6, 7).is_err());
        let sub = crop(&img, 2, 3, 2, 2).unwrap();
        assert_eq!(sub.get(1, 1, 2), img.get(3, 4, 2));
        assert_eq!(hflip(&hflip(&img)), img);
        assert_eq!(hflip(&img).get(0, 0, 1), img.get(0, 6, 1));
        let rot = rotate_small(&img, 0.0).unwrap();
        for (a, b) in rot.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1e-7);
        }
        assert!(rotate_small(&img, 46.0).is_err());
    }

    #[test]
    fn rotation_keeps_centre_and_range() {
        let m = AlphaMatte::new(3, 3, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let r = rotate_small(&m, 30.0).unwrap();
        assert!((r.get(1, 1) - 1.0).abs() < 1e-6);
        assert!(r.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
        (1usize..9, 1usize..9).prop_flat_map(|(h, w)| {
            proptest::collection::vec(any::<bool>(), h * w)
                .prop_map(move |d| BinaryMask::new(h, w, d).unwrap())
        })
    }

    fn brute_dilate(m: &BinaryMask, r: usize) -> BinaryMask {
        let mut out = BinaryMask::filled(m.height(), m.width(), false);
        for y in 0..m.height() {
            for x in 0..m.width() {
                let mut any = false;
                for yy in y.saturating_sub(r)..(y + r + 1).min(m.height()) {
                    for xx in x.saturating_sub(r)..(x + r + 1).min(m.width()) {
                        any |= m.get(yy, xx);
                    }
                }
                out.set(y, x, any);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn dilation_matches_brute_force(m in mask_strategy(), r in 0usize..5) {
            prop_assert_eq!(dilate(&m, r as i64).unwrap(), brute_dilate(&m, r));
        }

        #[test]
        fn erosion_is_dual_of_dilation(m in mask_strategy(), r in 0i64..5) {
            prop_assert_eq!(erode(&m, r).unwrap(), dilate(&m.complement(), r).unwrap().complement());
        }

        #[test]
        fn dilation_is_monotone(m in mask_strategy(), extra in any::<u64>(), r in 0i64..4) {
            let mut bigger = m.clone();
            for (i, v) in bigger.data.iter_mut().enumerate() {
                *v |= (extra >> (i % 64)) & 1 == 1;
            }
            prop_assert!(dilate(&m, r).unwrap().is_subset_of(&dilate(&bigger, r).unwrap()));
        }

        #[test]
        fn compositing_is_closed_and_linear_in_alpha(
            vals in proptest::collection::vec(0.0f32..=1.0, 4 * 5),
            lambda in 0.0f32..=1.0,
        ) {
            let fg = Image::filled(2, 2, [vals[0], vals[1], vals[2]]).unwrap();
            let bg = Image::new(2, 2, vals[3..15].to_vec()).unwrap();
            let a1 = AlphaMatte::new(2, 2, vals[15..19].to_vec()).unwrap();
            let a2 = AlphaMatte::new(2, 2, vals[16..20].to_vec()).unwrap();
            let mix: Vec<f32> = a1.data().iter().zip(a2.data()).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect();
            let mixed = composite(&fg, &bg, &AlphaMatte::new(2, 2, mix).unwrap()).unwrap();
            let c1 = composite(&fg, &bg, &a1).unwrap();
            let c2 = composite(&fg, &bg, &a2).unwrap();
            for i in 0..12 {
                let lin = lambda * c1.data()[i] + (1.0 - lambda) * c2.data()[i];
                prop_assert!((mixed.data()[i] - lin).abs() < 1e-5);
                prop_assert!((0.0..=1.0).contains(&mixed.data()[i]));
            }
        }
    }

    #[test]
    fn png_round_trip_within_one_code() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient_image(5, 4);
        let p = dir.path().join("img.png");
        img.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        let m = AlphaMatte::new(1, 3, vec![0.0, 0.123456, 1.0]).unwrap();
        let q = dir.path().join("m.png");
        m.save_png(&q, true).unwrap();
        let back = AlphaMatte::load_png(&q).unwrap();
        assert!((back.get(0, 1) - 0.123456).abs() <= 0.5 / 65535.0 + 1e-7);
    }
}
