//! Whole-image matte error measures and the evaluation protocol.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use shm_nn::reflect_index;

use crate::error::{Error, Result};
use crate::imaging::{AlphaMatte, Raster};
use crate::model::MattePredictor;
use crate::synthdata::{DatasetManifest, LoadedSample, Split};
use crate::trimap::PURE_TOLERANCE;

/// Parameters of the gradient and connectivity errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricParams {
    pub grad_sigma: f64,
    /// Kernel half-width in multiples of sigma.
    pub grad_truncate: f64,
    pub conn_step: f64,
    pub conn_cutoff: f64,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            grad_sigma: 1.4,
            grad_truncate: 4.0,
            conn_step: 0.1,
            conn_cutoff: 0.15,
        }
    }
}

impl MetricParams {
    /// Short label naming the parameter set, printed next to reported values.
    pub fn label(&self) -> String {
        format!(
            "grad(sigma={}, trunc={}sigma) conn(step={}, cutoff={}, 4-conn)",
            self.grad_sigma, self.grad_truncate, self.conn_step, self.conn_cutoff
        )
    }
}

fn check_pair(pred: &AlphaMatte, gt: &AlphaMatte) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} differ in size",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

/// Mean absolute difference over every pixel.
pub fn sad(pred: &AlphaMatte, gt: &AlphaMatte) -> Result<f64> {
    check_pair(pred, gt)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p as f64 - g as f64).abs())
        .sum();
    Ok(sum / pred.data().len() as f64)
}

/// Mean squared difference over every pixel.
pub fn mse(pred: &AlphaMatte, gt: &AlphaMatte) -> Result<f64> {
    check_pair(pred, gt)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p as f64 - g as f64).powi(2))
        .sum();
    Ok(sum / pred.data().len() as f64)
}

/// Gaussian smoothing kernel (unit sum) and its derivative, scaled so a unit
/// ramp has unit response.
pub fn gaussian_kernels(sigma: f64, truncate: f64) -> (Vec<f64>, Vec<f64>) {
    let radius = (truncate * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius).map(|t| t as f64).collect();
    let g: Vec<f64> = taps.iter().map(|t| (-t * t / (2.0 * sigma * sigma)).exp()).collect();
    let gsum: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / gsum).collect();
    let dg: Vec<f64> = taps.iter().zip(&g).map(|(t, v)| -t * v).collect();
    // correlation with a ramp f(x) = x gives sum_t dg[t] * t
    let ramp: f64 = taps.iter().zip(&dg).map(|(t, d)| t * d).sum();
    let dg = dg.iter().map(|v| v / ramp).collect();
    (g, dg)
}

/// Separable correlation of a plane with `ky` along rows and `kx` along columns.
fn separable(plane: &[f64], h: usize, w: usize, ky: &[f64], kx: &[f64]) -> Vec<f64> {
    let ry = (ky.len() / 2) as isize;
    let rx = (kx.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &c) in kx.iter().enumerate() {
                let sx = reflect_index(x as isize + k as isize - rx, w);
                acc += c * plane[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &c) in ky.iter().enumerate() {
                let sy = reflect_index(y as isize + k as isize - ry, h);
                acc += c * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Per-pixel Gaussian-derivative gradient magnitude.
pub fn gradient_magnitude(alpha: &AlphaMatte, params: &MetricParams) -> Vec<f64> {
    let (h, w) = alpha.dims();
    let plane: Vec<f64> = alpha.data().iter().map(|&v| v as f64).collect();
    let (g, dg) = gaussian_kernels(params.grad_sigma, params.grad_truncate);
    let gx = separable(&plane, h, w, &g, &dg);
    let gy = separable(&plane, h, w, &dg, &g);
    gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect()
}

pub fn gradient_error(pred: &AlphaMatte, gt: &AlphaMatte, params: &MetricParams) -> Result<f64> {
    check_pair(pred, gt)?;
    let a = gradient_magnitude(pred, params);
    let b = gradient_magnitude(gt, params);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

/// Pixels reachable from `seeds` through 4-neighbours inside `allowed`.
fn flood(allowed: &[bool], seeds: &[usize], h: usize, w: usize) -> Vec<bool> {
    let mut seen = vec![false; h * w];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for &s in seeds {
        if allowed[s] && !seen[s] {
            seen[s] = true;
            queue.push_back(s);
        }
    }
    while let Some(p) = queue.pop_front() {
        let (y, x) = (p / w, p % w);
        let mut visit = |q: usize| {
            if allowed[q] && !seen[q] {
                seen[q] = true;
                queue.push_back(q);
            }
        };
        if y > 0 {
            visit(p - w);
        }
        if y + 1 < h {
            visit(p + w);
        }
        if x > 0 {
            visit(p - 1);
        }
        if x + 1 < w {
            visit(p + 1);
        }
    }
    seen
}

/// Largest 4-connected component of `mask` (first found wins ties).
fn largest_component(mask: &[bool], h: usize, w: usize) -> Vec<usize> {
    let mut done = vec![false; h * w];
    let mut best: Vec<usize> = Vec::new();
    for start in 0..h * w {
        if !mask[start] || done[start] {
            continue;
        }
        let comp = flood(mask, &[start], h, w);
        let pixels: Vec<usize> = (0..h * w).filter(|&p| comp[p]).collect();
        for &p in &pixels {
            done[p] = true;
        }
        if pixels.len() > best.len() {
            best = pixels;
        }
    }
    best
}

/// Source region: the largest component of the opaque ground truth, or of
/// `gt >= 0.5` when no pixel is opaque.
pub fn connectivity_source(gt: &AlphaMatte) -> Vec<usize> {
    let (h, w) = gt.dims();
    let opaque: Vec<bool> = gt.data().iter().map(|&v| v >= 1.0 - PURE_TOLERANCE).collect();
    let source = largest_component(&opaque, h, w);
    if !source.is_empty() {
        return source;
    }
    let half: Vec<bool> = gt.data().iter().map(|&v| v >= 0.5).collect();
    largest_component(&half, h, w)
}

/// Threshold count of the connectivity sweep: `0, step, 2 step, ...` below one.
fn thresholds(step: f64) -> Vec<f64> {
    let n = (1.0 / step).round() as usize;
    (0..n).map(|k| k as f64 * step).collect()
}

/// Per-pixel connectivity degree `phi` of a matte given the source region.
pub fn connectivity_phi(alpha: &AlphaMatte, source: &[usize], params: &MetricParams) -> Vec<f64> {
    let (h, w) = alpha.dims();
    let vals: Vec<f64> = alpha.data().iter().map(|&v| v as f64).collect();
    let mut level = vec![0.0f64; h * w];
    for theta in thresholds(params.conn_step) {
        let allowed: Vec<bool> = vals.iter().map(|&v| v >= theta).collect();
        let reach = flood(&allowed, source, h, w);
        for (l, r) in level.iter_mut().zip(&reach) {
            if *r {
                *l = theta;
            }
        }
    }
    vals.iter()
        .zip(&level)
        .map(|(&a, &l)| {
            let d = a - l;
            if d >= params.conn_cutoff {
                1.0 - d
            } else {
                1.0
            }
        })
        .collect()
}

pub fn connectivity_error(pred: &AlphaMatte, gt: &AlphaMatte, params: &MetricParams) -> Result<f64> {
    check_pair(pred, gt)?;
    let source = connectivity_source(gt);
    let a = connectivity_phi(pred, &source, params);
    let b = connectivity_phi(gt, &source, params);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricValues {
    pub sad: f64,
    pub mse: f64,
    pub grad: f64,
    pub conn: f64,
}

impl MetricValues {
    pub fn compute(pred: &AlphaMatte, gt: &AlphaMatte, params: &MetricParams) -> Result<Self> {
        Ok(Self {
            sad: sad(pred, gt)?,
            mse: mse(pred, gt)?,
            grad: gradient_error(pred, gt, params)?,
            conn: connectivity_error(pred, gt, params)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub sample_id: String,
    pub pixel_count: usize,
    pub values: Option<MetricValues>,
    pub error: Option<String>,
}

/// Per-image rows and their mean over the successful ones.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub params: MetricParams,
    pub rows: Vec<ImageRow>,
    pub mean: MetricValues,
}

impl MetricsReport {
    pub fn from_rows(method: &str, params: MetricParams, rows: Vec<ImageRow>) -> Self {
        let ok: Vec<&MetricValues> = rows.iter().filter_map(|r| r.values.as_ref()).collect();
        let n = ok.len().max(1) as f64;
        let mean = MetricValues {
            sad: ok.iter().map(|v| v.sad).sum::<f64>() / n,
            mse: ok.iter().map(|v| v.mse).sum::<f64>() / n,
            grad: ok.iter().map(|v| v.grad).sum::<f64>() / n,
            conn: ok.iter().map(|v| v.conn).sum::<f64>() / n,
        };
        Self {
            method: method.into(),
            params,
            rows,
            mean,
        }
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    /// CSV with one row per image and a final `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["method", "sample_id", "pixels", "sad", "mse", "grad", "conn", "error"])
            .map_err(csv_err)?;
        let fmt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            let v = r.values;
            w.write_record([
                self.method.clone(),
                r.sample_id.clone(),
                r.pixel_count.to_string(),
                fmt(v.map(|v| v.sad)),
                fmt(v.map(|v| v.mse)),
                fmt(v.map(|v| v.grad)),
                fmt(v.map(|v| v.conn)),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        let m = self.mean;
        w.write_record([
            self.method.clone(),
            "mean".into(),
            self.rows.iter().map(|r| r.pixel_count).sum::<usize>().to_string(),
            m.sad.to_string(),
            m.mse.to_string(),
            m.grad.to_string(),
            m.conn.to_string(),
            String::new(),
        ])
        .map_err(csv_err)?;
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("metrics csv: {other:?}")),
    }
}

/// Method name and mean values from the `mean` rows of report CSVs.
pub fn read_report_means(path: &Path) -> Result<Vec<(String, MetricValues)>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.get(1) != Some("mean") {
            continue;
        }
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::InvalidArgument(format!("{}: bad value in column {i}", path.display())))
        };
        out.push((
            rec.get(0).unwrap_or_default().to_string(),
            MetricValues {
                sad: num(3)?,
                mse: num(4)?,
                grad: num(5)?,
                conn: num(6)?,
            },
        ));
    }
    Ok(out)
}

/// Plain-text table with columns SAD, MSE, Gradient, Connectivity.
pub fn render_table(rows: &[(String, MetricValues)]) -> String {
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(6).max(6);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$}  {:>12}  {:>12}  {:>12}  {:>12}",
        "Method", "SAD", "MSE", "Gradient", "Connectivity"
    );
    for (name, v) in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>12.4e}  {:>12.4e}  {:>12.4e}  {:>12.4e}",
            name, v.sad, v.mse, v.grad, v.conn
        );
    }
    s
}

/// Run `predictor` on every test record and score it.
pub fn evaluate(
    manifest: &DatasetManifest,
    predictor: &mut dyn MattePredictor,
    limit: usize,
    params: &MetricParams,
) -> Result<MetricsReport> {
    let records: Vec<_> = manifest.split(Split::Test).collect();
    if records.is_empty() {
        return Err(Error::Manifest("test split is empty".into()));
    }
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let attempt = LoadedSample::load(manifest, r).and_then(|s| {
            let pred = predictor.predict(&s.composite, limit)?;
            Ok((MetricValues::compute(&pred, &s.alpha, params)?, s.alpha.data().len()))
        });
        rows.push(match attempt {
            Ok((v, k)) => ImageRow {
                sample_id: r.sample_id.clone(),
                pixel_count: k,
                values: Some(v),
                error: None,
            },
            Err(e) => ImageRow {
                sample_id: r.sample_id.clone(),
                pixel_count: 0,
                values: None,
                error: Some(e.to_string()),
            },
        });
    }
    Ok(MetricsReport::from_rows(predictor.name(), *params, rows))
}

/// Fraction of pixels whose predicted trimap class matches the ground-truth
/// trimap of `radius`, over the test split.
pub fn trimap_accuracy(
    manifest: &DatasetManifest,
    tnet: &mut crate::model::TNet<f32>,
    radius: i64,
) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for r in manifest.split(Split::Test) {
        let s = LoadedSample::load(manifest, r)?;
        let gt = crate::trimap::make_trimap(&s.alpha, radius)?;
        let pred = crate::model::tnet_forward(&s.composite, tnet)?.argmax();
        hit += pred.codes().iter().zip(gt.codes()).filter(|(a, b)| a == b).count();
        total += gt.codes().len();
    }
    if total == 0 {
        return Err(Error::Manifest("test split is empty".into()));
    }
    Ok(hit as f64 / total as f64)
}
