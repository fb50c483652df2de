//! The three-stage training protocol: segmentation pre-training, matting
//! pre-training and end-to-end fine-tuning through the fusion layer.

mod config;
mod data;
mod log;

use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shm_nn::{sigmoid, softmax_channels, softmax_channels_backward, Adam, Module, Scalar, Tensor};

pub use config::{Stage, StageConfig, TrainConfig};
pub use data::{crop_resize, crop_resize_backward, E2eBatch, Window};
pub use log::{read_log, LogRow, MetricsLog};

use data::{CachedSample, Draw};
use crate::error::{Error, Result};
use crate::loss::{classification_terms, prediction_terms, total_loss, LossBreakdown, LossWeights};
use crate::metrics::sad;
use crate::model::infer::image_tensor;
use crate::model::{
    fuse_tensor, fuse_tensor_backward, mnet_input, mnet_input_backward, save_checkpoint, Checkpoint,
    CheckpointMeta, MNet, MattePredictor, RegBaseline, SegBaseline, ShmModel, THead, TNet, TrimapInput,
};
use crate::synthdata::{mix_seed, DatasetManifest, Split};
use crate::trimap::encode_onehot;

/// How the networks of a run are initialized.
#[derive(Debug, Clone)]
pub enum Init {
    Fresh,
    /// Continue a checkpoint of the same stage.
    Resume(PathBuf),
    /// End to end: start from the two pre-training checkpoints.
    Pretrained { tnet: PathBuf, mnet: PathBuf },
}

/// Parameters, optimizer moments and progress of one stage.
#[derive(Debug)]
pub struct TrainState {
    pub stage: Stage,
    pub step: u64,
    pub tnet: Option<TNet<f32>>,
    pub mnet: Option<MNet<f32>>,
    pub optim: Adam<f32>,
    pub best_val_sad: Option<f64>,
}

/// Result of a completed [`Trainer::run`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: u64,
    pub last: LossBreakdown,
    pub rows: Vec<LogRow>,
    pub checkpoint: PathBuf,
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_FILE: &str = "metrics.csv";

pub struct Trainer {
    cfg: TrainConfig,
    samples: Vec<CachedSample>,
    val: Vec<CachedSample>,
    state: TrainState,
    manifest_hash: String,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("stage", &self.state.stage)
            .field("step", &self.state.step)
            .field("samples", &self.samples.len())
            .finish()
    }
}

impl Trainer {
    pub fn new(manifest: &DatasetManifest, cfg: &TrainConfig, init: Init) -> Result<Self> {
        cfg.validate()?;
        let sc = &cfg.stage;
        let radius = sc.target_radius;
        let mut train: Vec<_> = manifest.split(Split::Train).collect();
        if sc.overfit_samples > 0 {
            train.truncate(sc.overfit_samples);
        }
        if train.is_empty() {
            return Err(Error::Manifest("no training records".into()));
        }
        let samples = train
            .into_iter()
            .map(|r| CachedSample::load(manifest, r, radius))
            .collect::<Result<Vec<_>>>()?;
        let val = manifest
            .split(Split::Test)
            .take(sc.val_samples)
            .map(|r| CachedSample::load(manifest, r, radius))
            .collect::<Result<Vec<_>>>()?;
        let manifest_hash = manifest.content_hash();
        let stage = sc.stage;
        let fresh_tnet = || TNet::new(&cfg.tnet);
        let fresh_mnet = || MNet::new(&cfg.mnet);
        let state = match init {
            Init::Fresh => TrainState {
                stage,
                step: 0,
                tnet: (stage != Stage::PretrainM).then(fresh_tnet).transpose()?,
                mnet: (stage != Stage::PretrainT).then(fresh_mnet).transpose()?,
                optim: Adam::new(sc.learning_rate),
                best_val_sad: None,
            },
            Init::Resume(dir) => {
                let mut ck = Checkpoint::load(&dir)?;
                if ck.meta.stage != stage.name() {
                    return Err(Error::Checkpoint(format!(
                        "cannot resume stage {stage} from a `{}` checkpoint",
                        ck.meta.stage
                    )));
                }
                if ck.meta.manifest_hash != manifest_hash {
                    return Err(Error::Checkpoint(
                        "checkpoint was trained on a different dataset manifest".into(),
                    ));
                }
                let tnet = (stage != Stage::PretrainM).then(|| ck.take_tnet(&cfg.tnet)).transpose()?;
                let mnet = (stage != Stage::PretrainT).then(|| ck.take_mnet(&cfg.mnet)).transpose()?;
                let optim = ck
                    .optimizer(sc.learning_rate)?
                    .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
                TrainState {
                    stage,
                    step: ck.meta.step,
                    tnet,
                    mnet,
                    optim,
                    best_val_sad: ck.meta.extra.get("best_val_sad").and_then(|v| v.parse().ok()),
                }
            }
            Init::Pretrained { tnet, mnet } => {
                if stage != Stage::E2e {
                    return Err(Error::Config("pre-trained initialization is for e2e only".into()));
                }
                let t = Checkpoint::load(&tnet)?.take_tnet(&cfg.tnet)?;
                let m = Checkpoint::load(&mnet)?.take_mnet(&cfg.mnet)?;
                TrainState {
                    stage,
                    step: 0,
                    tnet: Some(t),
                    mnet: Some(m),
                    optim: Adam::new(sc.learning_rate),
                    best_val_sad: None,
                }
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            samples,
            val,
            state,
            manifest_hash,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut TrainState {
        &mut self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Sample indices and per-item generators for the current step.
    fn plan(&self) -> Vec<(usize, ChaCha8Rng, Draw)> {
        let sc = &self.cfg.stage;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(sc.seed, sc.stage.stream(), self.state.step));
        let overfit = sc.overfit_samples > 0;
        let count = if overfit { sc.batch_size.min(self.samples.len()) } else { sc.batch_size };
        (0..count)
            .map(|slot| {
                if overfit {
                    // fixed window and draws per sample
                    let mut r = ChaCha8Rng::seed_from_u64(mix_seed(sc.seed, 99, slot as u64));
                    let draw = Draw::sample(&mut r, sc, true);
                    (slot, r, draw)
                } else {
                    let idx = (rng.next_u64() % self.samples.len() as u64) as usize;
                    let mut r = ChaCha8Rng::seed_from_u64(rng.next_u64());
                    let draw = Draw::sample(&mut r, sc, false);
                    (idx, r, draw)
                }
            })
            .collect()
    }

    /// One optimization step; returns the loss before the update.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let result = match self.state.stage {
            Stage::PretrainT => self.step_tnet(),
            Stage::PretrainM => self.step_mnet(),
            Stage::E2e => self.step_e2e(),
        };
        let breakdown = result.map_err(|e| self.diverged(e))?;
        if !breakdown.total.is_finite() {
            return Err(self.diverged(Error::NonFinite(format!("loss {:?}", breakdown))));
        }
        self.state.step += 1;
        Ok(breakdown)
    }

    fn diverged(&self, e: Error) -> Error {
        match e {
            Error::NonFinite(detail) => Error::Divergence {
                stage: self.state.stage.name().into(),
                step: self.state.step,
                detail,
            },
            other => other,
        }
    }

    fn step_tnet(&mut self) -> Result<LossBreakdown> {
        let sc = &self.cfg.stage;
        let items = self
            .plan()
            .into_iter()
            .map(|(i, mut r, d)| data::tnet_item(&self.samples[i], sc, d, &mut r))
            .collect::<Result<Vec<_>>>()?;
        let batch = data::tnet_batch(items);
        let net = self.state.tnet.as_mut().expect("segmentation stage owns a tnet");
        net.zero_grad();
        let out = net.forward(&batch.image, true)?;
        let (breakdown, grad) = match sc.head {
            THead::Trimap | THead::Seg => {
                let (ce, g) = classification_terms(&out, &batch.labels)?;
                (total_loss(0.0, 0.0, ce, &self.cfg.loss).with_total(ce), g)
            }
            THead::Reg => {
                let (l1, g) = regression_terms(&out, &batch.alpha, self.cfg.loss.charbonnier_eps);
                (total_loss(l1, 0.0, 0.0, &self.cfg.loss).with_total(l1), g)
            }
        };
        net.backward(&grad);
        check_grads(net)?;
        self.state.optim.update(&mut [net]);
        Ok(breakdown)
    }

    fn step_mnet(&mut self) -> Result<LossBreakdown> {
        let sc = &self.cfg.stage;
        let items = self
            .plan()
            .into_iter()
            .map(|(i, mut r, d)| data::mnet_item(&self.samples[i], sc, d, &mut r))
            .collect::<Result<Vec<_>>>()?;
        let batch = data::mnet_batch(items);
        let net = self.state.mnet.as_mut().expect("matting stage owns an mnet");
        net.zero_grad();
        let input = mnet_input(&batch.image, &batch.trimap, self.cfg.mnet.trimap_input)?;
        let alpha_r = net.forward(&input, true)?;
        let mask = (batch.mask.sum() > 0.0).then_some(&batch.mask);
        let terms = prediction_terms(&alpha_r, &batch.alpha, &batch.fg, &batch.bg, mask, &self.cfg.loss)?;
        let breakdown = total_loss(terms.alpha_term, terms.comp_term, 0.0, &self.cfg.loss);
        net.backward(&terms.grad);
        check_grads(net)?;
        self.state.optim.update(&mut [net]);
        Ok(breakdown)
    }

    fn step_e2e(&mut self) -> Result<LossBreakdown> {
        let sc = self.cfg.stage.clone();
        let weights = self.cfg.loss;
        let mode = self.cfg.mnet.trimap_input;
        let items = self
            .plan()
            .into_iter()
            .map(|(i, mut r, d)| data::e2e_item(&self.samples[i], &sc, d, &mut r))
            .collect::<Result<Vec<_>>>()?;
        let batch = data::e2e_batch(items)?;
        let tnet = self.state.tnet.as_mut().expect("e2e owns a tnet");
        let mnet = self.state.mnet.as_mut().expect("e2e owns an mnet");
        let opts = E2eOptions {
            inner_size: sc.inner_size,
            fusion: sc.fusion,
            trimap_input: mode,
            weights,
        };
        let breakdown = e2e_gradients(tnet, mnet, &batch, &opts)?;
        check_grads(tnet)?;
        check_grads(mnet)?;
        self.state.optim.update(&mut [tnet, mnet]);
        Ok(breakdown)
    }

    /// Mean SAD on the held-out slice, when the stage predicts a matte.
    pub fn validate(&mut self) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let sc = &self.cfg.stage;
        let mut total = 0.0;
        for s in &self.val {
            let pred = match (sc.stage, sc.head) {
                (Stage::PretrainT, THead::Trimap) => return Ok(None),
                (Stage::PretrainT, THead::Seg) => {
                    let net = self.state.tnet.take().expect("tnet");
                    let mut p = SegBaseline { net };
                    let r = p.predict_native(&s.composite);
                    self.state.tnet = Some(p.net);
                    r?
                }
                (Stage::PretrainT, THead::Reg) => {
                    let net = self.state.tnet.take().expect("tnet");
                    let mut p = RegBaseline { net };
                    let r = p.predict_native(&s.composite);
                    self.state.tnet = Some(p.net);
                    r?
                }
                (Stage::PretrainM, _) => {
                    let net = self.state.mnet.as_mut().expect("mnet");
                    let probs = encode_onehot(&s.trimap).to_tensor();
                    let x = mnet_input(&image_tensor(&s.composite), &probs, self.cfg.mnet.trimap_input)?;
                    let raw = net.forward(&x, false)?;
                    let fused = fuse_tensor(&probs, &raw)?;
                    let (h, w) = s.dims();
                    crate::imaging::AlphaMatte::new(h, w, fused.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())?
                }
                (Stage::E2e, _) => {
                    let mut model = ShmModel::new(
                        self.state.tnet.take().expect("tnet"),
                        self.state.mnet.take().expect("mnet"),
                    );
                    model.fusion = sc.fusion;
                    let r = model.predict_native(&s.composite);
                    self.state.tnet = Some(model.tnet);
                    self.state.mnet = Some(model.mnet);
                    r?
                }
            };
            total += sad(&pred, &s.alpha)?;
        }
        Ok(Some(total / self.val.len() as f64))
    }

    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        let mut meta = CheckpointMeta::new(self.state.stage.name(), self.state.step, &self.manifest_hash);
        meta.extra.insert("head".into(), format!("{:?}", self.cfg.stage.head).to_lowercase());
        meta.extra.insert("fusion".into(), self.cfg.stage.fusion.to_string());
        if let Some(b) = self.state.best_val_sad {
            meta.extra.insert("best_val_sad".into(), b.to_string());
        }
        meta
    }

    pub fn save_state(&mut self, dir: &Path) -> Result<()> {
        let meta = self.checkpoint_meta();
        let s = &mut self.state;
        save_checkpoint(dir, &meta, s.tnet.as_mut(), s.mnet.as_mut(), Some(&s.optim))
    }

    /// Train to `max_steps`, appending to `out_dir/metrics.csv` and
    /// checkpointing into `out_dir/checkpoint`.
    pub fn run(&mut self, out_dir: &Path) -> Result<TrainOutcome> {
        std::fs::create_dir_all(out_dir)?;
        let ck_dir = out_dir.join(CHECKPOINT_DIR);
        let mut log = MetricsLog::open(&out_dir.join(METRICS_FILE))?;
        let sc = self.cfg.stage.clone();
        let mut rows = Vec::new();
        let mut last = LossBreakdown::default();
        while self.state.step < sc.max_steps {
            last = self.step()?;
            let step = self.state.step;
            let val = if step % sc.val_every == 0 || step == sc.max_steps {
                self.validate()?
            } else {
                None
            };
            if let Some(v) = val {
                if self.state.best_val_sad.is_none_or(|b| v < b) {
                    self.state.best_val_sad = Some(v);
                }
            }
            let row = LogRow::new(step, sc.stage, &last, val);
            log.append(&row)?;
            rows.push(row);
            if step % sc.checkpoint_every == 0 || step == sc.max_steps {
                self.save_state(&ck_dir)?;
            }
        }
        if !ck_dir.exists() {
            self.save_state(&ck_dir)?;
        }
        Ok(TrainOutcome {
            steps: self.state.step,
            last,
            rows,
            checkpoint: ck_dir,
        })
    }
}

impl LossBreakdown {
    fn with_total(mut self, total: f64) -> Self {
        self.total = total;
        self
    }
}

fn stack_samples<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let [_, c, h, w] = parts[0].shape();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::from_vec([parts.len(), c, h, w], data).expect("equal shapes")
}

/// What [`e2e_gradients`] needs beyond the batch itself.
#[derive(Debug, Clone, Copy)]
pub struct E2eOptions {
    pub inner_size: usize,
    pub fusion: bool,
    pub trimap_input: TrimapInput,
    pub weights: LossWeights,
}

/// Forward and backward pass of the joint objective through both networks.
///
/// Gradients are zeroed first and left accumulated in the parameters. The
/// matting prediction is cut from the trimap probabilities and the image at
/// each sample's inner window, so the segmentation network receives gradient
/// both from its own cross entropy and through the fused matte.
pub fn e2e_gradients<T: Scalar>(
    tnet: &mut TNet<T>,
    mnet: &mut MNet<T>,
    batch: &E2eBatch<T>,
    opts: &E2eOptions,
) -> Result<LossBreakdown> {
    let (weights, mode, size) = (opts.weights, opts.trimap_input, opts.inner_size);
    tnet.zero_grad();
    mnet.zero_grad();

    let logits = tnet.forward(&batch.image, true)?;
    let probs = softmax_channels(&logits).map_err(|_| Error::NonFinite("tnet logits".into()))?;
    let (ce, gce) = classification_terms(&logits, &batch.labels)?;
    let n = batch.image.n();
    let inner = |t: &Tensor<T>| -> Tensor<T> {
        let parts: Vec<_> = (0..n).map(|i| crop_resize(t, i, batch.windows[i], size)).collect();
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        stack_samples(&refs)
    };
    let p_in = inner(&probs);
    let x_in = inner(&batch.image);
    let alpha_r = mnet.forward(&mnet_input(&x_in, &p_in, mode)?, true)?;
    let alpha_p = if opts.fusion { fuse_tensor(&p_in, &alpha_r)? } else { alpha_r.clone() };
    let terms = prediction_terms(&alpha_p, &batch.alpha, &batch.fg, &batch.bg, None, &weights)?;
    let breakdown = total_loss(terms.alpha_term, terms.comp_term, ce, &weights);

    let (mut g_pin, g_ar) = if opts.fusion {
        fuse_tensor_backward(&p_in, &alpha_r, &terms.grad)?
    } else {
        (Tensor::zeros(p_in.shape()), terms.grad.clone())
    };
    let g_input = mnet.backward(&g_ar);
    g_pin.add_assign(&mnet_input_backward(&g_input, mode)?);
    let (side_h, side_w) = (probs.h(), probs.w());
    let mut g_probs = Tensor::zeros(probs.shape());
    for i in 0..n {
        let gi = Tensor::from_vec([1, 3, size, size], g_pin.sample(i).to_vec())?;
        let full = crop_resize_backward(&gi, batch.windows[i], side_h, side_w);
        g_probs.sample_mut(i).copy_from_slice(full.data());
    }
    let mut g_logits = softmax_channels_backward(&probs, &g_probs);
    let lambda = T::lit(weights.lambda_t);
    for (g, &c) in g_logits.data_mut().iter_mut().zip(gce.data()) {
        *g += lambda * c;
    }
    tnet.backward(&g_logits);
    Ok(breakdown)
}

/// Smoothed L1 between `sigmoid(out)` and the target alpha, with its gradient.
fn regression_terms(out: &Tensor<f32>, target: &Tensor<f32>, eps: f64) -> (f64, Tensor<f32>) {
    let count = out.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(out.shape());
    for ((g, &o), &t) in grad.data_mut().iter_mut().zip(out.data()).zip(target.data()) {
        let s = sigmoid(o as f64);
        let d = s - t as f64;
        let r = (d * d + eps * eps).sqrt();
        loss += r;
        let slope = if r > 0.0 { d / r } else { 0.0 };
        *g = (slope * s * (1.0 - s) / count) as f32;
    }
    (loss / count, grad)
}

fn check_grads(net: &mut dyn Module<f32>) -> Result<()> {
    let mut ok = true;
    net.visit_params(&mut |p| ok &= p.grad.iter().all(|g| g.is_finite()));
    if ok {
        Ok(())
    } else {
        Err(Error::NonFinite("parameter gradients".into()))
    }
}

/// Run a complete stage from scratch (or resume) and write its artifacts.
pub fn pretrain_tnet(manifest: &DatasetManifest, cfg: &TrainConfig, init: Init, out: &Path) -> Result<TrainOutcome> {
    expect_stage(cfg, Stage::PretrainT)?;
    Trainer::new(manifest, cfg, init)?.run(out)
}

pub fn pretrain_mnet(manifest: &DatasetManifest, cfg: &TrainConfig, init: Init, out: &Path) -> Result<TrainOutcome> {
    expect_stage(cfg, Stage::PretrainM)?;
    Trainer::new(manifest, cfg, init)?.run(out)
}

pub fn train_e2e(manifest: &DatasetManifest, cfg: &TrainConfig, init: Init, out: &Path) -> Result<TrainOutcome> {
    expect_stage(cfg, Stage::E2e)?;
    Trainer::new(manifest, cfg, init)?.run(out)
}

fn expect_stage(cfg: &TrainConfig, stage: Stage) -> Result<()> {
    if cfg.stage.stage != stage {
        return Err(Error::Config(format!(
            "expected a {stage} stage config, got {}",
            cfg.stage.stage
        )));
    }
    Ok(())
}
