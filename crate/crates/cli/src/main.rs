mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use shm::imaging::{composite, AlphaMatte, Image, Raster};
use shm::metrics::{evaluate, read_report_means, render_table, MetricParams};
use shm::model::{Checkpoint, MattePredictor, RegBaseline, SegBaseline, ShmModel, THead, DEFAULT_SIZE_LIMIT};
use shm::synthdata::{build_dataset, DatasetConfig, DatasetManifest};
use shm::train::{pretrain_mnet, pretrain_tnet, train_e2e, Init, Stage, TrainConfig, TrainOutcome};

const OUT_ROOT_ENV: &str = "SHM_OUT_ROOT";

/// Bad invocation: exit status 1.
#[derive(Debug)]
pub struct Usage(pub String);

/// Inputs or configuration that fail validation: exit status 2.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}
impl std::error::Error for Invalid {}

#[derive(Debug, Parser)]
#[command(name = "shm", version, about = "Automatic human matting: data synthesis, training, evaluation, inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic matting dataset and its manifest.
    Synth(Common),
    /// Pre-train the trimap network (or a segmentation/regression baseline).
    PretrainTnet {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long, value_enum, default_value_t = Target::Trimap)]
        target: Target,
        /// Continue from a checkpoint of this stage.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Pre-train the matting network on ground-truth trimaps.
    PretrainMnet {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train both networks end to end from the two pre-training checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long, requires = "mnet")]
        tnet: Option<PathBuf>,
        #[arg(long, requires = "tnet")]
        mnet: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["tnet", "mnet"])]
        resume: Option<PathBuf>,
        /// Train without the fusion module.
        #[arg(long)]
        no_fusion: bool,
    },
    /// Score a model on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[command(flatten)]
        model: ModelArgs,
        /// Method name written to the report.
        #[arg(long)]
        name: Option<String>,
    },
    /// Predict the matte of one image.
    Infer {
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Output matte PNG.
        #[arg(long)]
        out: PathBuf,
        /// Also write the image composited over a checkerboard.
        #[arg(long)]
        composite: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SIZE_LIMIT)]
        size_limit: usize,
        #[arg(long)]
        force: bool,
    },
    /// Render evaluation CSVs as a comparison table.
    Report {
        /// Report CSVs written by `eval`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Debug, Clone, Args, Serialize)]
struct Common {
    /// TOML file layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `stage.max_steps=50`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $SHM_OUT_ROOT/<command>, or runs/<command>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Start from the published hyper-parameters.
    #[arg(long, conflicts_with = "desk_scale")]
    paper_defaults: bool,
    /// Start from the small CPU preset (the default).
    #[arg(long)]
    desk_scale: bool,
    /// Leave wall-clock data out of the run record so reruns are byte-identical.
    #[arg(long)]
    deterministic: bool,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Args)]
struct Data {
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Debug, Clone, Args)]
struct ModelArgs {
    /// Checkpoint directory (the T-Net, plus the M-Net unless --mnet-checkpoint).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Take the M-Net from another checkpoint, e.g. to combine two pre-trained networks.
    #[arg(long)]
    mnet_checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Baseline::Shm)]
    baseline: Baseline,
    /// Return the matting output without fusion.
    #[arg(long)]
    no_fusion: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Target {
    Trimap,
    Seg,
    Reg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Shm,
    Seg,
    Reg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalConfig {
    /// Longer-edge limit above which images are downscaled for inference.
    size_limit: usize,
    metrics: MetricParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            size_limit: DEFAULT_SIZE_LIMIT,
            metrics: MetricParams::default(),
        }
    }
}

/// Invocation record written beside the effective config.
#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    subcommand: &'a str,
    #[serde(flatten)]
    common: &'a Common,
    inputs: BTreeMap<&'a str, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    started_unix: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}

fn exit_status(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if cause.is::<Invalid>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<shm::Error>() {
            return match e {
                shm::Error::Divergence { .. } | shm::Error::NonFinite(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(common) => synth(&common),
        Command::PretrainTnet {
            common,
            data,
            target,
            resume,
        } => {
            let head = match target {
                Target::Trimap => THead::Trimap,
                Target::Seg => THead::Seg,
                Target::Reg => THead::Reg,
            };
            let mut preset = train_preset(&common, Stage::PretrainT);
            preset.stage.head = head;
            preset.tnet.head = head;
            let init = resume.clone().map_or(Init::Fresh, Init::Resume);
            let name = "pretrain-tnet";
            let mut inputs = BTreeMap::from([("target", format!("{target:?}").to_lowercase())]);
            if let Some(r) = &resume {
                inputs.insert("resume", r.display().to_string());
            }
            train_stage(name, &common, &data, preset, init, inputs, pretrain_tnet)
        }
        Command::PretrainMnet { common, data, resume } => {
            let preset = train_preset(&common, Stage::PretrainM);
            let mut inputs = BTreeMap::new();
            if let Some(r) = &resume {
                inputs.insert("resume", r.display().to_string());
            }
            let init = resume.map_or(Init::Fresh, Init::Resume);
            train_stage("pretrain-mnet", &common, &data, preset, init, inputs, pretrain_mnet)
        }
        Command::Train {
            common,
            data,
            tnet,
            mnet,
            resume,
            no_fusion,
        } => {
            let mut preset = train_preset(&common, Stage::E2e);
            if no_fusion {
                preset.stage.fusion = false;
            }
            let mut inputs = BTreeMap::new();
            let init = match (resume, tnet, mnet) {
                (Some(r), _, _) => {
                    inputs.insert("resume", r.display().to_string());
                    Init::Resume(r)
                }
                (None, Some(t), Some(m)) => {
                    inputs.insert("tnet", t.display().to_string());
                    inputs.insert("mnet", m.display().to_string());
                    Init::Pretrained { tnet: t, mnet: m }
                }
                _ => return Err(Usage("train needs --tnet and --mnet checkpoints, or --resume".into()).into()),
            };
            train_stage("train", &common, &data, preset, init, inputs, train_e2e)
        }
        Command::Eval {
            common,
            data,
            model,
            name,
        } => eval(&common, &data, &model, name),
        Command::Infer {
            image,
            model,
            out,
            composite,
            size_limit,
            force,
        } => infer(&image, &model, &out, composite.as_deref(), size_limit, force),
        Command::Report { inputs, out, force } => report(&inputs, out.as_deref(), force),
    }
}

fn out_dir(common: &Common, subcommand: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(subcommand)
    })
}

/// Create `dir`, refusing to reuse a non-empty one unless `force` (which
/// clears it) or `append` is set.
fn prepare_out(dir: &Path, force: bool, append: bool) -> Result<()> {
    let occupied = dir.exists()
        && fs::read_dir(dir)
            .with_context(|| format!("cannot list {}", dir.display()))?
            .next()
            .is_some();
    if occupied {
        if force {
            fs::remove_dir_all(dir).with_context(|| format!("cannot clear {}", dir.display()))?;
        } else if !append {
            return Err(Invalid(format!(
                "output directory {} is not empty; choose a new directory or pass --force",
                dir.display()
            ))
            .into());
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(())
}

/// First of `stem.ext`, `stem.1.ext`, ... that does not exist yet.
fn fresh_name(dir: &Path, stem: &str, ext: &str) -> PathBuf {
    let first = dir.join(format!("{stem}.{ext}"));
    if !first.exists() {
        return first;
    }
    (1..)
        .map(|i| dir.join(format!("{stem}.{i}.{ext}")))
        .find(|p| !p.exists())
        .expect("unbounded search")
}

/// Serialize the invocation and the effective config into `dir`.
fn record_run<T: Serialize>(
    dir: &Path,
    subcommand: &str,
    common: &Common,
    inputs: BTreeMap<&str, String>,
    cfg: &T,
) -> Result<()> {
    let started_unix = (!common.deterministic).then(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs())
    });
    let record = RunRecord {
        subcommand,
        common,
        inputs,
        started_unix,
    };
    fs::write(fresh_name(dir, "run", "toml"), config::render(&record)?)?;
    fs::write(fresh_name(dir, "config", "toml"), config::render(cfg)?)?;
    Ok(())
}

fn synth(common: &Common) -> Result<()> {
    let preset = if common.paper_defaults {
        DatasetConfig::composition_benchmark()
    } else {
        DatasetConfig::desk_scale()
    };
    let mut cfg: DatasetConfig = config::layered(&preset, common.config.as_deref(), &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let dir = out_dir(common, "synth");
    prepare_out(&dir, common.force, false)?;
    record_run(&dir, "synth", common, BTreeMap::new(), &cfg)?;
    let manifest = build_dataset(&cfg, &dir)?;
    println!(
        "wrote {} train / {} test samples to {} (manifest {})",
        manifest.counts.train,
        manifest.counts.test,
        dir.display(),
        manifest.content_hash()
    );
    Ok(())
}

fn train_preset(common: &Common, stage: Stage) -> TrainConfig {
    if common.paper_defaults {
        TrainConfig::paper(stage)
    } else {
        TrainConfig::desk(stage)
    }
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.exists() {
        return Err(Invalid(format!("manifest {} does not exist", path.display())).into());
    }
    Ok(DatasetManifest::load(path)?)
}

type StageFn = fn(&DatasetManifest, &TrainConfig, Init, &Path) -> shm::Result<TrainOutcome>;

fn train_stage(
    name: &str,
    common: &Common,
    data: &Data,
    preset: TrainConfig,
    init: Init,
    mut inputs: BTreeMap<&str, String>,
    stage_fn: StageFn,
) -> Result<()> {
    let mut cfg: TrainConfig = config::layered(&preset, common.config.as_deref(), &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.stage.seed = seed;
    }
    cfg.validate()?;
    let manifest = load_manifest(&data.manifest)?;
    inputs.insert("manifest", data.manifest.display().to_string());
    inputs.insert("manifest_hash", manifest.content_hash());
    let dir = out_dir(common, name);
    prepare_out(&dir, common.force, matches!(init, Init::Resume(_)))?;
    record_run(&dir, name, common, inputs, &cfg)?;
    let outcome = stage_fn(&manifest, &cfg, init, &dir)?;
    println!(
        "{name}: {} steps, final loss {:.6}, checkpoint {}",
        outcome.steps,
        outcome.last.total,
        outcome.checkpoint.display()
    );
    Ok(())
}

/// A predictor reported under a caller-chosen name.
struct Named {
    name: String,
    inner: Box<dyn MattePredictor>,
}

impl MattePredictor for Named {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict_native(&mut self, img: &Image) -> shm::Result<AlphaMatte> {
        self.inner.predict_native(img)
    }
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    if !dir.is_dir() {
        return Err(Invalid(format!("checkpoint directory {} does not exist", dir.display())).into());
    }
    Checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn build_predictor(args: &ModelArgs) -> Result<Box<dyn MattePredictor>> {
    let mut ck = load_checkpoint(&args.checkpoint)?;
    let tnet_cfg = ck
        .meta
        .tnet
        .clone()
        .ok_or_else(|| Invalid(format!("{} holds no T-Net", args.checkpoint.display())))?;
    let tnet = ck.take_tnet(&tnet_cfg)?;
    Ok(match args.baseline {
        Baseline::Seg => Box::new(SegBaseline { net: tnet }),
        Baseline::Reg => Box::new(RegBaseline { net: tnet }),
        Baseline::Shm => {
            let (mut src, path) = match &args.mnet_checkpoint {
                Some(p) => (load_checkpoint(p)?, p.clone()),
                None => (ck, args.checkpoint.clone()),
            };
            let mnet_cfg = src
                .meta
                .mnet
                .clone()
                .ok_or_else(|| Invalid(format!("{} holds no M-Net", path.display())))?;
            let mnet = src.take_mnet(&mnet_cfg)?;
            let mut model = ShmModel::new(tnet, mnet);
            model.fusion = !args.no_fusion;
            Box::new(model)
        }
    })
}

fn eval(common: &Common, data: &Data, model: &ModelArgs, name: Option<String>) -> Result<()> {
    let cfg: EvalConfig = config::layered(&EvalConfig::default(), common.config.as_deref(), &common.overrides)?;
    let manifest = load_manifest(&data.manifest)?;
    let predictor = build_predictor(model)?;
    let name = name.unwrap_or_else(|| predictor.name().to_string());
    let mut predictor = Named { name, inner: predictor };
    let dir = out_dir(common, "eval");
    prepare_out(&dir, common.force, false)?;
    let mut inputs = BTreeMap::from([
        ("manifest", data.manifest.display().to_string()),
        ("manifest_hash", manifest.content_hash()),
        ("checkpoint", model.checkpoint.display().to_string()),
        ("baseline", format!("{:?}", model.baseline).to_lowercase()),
    ]);
    if let Some(m) = &model.mnet_checkpoint {
        inputs.insert("mnet_checkpoint", m.display().to_string());
    }
    record_run(&dir, "eval", common, inputs, &cfg)?;
    let report = evaluate(&manifest, &mut predictor, cfg.size_limit, &cfg.metrics)?;
    let csv = dir.join("report.csv");
    report.write_csv(&csv)?;
    let table = render_table(&[(report.method.clone(), report.mean)]);
    let summary = format!(
        "{table}\n{} images, {} failed\nmetric parameters: {}\n",
        report.rows.len(),
        report.failures(),
        cfg.metrics.label()
    );
    fs::write(dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    if report.failures() > 0 {
        eprintln!("warning: {} images failed; see {}", report.failures(), csv.display());
    }
    Ok(())
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Invalid(format!("{} exists; pass --force to overwrite", path.display())).into());
    }
    Ok(())
}

/// Grey checkerboard used to visualise transparency.
fn checkerboard(h: usize, w: usize, cell: usize) -> shm::Result<Image> {
    let hw = h * w;
    let mut data = vec![0.0f32; 3 * hw];
    for y in 0..h {
        for x in 0..w {
            let v = if (y / cell + x / cell) % 2 == 0 { 0.8 } else { 0.55 };
            for c in 0..3 {
                data[c * hw + y * w + x] = v;
            }
        }
    }
    Image::new(h, w, data)
}

fn infer(image: &Path, model: &ModelArgs, out: &Path, viz: Option<&Path>, limit: usize, force: bool) -> Result<()> {
    if limit == 0 {
        return Err(Usage("--size-limit must be positive".into()).into());
    }
    refuse_overwrite(out, force)?;
    if let Some(v) = viz {
        refuse_overwrite(v, force)?;
    }
    if !image.exists() {
        return Err(Invalid(format!("image {} does not exist", image.display())).into());
    }
    let img = Image::load_png(image)?;
    let mut predictor = build_predictor(model)?;
    let alpha = predictor.predict(&img, limit)?;
    alpha.save_png(out, true)?;
    if let Some(v) = viz {
        let (h, w) = img.dims();
        let board = checkerboard(h, w, 16)?;
        composite(&img, &board, &alpha)?.save_png(v)?;
    }
    println!("wrote {}x{} matte to {}", alpha.height(), alpha.width(), out.display());
    Ok(())
}

fn report(inputs: &[PathBuf], out: Option<&Path>, force: bool) -> Result<()> {
    let mut rows = Vec::new();
    for path in inputs {
        if !path.exists() {
            return Err(Invalid(format!("report {} does not exist", path.display())).into());
        }
        let means = read_report_means(path)?;
        if means.is_empty() {
            return Err(Invalid(format!("{} has no mean row", path.display())).into());
        }
        rows.extend(means);
    }
    let table = render_table(&rows);
    if let Some(path) = out {
        refuse_overwrite(path, force)?;
        fs::write(path, &table)?;
    }
    print!("{table}");
    Ok(())
}
