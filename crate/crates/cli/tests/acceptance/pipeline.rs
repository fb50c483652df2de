//! Criteria that run on a synthesized desk-scale dataset, mostly through the
//! `shm` binary.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde::Deserialize;
use shm::metrics::{read_report_means, MetricValues};
use shm::synthdata::{DatasetManifest, LoadedSample};
use shm::train::{Init, Stage, TrainConfig, Trainer};
use shm_nn::Module;

use crate::{ensure, Check};

/// Pilot-pinned thresholds, kept next to this file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Bounds {
    overfit: Overfit,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Overfit {
    samples: usize,
    batch_size: usize,
    steps: u64,
    /// Final objectives are averaged over this many trailing steps.
    window: usize,
    pretrain_t: f64,
    pretrain_m: f64,
    e2e: f64,
}

fn bounds() -> Bounds {
    toml::from_str(include_str!("bounds.toml")).expect("bounds.toml parses")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Run the binary; stdout on success, stderr on failure.
fn shm(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_shm"))
        .args(args)
        .env_remove("SHM_OUT_ROOT")
        .output()
        .map_err(|e| format!("cannot run shm: {e}"))?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "`shm {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

pub struct Datasets {
    work: PathBuf,
}

impl Datasets {
    pub fn new(work: &Path) -> Self {
        Self {
            work: work.to_path_buf(),
        }
    }

    fn data_dir(&self, tag: &str) -> PathBuf {
        self.work.join(format!("data_{tag}"))
    }

    fn synth(&self, tag: &str) -> Result<PathBuf, String> {
        let dir = self.data_dir(tag);
        shm(&["synth", "--desk-scale", "--deterministic", "--force", "--seed", "7", "--out", s(&dir)])?;
        Ok(dir.join("manifest.jsonl"))
    }

    /// The primary dataset, synthesized on first use.
    fn manifest(&self) -> Result<PathBuf, String> {
        let path = self.data_dir("a").join("manifest.jsonl");
        if path.exists() {
            Ok(path)
        } else {
            self.synth("a")
        }
    }

    fn load(&self) -> Result<DatasetManifest, String> {
        DatasetManifest::load(&self.manifest()?).map_err(|e| e.to_string())
    }

    pub fn determinism(&self) -> Check {
        let a = self.synth("a")?;
        let b = self.synth("b")?;
        let (ma, mb) = (read(&a)?, read(&b)?);
        ensure(ma == mb, || "manifests differ between identical synth runs".into())?;
        let manifest = DatasetManifest::load(&a).map_err(|e| e.to_string())?;
        ensure(
            (manifest.counts.train, manifest.counts.test) == (160, 20),
            || format!("desk split is {:?}", manifest.counts),
        )?;
        let mut logs = Vec::new();
        for tag in ["a", "b"] {
            let out = self.work.join(format!("det_tnet_{tag}"));
            shm(&[
                "pretrain-tnet", "--deterministic", "--force", "--manifest", s(&a), "--out", s(&out), "--set",
                "stage.max_steps=200",
            ])?;
            logs.push(read(&out.join("metrics.csv"))?);
        }
        ensure(logs[0] == logs[1], || "pretrain-tnet loss logs differ".into())?;
        let rows = String::from_utf8_lossy(&logs[0]).lines().count() - 1;
        ensure(rows == 200, || format!("expected 200 logged steps, got {rows}"))?;
        Ok(format!(
            "manifests ({} bytes) and 200-step loss logs ({} bytes) are bitwise identical",
            ma.len(),
            logs[0].len()
        ))
    }

    pub fn composite_round_trip(&self) -> Check {
        let manifest = self.load()?;
        let mut worst = 0.0f32;
        for r in &manifest.records {
            let sample = LoadedSample::load(&manifest, r).map_err(|e| e.to_string())?;
            let res = sample.composite_residual().map_err(|e| e.to_string())?;
            ensure(res <= 1.0 / 255.0 + 1e-6, || {
                format!("{}: residual {:.3} quantization steps", r.sample_id, res * 255.0)
            })?;
            worst = worst.max(res);
        }
        Ok(format!(
            "{} records, worst residual {:.3} of one 8-bit step",
            manifest.records.len(),
            worst * 255.0
        ))
    }

    pub fn overfit_smoke(&self) -> Check {
        let manifest = self.load()?;
        let b = bounds().overfit;
        ensure(b.steps <= 500, || "overfit budget is at most 500 steps".into())?;
        let mut parts = Vec::new();
        for (stage, bound) in [
            (Stage::PretrainT, b.pretrain_t),
            (Stage::PretrainM, b.pretrain_m),
            (Stage::E2e, b.e2e),
        ] {
            let start = std::time::Instant::now();
            let mut cfg = TrainConfig::desk(stage);
            cfg.stage.overfit_samples = b.samples;
            cfg.stage.batch_size = b.batch_size;
            let mut trainer = Trainer::new(&manifest, &cfg, Init::Fresh).map_err(|e| e.to_string())?;
            let mut totals = Vec::new();
            for _ in 0..b.steps {
                totals.push(trainer.step().map_err(|e| e.to_string())?.total);
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let first = mean(&totals[..b.window]);
            let last = mean(&totals[totals.len() - b.window..]);
            let secs = start.elapsed().as_secs_f64();
            ensure(last < bound, || {
                format!("{stage}: objective {first:.4} -> {last:.4}, bound {bound}")
            })?;
            ensure(secs <= 300.0, || format!("{stage}: {secs:.0} s exceeds 5 minutes"))?;
            parts.push(format!("{stage} {first:.4}->{last:.4} (<{bound}, {secs:.0} s)"));
        }

        let mut cfg = TrainConfig::desk(Stage::E2e);
        cfg.stage.batch_size = 2;
        let mut trainer = Trainer::new(&manifest, &cfg, Init::Fresh).map_err(|e| e.to_string())?;
        let snapshot = |t: &mut Trainer| {
            let st = t.state_mut();
            (
                st.tnet.as_mut().expect("tnet").flat_params(),
                st.mnet.as_mut().expect("mnet").flat_params(),
            )
        };
        let before = snapshot(&mut trainer);
        trainer.step().map_err(|e| e.to_string())?;
        let after = snapshot(&mut trainer);
        ensure(before.0 != after.0, || "one e2e step left the T-Net unchanged".into())?;
        ensure(before.1 != after.1, || "one e2e step left the M-Net unchanged".into())?;
        parts.push("one e2e step updates both networks".into());
        Ok(parts.join("; "))
    }

    pub fn desk_orderings(&self) -> Check {
        let m = self.manifest()?;
        let runs = self.work.join("desk");
        let dir = |name: &str| runs.join(name);
        let ck = |name: &str| runs.join(name).join("checkpoint");
        let train = |args: &[&str]| -> Result<(), String> {
            let mut full = vec![args[0], "--deterministic", "--force", "--manifest", s(&m)];
            full.extend(&args[1..]);
            shm(&full).map(|_| ())
        };
        let budget: u64 = [Stage::PretrainT, Stage::PretrainM, Stage::E2e]
            .iter()
            .map(|&st| TrainConfig::desk(st).stage.max_steps)
            .sum();
        let budget_set = format!("stage.max_steps={budget}");

        train(&["pretrain-tnet", "--out", s(&dir("tnet"))])?;
        train(&["pretrain-mnet", "--out", s(&dir("mnet"))])?;
        let (t, mn) = (ck("tnet"), ck("mnet"));
        train(&["train", "--tnet", s(&t), "--mnet", s(&mn), "--out", s(&dir("e2e"))])?;
        train(&["train", "--tnet", s(&t), "--mnet", s(&mn), "--no-fusion", "--out", s(&dir("nofusion"))])?;
        for target in ["seg", "reg"] {
            train(&["pretrain-tnet", "--target", target, "--set", &budget_set, "--out", s(&dir(target))])?;
        }

        let eval = |name: &str, extra: &[&str]| -> Result<MetricValues, String> {
            let out = dir(&format!("eval_{name}"));
            let mut args = vec!["eval", "--force", "--manifest", s(&m), "--name", name, "--out", s(&out)];
            args.extend(extra);
            shm(&args)?;
            let means = read_report_means(&out.join("report.csv")).map_err(|e| e.to_string())?;
            means.first().map(|r| r.1).ok_or_else(|| format!("{name}: report has no mean row"))
        };
        let full = eval("shm", &["--checkpoint", s(&ck("e2e"))])?;
        let no_e2e = eval("no-e2e", &["--checkpoint", s(&t), "--mnet-checkpoint", s(&mn)])?;
        let no_fusion = eval("no-fusion", &["--checkpoint", s(&ck("nofusion")), "--no-fusion"])?;
        let seg = eval("seg", &["--checkpoint", s(&ck("seg")), "--baseline", "seg"])?;
        let reg = eval("reg", &["--checkpoint", s(&ck("reg")), "--baseline", "reg"])?;
        let reports: Vec<String> = ["shm", "no-e2e", "no-fusion", "seg", "reg"]
            .iter()
            .map(|n| s(&dir(&format!("eval_{n}")).join("report.csv")).to_string())
            .collect();
        let mut report_args = vec!["report"];
        report_args.extend(reports.iter().map(String::as_str));
        let table = shm(&report_args)?;
        println!("{table}");

        let mut failures = Vec::new();
        let mut check = |ok: bool, what: String| {
            if !ok {
                failures.push(what);
            }
        };
        check(full.sad < reg.sad, format!("SAD shm {:.5} < reg {:.5}", full.sad, reg.sad));
        check(full.sad < seg.sad, format!("SAD shm {:.5} < seg {:.5}", full.sad, seg.sad));
        check(full.sad < no_e2e.sad, format!("SAD shm {:.5} < no-e2e {:.5}", full.sad, no_e2e.sad));
        check(
            no_fusion.conn > full.conn,
            format!("Connectivity no-fusion {:.5} > shm {:.5}", no_fusion.conn, full.conn),
        );
        let summary = format!(
            "SAD shm {:.5}, no-e2e {:.5}, seg {:.5}, reg {:.5}; Connectivity shm {:.5}, no-fusion {:.5}; budget {budget} steps",
            full.sad, no_e2e.sad, seg.sad, reg.sad, full.conn, no_fusion.conn
        );
        if failures.is_empty() {
            Ok(summary)
        } else {
            Err(format!("ordering violated: {}; {summary}", failures.join(", ")))
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("cannot read {}: {e}", path.display()))
}
