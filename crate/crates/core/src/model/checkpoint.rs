use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::Serialize;
use shm_nn::archive::{load_module_entries, module_entries, read_archive, write_archive, ArchiveEntry};
use shm_nn::{Adam, Module};

use super::{MNet, MNetConfig, TNet, TNetConfig};
use crate::error::{Error, Result};
use crate::synthdata::hex_digest;

pub const CHECKPOINT_VERSION: u32 = 1;
const META_FILE: &str = "meta.txt";
const TNET_FILE: &str = "tnet.shma";
const MNET_FILE: &str = "mnet.shma";
const OPTIM_FILE: &str = "optim.shma";

/// Short stable hash of a configuration's canonical JSON form.
pub fn config_fingerprint<C: Serialize>(cfg: &C) -> String {
    let json = serde_json::to_string(cfg).expect("configs serialize");
    hex_digest(json.as_bytes())[..16].to_string()
}

/// Sidecar metadata stored as `key = value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub version: u32,
    pub stage: String,
    pub step: u64,
    pub manifest_hash: String,
    pub tnet: Option<TNetConfig>,
    pub mnet: Option<MNetConfig>,
    /// Stage-specific entries such as the best validation score.
    pub extra: BTreeMap<String, String>,
}

impl CheckpointMeta {
    pub fn new(stage: &str, step: u64, manifest_hash: &str) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            stage: stage.to_string(),
            step,
            manifest_hash: manifest_hash.to_string(),
            tnet: None,
            mnet: None,
            extra: BTreeMap::new(),
        }
    }

    fn render(&self) -> String {
        let mut lines = vec![
            format!("version = {}", self.version),
            format!("stage = {}", self.stage),
            format!("step = {}", self.step),
            format!("manifest_hash = {}", self.manifest_hash),
        ];
        if let Some(c) = &self.tnet {
            lines.push(format!("tnet_config = {}", serde_json::to_string(c).expect("serializable")));
            lines.push(format!("tnet_fingerprint = {}", config_fingerprint(c)));
        }
        if let Some(c) = &self.mnet {
            lines.push(format!("mnet_config = {}", serde_json::to_string(c).expect("serializable")));
            lines.push(format!("mnet_fingerprint = {}", config_fingerprint(c)));
        }
        for (k, v) in &self.extra {
            lines.push(format!("{k} = {v}"));
        }
        lines.join("\n") + "\n"
    }

    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Checkpoint(format!("malformed metadata line {}: {line}", n + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |key: &str| {
            map.remove(key)
                .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{key}`")))
        };
        let version: u32 = take("version")?
            .parse()
            .map_err(|_| Error::Checkpoint("unreadable version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let stage = take("stage")?;
        let step = take("step")?
            .parse()
            .map_err(|_| Error::Checkpoint("unreadable step".into()))?;
        let manifest_hash = take("manifest_hash")?;
        let tnet = parse_config::<TNetConfig>(&mut map, "tnet")?;
        let mnet = parse_config::<MNetConfig>(&mut map, "mnet")?;
        Ok(Self {
            version,
            stage,
            step,
            manifest_hash,
            tnet,
            mnet,
            extra: map,
        })
    }
}

fn parse_config<C: Serialize + serde::de::DeserializeOwned>(
    map: &mut BTreeMap<String, String>,
    net: &str,
) -> Result<Option<C>> {
    let Some(json) = map.remove(&format!("{net}_config")) else {
        return Ok(None);
    };
    let cfg: C = serde_json::from_str(&json)
        .map_err(|e| Error::Checkpoint(format!("unreadable {net} config: {e}")))?;
    if let Some(stored) = map.remove(&format!("{net}_fingerprint")) {
        let actual = config_fingerprint(&cfg);
        if stored != actual {
            return Err(Error::Fingerprint(format!(
                "{net} config hashes to {actual} but metadata records {stored}"
            )));
        }
    }
    Ok(Some(cfg))
}

/// Networks and optimizer state restored from a checkpoint directory.
#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tnet: Option<TNet<f32>>,
    pub mnet: Option<MNet<f32>>,
    optim: Option<Vec<ArchiveEntry>>,
}

impl Checkpoint {
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| {
            Error::Checkpoint(format!("cannot read {}: {e}", meta_path.display()))
        })?;
        let meta = CheckpointMeta::parse(&text)?;
        let tnet = match &meta.tnet {
            Some(cfg) => {
                let mut net = TNet::new(cfg)?;
                load_into(&mut net, &dir.join(TNET_FILE))?;
                Some(net)
            }
            None => None,
        };
        let mnet = match &meta.mnet {
            Some(cfg) => {
                let mut net = MNet::new(cfg)?;
                load_into(&mut net, &dir.join(MNET_FILE))?;
                Some(net)
            }
            None => None,
        };
        let optim_path = dir.join(OPTIM_FILE);
        let optim = if optim_path.exists() {
            Some(read_archive(BufReader::new(fs::File::open(optim_path)?))?)
        } else {
            None
        };
        Ok(Self {
            meta,
            tnet,
            mnet,
            optim,
        })
    }

    /// T-Net whose configuration must equal `expected`.
    pub fn take_tnet(&mut self, expected: &TNetConfig) -> Result<TNet<f32>> {
        let stored = self.meta.tnet.as_ref().ok_or_else(|| {
            Error::Checkpoint(format!("stage `{}` checkpoint holds no tnet", self.meta.stage))
        })?;
        check_fingerprint("tnet", stored, expected)?;
        self.tnet.take().ok_or_else(|| Error::Checkpoint("tnet already taken".into()))
    }

    /// M-Net whose configuration must equal `expected`.
    pub fn take_mnet(&mut self, expected: &MNetConfig) -> Result<MNet<f32>> {
        let stored = self.meta.mnet.as_ref().ok_or_else(|| {
            Error::Checkpoint(format!("stage `{}` checkpoint holds no mnet", self.meta.stage))
        })?;
        check_fingerprint("mnet", stored, expected)?;
        self.mnet.take().ok_or_else(|| Error::Checkpoint("mnet already taken".into()))
    }

    /// Optimizer with the stored moments, or `None` when none were saved.
    pub fn optimizer(&self, lr: f64) -> Result<Option<Adam<f32>>> {
        let Some(entries) = &self.optim else {
            return Ok(None);
        };
        let mut adam = Adam::new(lr);
        adam.import(entries, self.meta.step)?;
        Ok(Some(adam))
    }
}

fn check_fingerprint<C: Serialize + std::fmt::Debug>(net: &str, stored: &C, expected: &C) -> Result<()> {
    let (a, b) = (config_fingerprint(stored), config_fingerprint(expected));
    if a != b {
        return Err(Error::Fingerprint(format!(
            "{net} checkpoint was built with {stored:?} (fingerprint {a}) but {expected:?} (fingerprint {b}) was requested"
        )));
    }
    Ok(())
}

fn load_into(net: &mut dyn Module<f32>, path: &Path) -> Result<()> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let entries = read_archive(BufReader::new(file))?;
    load_module_entries(net, &entries)?;
    Ok(())
}

fn write_entries(path: &Path, entries: &[ArchiveEntry]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write_archive(&mut out, entries)?;
    std::io::Write::flush(&mut out)?;
    Ok(())
}

/// Write a checkpoint directory. The directory is assembled beside `dir`
/// and renamed into place so an interrupted save leaves the old one intact.
pub fn save_checkpoint(
    dir: &Path,
    meta: &CheckpointMeta,
    tnet: Option<&mut TNet<f32>>,
    mnet: Option<&mut MNet<f32>>,
    optim: Option<&Adam<f32>>,
) -> Result<()> {
    let mut meta = meta.clone();
    let staging = sibling(dir, "tmp");
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    meta.tnet = None;
    meta.mnet = None;
    if let Some(net) = tnet {
        meta.tnet = Some(net.config().clone());
        write_entries(&staging.join(TNET_FILE), &module_entries(net))?;
    }
    if let Some(net) = mnet {
        meta.mnet = Some(net.config().clone());
        write_entries(&staging.join(MNET_FILE), &module_entries(net))?;
    }
    if let Some(adam) = optim {
        write_entries(&staging.join(OPTIM_FILE), &adam.export())?;
    }
    fs::write(staging.join(META_FILE), meta.render())?;
    if dir.exists() {
        let old = sibling(dir, "old");
        if old.exists() {
            fs::remove_dir_all(&old)?;
        }
        fs::rename(dir, &old)?;
        fs::rename(&staging, dir)?;
        fs::remove_dir_all(&old)?;
    } else {
        fs::rename(&staging, dir)?;
    }
    Ok(())
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    dir.with_file_name(format!(".{name}.{suffix}"))
}
