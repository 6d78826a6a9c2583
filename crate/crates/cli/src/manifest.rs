//! Run manifests: everything needed to reproduce a run, written as
//! key = value text next to the run's outputs.

use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use hifi_core::kv::KvMap;
use hifi_core::model::HifiConfig;
use hifi_core::train::TrainConfig;

pub struct RunManifest {
    map: KvMap,
    started: Instant,
    inputs: usize,
    outputs: usize,
}

impl RunManifest {
    pub fn new(command: &str, started: Instant) -> Self {
        let mut map = KvMap::new();
        map.insert("command".into(), command.to_string());
        map.insert(
            "argv".into(),
            std::env::args().collect::<Vec<_>>().join(" "),
        );
        map.insert(
            "build".into(),
            format!("hifi {}", env!("CARGO_PKG_VERSION")),
        );
        map.insert(
            "timestamp_unix".into(),
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs().to_string())
                .unwrap_or_default(),
        );
        RunManifest {
            map,
            started,
            inputs: 0,
            outputs: 0,
        }
    }

    pub fn configs(&mut self, cfg: &HifiConfig, tcfg: &TrainConfig) {
        self.map.extend(cfg.to_kv());
        self.map.extend(tcfg.to_kv());
    }

    pub fn extra(&mut self, key: &str, value: impl Into<String>) {
        self.map.insert(key.replace('.', "_"), value.into());
    }

    /// Record a file path with its CRC32 so the exact inputs are pinned.
    pub fn input_file(&mut self, path: &Path) -> Result<()> {
        self.inputs += 1;
        let crc = if path.is_file() {
            let bytes =
                std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            format!("{:08x}", crc32fast::hash(&bytes))
        } else {
            "-".to_string()
        };
        self.map.insert(
            format!("inputs.{:03}", self.inputs),
            format!("{} crc32={crc}", path.display()),
        );
        Ok(())
    }

    pub fn output_file(&mut self, path: &Path) -> Result<()> {
        self.outputs += 1;
        let crc = if path.is_file() {
            let bytes =
                std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            format!("{:08x}", crc32fast::hash(&bytes))
        } else {
            "-".to_string()
        };
        self.map.insert(
            format!("outputs.{:03}", self.outputs),
            format!("{} crc32={crc}", path.display()),
        );
        Ok(())
    }

    pub fn write(mut self, path: &Path) -> Result<()> {
        self.map.insert(
            "duration_s".into(),
            format!("{:.3}", self.started.elapsed().as_secs_f64()),
        );
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)
                .with_context(|| format!("creating {}", dir.display()))?;
        }
        std::fs::write(path, hifi_core::kv::render(&self.map))
            .with_context(|| format!("writing {}", path.display()))
    }
}
