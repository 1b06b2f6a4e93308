//! Output directory handling: provenance stamps on every artifact and the
//! run manifest listing each artifact's SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ufloss::container::Container;

use crate::config::{hex, ExperimentConfig};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sha256: String,
    pub bytes: u64,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: BTreeMap<String, ManifestEntry>,
}

/// Provenance fields stamped into every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub command: String,
}

/// State shared by the commands of one invocation.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub command: String,
    manifest: Manifest,
}

impl Run {
    pub fn open(cfg: ExperimentConfig, command: &str) -> Result<Self> {
        fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
        let path = cfg.out.join(MANIFEST);
        let manifest = if path.exists() {
            serde_json::from_str(&fs::read_to_string(&path)?).with_context(|| format!("reading {}", path.display()))?
        } else {
            Manifest::default()
        };
        let hash = cfg.hash();
        Ok(Run { cfg, hash, command: command.to_string(), manifest })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.cfg.out.join(rel)
    }

    /// Path of an upstream artifact, or an error naming the missing file.
    pub fn require(&self, rel: &str) -> Result<PathBuf> {
        require(&self.path(rel))
    }

    pub fn provenance(&self) -> Provenance {
        Provenance { config_hash: self.hash.clone(), seed: self.cfg.seed, command: self.command.clone() }
    }

    pub fn stamp(&self) -> String {
        format!("config_hash={} seed={} command={}", self.hash, self.cfg.seed, self.command)
    }

    pub fn write_container(&mut self, path: &Path, mut c: Container) -> Result<()> {
        c.put_text("provenance", &serde_json::to_string(&self.provenance())?);
        self.write_bytes(path, |w| Ok(c.write_to(std::io::Cursor::new(w)).map(|_| ())?))
    }

    /// CSV with a `#` provenance comment line before the header.
    pub fn write_csv<S: Serialize>(&mut self, path: &Path, rows: &[S]) -> Result<()> {
        let stamp = self.stamp();
        self.write_bytes(path, |buf| {
            writeln!(buf, "# {stamp}")?;
            let mut w = csv::Writer::from_writer(buf);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
            Ok(())
        })
    }

    pub fn write_text(&mut self, path: &Path, text: &str) -> Result<()> {
        self.write_bytes(path, |buf| Ok(buf.write_all(text.as_bytes())?))
    }

    /// 8-bit RGB or grayscale PNG with provenance in text chunks.
    pub fn write_png(&mut self, path: &Path, (w, h): (usize, usize), rgb: bool, pixels: &[u8]) -> Result<()> {
        let prov = self.provenance();
        self.write_bytes(path, |buf| {
            let mut enc = png::Encoder::new(buf, w as u32, h as u32);
            enc.set_color(if rgb { png::ColorType::Rgb } else { png::ColorType::Grayscale });
            enc.set_depth(png::BitDepth::Eight);
            enc.add_text_chunk("config_hash".into(), prov.config_hash.clone())?;
            enc.add_text_chunk("seed".into(), prov.seed.to_string())?;
            enc.add_text_chunk("command".into(), prov.command.clone())?;
            enc.write_header()?.write_image_data(pixels)?;
            Ok(())
        })
    }

    fn write_bytes(&mut self, path: &Path, fill: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(path, &buf).with_context(|| format!("writing {}", path.display()))?;
        let key = match path.strip_prefix(&self.cfg.out) {
            Ok(rel) => rel.to_string_lossy().replace('\\', "/"),
            Err(_) => path.to_string_lossy().into_owned(),
        };
        log::info!("wrote {}", path.display());
        self.manifest.artifacts.insert(
            key,
            ManifestEntry {
                sha256: hex(&Sha256::digest(&buf)),
                bytes: buf.len() as u64,
                command: self.command.clone(),
                config_hash: self.hash.clone(),
                seed: self.cfg.seed,
            },
        );
        Ok(())
    }

    /// Writes the resolved config and the manifest.
    pub fn finish(mut self) -> Result<()> {
        let cfg_text = format!("# config_hash={} seed={}\n{}", self.hash, self.cfg.seed, self.cfg.to_toml());
        let cfg_path = self.path("config.toml");
        self.write_text(&cfg_path, &cfg_text)?;
        let path = self.path(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&self.manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

pub fn require(path: &Path) -> Result<PathBuf> {
    if !path.exists() {
        bail!("missing artifact: {}", path.display());
    }
    Ok(path.to_path_buf())
}

pub fn load_container(path: &Path) -> Result<Container> {
    Container::load(require(path)?).with_context(|| format!("loading {}", path.display()))
}

/// Reads a CSV written by [`Run::write_csv`].
pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(require(path)?)
        .with_context(|| format!("opening {}", path.display()))?;
    r.deserialize().collect::<std::result::Result<_, _>>().with_context(|| format!("reading {}", path.display()))
}
