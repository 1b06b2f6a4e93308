//! Experiment configuration: named profiles, TOML files and `--set` overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ufloss::cs_baseline::PicsConfig;
use ufloss::encode::MaskSpec;
use ufloss::featnet::{FeatNetConfig, FeatTrainConfig};
use ufloss::ufloss::UflossConfig;
use ufloss::unrolled::{UNetConfig, UnrollConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub height: usize,
    pub width: usize,
    pub coils: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatSection {
    pub network: FeatNetConfig,
    pub train: FeatTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// Test slices used by the perturbation, deblurring and correlation studies.
    pub phantoms: usize,
    pub noise_levels: Vec<f64>,
    pub noise_seeds: Vec<u64>,
    pub blur_factors: Vec<f64>,
    pub deblur_r0: f64,
    pub deblur_steps: usize,
    /// Fixed descent step; when absent one is picked from `deblur_candidates`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deblur_alpha: Option<f64>,
    pub deblur_candidates: Vec<f64>,
    pub deblur_probe_steps: usize,
    pub retrieve_queries: usize,
    pub retrieve_k: usize,
    pub correlate_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub mask: MaskSpec,
    pub featnet: FeatSection,
    pub unet: UNetConfig,
    pub unroll: UnrollConfig,
    pub ufloss: UflossConfig,
    pub pics: PicsConfig,
    pub studies: StudyConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Profile {
    Desk,
    Paper,
}

impl ExperimentConfig {
    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// 64x64 phantoms with small networks; a full run takes well under an hour on a CPU.
    pub fn desk() -> Self {
        let featnet = FeatNetConfig::desk();
        let patch = featnet.patch_size;
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("runs/desk"),
            data: DataConfig { train: 450, val: 50, test: 50, height: 64, width: 64, coils: 4 },
            mask: MaskSpec::Random1d { acceleration: 4.0, center_fraction: 0.08 },
            featnet: FeatSection {
                network: featnet,
                train: FeatTrainConfig { patch_size: patch, ..FeatTrainConfig::desk() },
            },
            unet: UNetConfig::desk(),
            unroll: UnrollConfig::desk(),
            ufloss: UflossConfig { patch_size: patch, ..UflossConfig::desk() },
            pics: PicsConfig::default(),
            studies: StudyConfig {
                phantoms: 10,
                noise_levels: (0..=10).map(|i| i as f64 * 0.01).collect(),
                noise_seeds: vec![1, 2, 3],
                blur_factors: vec![1.0, 1.5, 2.0, 3.0, 4.0],
                deblur_r0: 4.0,
                deblur_steps: 200,
                deblur_alpha: None,
                deblur_candidates: vec![0.03, 0.1, 0.3, 1.0, 3.0, 10.0],
                deblur_probe_steps: 200,
                retrieve_queries: 8,
                retrieve_k: 5,
                correlate_stride: 2,
            },
        }
    }

    /// Full-size networks on 320x320 slices.
    pub fn paper() -> Self {
        let featnet = FeatNetConfig::paper();
        let patch = featnet.patch_size;
        let mut cfg = Self::desk();
        cfg.out = PathBuf::from("runs/paper");
        cfg.data = DataConfig { train: 4000, val: 400, test: 400, height: 320, width: 320, coils: 8 };
        cfg.featnet = FeatSection {
            network: featnet,
            train: FeatTrainConfig { patch_size: patch, ..Default::default() },
        };
        cfg.unet = UNetConfig::paper();
        cfg.unroll = UnrollConfig::default();
        cfg.ufloss = UflossConfig { patch_size: patch, ..Default::default() };
        cfg.studies.retrieve_queries = 16;
        cfg.studies.correlate_stride = 4;
        cfg
    }

    /// Profile defaults, then the optional TOML file, then `key=value` overrides.
    pub fn resolve(profile: Profile, file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(Self::profile(profile)).context("serialising profile")?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let overlay: toml::Value =
                toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            merge(&mut value, overlay);
        }
        for s in sets {
            let (key, raw) = s.split_once('=').ok_or_else(|| anyhow!("--set expects key=value, got `{s}`"))?;
            set_path(&mut value, key.trim(), parse_literal(raw.trim()))?;
        }
        let cfg: Self = serde_path_to_error::deserialize(value.clone())
            .map_err(|e| anyhow!("config field `{}`: {}", e.path(), e.inner()))?;
        let canonical = toml::Value::try_from(&cfg).context("serialising config")?;
        if let Some(path) = first_unknown(&value, &canonical, "") {
            bail!("config field `{path}`: unknown field");
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.featnet.network.patch_size;
        if self.featnet.train.patch_size != p || self.ufloss.patch_size != p {
            bail!(
                "config field `ufloss.patch_size`: patch sizes disagree (network {p}, pretraining {}, loss {})",
                self.featnet.train.patch_size,
                self.ufloss.patch_size
            );
        }
        if p > self.data.height.min(self.data.width) {
            bail!("config field `featnet.network.patch_size`: {p} exceeds the image size");
        }
        if self.data.train == 0 || self.data.val == 0 || self.data.test == 0 {
            bail!("config field `data`: every split needs at least one slice");
        }
        if self.studies.phantoms == 0 || self.studies.phantoms > self.data.test {
            bail!("config field `studies.phantoms`: must lie in [1, data.test = {}]", self.data.test);
        }
        self.featnet.network.validate()?;
        self.featnet.train.validate()?;
        self.unroll.validate()?;
        self.ufloss.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// Hex SHA-256 of the canonical TOML form; the output directory is excluded
    /// so that moving a run does not change its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        hex(&Sha256::digest(c.to_toml().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    // Tagged enums are replaced whole so that a variant switch drops stale fields.
                    Some(slot) if slot.is_table() && v.is_table() && !v.as_table().unwrap().contains_key("type") => {
                        merge(slot, v)
                    }
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("--set key `{key}` has an empty component");
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let table = cur.as_table_mut().ok_or_else(|| anyhow!("config field `{key}`: `{p}` is not a table"))?;
        cur = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cur.as_table_mut().ok_or_else(|| anyhow!("config field `{key}`: parent is not a table"))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// First key present in `given` but dropped by the round trip through the schema.
fn first_unknown(given: &toml::Value, canonical: &toml::Value, prefix: &str) -> Option<String> {
    let (toml::Value::Table(g), toml::Value::Table(c)) = (given, canonical) else {
        return None;
    };
    for (k, v) in g {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match c.get(k) {
            None => return Some(path),
            Some(cv) => {
                if let Some(p) = first_unknown(v, cv, &path) {
                    return Some(p);
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use ufloss::ufloss::PixelReduction;

    #[test]
    fn profiles_round_trip_and_validate() {
        for p in [Profile::Desk, Profile::Paper] {
            let cfg = ExperimentConfig::resolve(p, None, &[]).unwrap();
            assert_eq!(cfg, ExperimentConfig::profile(p));
        }
    }

    #[test]
    fn overrides_apply_by_dot_path() {
        let sets = ["unroll.epochs=3".to_string(), "ufloss.mu=0.5".into(), "ufloss.pixel_reduction=sum".into()];
        let cfg = ExperimentConfig::resolve(Profile::Desk, None, &sets).unwrap();
        assert_eq!(cfg.unroll.epochs, 3);
        assert_eq!(cfg.ufloss.mu, 0.5);
        assert_eq!(cfg.ufloss.pixel_reduction, PixelReduction::Sum);
        assert_ne!(cfg.hash(), ExperimentConfig::desk().hash());
    }

    #[test]
    fn errors_name_the_field() {
        let e = ExperimentConfig::resolve(Profile::Desk, None, &["unroll.epochs=\"many\"".into()]).unwrap_err();
        assert!(e.to_string().contains("unroll.epochs"), "{e}");
        let e = ExperimentConfig::resolve(Profile::Desk, None, &["unet.depthh=3".into()]).unwrap_err();
        assert!(e.to_string().contains("unet.depthh"), "{e}");
        let e = ExperimentConfig::resolve(Profile::Desk, None, &["ufloss.patch_size=20".into()]).unwrap_err();
        assert!(e.to_string().contains("ufloss.patch_size"), "{e}");
    }

    #[test]
    fn mask_variant_can_be_switched() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[mask]\ntype = \"poisson\"\nacceleration = 4.0\ncalib = 8\n").unwrap();
        let cfg = ExperimentConfig::resolve(Profile::Desk, Some(&path), &[]).unwrap();
        assert_eq!(cfg.mask, MaskSpec::Poisson { acceleration: 4.0, calib: 8 });
    }

    #[test]
    fn output_directory_does_not_change_the_hash() {
        let mut a = ExperimentConfig::desk();
        a.out = "elsewhere".into();
        assert_eq!(a.hash(), ExperimentConfig::desk().hash());
    }
}
