//! Run configuration: `key = value` lines with dotted section prefixes,
//! plus the metadata written next to every artifact.

use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricConfig;
use crate::model::ModelConfig;
use crate::numeric::SeededRng;
use crate::preference::DpoConfig;
use crate::sampler::SamplerConfig;
use crate::trainer::TrainConfig;
use crate::world::WorldParams;

pub const TOOL_VERSION: &str = concat!("dyadic-motion ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub clips: usize,
    pub frames: usize,
    /// Held-out clips used by `evaluate`, `stream` and `ablate`.
    pub eval_clips: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            clips: 16,
            frames: 300,
            eval_clips: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub world: WorldParams,
    pub codec: CodecConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub dpo: DpoConfig,
    pub metrics: MetricConfig,
}

/// Independent seed streams derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedStream {
    Data = 1,
    EvalData = 2,
    World = 3,
    Codec = 4,
    ModelInit = 5,
    TalkingInit = 6,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        toml::Value::try_from(self)
            .map_err(|e| Error::Config(format!("{e}; integers must fit in a signed 64-bit value")))?;
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate(&self.model)?;
        self.sampler.validate()?;
        self.dpo.validate()?;
        if self.codec.latent_dim != self.model.latent_dim {
            return Err(Error::Config(format!(
                "codec.latent_dim {} differs from model.latent_dim {}",
                self.codec.latent_dim, self.model.latent_dim
            )));
        }
        if self.model.audio_dim != crate::world::AUDIO_DIM {
            return Err(Error::Config(format!(
                "model.audio_dim must be {}",
                crate::world::AUDIO_DIM
            )));
        }
        if self.data.clips == 0 || self.data.eval_clips == 0 {
            return Err(Error::Config("data.clips and data.eval_clips must be positive".into()));
        }
        Ok(())
    }

    /// Every resolved key as one `a.b = value` line, sorted.
    pub fn to_text(&self) -> String {
        dotted(&toml::Value::try_from(self).expect("config serializes"))
    }

    /// FNV-1a hash of the resolved configuration text.
    pub fn digest(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }

    pub fn seed_for(&self, stream: SeedStream) -> u64 {
        SeededRng::new(self.seed).derive(stream as u64).next_u64()
    }

    /// Train config whose seed is mixed with the run seed.
    pub fn train_resolved(&self) -> TrainConfig {
        TrainConfig {
            seed: self.train.seed.wrapping_add(self.seed),
            ..self.train.clone()
        }
    }

    pub fn sampler_resolved(&self) -> SamplerConfig {
        SamplerConfig {
            seed: self.sampler.seed.wrapping_add(self.seed),
            ..self.sampler.clone()
        }
    }

    pub fn dpo_resolved(&self) -> DpoConfig {
        DpoConfig {
            seed: self.dpo.seed.wrapping_add(self.seed),
            ..self.dpo.clone()
        }
    }

    pub fn metrics_resolved(&self) -> MetricConfig {
        MetricConfig {
            seed: self.metrics.seed.wrapping_add(self.seed),
            ..self.metrics.clone()
        }
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn digest_hex(d: u64) -> String {
    format!("{d:016x}")
}

fn dotted(v: &toml::Value) -> String {
    fn walk(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
        match v {
            toml::Value::Table(t) => {
                for (k, x) in t {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&p, x, out);
                }
            }
            other => out.push(format!("{prefix} = {other}")),
        }
    }
    let mut lines = Vec::new();
    walk("", v, &mut lines);
    lines.sort();
    let mut s = lines.join("\n");
    s.push('\n');
    s
}

/// Sidecar describing an artifact: producing tool, config digest and, for
/// checkpoints, the configuration needed to rebuild the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactMeta {
    pub tool: String,
    pub digest: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codec: Option<CodecConfig>,
}

impl ArtifactMeta {
    pub fn new(kind: &str, digest: u64) -> Self {
        Self {
            tool: TOOL_VERSION.to_string(),
            digest: digest_hex(digest),
            kind: kind.to_string(),
            ref_digest: None,
            model: None,
            codec: None,
        }
    }

    pub fn path_for(artifact: &Path) -> PathBuf {
        let mut s = artifact.as_os_str().to_owned();
        s.push(".meta");
        PathBuf::from(s)
    }

    pub fn to_text(&self) -> String {
        dotted(&toml::Value::try_from(self).expect("meta serializes"))
    }

    pub fn write(&self, artifact: &Path) -> Result<()> {
        let p = Self::path_for(artifact);
        std::fs::write(&p, self.to_text()).map_err(|e| Error::io(p, e))
    }

    pub fn read(artifact: &Path) -> Result<Self> {
        let p = Self::path_for(artifact);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {}", p.display(), e.message())))
    }

    /// Errors unless the artifact was produced under `digest` (or `force`).
    pub fn check(&self, digest: u64, force: bool) -> Result<()> {
        if force || self.digest == digest_hex(digest) {
            Ok(())
        } else {
            Err(Error::Mismatch(format!(
                "{} artifact has config digest {}, current config is {}",
                self.kind,
                self.digest,
                digest_hex(digest)
            )))
        }
    }
}
