//! Engine configuration (TOML) and its resolution against the registry.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channels::{ChannelMode, ChannelSpec};
use crate::error::{Error, Result};
use crate::pipeline::gate::Rate;
use crate::registry::{validate_deployment, CardKind, ModelCard, Registry};
use crate::shm::validate_name;
use crate::tensor_arena::{DType, TensorSpec};

pub const INPUT_LABEL: &str = "image";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    /// Frames per second; 0 paces frames only by lockstep or as fast as possible.
    pub rate_hz: f64,
    /// `[width, height]` of the synthetic U8 RGB frames.
    pub resolution: [usize; 2],
    /// Total frames to emit; absent means unbounded.
    #[serde(default)]
    pub frames: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    /// One of `input`, `middle`, `output` (the template for every head's output).
    pub name: String,
    pub mode: ChannelMode,
    pub capacity: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Card reference: `name`, `name@latest` or `name@<version>`.
    pub card: String,
    /// Worker name; defaults to the card name.
    #[serde(default)]
    pub name: Option<String>,
    /// Initial rate; defaults to the card's `default_rate`.
    #[serde(default)]
    pub rate_hz: Option<Rate>,
}

impl HeadConfig {
    pub fn worker_name(&self) -> &str {
        self.name
            .as_deref()
            .unwrap_or_else(|| self.card.split('@').next().unwrap_or(&self.card))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    /// Shared-memory namespace; empty picks a fresh one per run.
    #[serde(default)]
    pub namespace: String,
    /// Registry directory, relative to the config file.
    pub registry: PathBuf,
    pub input: InputConfig,
    #[serde(default)]
    pub channels: Vec<ChannelConfig>,
    pub foundation: String,
    pub heads: Vec<HeadConfig>,
    /// Merged per-frame metrics CSV, relative to the config file.
    #[serde(default)]
    pub metrics_path: Option<PathBuf>,
    /// Respawn failed workers (at most 3 per worker per minute).
    #[serde(default)]
    pub restart_policy: bool,
}

impl EngineConfig {
    pub fn parse(text: &str) -> Result<EngineConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<EngineConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.registry.is_relative() {
            cfg.registry = base.join(&cfg.registry);
        }
        if let Some(m) = cfg.metrics_path.as_mut() {
            if m.is_relative() {
                *m = base.join(&*m);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn input_spec(&self) -> Result<TensorSpec> {
        let [w, h] = self.input.resolution;
        TensorSpec::new(INPUT_LABEL, DType::U8, &[h, w, 3])
    }

    fn channel(&self, name: &str, default_mode: ChannelMode, default_capacity: u32) -> (ChannelMode, u32) {
        self.channels
            .iter()
            .find(|c| c.name == name)
            .map(|c| (c.mode, c.capacity))
            .unwrap_or((default_mode, default_capacity))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.namespace.is_empty() {
            validate_name("namespace", &self.namespace)?;
        }
        if !(self.input.rate_hz.is_finite() && self.input.rate_hz >= 0.0) {
            return Err(Error::Config(format!("input.rate_hz must be >= 0, got {}", self.input.rate_hz)));
        }
        if self.input.resolution.contains(&0) {
            return Err(Error::Config("input.resolution must be non-zero".into()));
        }
        for c in &self.channels {
            if !matches!(c.name.as_str(), "input" | "middle" | "output") {
                return Err(Error::Config(format!("unknown channel {:?}", c.name)));
            }
            if c.capacity < 2 {
                return Err(Error::Config(format!("channel {}: capacity must be >= 2", c.name)));
            }
        }
        if self.heads.is_empty() {
            return Err(Error::Config("no heads configured".into()));
        }
        for (i, h) in self.heads.iter().enumerate() {
            validate_name("head", h.worker_name())?;
            if matches!(h.worker_name(), "source" | "foundation") {
                return Err(Error::Config(format!("head name {:?} is reserved", h.worker_name())));
            }
            if self.heads[..i].iter().any(|o| o.worker_name() == h.worker_name()) {
                return Err(Error::Config(format!("duplicate head {}", h.worker_name())));
            }
            if let Some(r) = h.rate_hz {
                r.validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadDeployment {
    pub name: String,
    pub card: ModelCard,
    pub rate: Rate,
    pub output: ChannelSpec,
}

/// A configuration with every card resolved and every channel spec derived.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub config: EngineConfig,
    pub foundation: ModelCard,
    pub input: ChannelSpec,
    pub middle: ChannelSpec,
    pub heads: Vec<HeadDeployment>,
}

impl Deployment {
    pub fn resolve(config: &EngineConfig) -> Result<Deployment> {
        config.validate()?;
        let registry = Registry::open(&config.registry)?;
        let lookup = |r: &str| {
            registry.resolve(r).map_err(|e| match e {
                Error::NotFound(_) => Error::Config(format!("unknown card {r}")),
                other => other,
            })
        };
        let fm = lookup(&config.foundation)?;
        let heads = config
            .heads
            .iter()
            .map(|h| lookup(&h.card))
            .collect::<Result<Vec<_>>>()?;
        Self::from_cards(config, fm, heads)
    }

    /// Builds a deployment from cards already in hand, in config head order.
    pub fn from_cards(config: &EngineConfig, fm: ModelCard, heads: Vec<ModelCard>) -> Result<Deployment> {
        config.validate()?;
        if heads.len() != config.heads.len() {
            return Err(Error::Config("one card per configured head is required".into()));
        }
        fm.validate()?;
        if fm.kind != CardKind::Foundation {
            return Err(Error::Config(format!("card {} is not a foundation", fm.name)));
        }
        let input_spec = config.input_spec()?;
        if fm.input_specs.len() != 1 || fm.input_specs[0] != input_spec {
            return Err(Error::Config(format!(
                "foundation {} expects {:?}, input source produces {:?}",
                fm.name, fm.input_specs, input_spec
            )));
        }
        for h in &heads {
            h.validate()?;
        }
        validate_deployment(&fm, &heads).into_result()?;

        let (in_mode, in_cap) = config.channel("input", ChannelMode::Latest, 4);
        let (mid_mode, mid_cap) = config.channel("middle", ChannelMode::Latest, heads.len() as u32 + 2);
        let (out_mode, out_cap) = config.channel("output", ChannelMode::Fifo, 64);
        let input = ChannelSpec {
            name: "input".into(),
            mode: in_mode,
            capacity: in_cap,
            specs: vec![input_spec],
        };
        let middle = ChannelSpec {
            name: "middle".into(),
            mode: mid_mode,
            capacity: mid_cap,
            specs: fm.published_specs()?,
        };
        input.validate()?;
        middle.validate()?;
        let heads = config
            .heads
            .iter()
            .zip(heads)
            .map(|(hc, card)| {
                let name = hc.worker_name().to_string();
                let output = ChannelSpec {
                    name: format!("output-{name}"),
                    mode: out_mode,
                    capacity: out_cap,
                    specs: card.published_specs()?,
                };
                output.validate()?;
                Ok(HeadDeployment {
                    rate: hc.rate_hz.unwrap_or(card.default_rate),
                    name,
                    card,
                    output,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Deployment {
            config: config.clone(),
            foundation: fm,
            input,
            middle,
            heads,
        })
    }

    pub fn head(&self, name: &str) -> Option<&HeadDeployment> {
        self.heads.iter().find(|h| h.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
namespace = "demo"
registry = "registry"
foundation = "fm@latest"
metrics_path = "metrics.csv"

[input]
rate_hz = 30.0
resolution = [640, 360]
frames = 300

[[channels]]
name = "middle"
mode = "latest"
capacity = 6

[[heads]]
card = "depth"
rate_hz = 15

[[heads]]
card = "det@2"
name = "detection"
rate_hz = "unlimited"
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = EngineConfig::parse(SAMPLE).unwrap();
        assert_eq!(cfg.input.resolution, [640, 360]);
        assert_eq!(cfg.heads[0].worker_name(), "depth");
        assert_eq!(cfg.heads[1].worker_name(), "detection");
        assert_eq!(cfg.heads[0].rate_hz, Some(Rate::Hz(15.0)));
        assert_eq!(cfg.heads[1].rate_hz, Some(Rate::Unlimited));
        assert_eq!(cfg.input_spec().unwrap().dims, vec![360, 640, 3]);
        assert_eq!(cfg.channel("middle", ChannelMode::Fifo, 2), (ChannelMode::Latest, 6));
        assert_eq!(cfg.channel("output", ChannelMode::Fifo, 64), (ChannelMode::Fifo, 64));
        cfg.validate().unwrap();
        let again = EngineConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn load_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config");
        std::fs::write(&path, SAMPLE).unwrap();
        let cfg = EngineConfig::load(&path).unwrap();
        assert_eq!(cfg.registry, dir.path().join("registry"));
        assert_eq!(cfg.metrics_path.unwrap(), dir.path().join("metrics.csv"));
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            SAMPLE.replace("capacity = 6", "capacity = 1"),
            SAMPLE.replace("card = \"depth\"", "card = \"depth\"\nname = \"detection\""),
            SAMPLE.replace("rate_hz = 15", "rate_hz = 0"),
            SAMPLE.replace("name = \"middle\"", "name = \"sideways\""),
            SAMPLE.replace("resolution = [640, 360]", "resolution = [0, 360]"),
            SAMPLE.replace("frames = 300", "frames = 300\nbogus = 1"),
        ];
        for text in bad {
            let err = EngineConfig::parse(&text).and_then(|c| c.validate());
            assert!(matches!(err, Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn unknown_card_names_the_card() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = EngineConfig::parse(SAMPLE).unwrap();
        cfg.registry = dir.path().to_path_buf();
        match Deployment::resolve(&cfg) {
            Err(Error::Config(m)) => assert!(m.contains("fm@latest"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
