//! Demo topology: one foundation with four feature labels and the depth,
//! segmentation and detection heads, plus light variants for benchmarks.

use std::path::PathBuf;

use crate::control::config::{EngineConfig, HeadConfig, InputConfig};
use crate::error::{Error, Result};
use crate::pipeline::backend::BackendDescriptor;
use crate::pipeline::gate::Rate;
use crate::pipeline::transform::TransformKind;
use crate::registry::{CardKind, ModelCard, Registry};
use crate::tensor_arena::{DType, TensorSpec};

pub const FOUNDATION: &str = "fm";
pub const FM_LABELS: [&str; 4] = ["final", "layer3", "layer6", "layer9"];
pub const DEMO_RESOLUTION: [usize; 2] = [640, 360];
pub const DEMO_FEATURES: [usize; 2] = [64, 96];

pub fn spec(label: &str, dtype: DType, dims: &[usize]) -> TensorSpec {
    TensorSpec::new(label, dtype, dims).expect("static spec")
}

/// Foundation over U8 RGB frames of `[width, height]`, emitting every
/// `FM_LABELS` entry as F32 `features`.
pub fn foundation_card(resolution: [usize; 2], features: [usize; 2], backend: BackendDescriptor) -> ModelCard {
    let [w, h] = resolution;
    ModelCard {
        name: FOUNDATION.into(),
        version: 0,
        kind: CardKind::Foundation,
        input_specs: vec![spec("image", DType::U8, &[h, w, 3])],
        output_specs: FM_LABELS.iter().map(|l| spec(l, DType::F32, &features)).collect(),
        backend,
        default_rate: Rate::Unlimited,
        preprocess: vec![
            TransformKind::CastDType { to: DType::F32 },
            TransformKind::NormalizeAffine {
                scale: vec![1.0 / 255.0],
                offset: vec![0.0],
            },
        ],
        postprocess: vec![],
        checksum: None,
    }
}

/// Head subscribing to `labels` of a foundation with `features`.
pub fn head_card(name: &str, labels: &[&str], features: [usize; 2], backend: BackendDescriptor) -> ModelCard {
    ModelCard {
        name: name.into(),
        version: 0,
        kind: CardKind::Head,
        input_specs: labels.iter().map(|l| spec(l, DType::F32, &features)).collect(),
        output_specs: vec![spec("out", DType::F32, &[features[0], 4])],
        backend,
        default_rate: Rate::Unlimited,
        preprocess: vec![],
        postprocess: vec![],
        checksum: None,
    }
}

fn synthetic(busy_ms: f64, idle_ms: f64, seed: u64) -> BackendDescriptor {
    BackendDescriptor::Synthetic {
        busy_ms,
        idle_ms,
        jitter_pct: 5.0,
        seed,
        fail_every: 0,
    }
}

/// The four demo cards: `fm`, `depth`, `segmentation`, `detection`.
pub fn demo_cards() -> Vec<ModelCard> {
    vec![
        foundation_card(DEMO_RESOLUTION, DEMO_FEATURES, synthetic(8.0, 0.0, 1)),
        head_card("depth", &FM_LABELS, DEMO_FEATURES, synthetic(20.0, 0.0, 2)),
        head_card("segmentation", &["final"], DEMO_FEATURES, synthetic(18.0, 0.0, 3)),
        head_card("detection", &["final"], DEMO_FEATURES, synthetic(4.0, 28.0, 4)),
    ]
}

/// Registers every demo card missing from `registry`.
pub fn register_demo(registry: &Registry) -> Result<()> {
    for card in demo_cards() {
        if registry.versions(&card.name)?.is_empty() {
            registry.register(&card)?;
        }
    }
    Ok(())
}

pub fn demo_config(registry: impl Into<PathBuf>) -> EngineConfig {
    EngineConfig {
        namespace: String::new(),
        registry: registry.into(),
        input: InputConfig {
            rate_hz: 30.0,
            resolution: DEMO_RESOLUTION,
            frames: Some(300),
        },
        channels: Vec::new(),
        foundation: format!("{FOUNDATION}@latest"),
        heads: ["depth", "segmentation", "detection"]
            .iter()
            .map(|h| HeadConfig {
                card: format!("{h}@latest"),
                name: None,
                rate_hz: None,
            })
            .collect(),
        metrics_path: Some(PathBuf::from("metrics.csv")),
        restart_policy: false,
    }
}

/// Small frames and features so transport cost stays far below backend cost.
pub const LIGHT_RESOLUTION: [usize; 2] = [64, 48];
pub const LIGHT_FEATURES: [usize; 2] = [8, 32];

/// A card-free topology description used by the benchmarks.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub fm: BackendDescriptor,
    /// `(name, subscribed labels, backend, rate)` per head.
    pub heads: Vec<(String, Vec<String>, BackendDescriptor, Rate)>,
}

impl Topology {
    /// `n` identical heads named `h0..`, each subscribing to `final`.
    pub fn uniform(fm: BackendDescriptor, head: BackendDescriptor, n: usize, rate: Rate) -> Topology {
        Topology {
            fm,
            heads: (0..n)
                .map(|i| (format!("h{i}"), vec!["final".to_string()], head.clone(), rate))
                .collect(),
        }
    }

    /// The demo head set (depth on all labels, the others on `final`) with
    /// the given backends.
    pub fn demo_shape(fm: BackendDescriptor, head: BackendDescriptor, rate: Rate) -> Topology {
        let all: Vec<String> = FM_LABELS.iter().map(|s| s.to_string()).collect();
        let fin = vec!["final".to_string()];
        Topology {
            fm,
            heads: vec![
                ("depth".into(), all, head.clone(), rate),
                ("segmentation".into(), fin.clone(), head.clone(), rate),
                ("detection".into(), fin, head, rate),
            ],
        }
    }

    pub fn cards(&self) -> (ModelCard, Vec<ModelCard>) {
        let fm = foundation_card(LIGHT_RESOLUTION, LIGHT_FEATURES, self.fm.clone());
        let heads = self
            .heads
            .iter()
            .map(|(name, labels, backend, _)| {
                let labels: Vec<&str> = labels.iter().map(String::as_str).collect();
                head_card(name, &labels, LIGHT_FEATURES, backend.clone())
            })
            .collect();
        (fm, heads)
    }

    /// Engine config for this topology; cards are supplied directly, so the
    /// registry path is unused.
    pub fn config(&self, rate_hz: f64, frames: Option<u64>) -> EngineConfig {
        EngineConfig {
            namespace: String::new(),
            registry: PathBuf::new(),
            input: InputConfig {
                rate_hz,
                resolution: LIGHT_RESOLUTION,
                frames,
            },
            channels: Vec::new(),
            foundation: FOUNDATION.into(),
            heads: self
                .heads
                .iter()
                .map(|(name, _, _, rate)| HeadConfig {
                    card: name.clone(),
                    name: None,
                    rate_hz: Some(*rate),
                })
                .collect(),
            metrics_path: None,
            restart_policy: false,
        }
    }

    pub fn deployment(&self, rate_hz: f64, frames: Option<u64>) -> Result<crate::control::config::Deployment> {
        if self.heads.is_empty() {
            return Err(Error::Config("topology without heads".into()));
        }
        let (fm, heads) = self.cards();
        crate::control::config::Deployment::from_cards(&self.config(rate_hz, frames), fm, heads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::validate_deployment;

    #[test]
    fn demo_cards_form_a_valid_deployment() {
        let cards = demo_cards();
        let report = validate_deployment(&cards[0], &cards[1..]);
        assert!(report.is_valid(), "{report:?}");
        assert_eq!(cards[0].output_specs.len(), 4);
    }

    #[test]
    fn demo_registers_once_and_resolves() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path()).unwrap();
        register_demo(&reg).unwrap();
        register_demo(&reg).unwrap();
        assert_eq!(reg.versions("depth").unwrap(), vec![1]);
        let cfg = demo_config(dir.path());
        let dep = crate::control::config::Deployment::resolve(&cfg).unwrap();
        assert_eq!(dep.heads.len(), 3);
        assert_eq!(dep.middle.specs.len(), 4);
    }

    #[test]
    fn topology_deployment() {
        let t = Topology::uniform(BackendDescriptor::synthetic(1.0, 0.0), BackendDescriptor::synthetic(0.5, 0.0), 8, Rate::Unlimited);
        let dep = t.deployment(0.0, Some(10)).unwrap();
        assert_eq!(dep.heads.len(), 8);
        assert_eq!(dep.middle.capacity, 10);
    }
}
