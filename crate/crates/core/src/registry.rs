//! Versioned model cards stored as a plain directory tree:
//! `<root>/<name>/<version>/card` (canonical JSON) and `checksum` (SHA-256 hex).

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pipeline::backend::BackendDescriptor;
use crate::pipeline::gate::Rate;
use crate::pipeline::transform::{chain_output, TransformKind};
use crate::shm::validate_name;
use crate::tensor_arena::{DType, TensorSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CardKind {
    Foundation,
    Head,
}

/// A registered model. For a head, `input_specs` is its subscription to the
/// foundation's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub name: String,
    /// 0 on registration means "latest + 1".
    #[serde(default)]
    pub version: u64,
    pub kind: CardKind,
    pub input_specs: Vec<TensorSpec>,
    pub output_specs: Vec<TensorSpec>,
    pub backend: BackendDescriptor,
    #[serde(default = "unlimited")]
    pub default_rate: Rate,
    #[serde(default)]
    pub preprocess: Vec<TransformKind>,
    #[serde(default)]
    pub postprocess: Vec<TransformKind>,
    /// Digest of the canonical body; never part of the body itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
}

fn unlimited() -> Rate {
    Rate::Unlimited
}

impl ModelCard {
    pub fn validate(&self) -> Result<()> {
        validate_name("card", &self.name)?;
        if self.input_specs.is_empty() || self.output_specs.is_empty() {
            return Err(Error::Config(format!("card {}: empty input or output specs", self.name)));
        }
        for specs in [&self.input_specs, &self.output_specs] {
            for (i, s) in specs.iter().enumerate() {
                s.validate()?;
                if specs[..i].iter().any(|o| o.label == s.label) {
                    return Err(Error::Config(format!("card {}: duplicate label {}", self.name, s.label)));
                }
            }
        }
        self.backend.validate()?;
        self.default_rate.validate()?;
        self.model_input_specs()?;
        self.published_specs()?;
        Ok(())
    }

    /// Specs the backend receives, after preprocessing.
    pub fn model_input_specs(&self) -> Result<Vec<TensorSpec>> {
        chain_output(&self.preprocess, &self.input_specs)
    }

    /// Specs the worker publishes, after postprocessing.
    pub fn published_specs(&self) -> Result<Vec<TensorSpec>> {
        chain_output(&self.postprocess, &self.output_specs)
    }

    pub fn subscribed_labels(&self) -> Vec<&str> {
        self.input_specs.iter().map(|s| s.label.as_str()).collect()
    }

    /// Canonical body: JSON with recursively sorted keys, checksum excluded.
    pub fn canonical_body(&self) -> Result<Vec<u8>> {
        let mut body = self.clone();
        body.checksum = None;
        let value = serde_json::to_value(&body).map_err(|e| Error::CorruptCard(e.to_string()))?;
        serde_json::to_vec(&sorted(value)).map_err(|e| Error::CorruptCard(e.to_string()))
    }

    pub fn compute_checksum(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_body()?)))
    }

    pub fn from_body(body: &[u8]) -> Result<ModelCard> {
        serde_json::from_slice(body).map_err(|e| Error::CorruptCard(e.to_string()))
    }
}

/// Rebuilds every object with keys in byte order, whatever map type
/// serde_json was built with.
fn sorted(value: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sorted(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sorted).collect()),
        other => other,
    }
}

#[derive(Clone, Debug)]
pub struct Registry {
    root: PathBuf,
}

impl Registry {
    pub fn open(root: impl Into<PathBuf>) -> Result<Registry> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Registry { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn version_dir(&self, name: &str, version: u64) -> PathBuf {
        self.root.join(name).join(version.to_string())
    }

    /// Stores the card and returns its version. A card carrying a checksum
    /// must match its own body.
    pub fn register(&self, card: &ModelCard) -> Result<u64> {
        card.validate()?;
        if let Some(sum) = &card.checksum {
            let actual = card.compute_checksum()?;
            if !sum.eq_ignore_ascii_case(&actual) {
                return Err(Error::CorruptCard(format!(
                    "{}: checksum {sum} does not match body ({actual})",
                    card.name
                )));
            }
        }
        let mut stored = card.clone();
        if stored.version == 0 {
            stored.version = self.versions(&card.name)?.last().copied().unwrap_or(0) + 1;
        }
        stored.checksum = None;
        let dir = self.version_dir(&stored.name, stored.version);
        if dir.exists() {
            return Err(Error::AlreadyExists(format!("{}@{}", stored.name, stored.version)));
        }
        let body = stored.canonical_body()?;
        let sum = hex::encode(Sha256::digest(&body));

        let parent = self.root.join(&stored.name);
        fs::create_dir_all(&parent)?;
        let tmp = parent.join(format!(".tmp-{}-{}", stored.version, std::process::id()));
        let _ = fs::remove_dir_all(&tmp);
        fs::create_dir(&tmp)?;
        fs::write(tmp.join("card"), &body)?;
        fs::write(tmp.join("checksum"), format!("{sum}\n"))?;
        match fs::rename(&tmp, &dir) {
            Ok(()) => Ok(stored.version),
            Err(e) => {
                let _ = fs::remove_dir_all(&tmp);
                if dir.exists() {
                    Err(Error::AlreadyExists(format!("{}@{}", stored.name, stored.version)))
                } else {
                    Err(e.into())
                }
            }
        }
    }

    pub fn versions(&self, name: &str) -> Result<Vec<u64>> {
        let entries = match fs::read_dir(self.root.join(name)) {
            Ok(e) => e,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut versions: Vec<u64> = entries
            .filter_map(|e| e.ok()?.file_name().to_str()?.parse().ok())
            .collect();
        versions.sort_unstable();
        Ok(versions)
    }

    /// Stored body bytes, verified against the stored checksum.
    pub fn body(&self, name: &str, version: u64) -> Result<Vec<u8>> {
        let dir = self.version_dir(name, version);
        let body = fs::read(dir.join("card")).map_err(|e| match e.kind() {
            ErrorKind::NotFound => Error::NotFound(format!("card {name}@{version}")),
            _ => e.into(),
        })?;
        let stored = fs::read_to_string(dir.join("checksum"))
            .map_err(|e| Error::CorruptCard(format!("{name}@{version}: checksum unreadable: {e}")))?;
        let actual = hex::encode(Sha256::digest(&body));
        if stored.trim() != actual {
            return Err(Error::CorruptCard(format!("{name}@{version}: checksum mismatch")));
        }
        Ok(body)
    }

    /// `version` of `None` means latest.
    pub fn get(&self, name: &str, version: Option<u64>) -> Result<ModelCard> {
        let version = match version {
            Some(v) => v,
            None => *self
                .versions(name)?
                .last()
                .ok_or_else(|| Error::NotFound(format!("card {name}")))?,
        };
        let body = self.body(name, version)?;
        let mut card = ModelCard::from_body(&body)?;
        card.checksum = Some(hex::encode(Sha256::digest(&body)));
        Ok(card)
    }

    /// Resolves `name`, `name@latest` or `name@<version>`.
    pub fn resolve(&self, reference: &str) -> Result<ModelCard> {
        match reference.split_once('@') {
            None => self.get(reference, None),
            Some((name, "latest")) => self.get(name, None),
            Some((name, v)) => {
                let v = v
                    .parse()
                    .map_err(|_| Error::Config(format!("bad card reference {reference:?}")))?;
                self.get(name, Some(v))
            }
        }
    }

    /// All card names with their versions, sorted by name.
    pub fn list(&self) -> Result<Vec<(String, Vec<u64>)>> {
        let mut names: Vec<String> = fs::read_dir(&self.root)?
            .filter_map(|e| {
                let e = e.ok()?;
                let name = e.file_name().to_str()?.to_string();
                (e.file_type().ok()?.is_dir() && !name.starts_with('.')).then_some(name)
            })
            .collect();
        names.sort();
        names
            .into_iter()
            .map(|n| {
                let v = self.versions(&n)?;
                Ok((n, v))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mismatch {
    MissingLabel,
    Dtype { expected: DType, found: DType },
    Dims { expected: Vec<usize>, found: Vec<usize> },
    NotAHead,
    NotAFoundation,
}

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mismatch::MissingLabel => f.write_str("missing label"),
            Mismatch::Dtype { expected, found } => {
                write!(f, "dtype mismatch: head expects {expected:?}, foundation emits {found:?}")
            }
            Mismatch::Dims { expected, found } => {
                write!(f, "dims mismatch: head expects {expected:?}, foundation emits {found:?}")
            }
            Mismatch::NotAHead => f.write_str("card is not a head"),
            Mismatch::NotAFoundation => f.write_str("foundation card is not a foundation"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LabelCheck {
    pub label: String,
    pub mismatch: Option<Mismatch>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct HeadReport {
    pub head: String,
    pub labels: Vec<LabelCheck>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DeploymentReport {
    pub foundation: String,
    pub heads: Vec<HeadReport>,
}

impl DeploymentReport {
    pub fn mismatches(&self) -> impl Iterator<Item = (&str, &str, &Mismatch)> {
        self.heads.iter().flat_map(|h| {
            h.labels
                .iter()
                .filter_map(move |l| l.mismatch.as_ref().map(|m| (h.head.as_str(), l.label.as_str(), m)))
        })
    }

    pub fn is_valid(&self) -> bool {
        self.mismatches().next().is_none()
    }

    /// The first mismatch as a config error, if any.
    pub fn into_result(self) -> Result<()> {
        match self.mismatches().next() {
            None => Ok(()),
            Some((head, label, m)) => Err(Error::Config(format!("head {head}, label {label}: {m}"))),
        }
    }
}

/// Checks every head's subscription against the foundation's published
/// outputs. Mismatches are report entries, never errors.
pub fn validate_deployment(fm: &ModelCard, heads: &[ModelCard]) -> DeploymentReport {
    let published = fm.published_specs().unwrap_or_else(|_| fm.output_specs.clone());
    let heads = heads
        .iter()
        .map(|head| {
            let mut labels: Vec<LabelCheck> = head
                .input_specs
                .iter()
                .map(|want| {
                    let mismatch = match published.iter().find(|s| s.label == want.label) {
                        None => Some(Mismatch::MissingLabel),
                        Some(have) if have.dtype != want.dtype => Some(Mismatch::Dtype {
                            expected: want.dtype,
                            found: have.dtype,
                        }),
                        Some(have) if have.dims != want.dims => Some(Mismatch::Dims {
                            expected: want.dims.clone(),
                            found: have.dims.clone(),
                        }),
                        Some(_) => None,
                    };
                    LabelCheck { label: want.label.clone(), mismatch }
                })
                .collect();
            if head.kind != CardKind::Head {
                labels.push(LabelCheck { label: "*".into(), mismatch: Some(Mismatch::NotAHead) });
            }
            if fm.kind != CardKind::Foundation {
                labels.push(LabelCheck { label: "*".into(), mismatch: Some(Mismatch::NotAFoundation) });
            }
            HeadReport { head: head.name.clone(), labels }
        })
        .collect();
    DeploymentReport { foundation: fm.name.clone(), heads }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(label: &str, dtype: DType, dims: &[usize]) -> TensorSpec {
        TensorSpec::new(label, dtype, dims).unwrap()
    }

    fn fm() -> ModelCard {
        ModelCard {
            name: "fm".into(),
            version: 0,
            kind: CardKind::Foundation,
            input_specs: vec![spec("image", DType::U8, &[36, 64, 3])],
            output_specs: ["final", "layer3", "layer6", "layer9"]
                .iter()
                .map(|l| spec(l, DType::F32, &[16, 24]))
                .collect(),
            backend: BackendDescriptor::synthetic(1.0, 0.0),
            default_rate: Rate::Unlimited,
            preprocess: vec![TransformKind::CastDType { to: DType::F32 }],
            postprocess: vec![],
            checksum: None,
        }
    }

    fn head(name: &str, subs: Vec<TensorSpec>) -> ModelCard {
        ModelCard {
            name: name.into(),
            version: 0,
            kind: CardKind::Head,
            input_specs: subs,
            output_specs: vec![spec("out", DType::F32, &[8])],
            backend: BackendDescriptor::synthetic(1.0, 0.0),
            default_rate: Rate::Hz(10.0),
            preprocess: vec![],
            postprocess: vec![],
            checksum: None,
        }
    }

    #[test]
    fn register_and_fetch_latest() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path()).unwrap();
        assert_eq!(reg.register(&fm()).unwrap(), 1);
        assert_eq!(reg.register(&fm()).unwrap(), 2);
        let latest = reg.resolve("fm@latest").unwrap();
        assert_eq!(latest.version, 2);
        assert_eq!(reg.resolve("fm@1").unwrap().version, 1);
        assert_eq!(reg.list().unwrap(), vec![("fm".to_string(), vec![1, 2])]);
        assert!(matches!(reg.resolve("nope"), Err(Error::NotFound(_))));
    }

    #[test]
    fn duplicate_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path()).unwrap();
        let mut card = fm();
        card.version = 3;
        reg.register(&card).unwrap();
        assert!(matches!(reg.register(&card), Err(Error::AlreadyExists(_))));
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path()).unwrap();
        let v = reg.register(&fm()).unwrap();
        let body = reg.body("fm", v).unwrap();
        let card = reg.get("fm", Some(v)).unwrap();
        assert_eq!(card.canonical_body().unwrap(), body);
        assert_eq!(card.checksum.unwrap(), hex::encode(Sha256::digest(&body)));
    }

    #[test]
    fn checksum_mismatch_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path()).unwrap();
        let mut card = fm();
        card.checksum = Some("00".repeat(32));
        assert!(matches!(reg.register(&card), Err(Error::CorruptCard(_))));

        card.checksum = None;
        let v = reg.register(&card).unwrap();
        fs::write(dir.path().join("fm").join(v.to_string()).join("card"), b"{}").unwrap();
        assert!(matches!(reg.get("fm", Some(v)), Err(Error::CorruptCard(_))));
    }

    #[test]
    fn canonical_body_has_sorted_keys() {
        let body = String::from_utf8(fm().canonical_body().unwrap()).unwrap();
        assert!(body.starts_with(r#"{"backend":{"busy_ms":"#), "{body}");
        let keys = ["default_rate", "input_specs", "name", "output_specs", "postprocess", "preprocess", "version"];
        let positions: Vec<usize> = keys.iter().map(|k| body.find(&format!("\"{k}\":")).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{body}");
        assert!(body.contains(r#"{"dims":[36,64,3],"dtype":"u8","label":"image"}"#), "{body}");
        assert!(!body.contains("checksum"));
    }

    #[test]
    fn deployment_validation() {
        let fm = fm();
        let all: Vec<TensorSpec> = fm.output_specs.clone();
        let depth = head("depth", all);
        assert!(validate_deployment(&fm, &[depth]).is_valid());

        let missing = head("m", vec![spec("layer12", DType::F32, &[16, 24])]);
        let report = validate_deployment(&fm, &[missing]);
        let (_, label, m) = report.mismatches().next().unwrap();
        assert_eq!((label, m), ("layer12", &Mismatch::MissingLabel));
        assert_eq!(m.to_string(), "missing label");

        let mut fm16 = fm.clone();
        fm16.output_specs[0].dtype = DType::F16Raw;
        let report = validate_deployment(&fm16, &[head("d", vec![spec("final", DType::F32, &[16, 24])])]);
        assert!(matches!(
            report.mismatches().next().unwrap().2,
            Mismatch::Dtype { expected: DType::F32, found: DType::F16Raw }
        ));

        let report = validate_deployment(&fm, &[head("d", vec![spec("final", DType::F32, &[24, 16])])]);
        assert!(matches!(report.mismatches().next().unwrap().2, Mismatch::Dims { .. }));
        assert!(report.into_result().is_err());
    }

    #[test]
    fn malformed_cards_are_rejected() {
        let mut card = fm();
        card.preprocess = vec![TransformKind::Reshape { dims: vec![7] }];
        assert!(card.validate().is_err());
        let mut card = fm();
        card.name = "bad name".into();
        assert!(card.validate().is_err());
    }
}
