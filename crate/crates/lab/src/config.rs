//! Experiment configuration: one JSON document, every field defaulted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use tdaa_core::attack::{Criterion, DEFAULT_EPSILON};
use tdaa_core::pretrain::PretrainMethod;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
}

impl ConfigError {
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { key, .. } => Some(key),
            ConfigError::Read { .. } => None,
        }
    }

    pub fn invalid(key: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.into(),
            message: message.into(),
        }
    }
}

/// Non-negative float that also accepts the string `"inf"`.
mod maybe_inf {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "expected a number or \"inf\", got {s:?}"
            ))),
        }
    }

    pub mod vec {
        use super::*;

        #[derive(Serialize)]
        struct Out(#[serde(with = "super")] f64);

        #[derive(Deserialize)]
        struct In(#[serde(with = "super")] f64);

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(v.iter().map(|&x| Out(x)))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Ok(Vec::<In>::deserialize(d)?.into_iter().map(|x| x.0).collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Global seed; every random stream is derived from it.
    pub seed: u64,
    pub train_count: usize,
    pub test_count: usize,
    /// `shapes10`, `shapes10b` or `cifar10`.
    pub pretrain_dataset: String,
    pub attacker_dataset: String,
    pub downstream_dataset: String,
    /// CIFAR-10 binary batch files, required only when a `cifar10` dataset
    /// is selected.
    pub cifar_train: Option<PathBuf>,
    pub cifar_test: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            train_count: 4000,
            test_count: 1000,
            pretrain_dataset: "shapes10".into(),
            attacker_dataset: "shapes10".into(),
            downstream_dataset: "shapes10".into(),
            cifar_train: None,
            cifar_test: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    /// Recipes trained by `pretrain` when no `--victim` is given.
    pub methods: Vec<String>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            methods: PretrainMethod::ALL.iter().map(|m| m.as_str().into()).collect(),
            epochs: 30,
            batch_size: 128,
            lr: 1e-3,
            temperature: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub victim: String,
    #[serde(with = "maybe_inf")]
    pub alpha: f64,
    pub epsilon: f64,
    #[serde(with = "maybe_inf")]
    pub eta: f64,
    pub criterion: String,
    /// Temperature of the `infonce` criterion.
    pub tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// `<dataset>:<test index>` or a path to a 32×32 P6 image.
    pub threat_image: String,
    #[serde(with = "maybe_inf::vec")]
    pub alpha_grid: Vec<f64>,
    pub criteria: Vec<String>,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            victim: PretrainMethod::SimclrLite.as_str().into(),
            alpha: 2.0,
            epsilon: DEFAULT_EPSILON,
            eta: f64::INFINITY,
            criterion: Criterion::L2.as_str().into(),
            tau: 0.5,
            lr: 2e-4,
            batch_size: 64,
            epochs: 20,
            threat_image: "shapes10:0".into(),
            alpha_grid: vec![1.0, 2.0, 5.0, f64::INFINITY],
            criteria: Criterion::ALL.iter().map(|c| c.as_str().into()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamSection {
    pub epochs: usize,
    pub lr: f64,
    pub encoder_lr: f64,
    pub batch_size: usize,
    pub finetune: bool,
    pub retrieval_k: usize,
}

impl Default for DownstreamSection {
    fn default() -> Self {
        DownstreamSection {
            epochs: 20,
            lr: 1e-2,
            encoder_lr: 1e-4,
            batch_size: 128,
            finetune: false,
            retrieval_k: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Victims crossed by `transfer`, as sources and as targets.
    pub transfer_victims: Vec<String>,
    /// Benign test images (and their DAEs) in the PCA projection.
    pub project_count: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            transfer_victims: PretrainMethod::ALL.iter().map(|m| m.as_str().into()).collect(),
            project_count: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Benign/adversarial pairs dumped as PPM by `gen-data` and `eval`.
    pub ppm_samples: usize,
    pub report: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            ppm_samples: 8,
            report: "report.csv".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub pretrain: PretrainSection,
    pub attack: AttackSection,
    pub downstream: DownstreamSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

/// Where the threat image comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum ThreatSource {
    Dataset { name: String, index: usize },
    Ppm(PathBuf),
}

pub const DATASETS: [&str; 3] = ["shapes10", "shapes10b", "cifar10"];

fn check_dataset(key: &str, name: &str) -> Result<(), ConfigError> {
    if DATASETS.contains(&name) {
        Ok(())
    } else {
        Err(ConfigError::invalid(key, format!("unknown dataset {name:?}, expected one of {DATASETS:?}")))
    }
}

fn positive(key: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::invalid(key, format!("must be a positive finite number, got {v}")))
    }
}

fn nonzero(key: &str, v: usize) -> Result<(), ConfigError> {
    if v > 0 {
        Ok(())
    } else {
        Err(ConfigError::invalid(key, "must be at least 1"))
    }
}

fn check_alpha(key: &str, v: f64) -> Result<(), ConfigError> {
    if v >= 0.0 {
        Ok(())
    } else {
        Err(ConfigError::invalid(key, format!("must be >= 0 or \"inf\", got {v}")))
    }
}

pub fn parse_method(key: &str, s: &str) -> Result<PretrainMethod, ConfigError> {
    PretrainMethod::parse(s).map_err(|e| ConfigError::invalid(key, e.to_string()))
}

pub fn parse_criterion(key: &str, s: &str) -> Result<Criterion, ConfigError> {
    Criterion::parse(s).map_err(|e| ConfigError::invalid(key, e.to_string()))
}

pub fn parse_threat(key: &str, s: &str) -> Result<ThreatSource, ConfigError> {
    if let Some((name, idx)) = s.split_once(':') {
        if DATASETS.contains(&name) {
            let index = idx
                .parse()
                .map_err(|_| ConfigError::invalid(key, format!("bad image index in {s:?}")))?;
            return Ok(ThreatSource::Dataset {
                name: name.into(),
                index,
            });
        }
    }
    if s.ends_with(".ppm") {
        return Ok(ThreatSource::Ppm(PathBuf::from(s)));
    }
    Err(ConfigError::invalid(
        key,
        format!("expected <dataset>:<index> or a .ppm path, got {s:?}"),
    ))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            ConfigError::Invalid {
                key: if key == "." { "<root>".into() } else { key },
                message: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.data;
        nonzero("data.train_count", d.train_count)?;
        nonzero("data.test_count", d.test_count)?;
        for (key, name) in [
            ("data.pretrain_dataset", &d.pretrain_dataset),
            ("data.attacker_dataset", &d.attacker_dataset),
            ("data.downstream_dataset", &d.downstream_dataset),
        ] {
            check_dataset(key, name)?;
            if name.starts_with("shapes") && (d.train_count % 10 != 0 || d.test_count % 10 != 0) {
                return Err(ConfigError::invalid(
                    "data.train_count",
                    "Shapes10 counts must be multiples of 10",
                ));
            }
            if name == "cifar10" && (d.cifar_train.is_none() || d.cifar_test.is_none()) {
                return Err(ConfigError::invalid(
                    if d.cifar_train.is_none() { "data.cifar_train" } else { "data.cifar_test" },
                    format!("required because {key} is cifar10"),
                ));
            }
        }

        let p = &self.pretrain;
        if p.methods.is_empty() {
            return Err(ConfigError::invalid("pretrain.methods", "must list at least one method"));
        }
        for (i, m) in p.methods.iter().enumerate() {
            parse_method(&format!("pretrain.methods[{i}]"), m)?;
        }
        nonzero("pretrain.epochs", p.epochs)?;
        if p.batch_size < 2 {
            return Err(ConfigError::invalid("pretrain.batch_size", "must be at least 2"));
        }
        if p.batch_size > d.train_count {
            return Err(ConfigError::invalid("pretrain.batch_size", "exceeds data.train_count"));
        }
        positive("pretrain.lr", p.lr)?;
        positive("pretrain.temperature", p.temperature)?;

        let a = &self.attack;
        parse_method("attack.victim", &a.victim)?;
        check_alpha("attack.alpha", a.alpha)?;
        if !(a.epsilon > 0.0 && a.epsilon < 1.0) {
            return Err(ConfigError::invalid("attack.epsilon", format!("must lie in (0,1), got {}", a.epsilon)));
        }
        if !(a.eta > 0.0) {
            return Err(ConfigError::invalid("attack.eta", "must be > 0 or \"inf\""));
        }
        parse_criterion("attack.criterion", &a.criterion)?;
        positive("attack.tau", a.tau)?;
        positive("attack.lr", a.lr)?;
        nonzero("attack.batch_size", a.batch_size)?;
        nonzero("attack.epochs", a.epochs)?;
        if let ThreatSource::Dataset { name, index } = parse_threat("attack.threat_image", &a.threat_image)? {
            check_dataset("attack.threat_image", &name)?;
            if name != "cifar10" && index >= d.test_count {
                return Err(ConfigError::invalid(
                    "attack.threat_image",
                    format!("index {index} is outside the {}-image test split", d.test_count),
                ));
            }
        }
        for (i, &v) in a.alpha_grid.iter().enumerate() {
            check_alpha(&format!("attack.alpha_grid[{i}]"), v)?;
        }
        for (i, c) in a.criteria.iter().enumerate() {
            parse_criterion(&format!("attack.criteria[{i}]"), c)?;
        }

        let s = &self.downstream;
        nonzero("downstream.epochs", s.epochs)?;
        positive("downstream.lr", s.lr)?;
        positive("downstream.encoder_lr", s.encoder_lr)?;
        nonzero("downstream.batch_size", s.batch_size)?;
        nonzero("downstream.retrieval_k", s.retrieval_k)?;
        if s.retrieval_k > d.train_count {
            return Err(ConfigError::invalid("downstream.retrieval_k", "exceeds data.train_count"));
        }

        for (i, m) in self.eval.transfer_victims.iter().enumerate() {
            parse_method(&format!("eval.transfer_victims[{i}]"), m)?;
        }
        if self.eval.project_count < 3 {
            return Err(ConfigError::invalid("eval.project_count", "must be at least 3"));
        }
        let r = &self.output.report;
        if r.is_empty() || r.contains('/') || r.contains('\\') {
            return Err(ConfigError::invalid("output.report", "must be a plain file name"));
        }
        Ok(())
    }

    /// Pretty JSON, fields in declaration order.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_json().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
