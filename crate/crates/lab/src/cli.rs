//! `tdaa` subcommands. Every command reads the config, writes its artifacts
//! under `--out`, and finishes by rewriting the MANIFEST.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tdaa_core::attack::{self, AttackConfig, EpochRecord, Perturber};
use tdaa_core::data::{encode_cifar10, gen_shapes10, parse_cifar10, ImageDataset, ShapesVariant, Split};
use tdaa_core::eval::{self, ExperimentTags, HeadConfig, MetricsRecord, VictimRef, EVAL_CHUNK};
use tdaa_core::models::{encode, Arch, ModelParams};
use tdaa_core::pretrain::{pretrain_encoder, PretrainConfig};
use tdaa_core::Tensor;

use crate::checkpoint::{self, Checkpoint, CheckpointError, Metadata, FIXED_NOISE_ARCH};
use crate::config::{hex, parse_criterion, parse_method, parse_threat, ConfigError, ExperimentConfig, ThreatSource};
use crate::report::{self, format_alpha, parse_alpha};
use crate::{fsutil, manifest, ppm};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_CONFLICT: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "tdaa", version, about = "Targeted downstream-agnostic attack lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment config; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides `data.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Reuse existing artifacts instead of failing on them.
    #[arg(long, global = true)]
    reuse: bool,
    /// Overrides `attack.alpha`; a number or `inf`.
    #[arg(long, global = true)]
    alpha: Option<String>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true)]
    criterion: Option<String>,
    /// Pretraining recipe of the victim encoder.
    #[arg(long, global = true)]
    victim: Option<String>,
    /// `<dataset>:<index>` or a 32x32 `.ppm` file.
    #[arg(long, global = true)]
    threat_image: Option<String>,
    /// Use (or train) the fine-tuned downstream pipeline.
    #[arg(long, global = true)]
    finetune: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Materialize the configured datasets and sample sheets.
    GenData,
    /// Pretrain victim encoders.
    Pretrain,
    /// Train the perturbation generator against the victim encoder.
    Attack,
    /// Train the fixed-noise baseline.
    AttackFixed,
    /// Train the downstream linear head (frozen or fine-tuned).
    Probe,
    /// Attack the downstream pipeline and record TFR/ATA.
    Eval {
        /// Generator or fixed-noise checkpoint; defaults to the configured one.
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Evaluate the configured fixed-noise baseline.
        #[arg(long, conflicts_with = "generator")]
        fixed: bool,
    },
    /// Cross every configured generator with every configured victim.
    Transfer,
    /// Top-k retrieval downstream task.
    Retrieval,
    /// Train and evaluate one generator per `attack.alpha_grid` entry.
    AblateAlpha,
    /// Train and evaluate one generator per `attack.criteria` entry.
    AblateCriterion,
    /// 2-D PCA of benign and adversarial features.
    Project,
    /// Collect every recorded result into the report CSV.
    Report,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: {message}", path.display())]
    BadInput { path: PathBuf, message: String },
    #[error("{} already exists; pass --reuse to keep it or choose another --out", .0.display())]
    Exists(PathBuf),
    #[error("{} was produced by a different configuration", .0.display())]
    Stale(PathBuf),
    #[error("{0}")]
    Runtime(String),
}

impl From<tdaa_core::Error> for CliError {
    fn from(e: tdaa_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) | CliError::MissingFile(_) | CliError::BadInput { .. } => EXIT_CONFIG,
            CliError::Exists(_) | CliError::Stale(_) => EXIT_CONFLICT,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::MissingFile(_) => "missing_file",
            CliError::BadInput { .. } => "bad_input",
            CliError::Exists(_) => "artifact_exists",
            CliError::Stale(_) => "artifact_stale",
            CliError::Runtime(_) => "runtime",
        }
    }

    /// Single-line JSON diagnostic printed on stderr.
    pub fn machine_line(&self) -> String {
        let mut v = json!({
            "code": self.exit_code(),
            "kind": self.kind(),
            "message": self.to_string(),
        });
        let extra = match self {
            CliError::Config(e) => e.key().map(|k| ("key", k.to_string())),
            CliError::MissingFile(p) | CliError::Exists(p) | CliError::Stale(p) => {
                Some(("path", p.display().to_string()))
            }
            CliError::BadInput { path, .. } => Some(("path", path.display().to_string())),
            _ => None,
        };
        if let Some((k, val)) = extra {
            v[k] = Value::String(val);
        }
        format!("tdaa-error: {v}")
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            eprintln!("{}", CliError::Usage(e.kind().to_string()).machine_line());
            return EXIT_USAGE;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{}", e.machine_line());
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("TDAA_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ConfigError::invalid("TDAA_THREADS", format!("expected a positive integer, got {v:?}")))?;
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn execute(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let mut base = match &cli.config {
        Some(p) if !p.exists() => return Err(CliError::MissingFile(p.clone())),
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        base.data.seed = s;
    }
    base.validate()?;

    let mut cfg = base.clone();
    let mut overrides = BTreeMap::new();
    if let Some(a) = &cli.alpha {
        cfg.attack.alpha = parse_alpha(a)
            .ok_or_else(|| ConfigError::invalid("attack.alpha", format!("--alpha expects a number >= 0 or inf, got {a:?}")))?;
        overrides.insert("attack.alpha".to_string(), json!(a));
    }
    if let Some(e) = cli.epsilon {
        cfg.attack.epsilon = e;
        overrides.insert("attack.epsilon".into(), json!(e));
    }
    if let Some(c) = &cli.criterion {
        cfg.attack.criterion = c.clone();
        overrides.insert("attack.criterion".into(), json!(c));
    }
    if let Some(v) = &cli.victim {
        cfg.attack.victim = v.clone();
        overrides.insert("attack.victim".into(), json!(v));
    }
    if let Some(t) = &cli.threat_image {
        cfg.attack.threat_image = t.clone();
        overrides.insert("attack.threat_image".into(), json!(t));
    }
    if cli.finetune {
        cfg.downstream.finetune = true;
        overrides.insert("downstream.finetune".into(), json!(true));
    }
    cfg.validate()?;

    let lab = Lab {
        out: cli.out.clone(),
        cfg,
        overrides,
        reuse: cli.reuse,
        datasets: RefCell::new(HashMap::new()),
    };
    lab.echo_config(&base)?;
    let explicit_victim = cli.victim.is_some();
    match cli.command {
        Command::GenData => lab.gen_data()?,
        Command::Pretrain => lab.pretrain(explicit_victim)?,
        Command::Attack => {
            lab.ensure_perturber(&lab.cfg, false)?;
        }
        Command::AttackFixed => {
            lab.ensure_perturber(&lab.cfg, true)?;
        }
        Command::Probe => {
            lab.ensure_probe(&lab.cfg)?;
        }
        Command::Eval { generator, fixed } => {
            lab.ensure_result(&lab.cfg, fixed, generator.as_deref())?;
        }
        Command::Transfer => lab.transfer()?,
        Command::Retrieval => lab.retrieval()?,
        Command::AblateAlpha => lab.ablate_alpha()?,
        Command::AblateCriterion => lab.ablate_criterion()?,
        Command::Project => lab.project()?,
        Command::Report => lab.report()?,
    }
    manifest::write(&lab.out).map_err(|e| io_err(&lab.out.join(manifest::MANIFEST), e))
}

fn sha(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hash_value(v: &Value) -> String {
    sha(v.to_string().as_bytes())
}

fn split_name(s: Split) -> &'static str {
    s.as_str()
}

fn mode(cfg: &ExperimentConfig) -> &'static str {
    if cfg.downstream.finetune {
        "finetune"
    } else {
        "probe"
    }
}

/// The part of the config an encoder depends on.
fn encoder_hash(cfg: &ExperimentConfig, method: &str) -> String {
    let p = &cfg.pretrain;
    hash_value(&json!({
        "data": cfg.data,
        "pretrain": {
            "epochs": p.epochs,
            "batch_size": p.batch_size,
            "lr": p.lr,
            "temperature": p.temperature,
        },
        "method": method,
    }))
}

fn head_hash(cfg: &ExperimentConfig) -> String {
    let d = &cfg.downstream;
    hash_value(&json!({
        "encoder": encoder_hash(cfg, &cfg.attack.victim),
        "downstream": {
            "epochs": d.epochs,
            "lr": d.lr,
            "encoder_lr": d.encoder_lr,
            "batch_size": d.batch_size,
            "finetune": d.finetune,
        },
    }))
}

fn attack_hash(cfg: &ExperimentConfig, fixed: bool) -> String {
    let mut a = serde_json::to_value(&cfg.attack).expect("attack section serializes");
    let obj = a.as_object_mut().expect("object");
    obj.remove("alpha_grid");
    obj.remove("criteria");
    hash_value(&json!({
        "encoder": encoder_hash(cfg, &cfg.attack.victim),
        "attack": a,
        "fixed": fixed,
    }))
}

fn attack_key(cfg: &ExperimentConfig) -> String {
    format!(
        "{}-{}-{}-a{}-e{:.6}",
        cfg.data.attacker_dataset,
        cfg.attack.victim,
        cfg.attack.criterion,
        format_alpha(cfg.attack.alpha),
        cfg.attack.epsilon
    )
}

fn perturber_rel(cfg: &ExperimentConfig, fixed: bool) -> String {
    let dir = if fixed { "noise" } else { "generators" };
    format!("{dir}/{}.tdac", attack_key(cfg))
}

fn record_json(r: &MetricsRecord) -> Value {
    let t = &r.tags;
    json!({
        "experiment_id": t.experiment_id,
        "attacker_dataset": t.attacker_dataset,
        "downstream_dataset": t.downstream_dataset,
        "victim_method": t.victim_method,
        "criterion": t.criterion,
        "alpha": format_alpha(t.alpha),
        "epsilon": t.epsilon,
        "seed": t.seed,
        "y_t": r.y_t,
        "tfr": r.tfr,
        "ata": r.ata,
        "mean_l2": r.mean_l2,
        "mean_linf": r.mean_linf,
    })
}

fn record_from_json(v: &Value) -> Option<MetricsRecord> {
    let s = |k: &str| v.get(k)?.as_str().map(String::from);
    let f = |k: &str| v.get(k)?.as_f64();
    Some(MetricsRecord {
        tags: ExperimentTags {
            experiment_id: s("experiment_id")?,
            attacker_dataset: s("attacker_dataset")?,
            downstream_dataset: s("downstream_dataset")?,
            victim_method: s("victim_method")?,
            criterion: s("criterion")?,
            alpha: parse_alpha(v.get("alpha")?.as_str()?)?,
            epsilon: f("epsilon")?,
            seed: v.get("seed")?.as_u64()?,
        },
        y_t: v.get("y_t")?.as_u64()? as usize,
        tfr: f("tfr")?,
        ata: f("ata")?,
        mean_l2: f("mean_l2")?,
        mean_linf: f("mean_linf")?,
    })
}

fn json_bytes(v: &Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("json");
    s.push('\n');
    s.into_bytes()
}

fn epoch_json(e: &EpochRecord) -> Value {
    json!({
        "mean_loss": e.mean_loss,
        "mean_adversarial": e.mean_adversarial,
        "mean_consistency": e.mean_consistency,
        "mean_feature_distance": e.mean_feature_distance,
    })
}

struct Lab {
    out: PathBuf,
    /// Effective config: the file plus every command-line override.
    cfg: ExperimentConfig,
    overrides: BTreeMap<String, Value>,
    reuse: bool,
    datasets: RefCell<HashMap<(String, &'static str), Rc<ImageDataset>>>,
}

/// Side outputs written after their checkpoint.
type Extras = Vec<(String, Vec<u8>)>;

impl Lab {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    /// The out dir holds exactly one base config; a different one is refused.
    fn echo_config(&self, base: &ExperimentConfig) -> Result<(), CliError> {
        let path = self.path("config.json");
        let text = base.to_json();
        if path.exists() {
            let old = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
            if old != text.as_bytes() {
                return Err(CliError::Stale(path));
            }
            return Ok(());
        }
        fsutil::write_atomic(&path, text.as_bytes()).map_err(|e| io_err(&path, e))
    }

    /// Writes a derived file. An existing file is an error without
    /// `--reuse`; with it the new bytes must match the old ones.
    fn write_output(&self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(rel);
        if path.exists() {
            if !self.reuse {
                return Err(CliError::Exists(path));
            }
            let old = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
            if old != bytes {
                return Err(CliError::Stale(path));
            }
            return Ok(());
        }
        fsutil::write_atomic(&path, bytes).map_err(|e| io_err(&path, e))
    }

    fn metadata(&self, arch: &str, method: &str, hash: String, extra: Value) -> Metadata {
        let mut map: BTreeMap<String, Value> = match extra {
            Value::Object(m) => m.into_iter().collect(),
            _ => BTreeMap::new(),
        };
        map.insert("overrides".into(), json!(self.overrides));
        Metadata {
            arch: arch.into(),
            method: method.into(),
            seed: self.cfg.data.seed,
            config_hash: hash,
            extra: map,
        }
    }

    fn load_input(&self, path: &Path, hash: Option<&str>) -> Result<Checkpoint, CliError> {
        if !path.exists() {
            return Err(CliError::MissingFile(path.to_path_buf()));
        }
        let c = checkpoint::load(path).map_err(|e| match e {
            CheckpointError::Io { .. } => CliError::MissingFile(path.to_path_buf()),
            other => CliError::BadInput {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })?;
        if let Some(h) = hash {
            if c.metadata.config_hash != h {
                return Err(CliError::Stale(path.to_path_buf()));
            }
        }
        Ok(c)
    }

    /// Loads the checkpoint at `rel` when reusing, otherwise builds and
    /// saves it. Returns the checkpoint and whether it was built now.
    fn produce(
        &self,
        rel: &str,
        hash: &str,
        make: impl FnOnce(&Path) -> Result<(Checkpoint, Extras), CliError>,
    ) -> Result<(Checkpoint, bool), CliError> {
        let path = self.path(rel);
        if path.exists() {
            if !self.reuse {
                return Err(CliError::Exists(path));
            }
            return Ok((self.load_input(&path, Some(hash))?, false));
        }
        let partial = path.with_extension("tdac.partial");
        let (ckpt, extras) = make(&partial)?;
        checkpoint::save(&path, &ckpt).map_err(|e| CliError::Runtime(e.to_string()))?;
        if partial.exists() {
            std::fs::remove_file(&partial).map_err(|e| io_err(&partial, e))?;
        }
        for (r, bytes) in extras {
            self.write_output(&r, &bytes)?;
        }
        Ok((ckpt, true))
    }

    fn dataset(&self, name: &str, split: Split) -> Result<Rc<ImageDataset>, CliError> {
        let key = (name.to_string(), split_name(split));
        if let Some(d) = self.datasets.borrow().get(&key) {
            return Ok(d.clone());
        }
        let d = &self.cfg.data;
        let count = match split {
            Split::Train => d.train_count,
            Split::Test => d.test_count,
        };
        let ds = if name == "cifar10" {
            let (key_name, path) = match split {
                Split::Train => ("data.cifar_train", &d.cifar_train),
                Split::Test => ("data.cifar_test", &d.cifar_test),
            };
            let path = path
                .as_ref()
                .ok_or_else(|| ConfigError::invalid(key_name, "required for cifar10"))?;
            let bytes = std::fs::read(path).map_err(|_| CliError::MissingFile(path.clone()))?;
            let full = parse_cifar10(&bytes, split, "cifar10").map_err(|e| CliError::BadInput {
                path: path.clone(),
                message: e.to_string(),
            })?;
            full.truncated(count.min(full.len()))
        } else {
            let variant = ShapesVariant::parse(name).map_err(|e| ConfigError::invalid("data", e.to_string()))?;
            gen_shapes10(variant, d.seed, split, count)?
        };
        let ds = Rc::new(ds);
        self.datasets.borrow_mut().insert(key, ds.clone());
        Ok(ds)
    }

    fn threat(&self, cfg: &ExperimentConfig) -> Result<Tensor<f32>, CliError> {
        match parse_threat("attack.threat_image", &cfg.attack.threat_image)? {
            ThreatSource::Dataset { name, index } => {
                let test = self.dataset(&name, Split::Test)?;
                if index >= test.len() {
                    return Err(ConfigError::invalid(
                        "attack.threat_image",
                        format!("index {index} is outside the {}-image test split", test.len()),
                    )
                    .into());
                }
                Ok(test.image(index))
            }
            ThreatSource::Ppm(path) => {
                let bytes = std::fs::read(&path).map_err(|_| CliError::MissingFile(path.clone()))?;
                ppm::decode(&bytes).map_err(|e| CliError::BadInput {
                    path,
                    message: e.to_string(),
                })
            }
        }
    }

    fn gen_data(&self) -> Result<(), CliError> {
        let d = &self.cfg.data;
        let mut names: Vec<&str> = Vec::new();
        for n in [&d.pretrain_dataset, &d.attacker_dataset, &d.downstream_dataset] {
            if !names.contains(&n.as_str()) {
                names.push(n);
            }
        }
        for name in names {
            for split in [Split::Train, Split::Test] {
                let ds = self.dataset(name, split)?;
                if name != "cifar10" {
                    self.write_output(&format!("data/{name}-{}.bin", split_name(split)), &encode_cifar10(&ds))?;
                }
                let n = self.cfg.output.ppm_samples.min(ds.len());
                if n > 0 {
                    let sheet = ppm::grid(&ds.images().slice_rows(0, n), 1);
                    self.write_output(&format!("samples/{name}-{}.ppm", split_name(split)), &ppm::encode(&sheet))?;
                }
            }
        }
        Ok(())
    }

    fn pretrain(&self, explicit_victim: bool) -> Result<(), CliError> {
        let methods = if explicit_victim {
            vec![self.cfg.attack.victim.clone()]
        } else {
            self.cfg.pretrain.methods.clone()
        };
        for m in methods {
            self.ensure_encoder(&m)?;
        }
        Ok(())
    }

    fn ensure_encoder(&self, method: &str) -> Result<ModelParams, CliError> {
        let cfg = &self.cfg;
        let hash = encoder_hash(cfg, method);
        let (ckpt, _) = self.produce(&format!("encoders/{method}.tdac"), &hash, |_| {
            let pc = PretrainConfig {
                method: parse_method("attack.victim", method)?,
                temperature: cfg.pretrain.temperature,
                batch_size: cfg.pretrain.batch_size,
                epochs: cfg.pretrain.epochs,
                lr: cfg.pretrain.lr,
                seed: cfg.data.seed,
            };
            let ds = self.dataset(&cfg.data.pretrain_dataset, Split::Train)?;
            log::info!("pretrain {method}: {} images, {} epochs", ds.len(), pc.epochs);
            let (enc, rep) = pretrain_encoder(&pc, &ds)?;
            let meta = self.metadata(
                &Arch::Encoder.descriptor(),
                method,
                hash.clone(),
                json!({"dataset": cfg.data.pretrain_dataset}),
            );
            let log = json!({
                "method": method,
                "epoch_losses": rep.epoch_losses,
                "step_losses": rep.step_losses,
            });
            Ok((
                Checkpoint::from_params(&enc, meta),
                vec![(format!("logs/pretrain-{method}.json"), json_bytes(&log))],
            ))
        })?;
        Ok(ckpt.to_params().map_err(|e| CliError::Runtime(e.to_string()))?)
    }

    fn victim_encoder(&self, cfg: &ExperimentConfig) -> Result<ModelParams, CliError> {
        let v = &cfg.attack.victim;
        let c = self.load_input(&self.path(&format!("encoders/{v}.tdac")), Some(&encoder_hash(cfg, v)))?;
        Ok(c.to_params().map_err(|e| CliError::Runtime(e.to_string()))?)
    }

    fn head_rel(cfg: &ExperimentConfig) -> (String, String) {
        let v = &cfg.attack.victim;
        let ds = &cfg.data.downstream_dataset;
        let m = mode(cfg);
        (format!("heads/{v}-{ds}-{m}.tdac"), format!("encoders/{v}-{ds}-{m}.tdac"))
    }

    /// Trains (or reuses) the downstream head and, when fine-tuning, the
    /// updated encoder. Returns the victim pipeline `(encoder, head)`.
    fn ensure_probe(&self, cfg: &ExperimentConfig) -> Result<(ModelParams, ModelParams), CliError> {
        let encoder = self.victim_encoder(cfg)?;
        let hash = head_hash(cfg);
        let (head_rel, ft_rel) = Self::head_rel(cfg);
        let victim = &cfg.attack.victim;
        let mut tuned: Option<ModelParams> = None;
        let (head, fresh) = self.produce(&head_rel, &hash, |_| {
            let train = self.dataset(&cfg.data.downstream_dataset, Split::Train)?;
            let test = self.dataset(&cfg.data.downstream_dataset, Split::Test)?;
            let d = &cfg.downstream;
            let hc = HeadConfig {
                epochs: d.epochs,
                lr: d.lr,
                encoder_lr: d.encoder_lr,
                batch_size: d.batch_size,
                finetune: d.finetune,
                seed: cfg.data.seed,
                ..HeadConfig::default()
            };
            let out = eval::train_head(&encoder, &train, Some(&test), &hc)?;
            log::info!("{head_rel}: test accuracy {:?}", out.test_accuracy);
            let extra = json!({"dataset": cfg.data.downstream_dataset, "mode": mode(cfg)});
            let meta = self.metadata(&out.head.arch().descriptor(), victim, hash.clone(), extra.clone());
            let log = json!({
                "victim": victim,
                "dataset": cfg.data.downstream_dataset,
                "mode": mode(cfg),
                "epoch_losses": out.epoch_losses,
                "train_accuracy": out.train_accuracy,
                "test_accuracy": out.test_accuracy,
            });
            tuned = out.encoder;
            let stem = head_rel.trim_start_matches("heads/").trim_end_matches(".tdac");
            Ok((
                Checkpoint::from_params(&out.head, meta),
                vec![(format!("logs/probe-{stem}.json"), json_bytes(&log))],
            ))
        })?;
        let head = head.to_params().map_err(|e| CliError::Runtime(e.to_string()))?;
        if !cfg.downstream.finetune {
            return Ok((encoder, head));
        }
        let ft_path = self.path(&ft_rel);
        let encoder = match tuned {
            Some(enc) if fresh => {
                let meta = self.metadata(&Arch::Encoder.descriptor(), victim, hash.clone(), json!({"finetuned": true}));
                if ft_path.exists() && !self.reuse {
                    return Err(CliError::Exists(ft_path));
                }
                checkpoint::save(&ft_path, &Checkpoint::from_params(&enc, meta))
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                enc
            }
            _ => self
                .load_input(&ft_path, Some(&hash))?
                .to_params()
                .map_err(|e| CliError::Runtime(e.to_string()))?,
        };
        Ok((encoder, head))
    }

    /// Loads the trained victim pipeline without training anything.
    fn victim_pipeline(&self, cfg: &ExperimentConfig) -> Result<(ModelParams, ModelParams), CliError> {
        let hash = head_hash(cfg);
        let (head_rel, ft_rel) = Self::head_rel(cfg);
        let head = self.load_input(&self.path(&head_rel), Some(&hash))?;
        let head = head.to_params().map_err(|e| CliError::Runtime(e.to_string()))?;
        let encoder = if cfg.downstream.finetune {
            self.load_input(&self.path(&ft_rel), Some(&hash))?
                .to_params()
                .map_err(|e| CliError::Runtime(e.to_string()))?
        } else {
            self.victim_encoder(cfg)?
        };
        Ok((encoder, head))
    }

    fn attack_config(&self, cfg: &ExperimentConfig) -> Result<AttackConfig, CliError> {
        let a = &cfg.attack;
        let mut ac = AttackConfig::new(self.threat(cfg)?);
        ac.alpha = a.alpha;
        ac.epsilon = a.epsilon;
        ac.eta = a.eta;
        ac.criterion = parse_criterion("attack.criterion", &a.criterion)?;
        ac.tau = a.tau;
        ac.lr = a.lr;
        ac.batch_size = a.batch_size;
        ac.epochs = a.epochs;
        ac.seed = cfg.data.seed;
        ac.validate()?;
        Ok(ac)
    }

    /// Trains (or reuses) the generator or fixed noise described by `cfg`.
    fn ensure_perturber(&self, cfg: &ExperimentConfig, fixed: bool) -> Result<(Perturber, Checkpoint), CliError> {
        let rel = perturber_rel(cfg, fixed);
        let hash = attack_hash(cfg, fixed);
        let (ckpt, _) = self.produce(&rel, &hash, |partial| {
            let encoder = self.victim_encoder(cfg)?;
            let ac = self.attack_config(cfg)?;
            let train = self.dataset(&cfg.data.attacker_dataset, Split::Train)?;
            let a = &cfg.attack;
            let extra = json!({
                "attacker_dataset": cfg.data.attacker_dataset,
                "victim": a.victim,
                "criterion": a.criterion,
                "alpha": format_alpha(a.alpha),
                "epsilon": a.epsilon,
                "threat_image": a.threat_image,
            });
            let arch = if fixed { FIXED_NOISE_ARCH.to_string() } else { Arch::Generator.descriptor() };
            let meta = self.metadata(&arch, &a.victim, hash.clone(), extra);
            log::info!("{rel}: {} images, {} epochs", train.len(), ac.epochs);
            let save_partial = |c: Checkpoint| {
                if let Err(e) = checkpoint::save(partial, &c) {
                    log::warn!("{}: {e}", partial.display());
                }
            };
            let (ckpt, log) = if fixed {
                let mut hook = |_: usize, d: &Tensor<f32>, _: &EpochRecord| {
                    save_partial(Checkpoint::fixed_noise(d, meta.clone()))
                };
                let (delta, log) = attack::train_fixed_noise(&encoder, &train, &ac, Some(&mut hook))?;
                (Checkpoint::fixed_noise(&delta, meta.clone()), log)
            } else {
                let mut hook = |_: usize, g: &ModelParams, _: &EpochRecord| {
                    save_partial(Checkpoint::from_params(g, meta.clone()))
                };
                let (gen, log) = attack::train_generator(&encoder, &train, &ac, Some(&mut hook))?;
                (Checkpoint::from_params(&gen, meta.clone()), log)
            };
            let kind = if fixed { "attack-fixed" } else { "attack" };
            let value = json!({
                "epochs": log.epochs.iter().map(epoch_json).collect::<Vec<_>>(),
                "step_losses": log.steps.iter().map(|s| s.loss).collect::<Vec<_>>(),
            });
            Ok((ckpt, vec![(format!("logs/{kind}-{}.json", attack_key(cfg)), json_bytes(&value))]))
        })?;
        Ok((perturber_of(&self.path(&rel), &ckpt)?, ckpt))
    }

    /// Evaluates a perturber against the configured victim pipeline, or
    /// reuses the stored result.
    fn ensure_result(
        &self,
        cfg: &ExperimentConfig,
        fixed: bool,
        generator: Option<&Path>,
    ) -> Result<MetricsRecord, CliError> {
        let (perturber, ckpt, key) = match generator {
            Some(p) => {
                let c = self.load_input(p, None)?;
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                (perturber_of(p, &c)?, c, stem)
            }
            None => {
                let rel = perturber_rel(cfg, fixed);
                let c = self.load_input(&self.path(&rel), Some(&attack_hash(cfg, fixed)))?;
                (perturber_of(&self.path(&rel), &c)?, c, attack_key(cfg))
            }
        };
        let kind = match perturber {
            Perturber::FixedNoise(_) => "fixed",
            _ => "gen",
        };
        let victim = &cfg.attack.victim;
        let ds = &cfg.data.downstream_dataset;
        let id = format!("{kind}-{key}-to-{victim}-{ds}-{}", mode(cfg));
        let want = hash_value(&json!({
            "perturber": ckpt.metadata.config_hash,
            "head": head_hash(cfg),
            "epsilon": cfg.attack.epsilon,
            "threat_image": cfg.attack.threat_image,
            "test_count": cfg.data.test_count,
        }));
        let rel = format!("results/{id}.json");
        let path = self.path(&rel);
        if path.exists() {
            if !self.reuse {
                return Err(CliError::Exists(path));
            }
            let bad = |m: &str| CliError::BadInput {
                path: path.clone(),
                message: m.into(),
            };
            let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| bad(&e.to_string()))?;
            if v.get("config_hash").and_then(Value::as_str) != Some(want.as_str()) {
                return Err(CliError::Stale(path));
            }
            return v.get("record").and_then(record_from_json).ok_or_else(|| bad("malformed record"));
        }

        let (encoder, head) = self.victim_pipeline(cfg)?;
        let test = self.dataset(ds, Split::Test)?;
        let threat = self.threat(cfg)?;
        let eps = cfg.attack.epsilon;
        let m = eval::evaluate_attack(&encoder, &head, &perturber, &test, &threat, eps)?;
        let meta = &ckpt.metadata.extra;
        let text_of = |k: &str, dflt: &str| meta.get(k).and_then(Value::as_str).unwrap_or(dflt).to_string();
        let tags = ExperimentTags {
            experiment_id: id.clone(),
            attacker_dataset: text_of("attacker_dataset", &cfg.data.attacker_dataset),
            downstream_dataset: ds.clone(),
            victim_method: victim.clone(),
            criterion: text_of("criterion", &cfg.attack.criterion),
            alpha: meta
                .get("alpha")
                .and_then(Value::as_str)
                .and_then(parse_alpha)
                .unwrap_or(cfg.attack.alpha),
            epsilon: eps,
            seed: cfg.data.seed,
        };
        let record = MetricsRecord::new(tags, &m);
        log::info!("{id}: tfr {:.6} ata {:.6} (y_t = {})", m.tfr, m.ata, m.y_t);
        self.write_output(
            &rel,
            &json_bytes(&json!({
                "config_hash": want,
                "record": record_json(&record),
                "overrides": self.overrides,
            })),
        )?;
        let n = self.cfg.output.ppm_samples.min(test.len());
        if n > 0 {
            let benign = test.images().slice_rows(0, n);
            let adv = perturber.perturb(&benign, eps, EVAL_CHUNK)?;
            let sheet = ppm::grid(&Tensor::stack_rows(&[benign, adv])?, 2);
            self.write_output(&format!("samples/{id}.ppm"), &ppm::encode(&sheet))?;
        }
        Ok(record)
    }

    fn with_victim(&self, victim: &str) -> ExperimentConfig {
        let mut c = self.cfg.clone();
        c.attack.victim = victim.into();
        c
    }

    fn transfer(&self) -> Result<(), CliError> {
        let victims = &self.cfg.eval.transfer_victims;
        let mut perturbers = Vec::new();
        let mut pipelines = Vec::new();
        for v in victims {
            let c = self.with_victim(v);
            let rel = perturber_rel(&c, false);
            let ckpt = self.load_input(&self.path(&rel), Some(&attack_hash(&c, false)))?;
            perturbers.push(perturber_of(&self.path(&rel), &ckpt)?);
            pipelines.push(self.victim_pipeline(&c)?);
        }
        let sources: Vec<(&str, &Perturber)> = victims.iter().map(String::as_str).zip(&perturbers).collect();
        let targets: Vec<VictimRef<'_>> = victims
            .iter()
            .zip(&pipelines)
            .map(|(v, (e, h))| VictimRef {
                name: v,
                encoder: e,
                head: h,
            })
            .collect();
        let test = self.dataset(&self.cfg.data.downstream_dataset, Split::Test)?;
        let threat = self.threat(&self.cfg)?;
        let table = eval::transfer_matrix(&sources, &targets, &test, &threat, self.cfg.attack.epsilon)?;
        let mut csv = String::from("source,target,tfr\n");
        for (s, row) in table.sources.iter().zip(&table.tfr) {
            for (t, v) in table.targets.iter().zip(row) {
                csv.push_str(&format!("{s},{t},{v:.6}\n"));
            }
        }
        if let Some(m) = table.off_diagonal_mean() {
            log::info!("transfer off-diagonal mean tfr {m:.6}");
        }
        self.write_output(&format!("transfer-{}.csv", mode(&self.cfg)), csv.as_bytes())
    }

    fn retrieval(&self) -> Result<(), CliError> {
        let cfg = &self.cfg;
        let rel = perturber_rel(cfg, false);
        let ckpt = self.load_input(&self.path(&rel), Some(&attack_hash(cfg, false)))?;
        let perturber = perturber_of(&self.path(&rel), &ckpt)?;
        let encoder = self.victim_encoder(cfg)?;
        let ds = &cfg.data.downstream_dataset;
        let gallery = self.dataset(ds, Split::Train)?;
        let queries = self.dataset(ds, Split::Test)?;
        let k = cfg.downstream.retrieval_k;
        let threat = self.threat(cfg)?;
        let r = eval::retrieval_topk_tfr(&encoder, &gallery, &perturber, &queries, &threat, cfg.attack.epsilon, k)?;
        log::info!("retrieval top-{k}: tfr {:.6}", r.result.success_rate);
        let id = format!("retrieval-{}-to-{}-{ds}", attack_key(cfg), cfg.attack.victim);
        let v = json!({
            "experiment_id": id,
            "k": k,
            "y_t": r.y_t,
            "tfr": r.result.success_rate,
            "mean_target_fraction": r.result.mean_target_fraction,
        });
        self.write_output(&format!("retrieval/{id}.json"), &json_bytes(&v))
    }

    fn ablation(&self, name: &str, configs: Vec<ExperimentConfig>) -> Result<Vec<MetricsRecord>, CliError> {
        let mut records = Vec::new();
        for c in &configs {
            self.ensure_perturber(c, false)?;
            records.push(self.ensure_result(c, false, None)?);
        }
        let csv = report::to_csv(&records).map_err(|e| CliError::Runtime(e.to_string()))?;
        self.write_output(&format!("ablations/{name}-{}.csv", self.cfg.attack.victim), csv.as_bytes())?;
        Ok(records)
    }

    fn ablate_alpha(&self) -> Result<(), CliError> {
        let configs = self
            .cfg
            .attack
            .alpha_grid
            .iter()
            .map(|&a| {
                let mut c = self.cfg.clone();
                c.attack.alpha = a;
                c
            })
            .collect();
        let records = self.ablation("alpha", configs)?;
        for r in &records {
            log::info!("alpha {}: tfr {:.6} mean_l2 {:.6}", format_alpha(r.tags.alpha), r.tfr, r.mean_l2);
        }
        Ok(())
    }

    fn ablate_criterion(&self) -> Result<(), CliError> {
        let configs = self
            .cfg
            .attack
            .criteria
            .iter()
            .map(|k| {
                let mut c = self.cfg.clone();
                c.attack.criterion = k.clone();
                c
            })
            .collect();
        let records = self.ablation("criterion", configs)?;
        let best = records.iter().map(|r| r.tfr).fold(f64::NEG_INFINITY, f64::max);
        if let Some(l2) = records.iter().find(|r| r.tags.criterion == "l2") {
            if l2.tfr < best {
                log::warn!("l2 criterion tfr {:.6} is below the best criterion ({best:.6})", l2.tfr);
                eprintln!("warning: l2 criterion is not the strongest (tfr {:.6} < {best:.6})", l2.tfr);
            }
        }
        Ok(())
    }

    fn project(&self) -> Result<(), CliError> {
        let cfg = &self.cfg;
        let rel = perturber_rel(cfg, false);
        let ckpt = self.load_input(&self.path(&rel), Some(&attack_hash(cfg, false)))?;
        let perturber = perturber_of(&self.path(&rel), &ckpt)?;
        let encoder = self.victim_encoder(cfg)?;
        let test = self.dataset(&cfg.data.downstream_dataset, Split::Test)?;
        let n = cfg.eval.project_count.min(test.len());
        let benign = test.images().slice_rows(0, n);
        let adv = perturber.perturb(&benign, cfg.attack.epsilon, EVAL_CHUNK)?;
        let features = encode(&encoder, &Tensor::stack_rows(&[benign, adv])?, EVAL_CHUNK)?;
        let p = eval::pca_project(&features)?;
        let mut csv = String::from("id,x,y,label,is_adversarial\n");
        for i in 0..2 * n {
            let c = p.coords.row(i);
            csv.push_str(&format!(
                "{},{:.6},{:.6},{},{}\n",
                i % n,
                c[0],
                c[1],
                test.labels()[i % n],
                (i >= n) as u8
            ));
        }
        self.write_output(&format!("projections/{}-{}.csv", attack_key(cfg), cfg.data.downstream_dataset), csv.as_bytes())
    }

    fn report(&self) -> Result<(), CliError> {
        let dir = self.path("results");
        let mut files: Vec<PathBuf> = match std::fs::read_dir(&dir) {
            Ok(rd) => rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect(),
            Err(_) => return Err(CliError::MissingFile(dir)),
        };
        files.sort();
        let mut records = Vec::new();
        for f in files {
            let text = std::fs::read_to_string(&f).map_err(|e| io_err(&f, e))?;
            let rec = serde_json::from_str::<Value>(&text)
                .ok()
                .and_then(|v| v.get("record").and_then(record_from_json))
                .ok_or_else(|| CliError::BadInput {
                    path: f.clone(),
                    message: "malformed result".into(),
                })?;
            records.push(rec);
        }
        if records.is_empty() {
            return Err(CliError::MissingFile(dir));
        }
        let csv = report::to_csv(&records).map_err(|e| CliError::Runtime(e.to_string()))?;
        self.write_output(&self.cfg.output.report, csv.as_bytes())
    }
}

fn perturber_of(path: &Path, c: &Checkpoint) -> Result<Perturber, CliError> {
    let bad = |e: CheckpointError| CliError::BadInput {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    if c.metadata.arch == FIXED_NOISE_ARCH {
        Ok(Perturber::FixedNoise(c.to_fixed_noise().map_err(bad)?))
    } else if c.metadata.arch == Arch::Generator.descriptor() {
        Ok(Perturber::Generator(c.to_params().map_err(bad)?))
    } else {
        Err(CliError::BadInput {
            path: path.to_path_buf(),
            message: format!("expected a generator or fixed-noise checkpoint, found {:?}", c.metadata.arch),
        })
    }
}
