use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::contrastive::PretrainConfig;
use crate::error::{invalid, io_err, Result};
use crate::segmentation::FinetuneConfig;
use crate::synthgen::DatasetSpec;
use crate::vae::{VaeConfig, VaeTrainConfig};

/// Environment variable that replaces `seeds` with a single seed.
pub const SEED_ENV: &str = "UFC_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Cluster-guided contrastive pretraining.
    Ufc,
    /// Instance-discrimination contrastive pretraining.
    Instance,
    /// No pretraining.
    RandomInit,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ufc => "ufc",
            Method::Instance => "instance",
            Method::RandomInit => "random_init",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    #[default]
    Agglomerative,
    Kmeans,
    Dbscan,
}

impl ClusterMethod {
    pub fn name(self) -> &'static str {
        match self {
            ClusterMethod::Agglomerative => "agglomerative",
            ClusterMethod::Kmeans => "kmeans",
            ClusterMethod::Dbscan => "dbscan",
        }
    }
}

/// Cluster count: fixed, chosen from the elbow curve, or one per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "KRepr", into = "KRepr")]
pub enum KChoice {
    Fixed(usize),
    Auto,
    /// `k = n`: every sample is its own cluster.
    N,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum KRepr {
    Fixed(usize),
    Word(String),
}

impl TryFrom<KRepr> for KChoice {
    type Error = String;

    fn try_from(r: KRepr) -> Result<Self, String> {
        match r {
            KRepr::Fixed(0) => Err("k must be ≥ 1".into()),
            KRepr::Fixed(k) => Ok(KChoice::Fixed(k)),
            KRepr::Word(w) if w == "auto" => Ok(KChoice::Auto),
            KRepr::Word(w) if w == "n" => Ok(KChoice::N),
            KRepr::Word(w) => Err(format!("k must be a positive integer, \"auto\" or \"n\", got {w:?}")),
        }
    }
}

impl From<KChoice> for KRepr {
    fn from(k: KChoice) -> Self {
        match k {
            KChoice::Fixed(k) => KRepr::Fixed(k),
            KChoice::Auto => KRepr::Word("auto".into()),
            KChoice::N => KRepr::Word("n".into()),
        }
    }
}

impl fmt::Display for KChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KChoice::Fixed(k) => write!(f, "{k}"),
            KChoice::Auto => f.write_str("auto"),
            KChoice::N => f.write_str("n"),
        }
    }
}

/// How VAE features become pseudo-labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSpec {
    pub method: ClusterMethod,
    /// Ignored by dbscan.
    pub k: KChoice,
    /// dbscan radius; `null` picks the 95th percentile distance to the
    /// `min_points`-th nearest neighbour.
    pub eps: Option<f64>,
    pub min_points: usize,
    /// Inclusive range scanned by the elbow curve.
    pub k_range: (usize, usize),
    pub max_iters: usize,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            method: ClusterMethod::Agglomerative,
            k: KChoice::Auto,
            eps: None,
            min_points: 4,
            k_range: (2, 20),
            max_iters: 100,
        }
    }
}

impl ClusterSpec {
    pub fn agglomerative(k: KChoice) -> Self {
        Self { k, ..Self::default() }
    }

    /// Value of the `param` column of `ablation.csv`.
    pub fn param_label(&self) -> String {
        match self.method {
            ClusterMethod::Dbscan => match self.eps {
                Some(e) => format!("eps={e}"),
                None => "eps=auto".into(),
            },
            _ => format!("k={}", self.k),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.k_range;
        if lo < 2 || hi <= lo {
            return Err(invalid(format!("k_range ({lo}, {hi}) needs 2 ≤ lo < hi")));
        }
        if self.eps.is_some_and(|e| !(e > 0.0 && e.is_finite())) {
            return Err(invalid("dbscan eps must be positive"));
        }
        if self.min_points == 0 || self.max_iters == 0 {
            return Err(invalid("min_points and max_iters must be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeParams {
    pub latent_dim: usize,
    pub channels: (usize, usize),
    pub beta: f64,
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
}

impl Default for VaeParams {
    fn default() -> Self {
        let arch = VaeConfig::default();
        let train = VaeTrainConfig::default();
        Self {
            latent_dim: arch.latent_dim,
            channels: arch.channels,
            beta: train.beta,
            epochs: train.epochs,
            lr: train.lr,
            batch: train.batch,
        }
    }
}

impl VaeParams {
    pub fn model_config(&self, image_size: usize) -> VaeConfig {
        VaeConfig {
            image_size,
            channels: self.channels,
            latent_dim: self.latent_dim,
        }
    }

    pub fn train_config(&self, seed: u64) -> VaeTrainConfig {
        VaeTrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch: self.batch,
            beta: self.beta,
            seed,
        }
    }
}

/// Every experiment knob. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Training set; the test set uses the same parameters with `test_samples`
    /// images and a derived seed.
    pub dataset: DatasetSpec,
    pub test_samples: usize,
    pub vae: VaeParams,
    pub clustering: ClusterSpec,
    pub contrastive: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub unet_widths: (usize, usize, usize),
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    /// Clusterings compared by `matrix`, each with ufc pretraining at
    /// `ablation_fraction`.
    pub ablation: Vec<ClusterSpec>,
    pub ablation_fraction: f64,
    pub output_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            test_samples: 100,
            vae: VaeParams::default(),
            clustering: ClusterSpec::default(),
            contrastive: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            unet_widths: (16, 32, 64),
            seeds: vec![0, 1, 2],
            methods: vec![Method::Ufc, Method::Instance, Method::RandomInit],
            ablation: vec![
                ClusterSpec::agglomerative(KChoice::Fixed(2)),
                ClusterSpec::agglomerative(KChoice::Auto),
                ClusterSpec::agglomerative(KChoice::N),
            ],
            ablation_fraction: 0.1,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.test_samples < self.dataset.n_classes {
            return Err(invalid("test_samples must be at least n_classes"));
        }
        self.vae.model_config(self.dataset.image_size).validate()?;
        if self.vae.batch == 0 || self.contrastive.batch < 2 || self.finetune.batch == 0 {
            return Err(invalid("batch sizes must be positive (contrastive ≥ 2)"));
        }
        if self.contrastive.tau.is_nan() || self.contrastive.tau <= 0.0 {
            return Err(invalid("tau must be positive"));
        }
        self.clustering.validate()?;
        for spec in &self.ablation {
            spec.validate()?;
        }
        let fractions = self
            .finetune
            .fractions
            .iter()
            .chain(std::iter::once(&self.ablation_fraction));
        if let Some(f) = fractions.into_iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(invalid(format!("annotation fraction {f} outside (0, 1]")));
        }
        if !(0.0..1.0).contains(&self.finetune.val_fraction) {
            return Err(invalid("val_fraction outside [0, 1)"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("at least one seed is required"));
        }
        let (a, b, c) = self.unet_widths;
        if a == 0 || b == 0 || c == 0 {
            return Err(invalid("unet widths must be positive"));
        }
        Ok(())
    }

    /// Applies one `dotted.key=value` override. The value is parsed as JSON
    /// and taken as a plain string when that fails. The key must already
    /// exist.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| invalid(format!("override {assignment:?} is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = match slot {
                Value::Object(map) => map.get_mut(part),
                Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
                _ => None,
            }
            .ok_or_else(|| invalid(format!("unknown config key {key:?}")))?;
        }
        *slot = value;
        let next: Config = serde_json::from_value(doc)?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    /// Replaces `seeds` with the value of [`SEED_ENV`] when it is set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            let seed = raw
                .trim()
                .parse()
                .map_err(|_| invalid(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
            self.seeds = vec![seed];
        }
        Ok(())
    }

    /// Seed used by single-stage commands.
    pub fn primary_seed(&self) -> u64 {
        self.seeds[0]
    }
}
