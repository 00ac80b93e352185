use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ClusterSpec, Config, Method};
use super::stages::Stage;
use super::work::{self, ClusterStats, Clustering};
use crate::checkpoint::Checkpoint;
use crate::clustering::FeatureSet;
use crate::contrastive::Mode;
use crate::error::{io_err, Result};
use crate::segmentation::{build_unet, evaluate, finetune, DiceReport, FinetuneHistory};
use crate::synthgen::{positional_curve, Dataset, PairRates};
use crate::vae::VaeEpoch;

pub const RESULTS_FILE: &str = "results.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const REPORT_FILE: &str = "run_report.json";

/// Partition counts reported for the positional pair strategy.
const POSITIONAL_PARTITIONS: [usize; 4] = [1, 2, 4, 8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub fraction: f64,
    pub seed: u64,
    pub mean_dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cluster_method: String,
    pub param: String,
    pub mean_dice: f64,
    /// `(seed, mean Dice)` per seed.
    pub per_seed: Vec<(u64, f64)>,
    /// Cluster count actually used per seed.
    pub k: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub cluster_method: String,
    pub param: String,
    pub elbow: Option<Vec<(usize, f64)>>,
    pub elbow_k: Option<usize>,
    pub stats: ClusterStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub method: Method,
    /// `cluster_method:param` of the pseudo-labels, ufc only.
    pub clustering: Option<String>,
    pub epochs: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub method: Method,
    pub clustering: Option<String>,
    pub fraction: f64,
    pub history: FinetuneHistory,
    pub dice: DiceReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub vae: Vec<VaeEpoch>,
    pub clusterings: Vec<ClusterReport>,
    pub pretraining: Vec<PretrainReport>,
    pub finetuning: Vec<FinetuneReport>,
}

/// Everything a matrix run measured. Wall times aside, it is a function of
/// the config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: Config,
    /// Seconds spent per stage, summed over cells.
    pub stage_seconds: BTreeMap<String, f64>,
    pub positional_rates: Vec<(usize, PairRates)>,
    pub seeds: Vec<SeedReport>,
    pub results: Vec<ResultRow>,
    pub ablation: Vec<AblationRow>,
}

impl RunReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn spec_key(spec: &ClusterSpec) -> String {
    format!("{}:{}", spec.method.name(), spec.param_label())
}

struct Timer<'a>(&'a mut BTreeMap<String, f64>);

impl Timer<'_> {
    fn time<T>(&mut self, stage: Stage, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f();
        *self.0.entry(stage.name().to_string()).or_default() += start.elapsed().as_secs_f64();
        out
    }
}

/// Per-seed state: VAE features plus clusterings, encoders and Dice scores
/// already computed for this seed.
struct SeedRun<'a> {
    cfg: &'a Config,
    train: &'a Dataset,
    test: &'a Dataset,
    seed: u64,
    features: FeatureSet,
    clusterings: HashMap<String, Clustering>,
    encoders: HashMap<String, Checkpoint>,
    dice: HashMap<(String, u64), f64>,
    report: SeedReport,
}

impl SeedRun<'_> {
    fn clustering(&mut self, spec: &ClusterSpec, timer: &mut Timer) -> Result<&Clustering> {
        let key = spec_key(spec);
        if !self.clusterings.contains_key(&key) {
            let c = timer.time(Stage::Cluster, || work::cluster(spec, &self.features, self.seed))?;
            self.report.clusterings.push(ClusterReport {
                cluster_method: spec.method.name().to_string(),
                param: spec.param_label(),
                elbow: c.elbow.as_ref().map(|e| e.points.clone()),
                elbow_k: c.elbow_k,
                stats: work::cluster_stats(self.train, &c.labels)?,
            });
            self.clusterings.insert(key.clone(), c);
        }
        Ok(&self.clusterings[&key])
    }

    fn encoder(&mut self, method: Method, spec: &ClusterSpec, timer: &mut Timer) -> Result<Option<Checkpoint>> {
        let (mode, clustering) = match method {
            Method::RandomInit => return Ok(None),
            Method::Instance => (Mode::Instance, None),
            Method::Ufc => (Mode::Ufc, Some(spec_key(spec))),
        };
        let key = format!("{}/{}", method.name(), clustering.clone().unwrap_or_default());
        if let Some(ckpt) = self.encoders.get(&key) {
            return Ok(Some(ckpt.clone()));
        }
        let labels = match mode {
            Mode::Ufc => Some(self.clustering(spec, timer)?.labels.clone()),
            Mode::Instance => None,
        };
        let (cfg, train, seed) = (self.cfg, self.train, self.seed);
        let (model, history) = timer.time(Stage::Pretrain, || {
            work::pretrain_encoder(cfg, train, mode, labels.as_ref(), seed)
        })?;
        self.report.pretraining.push(PretrainReport {
            method,
            clustering,
            epochs: history.epochs,
        });
        let ckpt = model.checkpoint();
        self.encoders.insert(key, ckpt.clone());
        Ok(Some(ckpt))
    }

    /// Mean test Dice of one (method, clustering, fraction) cell.
    fn cell(&mut self, method: Method, spec: &ClusterSpec, fraction: f64, timer: &mut Timer) -> Result<f64> {
        let clustering = (method == Method::Ufc).then(|| spec_key(spec));
        let key = (
            format!("{}/{}", method.name(), clustering.clone().unwrap_or_default()),
            fraction.to_bits(),
        );
        if let Some(&d) = self.dice.get(&key) {
            return Ok(d);
        }
        let transfer = self.encoder(method, spec, timer)?;
        let (cfg, train, seed) = (self.cfg, self.train, self.seed);
        let mut model = build_unet(work::unet_config(cfg), transfer.as_ref(), seed)?;
        let history = timer.time(Stage::Finetune, || {
            finetune(&mut model, train, fraction, &cfg.finetune, seed)
        })?;
        let mut dice = timer.time(Stage::Evaluate, || evaluate(&model, self.test))?;
        dice.fraction = fraction;
        dice.seed = seed;
        let mean = dice.mean;
        log::info!(
            "seed {seed} {} {:?} f={fraction}: dice {mean:.4}",
            method.name(),
            clustering
        );
        self.report.finetuning.push(FinetuneReport {
            method,
            clustering,
            fraction,
            history,
            dice,
        });
        self.dice.insert(key, mean);
        Ok(mean)
    }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
    writeln!(f, "{line}").map_err(io_err(path))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

/// Path of `results.csv` under `output_dir`.
pub fn results_path(output_dir: &Path) -> PathBuf {
    output_dir.join(RESULTS_FILE)
}

/// Runs methods × fractions × seeds on one shared dataset, then the
/// clustering ablation (ufc at `ablation_fraction`).
///
/// Each seed trains its own VAE. Pretrained encoders and Dice scores are
/// shared between cells that would compute the same thing, so an ablation
/// entry equal to `clustering` costs nothing extra. `results.csv` gains a row
/// as soon as each cell finishes; on error, completed rows stay on disk.
pub fn run_matrix(cfg: &Config) -> Result<RunReport> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    write_file(&out.join("config.json"), &(cfg.to_json() + "\n"))?;
    let results = results_path(out);
    write_file(&results, "method,fraction,seed,mean_dice\n")?;

    let mut seconds = BTreeMap::new();
    let mut timer = Timer(&mut seconds);
    let (train, test) = timer.time(Stage::Generate, || work::make_datasets(cfg))?;
    let positional_rates = positional_curve(&train, &POSITIONAL_PARTITIONS)?;

    let mut rows = Vec::new();
    let mut ablation_scores: Vec<Vec<(u64, f64)>> = vec![Vec::new(); cfg.ablation.len()];
    let mut ablation_k: Vec<Vec<usize>> = vec![Vec::new(); cfg.ablation.len()];
    let mut seed_reports = Vec::new();
    for &seed in &cfg.seeds {
        let (_, history, features) = timer.time(Stage::TrainVae, || work::train_features(cfg, &train, seed))?;
        log::info!(
            "seed {seed}: vae rec {:.5}",
            history.epochs.last().map_or(f64::NAN, |e| e.rec)
        );
        let mut run = SeedRun {
            cfg,
            train: &train,
            test: &test,
            seed,
            features,
            clusterings: HashMap::new(),
            encoders: HashMap::new(),
            dice: HashMap::new(),
            report: SeedReport {
                seed,
                vae: history.epochs,
                clusterings: Vec::new(),
                pretraining: Vec::new(),
                finetuning: Vec::new(),
            },
        };
        for &method in &cfg.methods {
            for &fraction in &cfg.finetune.fractions {
                let mean_dice = run.cell(method, &cfg.clustering, fraction, &mut timer)?;
                append_line(&results, &format!("{},{fraction},{seed},{mean_dice}", method.name()))?;
                rows.push(ResultRow {
                    method,
                    fraction,
                    seed,
                    mean_dice,
                });
            }
        }
        for (i, spec) in cfg.ablation.iter().enumerate() {
            let d = run.cell(Method::Ufc, spec, cfg.ablation_fraction, &mut timer)?;
            ablation_scores[i].push((seed, d));
            ablation_k[i].push(run.clustering(spec, &mut timer)?.labels.k);
        }
        seed_reports.push(run.report);
    }

    let mut ablation = Vec::new();
    let mut csv = String::from("cluster_method,param,mean_dice\n");
    for ((spec, per_seed), k) in cfg.ablation.iter().zip(ablation_scores).zip(ablation_k) {
        let mean_dice = per_seed.iter().map(|p| p.1).sum::<f64>() / per_seed.len() as f64;
        csv.push_str(&format!("{},{},{mean_dice}\n", spec.method.name(), spec.param_label()));
        ablation.push(AblationRow {
            cluster_method: spec.method.name().to_string(),
            param: spec.param_label(),
            mean_dice,
            per_seed,
            k,
        });
    }
    write_file(&out.join(ABLATION_FILE), &csv)?;

    let report = RunReport {
        config: cfg.clone(),
        stage_seconds: seconds,
        positional_rates,
        seeds: seed_reports,
        results: rows,
        ablation,
    };
    write_file(&out.join(REPORT_FILE), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    Ok(report)
}
