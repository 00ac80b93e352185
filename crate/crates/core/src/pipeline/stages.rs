use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::config::{Config, Method};
use super::work;
use crate::checkpoint::Checkpoint;
use crate::clustering::{FeatureSet, PseudoLabels};
use crate::contrastive::Mode;
use crate::error::{invalid, io_err, Error, Result};
use crate::segmentation::{build_unet, evaluate, DiceReport};
use crate::synthgen::{load_dataset, save_dataset, Dataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Generate,
    TrainVae,
    Cluster,
    Pretrain,
    Finetune,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Generate,
        Stage::TrainVae,
        Stage::Cluster,
        Stage::Pretrain,
        Stage::Finetune,
        Stage::Evaluate,
    ];

    /// Also the name of the stage's output directory.
    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::TrainVae => "train-vae",
            Stage::Cluster => "cluster",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn dir(self, output_dir: &Path) -> PathBuf {
        output_dir.join(self.name())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| invalid(format!("unknown stage {s:?}")))
    }
}

/// File name of the fine-tuned UNet for one annotation fraction.
pub fn unet_file(fraction: f64) -> String {
    format!("unet_f{fraction}.ufck")
}

pub fn dice_file(fraction: f64) -> String {
    format!("dice_f{fraction}.json")
}

fn require(path: PathBuf, artifact: &str, producer: Stage) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact {
            artifact: artifact.to_string(),
            producer: producer.name(),
        })
    }
}

fn fresh_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(io_err(path))
}

fn load_split(cfg: &Config, split: &str) -> Result<Dataset> {
    let dir = require(
        Stage::Generate.dir(&cfg.output_dir).join(split),
        "dataset",
        Stage::Generate,
    )?;
    load_dataset(&dir)
}

/// Method that single-stage `pretrain` and `finetune` follow: the first of
/// `methods`, or ufc when the list is empty.
fn primary_method(cfg: &Config) -> Method {
    cfg.methods.first().copied().unwrap_or(Method::Ufc)
}

/// Runs one stage with the first configured seed, reading upstream artifacts
/// from and writing outputs to `output_dir/<stage>/`.
pub fn run_stage(stage: Stage, cfg: &Config) -> Result<()> {
    let out = &cfg.output_dir;
    let dir = stage.dir(out);
    let seed = cfg.primary_seed();
    match stage {
        Stage::Generate => {
            let (train, test) = work::make_datasets(cfg)?;
            save_dataset(&dir.join("train"), &train)?;
            save_dataset(&dir.join("test"), &test)?;
        }
        Stage::TrainVae => {
            let train = load_split(cfg, "train")?;
            let (model, history, features) = work::train_features(cfg, &train, seed)?;
            fresh_dir(&dir)?;
            Checkpoint::from_params(model.params()).save(&dir.join("vae.ufck"))?;
            history.save_csv(&dir.join("vae_history.csv"))?;
            features.save(&dir.join("features.json"))?;
        }
        Stage::Cluster => {
            let path = require(
                Stage::TrainVae.dir(out).join("features.json"),
                "features",
                Stage::TrainVae,
            )?;
            let features = FeatureSet::load(&path)?;
            let train = load_split(cfg, "train")?;
            let c = work::cluster(&cfg.clustering, &features, seed)?;
            fresh_dir(&dir)?;
            c.labels.save(&dir.join("labels.json"))?;
            if let Some(elbow) = &c.elbow {
                elbow.save_csv(&dir.join("elbow.csv"))?;
            }
            write_json(&dir.join("stats.json"), &work::cluster_stats(&train, &c.labels)?)?;
        }
        Stage::Pretrain => {
            let train = load_split(cfg, "train")?;
            let mode = match primary_method(cfg) {
                Method::RandomInit => return Err(invalid("random_init has no pretraining stage")),
                Method::Instance => Mode::Instance,
                Method::Ufc => Mode::Ufc,
            };
            let labels = match mode {
                Mode::Ufc => Some(PseudoLabels::load(&require(
                    Stage::Cluster.dir(out).join("labels.json"),
                    "labels",
                    Stage::Cluster,
                )?)?),
                Mode::Instance => None,
            };
            let (model, history) = work::pretrain_encoder(cfg, &train, mode, labels.as_ref(), seed)?;
            fresh_dir(&dir)?;
            model.checkpoint().save(&dir.join("encoder.ufck"))?;
            history.save_csv(&dir.join("pretrain_history.csv"))?;
        }
        Stage::Finetune => {
            let train = load_split(cfg, "train")?;
            let transfer = match primary_method(cfg) {
                Method::RandomInit => None,
                _ => Some(Checkpoint::load(&require(
                    Stage::Pretrain.dir(out).join("encoder.ufck"),
                    "encoder",
                    Stage::Pretrain,
                )?)?),
            };
            fresh_dir(&dir)?;
            for &fraction in &cfg.finetune.fractions {
                let mut model = build_unet(work::unet_config(cfg), transfer.as_ref(), seed)?;
                let history = crate::segmentation::finetune(&mut model, &train, fraction, &cfg.finetune, seed)?;
                Checkpoint::from_params(model.params()).save(&dir.join(unet_file(fraction)))?;
                write_json(&dir.join(format!("finetune_history_f{fraction}.json")), &history)?;
            }
        }
        Stage::Evaluate => {
            let test = load_split(cfg, "test")?;
            let mut reports = Vec::new();
            for &fraction in &cfg.finetune.fractions {
                let name = unet_file(fraction);
                let path = require(Stage::Finetune.dir(out).join(&name), &name, Stage::Finetune)?;
                let mut model = build_unet(work::unet_config(cfg), None, seed)?;
                model.load_checkpoint(&Checkpoint::load(&path)?)?;
                let mut report = evaluate(&model, &test)?;
                report.fraction = fraction;
                report.seed = seed;
                reports.push(report);
            }
            fresh_dir(&dir)?;
            for r in &reports {
                r.save(&dir.join(dice_file(r.fraction)))?;
            }
        }
    }
    Ok(())
}

/// Loads every Dice report written by the evaluate stage for `cfg`.
pub fn load_dice_reports(cfg: &Config) -> Result<Vec<DiceReport>> {
    let dir = Stage::Evaluate.dir(&cfg.output_dir);
    cfg.finetune
        .fractions
        .iter()
        .map(|&f| DiceReport::load(&require(dir.join(dice_file(f)), "dice report", Stage::Evaluate)?))
        .collect()
}
