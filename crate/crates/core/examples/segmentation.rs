// Fine-tunes a UNet from scratch on a labeled tenth of a small set and
// reports per-class Dice on held-out images.

use ufc::segmentation::{build_unet, evaluate, finetune, labeled_subset, FinetuneConfig, UnetConfig};
use ufc::synthgen::{generate_dataset, DatasetSpec};
use ufc::Result;

fn run() -> Result<()> {
    let spec = DatasetSpec {
        n_samples: 80,
        image_size: 16,
        ..DatasetSpec::default()
    };
    let train = generate_dataset(&spec)?;
    let test = generate_dataset(&DatasetSpec {
        n_samples: 20,
        seed: 99,
        ..spec
    })?;

    let fraction = 0.25;
    println!("labeled positions {:?}", labeled_subset(&train, fraction, 0)?);
    let mut model = build_unet(
        UnetConfig {
            widths: (4, 8, 16),
            n_classes: spec.n_classes,
        },
        None,
        0,
    )?;
    let cfg = FinetuneConfig {
        epochs: 8,
        lr: 3e-3,
        batch: 4,
        ..FinetuneConfig::default()
    };
    let history = finetune(&mut model, &train, fraction, &cfg, 0)?;
    for e in &history.epochs {
        println!(
            "epoch {:>2}: loss {:.4}, val dice {:.4}",
            e.epoch, e.train_loss, e.val_dice
        );
    }
    println!("kept epoch {:?}", history.best_epoch);

    let report = evaluate(&model, &test)?;
    println!("test dice per class {:?}, mean {:.4}", report.per_class, report.mean);
    Ok(())
}

fn main() -> Result<()> {
    run()
}
