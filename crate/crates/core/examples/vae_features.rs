// Trains a small VAE, then clusters its posterior means and compares the
// clusters with the hidden latent classes.

use ufc::clustering::{adjusted_rand_index, agglomerative};
use ufc::synthgen::{generate_dataset, DatasetSpec};
use ufc::vae::{extract_features, train_vae, VaeConfig, VaeModel, VaeTrainConfig};
use ufc::Result;

fn run() -> Result<()> {
    let ds = generate_dataset(&DatasetSpec {
        n_samples: 96,
        image_size: 16,
        contrast: 1.0,
        ..DatasetSpec::default()
    })?;
    let config = VaeConfig {
        image_size: 16,
        channels: (8, 16),
        latent_dim: 8,
    };
    let mut model = VaeModel::new(config, 0)?;
    let history = train_vae(
        &mut model,
        &ds,
        &VaeTrainConfig {
            epochs: 15,
            lr: 3e-3,
            batch: 16,
            ..VaeTrainConfig::default()
        },
    )?;
    print!("{}", history.to_csv());

    let features = extract_features(&model, &ds)?;
    let (labels, _) = agglomerative(&features, ds.n_classes())?;
    let truth: Vec<usize> = ds.ground_truth().classes().into_iter().map(usize::from).collect();
    let map = labels.label_map();
    let predicted: Vec<usize> = ds.samples().iter().map(|s| map[&s.id]).collect();
    println!("cluster sizes {:?}", labels.cluster_sizes());
    println!(
        "ARI against latent classes {:.3}",
        adjusted_rand_index(&predicted, &truth)
    );
    Ok(())
}

fn main() -> Result<()> {
    run()
}
