// The cluster-guided contrastive loss on hand-built features: two
// orthogonal unit vectors, and a batch where singleton pseudo-labels turn
// it into instance discrimination.

use ufc::contrastive::{cluster_contrastive_loss, instance_discrimination_loss, LossOptions};
use ufc::rng::{normal, stream};
use ufc::tensor::Tensor;
use ufc::Result;

fn normalized(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, "example.features", 0);
    let mut data: Vec<f64> = (0..rows * cols).map(|_| normal(&mut rng)).collect();
    for row in data.chunks_mut(cols) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::new(vec![rows, cols], data).expect("rows × cols")
}

fn run() -> Result<()> {
    // Two views per image, b = 2 images with different labels.
    let opts = LossOptions {
        tau: 1.0,
        ..LossOptions::default()
    };
    let f = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0])?;
    let loss = cluster_contrastive_loss(&f, &[0, 1, 0, 1], &opts)?.item();
    println!(
        "orthogonal views: loss {loss:.6}, closed form {:.6}",
        -(1.0 - 2f64.ln())
    );

    let opts = LossOptions::default();
    let f = normalized(8, 16, 3);
    let singletons = [0, 1, 2, 3, 0, 1, 2, 3];
    let guided = cluster_contrastive_loss(&f, &singletons, &opts)?.item();
    let instance = instance_discrimination_loss(&f, &opts)?.item();
    println!("singleton labels {guided:.12} vs instance {instance:.12}");
    assert!((guided - instance).abs() < 1e-12);

    let coarse = cluster_contrastive_loss(&f, &[0, 0, 1, 1, 0, 0, 1, 1], &opts)?.item();
    println!("two clusters of two images: {coarse:.6}");
    Ok(())
}

fn main() -> Result<()> {
    run()
}
