// Renders a small synthetic set, writes it to disk, and counts how often
// each pair-selection strategy pushes apart images of the same latent class.

use ufc::clustering::PseudoLabels;
use ufc::synthgen::{
    generate_dataset, load_dataset, pair_rates, positional_curve, save_dataset, DatasetSpec, PairStrategy,
};
use ufc::Result;

fn run() -> Result<()> {
    let spec = DatasetSpec {
        n_samples: 60,
        image_size: 16,
        slices_per_volume: 10,
        ..DatasetSpec::default()
    };
    let ds = generate_dataset(&spec)?;
    println!("class counts {:?}", spec.class_counts());

    let dir = std::env::temp_dir().join(format!("ufc-synthetic-{}", std::process::id()));
    save_dataset(&dir, &ds)?;
    assert_eq!(load_dataset(&dir)?, ds);
    std::fs::remove_dir_all(&dir).ok();

    let instance = pair_rates(&ds, &PairStrategy::InstanceDiscrimination, None)?;
    println!(
        "instance discrimination: harmful negatives {:.3}",
        instance.harmful_negative_rate
    );
    for (p, r) in positional_curve(&ds, &[1, 2, 5])? {
        println!(
            "positional p={p}: harmful negatives {:.3}, harmful positives {:.3}",
            r.harmful_negative_rate, r.harmful_positive_rate
        );
    }

    // Pseudo-labels equal to the latent classes remove every harmful pair.
    let truth = ds.ground_truth().classes();
    let oracle = PseudoLabels::new(
        "oracle",
        serde_json::json!({}),
        ds.ids()
            .into_iter()
            .zip(truth.iter().map(|&c| c as usize - 1))
            .collect(),
    )?;
    let guided = pair_rates(&ds, &PairStrategy::ClusterGuided, Some(&oracle))?;
    println!("oracle clusters: harmful negatives {:.3}", guided.harmful_negative_rate);
    assert_eq!(guided.harmful_negative_rate, 0.0);
    Ok(())
}

fn main() -> Result<()> {
    run()
}
