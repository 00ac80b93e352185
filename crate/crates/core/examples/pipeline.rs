// Every stage of the pipeline on a toy configuration, first one stage at a
// time and then as a small experiment matrix with a clustering ablation.

use ufc::pipeline::{report, run_matrix, run_stage, ClusterSpec, Config, KChoice, Method, Stage};
use ufc::Result;

fn toy_config(out: &std::path::Path) -> Result<Config> {
    let mut cfg = Config {
        output_dir: out.to_path_buf(),
        ..Config::default()
    };
    for o in [
        "dataset.n_samples=48",
        "dataset.image_size=16",
        "test_samples=12",
        "vae.epochs=3",
        "vae.channels=[4,8]",
        "vae.latent_dim=4",
        "clustering.k_range=[2,8]",
        "contrastive.epochs=1",
        "contrastive.batch=8",
        "contrastive.head={\"hidden\":16,\"out\":8}",
        "finetune.epochs=2",
        "finetune.fractions=[0.25,0.5]",
        "unet_widths=[4,8,8]",
        "seeds=[0,1]",
    ] {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn run() -> Result<()> {
    let dir = std::env::temp_dir().join(format!("ufc-pipeline-{}", std::process::id()));
    let mut cfg = toy_config(&dir)?;

    for stage in Stage::ALL {
        run_stage(stage, &cfg)?;
        println!("{stage}: done");
    }
    print!(
        "{}",
        std::fs::read_to_string(dir.join("cluster").join("elbow.csv")).unwrap_or_default()
    );

    cfg.methods = vec![Method::Ufc, Method::Instance, Method::RandomInit];
    cfg.ablation = vec![
        ClusterSpec::agglomerative(KChoice::Fixed(2)),
        ClusterSpec::agglomerative(KChoice::Auto),
        ClusterSpec::agglomerative(KChoice::N),
    ];
    run_matrix(&cfg)?;
    print!("{}", report(&dir)?);
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}

fn main() -> Result<()> {
    run()
}
