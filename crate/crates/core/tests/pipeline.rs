use std::fs;
use std::path::Path;
use std::process::Command;

use ufc::checkpoint::Checkpoint;
use ufc::pipeline::{report, run_matrix, run_stage, ClusterSpec, Config, KChoice, Method, Stage};
use ufc::Error;

fn tiny(out: &Path) -> Config {
    let mut cfg = Config {
        output_dir: out.to_path_buf(),
        ..Config::default()
    };
    for o in [
        "dataset.n_samples=40",
        "dataset.image_size=16",
        "test_samples=8",
        "vae.epochs=2",
        "vae.channels=[4,8]",
        "vae.latent_dim=4",
        "clustering.k_range=[2,6]",
        "contrastive.epochs=1",
        "contrastive.batch=8",
        "contrastive.head={\"hidden\":8,\"out\":4}",
        "finetune.epochs=1",
        "finetune.batch=4",
        "finetune.fractions=[0.5]",
        "unet_widths=[4,4,8]",
        "seeds=[3]",
        "ablation=[]",
    ] {
        cfg.apply_override(o).unwrap();
    }
    cfg
}

fn run_all(cfg: &Config) {
    for stage in Stage::ALL {
        run_stage(stage, cfg).unwrap_or_else(|e| panic!("{stage}: {e}"));
    }
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn cluster_before_train_vae_names_the_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run_stage(Stage::Generate, &cfg).unwrap();
    let err = run_stage(Stage::Cluster, &cfg).unwrap_err();
    assert_eq!(err.to_string(), "missing features: run train-vae");
    let err = run_stage(Stage::Evaluate, &cfg).unwrap_err();
    assert!(
        matches!(
            err,
            Error::MissingArtifact {
                producer: "finetune",
                ..
            }
        ),
        "{err}"
    );
}

#[test]
fn stages_populate_directories_and_rerun_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run_all(&cfg);
    for stage in Stage::ALL {
        let d = stage.dir(dir.path());
        assert!(fs::read_dir(&d).unwrap().next().is_some(), "{stage} is empty");
    }

    let labels = fs::read(dir.path().join("cluster/labels.json")).unwrap();
    run_stage(Stage::Cluster, &cfg).unwrap();
    assert_eq!(fs::read(dir.path().join("cluster/labels.json")).unwrap(), labels);

    for stage in [Stage::TrainVae, Stage::Pretrain, Stage::Finetune, Stage::Evaluate] {
        let d = stage.dir(dir.path());
        let before = read_dir_bytes(&d);
        fs::remove_dir_all(&d).unwrap();
        run_stage(stage, &cfg).unwrap();
        assert_eq!(read_dir_bytes(&d), before, "{stage} not reproduced");
    }
}

#[test]
fn finetune_transfers_the_pretrained_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.finetune.epochs = 0;
    run_all(&cfg);
    let encoder = Checkpoint::load(&dir.path().join("pretrain/encoder.ufck")).unwrap();
    let unet = Checkpoint::load(&dir.path().join("finetune/unet_f0.5.ufck")).unwrap();
    for (name, t) in unet.entries() {
        match encoder.get(name) {
            Some(e) => assert_eq!(e, t, "{name}"),
            None => assert!(name.starts_with("dec."), "{name}"),
        }
    }
}

#[test]
fn checkpoint_files_round_trip_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run_stage(Stage::Generate, &cfg).unwrap();
    run_stage(Stage::TrainVae, &cfg).unwrap();
    let path = dir.path().join("train-vae/vae.ufck");
    let again = dir.path().join("copy.ufck");
    Checkpoint::load(&path).unwrap().save(&again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn minimal_matrix_has_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.methods = vec![Method::RandomInit];
    cfg.finetune.fractions = vec![1.0];
    let r = run_matrix(&cfg).unwrap();
    assert_eq!(r.results.len(), 1);
    let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("method,fraction,seed,mean_dice\nrandom_init,1,3,"));
    assert_eq!(
        fs::read_to_string(dir.path().join("ablation.csv")).unwrap(),
        "cluster_method,param,mean_dice\n"
    );
}

#[test]
fn singleton_clusters_match_instance_discrimination_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.methods = vec![Method::Ufc, Method::Instance];
    cfg.clustering = ClusterSpec::agglomerative(KChoice::N);
    let r = run_matrix(&cfg).unwrap();
    assert_eq!(r.results[0].method, Method::Ufc);
    assert_eq!(r.results[0].mean_dice, r.results[1].mean_dice);
    let s = &r.seeds[0].pretraining;
    assert_eq!(s[0].epochs, s[1].epochs);
}

#[test]
fn matrix_is_deterministic_and_reported() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = tiny(a.path());
    cfg.seeds = vec![0, 1];
    cfg.methods = vec![Method::Ufc, Method::RandomInit];
    cfg.finetune.fractions = vec![0.25, 0.5];
    cfg.ablation = vec![
        ClusterSpec::agglomerative(KChoice::Fixed(2)),
        ClusterSpec::agglomerative(KChoice::Auto),
    ];
    run_matrix(&cfg).unwrap();
    cfg.output_dir = b.path().to_path_buf();
    run_matrix(&cfg).unwrap();
    for file in ["results.csv", "ablation.csv"] {
        assert_eq!(
            fs::read(a.path().join(file)).unwrap(),
            fs::read(b.path().join(file)).unwrap(),
            "{file}"
        );
    }
    let csv = fs::read_to_string(a.path().join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2);
    let text = report(a.path()).unwrap();
    assert_eq!(
        text.lines()
            .filter(|l| l.starts_with("  ") && l.contains(" f="))
            .count(),
        4,
        "{text}"
    );
    assert!(text.contains("ari="));
}

fn ufc(args: &[&str], env_seed: Option<&str>) -> (i32, String, String) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ufc"));
    cmd.args(args).env("RUST_LOG", "off");
    match env_seed {
        Some(s) => cmd.env("UFC_SEED", s),
        None => cmd.env_remove("UFC_SEED"),
    };
    let out = cmd.output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(ufc(&["--help"], None).0, 0);
    assert_eq!(ufc(&["--version"], None).0, 0);
    assert_eq!(ufc(&["frobnicate"], None).0, 1);
    assert_eq!(ufc(&["generate", "--set", "no.such.key=1", "--out", out], None).0, 1);
    assert_eq!(ufc(&["generate", "--config", "/nonexistent/config.json"], None).0, 1);
    assert_eq!(ufc(&["generate", "--out", out], Some("not-a-number")).0, 1);
    let (code, _, err) = ufc(&["cluster", "--out", out], None);
    assert_eq!(code, 2);
    assert!(err.contains("missing features: run train-vae"), "{err}");
    let (code, _, err) = ufc(&["report", "--out", out], None);
    assert_eq!((code, err.trim()), (2, "error: missing results.csv: run matrix"));
}

#[test]
fn cli_runs_a_matrix_from_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&dir.path().join("ignored"));
    cfg.methods = vec![Method::RandomInit];
    let config = dir.path().join("config.json");
    fs::write(&config, cfg.to_json()).unwrap();
    let out = dir.path().join("run");
    let args = [
        "matrix",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    let (code, _, err) = ufc(&args, Some("9"));
    assert_eq!(code, 0, "{err}");
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("random_init,0.5,9,"), "{csv}");
    let (code, text, _) = ufc(&["report", "--out", out.to_str().unwrap()], None);
    assert_eq!(code, 0);
    assert!(text.contains("random_init  f=0.5"), "{text}");
}
