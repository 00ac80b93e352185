//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line; the test
//! fails if any criterion does. Run with `--nocapture` to see the lines.

use std::fs;
use std::io::Write as _;
use std::time::Instant;

use ufc::clustering::{adjusted_rand_index, agglomerative, dbscan, elbow_curve, kmeans, select_k, FeatureSet};
use ufc::contrastive::{
    cluster_contrastive_loss, contrastive_loss_on_tape, instance_discrimination_loss, LossOptions, Mode,
};
use ufc::pipeline::{
    cluster, cluster_stats, make_datasets, pretrain_encoder, run_matrix, train_features, ClusterSpec, Config, KChoice,
    Method, RunReport,
};
use ufc::rng::{normal, stream};
use ufc::segmentation::{build_unet, one_hot, segmentation_loss_on_tape, UnetConfig};
use ufc::synthgen::{generate_dataset, pair_rates, DatasetSpec, PairStrategy};
use ufc::tensor::{finite_diff_check_many, Tensor};
use ufc::vae::{train_vae, vae_loss, vae_loss_on_tape, VaeConfig, VaeModel, VaeTrainConfig};
use ufc::Result;

/// Finite-difference step and max relative gradient error.
const FD_STEP: f64 = 1e-5;
/// Parameter noise that moves ReLU inputs off zero-bias kinks.
const PARAM_JITTER: f64 = 0.05;
const GRAD_TOL: f64 = 1e-4;
/// Loss reduction with singleton pseudo-labels: per batch, then per step.
const REDUCTION_TOL: f64 = 1e-10;
const HISTORY_TOL: f64 = 1e-6;
const REDUCTION_BATCHES: usize = 100;
const REDUCTION_EPOCHS: usize = 10;
const CLOSED_FORM_TOL: f64 = 1e-6;
/// Minimum mean Dice gain of ufc over random init.
const MIN_DICE_GAIN: f64 = 0.01;
/// Final VAE reconstruction relative to the first epoch's.
const VAE_REC_RATIO: f64 = 0.5;
const SEEDS: [u64; 3] = [0, 1, 2];
const FRACTION: f64 = 0.1;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, "acceptance", shape.iter().product::<usize>() as u64);
    Tensor::from_fn(shape, |_| normal(&mut rng))
}

fn jittered(params: Vec<Tensor<f64>>, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = stream(seed, "acceptance.jitter", 0);
    params
        .into_iter()
        .map(|mut p| {
            p.data_mut()
                .iter_mut()
                .for_each(|v| *v += PARAM_JITTER * normal(&mut rng));
            p
        })
        .collect()
}

fn normalized_rows(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut t = random_tensor(&[rows, cols], seed);
    for row in t.data_mut().chunks_mut(cols) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

fn gradients() -> Result<Outcome> {
    let opts = LossOptions::default();
    let labels = [0, 1, 0, 2, 0, 1, 0, 2];
    let contrastive = finite_diff_check_many(
        |tape, v| {
            let f = tape.l2_normalize(v[0])?;
            contrastive_loss_on_tape(tape, f, &labels, &opts)
        },
        &[random_tensor(&[8, 8], 1)],
        FD_STEP,
    )?;

    let vae = VaeModel::new(
        VaeConfig {
            image_size: 8,
            channels: (2, 3),
            latent_dim: 3,
        },
        4,
    )?;
    let x = random_tensor(&[2, 1, 8, 8], 3);
    let eps = random_tensor(&[2, 3], 2);
    let vae_err = finite_diff_check_many(
        |tape, ps| {
            let xv = tape.constant(x.clone());
            let ev = tape.constant(eps.clone());
            let out = vae.forward_on_tape(tape, ps, xv, ev)?;
            Ok::<_, ufc::Error>(vae_loss_on_tape(tape, out.recon, xv, out.mu, out.logvar, 2.0)?.total)
        },
        &jittered(vae.params().cast::<f64>(), 7),
        FD_STEP,
    )?;

    let unet = build_unet(
        UnetConfig {
            widths: (2, 3, 3),
            n_classes: 2,
        },
        None,
        5,
    )?;
    let img = random_tensor(&[2, 1, 8, 8], 6);
    let masks: Vec<u8> = (0..128).map(|i| ((i * 7) % 3) as u8).collect();
    let target = one_hot::<f64>(&masks, 2, 3, 8, 8)?;
    let seg = finite_diff_check_many(
        |tape, ps| {
            let xv = tape.constant(img.clone());
            let y = tape.constant(target.clone());
            let logits = unet.forward(tape, ps, xv)?;
            segmentation_loss_on_tape(tape, logits, y)
        },
        &jittered(unet.params().cast::<f64>(), 8),
        FD_STEP,
    )?;
    let worst = contrastive.max(vae_err).max(seg);
    outcome(
        worst < GRAD_TOL,
        format!("max rel err: contrastive {contrastive:.2e}, vae {vae_err:.2e}, segmentation {seg:.2e}"),
    )
}

fn reduction(cfg: &Config) -> Result<Outcome> {
    let opts = LossOptions::default();
    let mut worst = 0.0f64;
    for i in 0..REDUCTION_BATCHES {
        let b = 2 + i % 15;
        let f = normalized_rows(2 * b, 8 + i % 9, 100 + i as u64);
        let singletons: Vec<usize> = (0..2 * b).map(|j| 1000 + (j % b) * 7).collect();
        let guided = cluster_contrastive_loss(&f, &singletons, &opts)?.item();
        let instance = instance_discrimination_loss(&f, &opts)?.item();
        worst = worst.max((guided - instance).abs());
    }

    let mut cfg = cfg.clone();
    cfg.contrastive.epochs = REDUCTION_EPOCHS;
    let cfg = &cfg;
    let (train, _) = make_datasets(cfg)?;
    let (_, _, features) = train_features(cfg, &train, 0)?;
    let singles = cluster(&ClusterSpec::agglomerative(KChoice::N), &features, 0)?.labels;
    let (_, hu) = pretrain_encoder(cfg, &train, Mode::Ufc, Some(&singles), 0)?;
    let (_, hi) = pretrain_encoder(cfg, &train, Mode::Instance, None, 0)?;
    let steps = hu.steps.len() == hi.steps.len() && !hu.steps.is_empty();
    let history = hu
        .steps
        .iter()
        .zip(&hi.steps)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    outcome(
        worst <= REDUCTION_TOL && steps && history <= HISTORY_TOL,
        format!(
            "{REDUCTION_BATCHES} batches max |Δ| {worst:.1e}; {} pretraining steps max |Δ| {history:.1e}",
            hu.steps.len()
        ),
    )
}

fn orthogonal() -> Result<Outcome> {
    let f = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0])?;
    let opts = LossOptions {
        tau: 1.0,
        ..LossOptions::default()
    };
    let loss: f64 = instance_discrimination_loss(&f, &opts)?.item();
    let expected = -(1.0 - 2f64.ln());
    outcome(
        (loss - expected).abs() <= CLOSED_FORM_TOL,
        format!("loss {loss:.9} vs {expected:.9}"),
    )
}

/// Centres of an equilateral triangle with side 10, unit-variance points.
fn blobs(per_blob: usize) -> (FeatureSet, Vec<usize>) {
    let centres = [(0.0, 0.0), (10.0, 0.0), (5.0, 75f64.sqrt())];
    let mut rng = stream(42, "acceptance.blobs", 0);
    let mut vectors = Vec::new();
    let mut truth = Vec::new();
    for (b, (cx, cy)) in centres.iter().enumerate() {
        for _ in 0..per_blob {
            vectors.push(vec![(cx + normal(&mut rng)) as f32, (cy + normal(&mut rng)) as f32]);
            truth.push(b);
        }
    }
    (FeatureSet::new((0..vectors.len()).collect(), vectors).unwrap(), truth)
}

fn clustering_oracles() -> Result<Outcome> {
    let (f, truth) = blobs(20);
    let agg = adjusted_rand_index(&agglomerative(&f, 3)?.0.labels(), &truth);
    let km: Vec<f64> = (0..5)
        .map(|s| Ok(adjusted_rand_index(&kmeans(&f, 3, s, 100)?.labels.labels(), &truth)))
        .collect::<Result<_>>()?;
    let db = adjusted_rand_index(&dbscan(&f, 2.5, 4)?.labels(), &truth);
    let k = select_k(&elbow_curve(&f, &(2..=10).collect::<Vec<_>>())?)?;
    outcome(
        agg == 1.0 && km.iter().all(|&a| a == 1.0) && db == 1.0 && k == 3,
        format!("ARI agglomerative {agg}, kmeans {km:?}, dbscan {db}; elbow k = {k}"),
    )
}

fn vae_closed_forms() -> Result<Outcome> {
    let d = 16;
    let x = Tensor::<f32>::full(&[4, 8], 0.25);
    let zero = Tensor::<f32>::zeros(&[4, d]);
    let ones = Tensor::<f32>::full(&[4, d], 1.0);
    let kl0 = vae_loss(&x, &x, &zero, &zero, 2.0)?.kl;
    let kl1 = vae_loss(&x, &x, &ones, &zero, 2.0)?.kl;

    let ds = generate_dataset(&DatasetSpec {
        n_samples: 48,
        image_size: 16,
        ..DatasetSpec::default()
    })?;
    let mut model = VaeModel::new(
        VaeConfig {
            image_size: 16,
            channels: (4, 8),
            latent_dim: 4,
        },
        0,
    )?;
    let cfg = VaeTrainConfig {
        epochs: 3,
        batch: 16,
        beta: 0.0,
        ..VaeTrainConfig::default()
    };
    let h = train_vae(&mut model, &ds, &cfg)?;
    let beta0 = !h.steps.is_empty() && h.steps.iter().all(|s| s.total == s.rec);
    outcome(
        kl0 == 0.0 && kl1 == 0.5 * d as f64 && beta0,
        format!(
            "kl(0,0) = {kl0}, kl(1,0) = {kl1} (d = {d}), β=0 total==rec over {} steps: {beta0}",
            h.steps.len()
        ),
    )
}

fn harmful_pairs(cfg: &Config) -> Result<Outcome> {
    let (train, _) = make_datasets(cfg)?;
    let (_, _, features) = train_features(cfg, &train, 0)?;
    let labels = cluster(&cfg.clustering, &features, 0)?.labels;
    let stats = cluster_stats(&train, &labels)?;

    let spec = DatasetSpec {
        imbalance_ratio: 1.0,
        ..cfg.dataset.clone()
    };
    let balanced = generate_dataset(&spec)?;
    let (n, c) = (spec.n_samples as f64, spec.n_classes as f64);
    let oracle = (n / c - 1.0) / (n - 1.0);
    let rate = pair_rates(&balanced, &PairStrategy::InstanceDiscrimination, None)?.harmful_negative_rate;
    let (guided, instance) = (
        stats.cluster_rates.harmful_negative_rate,
        stats.instance_rates.harmful_negative_rate,
    );
    outcome(
        guided < instance && rate == oracle,
        format!(
            "harmful negatives: cluster-guided {guided:.4} (k = {}) vs instance {instance:.4}; balanced instance {rate} vs oracle {oracle}",
            labels.k
        ),
    )
}

fn vae_training_progress(report: &RunReport) -> Result<Outcome> {
    let ratios: Vec<f64> = report
        .seeds
        .iter()
        .map(|s| s.vae.last().unwrap().rec / s.vae[0].rec)
        .collect();
    outcome(
        ratios.iter().all(|&r| r < VAE_REC_RATIO),
        format!("final / first epoch rec per seed {ratios:.3?}"),
    )
}

fn mean_of(report: &RunReport, method: Method) -> f64 {
    let v: Vec<f64> = report
        .results
        .iter()
        .filter(|r| r.method == method && r.fraction == FRACTION)
        .map(|r| r.mean_dice)
        .collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn table_ordering(report: &RunReport) -> Result<Outcome> {
    let (ufc, random) = (mean_of(report, Method::Ufc), mean_of(report, Method::RandomInit));
    outcome(
        ufc - random >= MIN_DICE_GAIN,
        format!(
            "mean dice ufc {ufc:.4} vs random_init {random:.4} (gain {:.4})",
            ufc - random
        ),
    )
}

fn ablation_trend(report: &RunReport) -> Result<Outcome> {
    let find = |p: &str| {
        report
            .ablation
            .iter()
            .find(|r| r.param == p)
            .map(|r| (r.mean_dice, r.k.clone()))
    };
    let (Some(two), Some(auto), Some(n)) = (find("k=2"), find("k=auto"), find("k=n")) else {
        return outcome(false, "ablation rows missing");
    };
    outcome(
        auto.0 >= two.0 && auto.0 >= n.0,
        format!(
            "mean dice k=2 {:.4}, k=auto {:.4} (k per seed {:?}), k=n {:.4}",
            two.0, auto.0, auto.1, n.0
        ),
    )
}

fn determinism(a: &std::path::Path, b: &std::path::Path) -> Result<Outcome> {
    let same = |f: &str| fs::read(a.join(f)).ok() == fs::read(b.join(f)).ok();
    let rows = fs::read_to_string(a.join("results.csv")).map_or(0, |t| t.lines().count() - 1);
    outcome(
        same("results.csv") && same("ablation.csv") && rows > 0,
        format!(
            "results.csv ({rows} rows) and ablation.csv byte-identical: {}",
            same("results.csv") && same("ablation.csv")
        ),
    )
}

fn acceptance_config(out: &std::path::Path) -> Config {
    Config {
        seeds: SEEDS.to_vec(),
        methods: vec![Method::Ufc, Method::RandomInit],
        ablation: vec![
            ClusterSpec::agglomerative(KChoice::Fixed(2)),
            ClusterSpec::agglomerative(KChoice::Auto),
            ClusterSpec::agglomerative(KChoice::N),
        ],
        ablation_fraction: FRACTION,
        output_dir: out.to_path_buf(),
        ..Config::default()
    }
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let (out_a, out_b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg = acceptance_config(&out_a);
    assert_eq!(cfg.finetune.fractions, vec![FRACTION]);

    let mut lines = Vec::new();
    let mut record = |id: &str, name: &str, r: Result<Outcome>, started: Instant| {
        let secs = started.elapsed().as_secs_f64();
        let (pass, detail) = match r {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let line = format!(
            "{} {id:>2} {name}: {detail} [{secs:.1}s]",
            if pass { "PASS" } else { "FAIL" }
        );
        // Bypasses libtest capture so the line shows without `--nocapture`.
        writeln!(std::io::stdout(), "{line}").unwrap();
        lines.push((pass, line));
    };

    let t = Instant::now();
    record("1", "gradient correctness", gradients(), t);
    let t = Instant::now();
    record("2", "singleton reduction", reduction(&cfg), t);
    let t = Instant::now();
    record("3", "orthogonal closed form", orthogonal(), t);
    let t = Instant::now();
    record("4", "clustering oracles", clustering_oracles(), t);
    let t = Instant::now();
    record("5", "vae closed forms", vae_closed_forms(), t);
    let t = Instant::now();
    record("6", "harmful pairs", harmful_pairs(&cfg), t);

    let t = Instant::now();
    match run_matrix(&cfg) {
        Ok(report) => {
            record("7", "ufc beats random init", table_ordering(&report), t);
            let t = Instant::now();
            record("8", "elbow granularity beats extremes", ablation_trend(&report), t);
            record("-", "vae reconstruction halves", vae_training_progress(&report), t);
        }
        Err(e) => {
            for (id, name) in [
                ("7", "ufc beats random init"),
                ("8", "elbow granularity beats extremes"),
            ] {
                record(id, name, Err(ufc::Error::Invalid(e.to_string())), t);
            }
        }
    }

    let t = Instant::now();
    let second = run_matrix(&Config {
        output_dir: out_b.clone(),
        ..cfg.clone()
    });
    let det = second.and_then(|_| determinism(&out_a, &out_b));
    record("9", "matrix determinism", det, t);

    let failed: Vec<&String> = lines.iter().filter(|(p, _)| !p).map(|(_, l)| l).collect();
    assert!(failed.is_empty(), "failed criteria:\n{failed:#?}");
}
