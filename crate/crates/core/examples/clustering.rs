// Three well-separated Gaussian blobs, clustered by every backend, with the
// cluster count read off the elbow curve.

use rand::Rng as _;
use ufc::clustering::{adjusted_rand_index, agglomerative, dbscan, elbow_curve_from, kmeans, select_k, FeatureSet};
use ufc::rng::{normal, stream};
use ufc::Result;

fn blobs(per_blob: usize) -> (FeatureSet, Vec<usize>) {
    let centres = [(0.0, 0.0), (10.0, 0.0), (5.0, 8.66)];
    let mut rng = stream(11, "example.blobs", 0);
    let mut vectors = Vec::new();
    let mut truth = Vec::new();
    for (b, (cx, cy)) in centres.iter().enumerate() {
        for _ in 0..per_blob {
            vectors.push(vec![(cx + normal(&mut rng)) as f32, (cy + normal(&mut rng)) as f32]);
            truth.push(b);
        }
    }
    // Shuffle so no backend can lean on input order.
    for i in (1..vectors.len()).rev() {
        let j = rng.random_range(0..=i);
        vectors.swap(i, j);
        truth.swap(i, j);
    }
    let ids = (0..vectors.len()).collect();
    (FeatureSet::new(ids, vectors).expect("finite features"), truth)
}

fn run() -> Result<()> {
    let (features, truth) = blobs(20);

    let (labels, dendrogram) = agglomerative(&features, 3)?;
    let curve = elbow_curve_from(&dendrogram, &features, &(2..=10).collect::<Vec<_>>())?;
    print!("{}", curve.to_csv());
    let k = select_k(&curve)?;
    println!("elbow picks k = {k}");
    println!("agglomerative ARI {:.3}", adjusted_rand_index(&labels.labels(), &truth));

    for seed in 0..3 {
        let fit = kmeans(&features, 3, seed, 100)?;
        println!(
            "kmeans seed {seed}: ARI {:.3}, inertia {:.2}",
            adjusted_rand_index(&fit.labels.labels(), &truth),
            fit.inertia
        );
    }
    let db = dbscan(&features, 2.5, 4)?;
    println!(
        "dbscan: {} clusters, ARI {:.3}",
        db.k,
        adjusted_rand_index(&db.labels(), &truth)
    );
    assert_eq!(k, 3);
    Ok(())
}

fn main() -> Result<()> {
    run()
}
