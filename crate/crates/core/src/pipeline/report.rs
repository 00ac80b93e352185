use std::fmt::Write as _;
use std::path::Path;

use super::matrix::{results_path, RunReport, ABLATION_FILE, REPORT_FILE};
use crate::error::{invalid, io_err, Error, Result};

/// Mean and sample standard deviation (`n − 1`); the deviation is `None`
/// for a single value.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

/// `(method, fraction) → Dice values` in first-appearance order.
type Groups = Vec<((String, String), Vec<f64>)>;

fn grouped_results(text: &str) -> Result<Groups> {
    let mut groups: Groups = Vec::new();
    for (line_no, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let [method, fraction, _seed, dice] = cols[..] else {
            return Err(invalid(format!("results.csv line {}: expected 4 columns", line_no + 1)));
        };
        let dice: f64 = dice
            .parse()
            .map_err(|_| invalid(format!("results.csv line {}: bad mean_dice {dice:?}", line_no + 1)))?;
        let key = (method.to_string(), fraction.to_string());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(dice),
            None => groups.push((key, vec![dice])),
        }
    }
    Ok(groups)
}

fn fmt_std(s: Option<f64>) -> String {
    s.map_or_else(|| "n/a".to_string(), |s| format!("{s:.4}"))
}

/// Human-readable summary of a matrix run: one Dice line per
/// (method, fraction), then ablation and clustering diagnostics when present.
pub fn report(output_dir: &Path) -> Result<String> {
    let path = results_path(output_dir);
    if !path.exists() {
        return Err(Error::MissingArtifact {
            artifact: "results.csv".into(),
            producer: "matrix",
        });
    }
    let groups = grouped_results(&std::fs::read_to_string(&path).map_err(io_err(&path))?)?;
    let ablation_path = output_dir.join(ABLATION_FILE);
    let has_ablation = std::fs::read_to_string(&ablation_path).is_ok_and(|t| t.lines().count() > 1);
    if groups.is_empty() && !has_ablation {
        return Err(Error::NoRuns);
    }

    let mut out = String::from("test dice by method and annotation fraction (mean ± sample std)\n");
    for ((method, fraction), values) in &groups {
        let (mean, std) = mean_std(values);
        writeln!(
            out,
            "  {method:<12} f={fraction:<6} {mean:.4} ± {} (n={})",
            fmt_std(std),
            values.len()
        )
        .unwrap();
    }

    let run_path = output_dir.join(REPORT_FILE);
    if run_path.exists() {
        let run = RunReport::load(&run_path)?;
        if !run.ablation.is_empty() {
            writeln!(out, "clustering ablation (ufc at f={})", run.config.ablation_fraction).unwrap();
            for row in &run.ablation {
                let (_, std) = mean_std(&row.per_seed.iter().map(|p| p.1).collect::<Vec<_>>());
                writeln!(
                    out,
                    "  {:<14} {:<10} {:.4} ± {} (k per seed {:?})",
                    row.cluster_method,
                    row.param,
                    row.mean_dice,
                    fmt_std(std),
                    row.k
                )
                .unwrap();
            }
        }
        writeln!(out, "pseudo-labels vs latent classes").unwrap();
        for seed in &run.seeds {
            for c in &seed.clusterings {
                writeln!(
                    out,
                    "  seed {:<3} {:<14} {:<10} k={:<4} ari={:.4} harmful negatives: cluster {:.4} instance {:.4}",
                    seed.seed,
                    c.cluster_method,
                    c.param,
                    c.stats.k,
                    c.stats.ari,
                    c.stats.cluster_rates.harmful_negative_rate,
                    c.stats.instance_rates.harmful_negative_rate,
                )
                .unwrap();
            }
        }
        writeln!(out, "positional strategy harmful rates (negative / positive)").unwrap();
        for (p, r) in &run.positional_rates {
            writeln!(
                out,
                "  partitions={p:<3} {:.4} / {:.4}",
                r.harmful_negative_rate, r.harmful_positive_rate
            )
            .unwrap();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std_uses_n_minus_one() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, Some(1.0));
        assert_eq!(mean_std(&[4.0]), (4.0, None));
    }

    #[test]
    fn header_only_means_no_runs() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("results.csv"), "method,fraction,seed,mean_dice\n").unwrap();
        assert_eq!(report(dir.path()).unwrap_err().to_string(), "no runs found");
    }

    #[test]
    fn missing_results_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(
            report(dir.path()).unwrap_err().to_string(),
            "missing results.csv: run matrix"
        );
    }

    #[test]
    fn one_line_per_method_and_fraction() {
        let dir = tempfile::tempdir().unwrap();
        let csv = "method,fraction,seed,mean_dice\n\
                   ufc,0.1,0,0.5\nufc,0.1,1,0.7\nrandom_init,0.1,0,0.4\nufc,0.2,0,0.9\n";
        std::fs::write(dir.path().join("results.csv"), csv).unwrap();
        let text = report(dir.path()).unwrap();
        assert_eq!(text.lines().filter(|l| l.contains(" f=")).count(), 3);
        assert!(text.contains("ufc          f=0.1    0.6000 ± 0.1414 (n=2)"), "{text}");
        assert!(text.contains("(n=1)"));
    }
}
