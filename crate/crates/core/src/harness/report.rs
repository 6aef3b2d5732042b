//! Aggregation of per-cell metrics into summary tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::Variant;
use crate::error::{Error, Result};
use crate::harness::experiment::{CellError, CellMetrics, ExperimentConfig, ExperimentOutcome, ExperimentVariant, Objective};
use crate::metrics::{slide_distribution, write_quartiles_csv};

/// Mean over folds of the seed-averaged per-fold value, with both spreads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub metric: String,
    pub mean: Option<f64>,
    /// sample std of the per-fold means
    pub std_folds: Option<f64>,
    /// sample std of the per-seed means
    pub std_seeds: Option<f64>,
    /// cells contributing a defined value
    pub n: usize,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn sample_std(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v)?;
    Some((v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}

/// Metric names in report order, given the HEG sizes present.
pub fn metric_names(heg_ks: &BTreeSet<usize>) -> Vec<String> {
    let mut names = vec!["pcc_acg".to_string()];
    names.extend(heg_ks.iter().map(|k| format!("pcc_heg@{k}")));
    names.extend(["mse", "mae", "mean_delta_sq"].map(String::from));
    names
}

pub fn metric_value(cell: &CellMetrics, name: &str) -> Option<f64> {
    let m = &cell.metrics;
    match name {
        "pcc_acg" => m.pcc_acg,
        "mse" => Some(m.mse),
        "mae" => Some(m.mae),
        "mean_delta_sq" => Some(cell.mean_delta_sq),
        _ => {
            let k: usize = name.strip_prefix("pcc_heg@")?.parse().ok()?;
            m.pcc_heg.get(&k).copied().flatten()
        }
    }
}

/// Aggregates one metric over one variant's cells.
pub fn aggregate(cells: &[&CellMetrics], metric: &str) -> Aggregate {
    let mut by_fold: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    let mut n = 0;
    for c in cells {
        if let Some(v) = metric_value(c, metric) {
            by_fold.entry(&c.metrics.fold_id).or_default().push(v);
            by_seed.entry(c.seed).or_default().push(v);
            n += 1;
        }
    }
    let fold_means: Vec<f64> = by_fold.values().filter_map(|v| mean(v)).collect();
    let seed_means: Vec<f64> = by_seed.values().filter_map(|v| mean(v)).collect();
    Aggregate {
        metric: metric.to_string(),
        mean: mean(&fold_means),
        std_folds: sample_std(&fold_means),
        std_seeds: sample_std(&seed_means),
        n,
    }
}

/// Reads every `<variant>/<fold>/<seed>/metrics.json` and `error.txt` under `out`.
pub fn collect_cells(out: &Path) -> Result<ExperimentOutcome> {
    let mut outcome = ExperimentOutcome::default();
    let read_dir = |p: &Path| -> Result<Vec<std::path::PathBuf>> {
        let mut v: Vec<_> = std::fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        v.sort();
        Ok(v)
    };
    for vdir in read_dir(out)? {
        for fdir in read_dir(&vdir)? {
            for sdir in read_dir(&fdir)? {
                let name = |p: &Path| p.file_name().unwrap_or_default().to_string_lossy().into_owned();
                let metrics = sdir.join("metrics.json");
                let error = sdir.join("error.txt");
                if metrics.is_file() {
                    outcome.cells.push(CellMetrics::read_json(&metrics)?);
                } else if error.is_file() {
                    let message = std::fs::read_to_string(&error).map_err(|e| Error::io(&error, e))?;
                    outcome.errors.push(CellError {
                        variant: name(&vdir),
                        fold_id: name(&fdir),
                        seed: name(&sdir).parse().unwrap_or_default(),
                        message: message.trim().to_string(),
                        numeric: message.contains("non-finite"),
                    });
                }
            }
        }
    }
    if outcome.cells.is_empty() && outcome.errors.is_empty() {
        return Err(Error::InvalidInput(format!("no cell results under {}", out.display())));
    }
    Ok(outcome)
}

fn fmt_cell(a: &Aggregate) -> String {
    match (a.mean, a.std_folds) {
        (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
        (Some(m), None) => format!("{m:.4}"),
        _ => "n/a".into(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn tick(b: bool) -> &'static str {
    if b {
        "✓"
    } else {
        "×"
    }
}

/// Writes `summary.md`, `summary.csv` and per-variant `aggregate.json` and
/// `slide_quartiles.csv`.
pub fn write_summary(out: &Path, outcome: &ExperimentOutcome, cfg: Option<&ExperimentConfig>) -> Result<()> {
    let mut by_variant: BTreeMap<&str, Vec<&CellMetrics>> = BTreeMap::new();
    for c in &outcome.cells {
        by_variant.entry(&c.variant).or_default().push(c);
    }
    let heg_ks: BTreeSet<usize> = outcome
        .cells
        .iter()
        .flat_map(|c| c.metrics.pcc_heg.keys().copied())
        .collect();
    let names = metric_names(&heg_ks);

    let mut aggs: BTreeMap<&str, Vec<Aggregate>> = BTreeMap::new();
    let csv_path = out.join("summary.csv");
    let mut csv = csv::Writer::from_path(&csv_path).map_err(|e| Error::csv(&csv_path, e))?;
    csv.write_record(["variant", "metric", "mean", "std_folds", "std_seeds", "n"])
        .map_err(|e| Error::csv(&csv_path, e))?;
    for (variant, cells) in &by_variant {
        let rows: Vec<Aggregate> = names.iter().map(|m| aggregate(cells, m)).collect();
        for a in &rows {
            csv.write_record([
                variant.to_string(),
                a.metric.clone(),
                fmt_opt(a.mean),
                fmt_opt(a.std_folds),
                fmt_opt(a.std_seeds),
                a.n.to_string(),
            ])
            .map_err(|e| Error::csv(&csv_path, e))?;
        }
        let dir = out.join(variant);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("aggregate.json");
        let text = serde_json::to_string_pretty(&rows).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        write_quartiles_csv(&dir.join("slide_quartiles.csv"), &slide_distribution(&seed_averaged_pccs(cells)))?;
        aggs.insert(variant, rows);
    }
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;

    let md = render_markdown(&names, &aggs, &outcome.errors, cfg)?;
    let path = out.join("summary.md");
    std::fs::write(&path, md).map_err(|e| Error::io(&path, e))
}

/// Per slide, each gene's PCC averaged over the seeds where it is defined.
fn seed_averaged_pccs(cells: &[&CellMetrics]) -> Vec<(String, Vec<f64>)> {
    let mut acc: BTreeMap<&str, BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    for c in cells {
        let genes = acc.entry(&c.metrics.fold_id).or_default();
        for g in &c.metrics.per_gene_pcc {
            let entry = genes.entry(&g.gene).or_default();
            if let Some(p) = g.pcc {
                entry.push(p);
            }
        }
    }
    acc.into_iter()
        .map(|(slide, genes)| (slide.to_string(), genes.values().filter_map(|v| mean(v)).collect()))
        .collect()
}

fn render_markdown(
    names: &[String],
    aggs: &BTreeMap<&str, Vec<Aggregate>>,
    errors: &[CellError],
    cfg: Option<&ExperimentConfig>,
) -> Result<String> {
    let mut s = String::from("# Leave-one-slide-out results\n\n");
    s.push_str("Values are mean ± std over folds (each fold averaged over seeds); `summary.csv` also lists the std over seeds.\n\n");
    if let Some(cfg) = cfg {
        let json = serde_json::to_string_pretty(cfg).map_err(|e| Error::Format(e.to_string()))?;
        let _ = write!(
            s,
            "Stage-1: {} epochs, batch {}, lr {}. Calibration: k {}, τ_t {}, λ_Δ {}, {} epochs, lr {}.\n\n<details><summary>configuration</summary>\n\n```json\n{json}\n```\n\n</details>\n\n",
            cfg.train.epochs,
            cfg.train.batch_size,
            cfg.train.adam.lr,
            cfg.calib.k_gallery,
            cfg.calib.tau_t,
            cfg.calib.lambda_delta,
            cfg.calib.epochs,
            cfg.calib.lr,
        );
    }
    let header = |s: &mut String, lead: &[&str]| {
        let cols: Vec<String> = lead.iter().map(|c| c.to_string()).chain(names.iter().cloned()).collect();
        let _ = writeln!(s, "| {} |", cols.join(" | "));
        let _ = writeln!(s, "|{}", "---|".repeat(cols.len()));
    };
    let values = |v: &str| -> Option<String> {
        aggs.get(v)
            .map(|rows| rows.iter().map(fmt_cell).collect::<Vec<_>>().join(" | "))
    };

    s.push_str("## Calibration designs\n\n");
    header(&mut s, &["Variant", "Estimate", "Correction", "Constraint"]);
    for v in Variant::ALL {
        let (est, cor, con) = match v {
            Variant::EstimateOnly => (true, false, false),
            Variant::CorrectionOnly => (false, true, true),
            Variant::NoConstraint => (true, true, false),
            Variant::Full => (true, true, true),
        };
        if let Some(vals) = values(v.name()) {
            let _ = writeln!(s, "| {} | {} | {} | {} | {vals} |", v.label(), tick(est), tick(cor), tick(con));
        }
    }

    s.push_str("\n## Representation objectives\n\n");
    header(&mut s, &["Variant", "Topology", "Regression", "Contrastive"]);
    for o in Objective::ALL {
        let name = ExperimentVariant {
            objective: o,
            calibration: Variant::Full,
        }
        .name();
        let (topo, reg, con) = o.terms();
        if let Some(vals) = values(name) {
            let _ = writeln!(s, "| {} | {} | {} | {} | {vals} |", o.label(), tick(topo), tick(reg), tick(con));
        }
    }

    if !errors.is_empty() {
        s.push_str("\n## Failed cells\n\n| variant | fold | seed | error |\n|---|---|---|---|\n");
        for e in errors {
            let _ = writeln!(s, "| {} | {} | {} | {} |", e.variant, e.fold_id, e.seed, e.message.replace('|', "\\|"));
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricsReport;

    fn cell(variant: &str, fold: &str, seed: u64, acg: Option<f64>, mse: f64) -> CellMetrics {
        CellMetrics {
            variant: variant.into(),
            objective: Objective::Full,
            calibration: Variant::Full,
            seed,
            mean_delta_sq: 0.0,
            train_mean_delta_sq: 0.0,
            metrics: MetricsReport {
                fold_id: fold.into(),
                n_spots: 3,
                pcc_acg: acg,
                pcc_heg: BTreeMap::from([(10, acg)]),
                mse,
                mae: mse,
                n_undefined: 0,
                per_gene_pcc: Vec::new(),
            },
        }
    }

    #[test]
    fn aggregate_is_mean_of_fold_means() {
        let cells = [
            cell("full", "a", 0, Some(0.1), 1.0),
            cell("full", "a", 1, Some(0.3), 2.0),
            cell("full", "b", 0, Some(0.5), 3.0),
            cell("full", "b", 1, Some(0.9), 5.0),
        ];
        let refs: Vec<&CellMetrics> = cells.iter().collect();
        let a = aggregate(&refs, "pcc_acg");
        let fold_means = [0.2, 0.7];
        assert!((a.mean.unwrap() - 0.45).abs() < 1e-12);
        assert!((a.std_folds.unwrap() - (0.125f64).sqrt()).abs() < 1e-12);
        // seed means 0.3 and 0.6
        assert!((a.std_seeds.unwrap() - (0.045f64).sqrt()).abs() < 1e-12);
        assert_eq!(a.n, 4);
        assert!((a.mean.unwrap() - fold_means.iter().sum::<f64>() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn undefined_values_are_skipped() {
        let cells = [cell("x", "a", 0, None, 1.0), cell("x", "b", 0, Some(0.4), 1.0)];
        let refs: Vec<&CellMetrics> = cells.iter().collect();
        let a = aggregate(&refs, "pcc_acg");
        assert_eq!((a.mean, a.n, a.std_folds), (Some(0.4), 1, None));
        assert_eq!(aggregate(&refs, "pcc_heg@10").mean, Some(0.4));
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(collect_cells(dir.path()).is_err());
    }
}
