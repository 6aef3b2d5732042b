//! Held-out evaluation: gene-wise Pearson correlation, set averages (all genes and
//! highly expressed genes), MSE/MAE in standardized space, per-slide quartiles.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::top_k_desc;
use crate::error::{Error, Result};
use crate::numkernel::Tensor2;

/// Below this variance a column has no defined correlation.
pub const PCC_VAR_FLOOR: f64 = 1e-12;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Pearson correlation of two columns; `None` when `N < 2` or either variance
/// is below [`PCC_VAR_FLOOR`].
pub fn pcc_gene(truth: &[f64], pred: &[f64]) -> Option<f64> {
    let n = truth.len();
    if n < 2 || pred.len() != n {
        return None;
    }
    let (mt, mp) = (mean(truth), mean(pred));
    let (mut cov, mut vt, mut vp) = (0.0, 0.0, 0.0);
    for (&t, &p) in truth.iter().zip(pred) {
        cov += (t - mt) * (p - mp);
        vt += (t - mt) * (t - mt);
        vp += (p - mp) * (p - mp);
    }
    let nf = n as f64;
    if vt / nf < PCC_VAR_FLOOR || vp / nf < PCC_VAR_FLOOR {
        return None;
    }
    Some((cov / (vt.sqrt() * vp.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation of every gene column.
pub fn per_gene_pcc(truth: &Tensor2<f64>, pred: &Tensor2<f64>) -> Result<Vec<Option<f64>>> {
    if truth.shape() != pred.shape() {
        return Err(Error::shape("pcc", format!("{:?} vs {:?}", truth.shape(), pred.shape())));
    }
    Ok((0..truth.cols()).map(|j| pcc_gene(&truth.column(j), &pred.column(j))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PccSet {
    /// mean over defined genes; `None` when none is defined
    pub mean: Option<f64>,
    pub n_defined: usize,
    pub n_excluded: usize,
}

fn average(values: impl Iterator<Item = Option<f64>>) -> PccSet {
    let (mut sum, mut n_defined, mut n_excluded) = (0.0, 0, 0);
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                n_defined += 1;
            }
            None => n_excluded += 1,
        }
    }
    PccSet {
        mean: (n_defined > 0).then(|| sum / n_defined as f64),
        n_defined,
        n_excluded,
    }
}

/// Mean PCC over `subset`, skipping undefined genes.
pub fn pcc_set(truth: &Tensor2<f64>, pred: &Tensor2<f64>, subset: &[usize]) -> Result<PccSet> {
    let all = per_gene_pcc(truth, pred)?;
    if let Some(&bad) = subset.iter().find(|&&j| j >= all.len()) {
        return Err(Error::shape("pcc_set", format!("gene {bad} of {}", all.len())));
    }
    Ok(average(subset.iter().map(|&j| all[j])))
}

/// The `k` genes with highest mean log-normalized expression (ties: lower index),
/// returned in ascending index order.
pub fn heg_set(truth_lognorm: &Tensor2<f64>, k: usize) -> Vec<usize> {
    let g = truth_lognorm.cols();
    if k > g {
        log::warn!("HEG@{k} requested with {g} genes; using all genes");
    }
    let means: Vec<f64> = (0..g).map(|j| mean(&truth_lognorm.column(j))).collect();
    let mut idx = top_k_desc(&means, k.min(g));
    idx.sort_unstable();
    idx
}

/// Mean squared and mean absolute error over every entry.
pub fn error_metrics(truth: &Tensor2<f64>, pred: &Tensor2<f64>) -> Result<(f64, f64)> {
    if truth.shape() != pred.shape() {
        return Err(Error::shape("error_metrics", format!("{:?} vs {:?}", truth.shape(), pred.shape())));
    }
    if truth.is_empty() {
        return Err(Error::shape("error_metrics", "no entries"));
    }
    let n = truth.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (&t, &p) in truth.data().iter().zip(pred.data()) {
        se += (p - t) * (p - t);
        ae += (p - t).abs();
    }
    Ok((se / n, ae / n))
}

/// Quantile of sorted data by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideQuartiles {
    pub slide_id: String,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Five-number summary of each slide's defined per-gene PCCs. Slides without any
/// defined value are left out.
pub fn slide_distribution(per_slide: &[(String, Vec<f64>)]) -> Vec<SlideQuartiles> {
    per_slide
        .iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(id, v)| {
            let mut s = v.clone();
            s.sort_by(f64::total_cmp);
            SlideQuartiles {
                slide_id: id.clone(),
                n: s.len(),
                min: s[0],
                q1: quantile(&s, 0.25),
                median: quantile(&s, 0.5),
                q3: quantile(&s, 0.75),
                max: s[s.len() - 1],
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenePcc {
    pub gene: String,
    pub pcc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fold_id: String,
    pub n_spots: usize,
    pub pcc_acg: Option<f64>,
    /// K → PCC averaged over the top-K highly expressed genes
    pub pcc_heg: BTreeMap<usize, Option<f64>>,
    pub mse: f64,
    pub mae: f64,
    /// genes left out of PCC(ACG) for zero variance
    pub n_undefined: usize,
    pub per_gene_pcc: Vec<GenePcc>,
}

impl MetricsReport {
    /// Scores standardized predictions for one held-out slide.
    ///
    /// `truth_log` (log-normalized, not standardized) only selects the HEG sets.
    pub fn evaluate(
        fold_id: &str,
        genes: &[String],
        truth_std: &Tensor2<f64>,
        truth_log: &Tensor2<f64>,
        pred: &Tensor2<f64>,
        heg_ks: &[usize],
    ) -> Result<Self> {
        if genes.len() != truth_std.cols() || truth_log.shape() != truth_std.shape() {
            return Err(Error::shape(
                "evaluate",
                format!(
                    "{} genes, truth {:?}, log truth {:?}",
                    genes.len(),
                    truth_std.shape(),
                    truth_log.shape()
                ),
            ));
        }
        let per_gene = per_gene_pcc(truth_std, pred)?;
        let acg = average(per_gene.iter().copied());
        let pcc_heg = heg_ks
            .iter()
            .map(|&k| (k, average(heg_set(truth_log, k).into_iter().map(|j| per_gene[j])).mean))
            .collect();
        let (mse, mae) = error_metrics(truth_std, pred)?;
        Ok(Self {
            fold_id: fold_id.to_string(),
            n_spots: truth_std.rows(),
            pcc_acg: acg.mean,
            pcc_heg,
            mse,
            mae,
            n_undefined: acg.n_excluded,
            per_gene_pcc: genes
                .iter()
                .zip(per_gene)
                .map(|(g, p)| GenePcc { gene: g.clone(), pcc: p })
                .collect(),
        })
    }

    pub fn defined_pccs(&self) -> Vec<f64> {
        self.per_gene_pcc.iter().filter_map(|g| g.pcc).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// `slide_id,gene,pcc,defined` rows; undefined correlations are written empty.
pub fn write_per_gene_csv(path: &Path, slide_id: &str, report: &MetricsReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["slide_id", "gene", "pcc", "defined"]).map_err(|e| Error::csv(path, e))?;
    for g in &report.per_gene_pcc {
        let pcc = g.pcc.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([slide_id, &g.gene, &pcc, if g.pcc.is_some() { "1" } else { "0" }])
            .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_quartiles_csv(path: &Path, rows: &[SlideQuartiles]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
