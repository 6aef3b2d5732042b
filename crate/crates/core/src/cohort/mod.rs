//! Spots, slides and cohorts; expression preprocessing; leave-one-slide-out folds.

mod io;

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Tensor2;

pub use io::{read_cohort, write_cohort, AccessLog, DiskCohort, Manifest};

/// Default library-size scale for [`lognorm`].
pub const DEFAULT_LIB_SCALE: f64 = 1e4;
/// Guard for spots whose counts are all zero.
pub const LIB_EPS: f64 = 1e-12;
/// Added to σ when standardizing.
pub const STD_EPS: f64 = 1e-8;

/// One capture location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotRecord {
    pub slide_id: String,
    pub spot_id: String,
    pub coord: [f64; 2],
    pub feat: Vec<f64>,
    pub expr_raw: Vec<f64>,
}

/// A validated collection of slides sharing one gene panel and feature width.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub name: String,
    pub gene_names: Vec<String>,
    pub hvg_index: Vec<usize>,
    pub d_img: usize,
    pub lib_scale: f64,
    pub slides: BTreeMap<String, Vec<SpotRecord>>,
}

/// Read access to slides, either held in memory or loaded lazily from disk.
///
/// Fold pipelines only touch slides through this trait, so a logging
/// implementation can prove which slides a phase reads.
pub trait SlideSource: Sync {
    fn gene_names(&self) -> &[String];
    fn hvg_index(&self) -> &[usize];
    fn d_img(&self) -> usize;
    fn lib_scale(&self) -> f64;
    /// Slide ids in canonical (sorted) order.
    fn slide_ids(&self) -> Vec<String>;
    fn load_slide(&self, id: &str) -> Result<Cow<'_, [SpotRecord]>>;

    fn n_hvg(&self) -> usize {
        self.hvg_index().len()
    }

    fn hvg_names(&self) -> Vec<String> {
        self.hvg_index().iter().map(|&j| self.gene_names()[j].clone()).collect()
    }
}

impl Cohort {
    /// Validates every cohort invariant. `hvg_index` defaults to all genes.
    pub fn new(
        name: impl Into<String>,
        gene_names: Vec<String>,
        hvg_index: Option<Vec<usize>>,
        d_img: usize,
        spots: Vec<SpotRecord>,
    ) -> Result<Self> {
        let g_all = gene_names.len();
        let mut slides: BTreeMap<String, Vec<SpotRecord>> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for s in spots {
            if s.feat.len() != d_img {
                return Err(Error::InvalidInput(format!(
                    "spot {}/{} has {} features, cohort width is {d_img}",
                    s.slide_id,
                    s.spot_id,
                    s.feat.len()
                )));
            }
            if s.expr_raw.len() != g_all {
                return Err(Error::InvalidInput(format!(
                    "spot {}/{} has {} genes, cohort has {g_all}",
                    s.slide_id,
                    s.spot_id,
                    s.expr_raw.len()
                )));
            }
            if s.expr_raw.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "spot {}/{} has a negative or non-finite count",
                    s.slide_id, s.spot_id
                )));
            }
            if !seen.insert((s.slide_id.clone(), s.spot_id.clone())) {
                return Err(Error::InvalidInput(format!(
                    "duplicate spot {}/{}",
                    s.slide_id, s.spot_id
                )));
            }
            slides.entry(s.slide_id.clone()).or_default().push(s);
        }
        let hvg_index = hvg_index.unwrap_or_else(|| (0..g_all).collect());
        validate_hvg(&hvg_index, g_all)?;
        Ok(Self {
            name: name.into(),
            gene_names,
            hvg_index,
            d_img,
            lib_scale: DEFAULT_LIB_SCALE,
            slides,
        })
    }

    pub fn g_all(&self) -> usize {
        self.gene_names.len()
    }

    pub fn n_spots(&self) -> usize {
        self.slides.values().map(Vec::len).sum()
    }

    /// Ranks genes by variance of log-normalized expression over every spot and
    /// keeps the top `g`, ties to the lower index. Stores and returns the
    /// ascending index list.
    pub fn select_hvg(&mut self, g: usize) -> Result<Vec<usize>> {
        let g_all = self.g_all();
        if g == 0 || g > g_all {
            return Err(Error::InvalidConfig(format!(
                "cannot select {g} highly-variable genes out of {g_all}"
            )));
        }
        let rows: Vec<Vec<f64>> = self
            .slides
            .values()
            .flatten()
            .map(|s| lognorm(&s.expr_raw, self.lib_scale))
            .collect::<Result<_>>()?;
        let variances = column_variances(&rows, g_all);
        let idx = top_k_desc(&variances, g);
        self.hvg_index = idx.clone();
        Ok(idx)
    }
}

fn validate_hvg(hvg: &[usize], g_all: usize) -> Result<()> {
    let mut seen = BTreeSet::new();
    for &j in hvg {
        if j >= g_all || !seen.insert(j) {
            return Err(Error::InvalidInput(format!(
                "hvg index {j} is out of range or repeated (G_all = {g_all})"
            )));
        }
    }
    if hvg.is_empty() {
        return Err(Error::InvalidInput("empty hvg set".into()));
    }
    Ok(())
}

/// Population variance of each column.
fn column_variances(rows: &[Vec<f64>], cols: usize) -> Vec<f64> {
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; cols];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; cols];
    for r in rows {
        for ((acc, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    var
}

/// Indices of the `k` largest scores (ties to lower index), returned ascending.
pub(crate) fn top_k_desc(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut top: Vec<usize> = order.into_iter().take(k).collect();
    top.sort_unstable();
    top
}

impl SlideSource for Cohort {
    fn gene_names(&self) -> &[String] {
        &self.gene_names
    }

    fn hvg_index(&self) -> &[usize] {
        &self.hvg_index
    }

    fn d_img(&self) -> usize {
        self.d_img
    }

    fn lib_scale(&self) -> f64 {
        self.lib_scale
    }

    fn slide_ids(&self) -> Vec<String> {
        self.slides.keys().cloned().collect()
    }

    fn load_slide(&self, id: &str) -> Result<Cow<'_, [SpotRecord]>> {
        self.slides
            .get(id)
            .map(|v| Cow::Borrowed(v.as_slice()))
            .ok_or_else(|| Error::InvalidFold(format!("unknown slide '{id}'")))
    }
}

/// `log(1 + scale · x / max(Σx, ε))` per gene.
pub fn lognorm(expr_raw: &[f64], scale: f64) -> Result<Vec<f64>> {
    if !(scale > 0.0) {
        return Err(Error::InvalidInput(format!("library scale must be positive, got {scale}")));
    }
    if let Some(v) = expr_raw.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidInput(format!("negative count {v}")));
    }
    let total: f64 = expr_raw.iter().sum();
    let denom = total.max(LIB_EPS);
    Ok(expr_raw.iter().map(|&x| (scale * x / denom).ln_1p()).collect())
}

/// Log-normalized expression restricted to the cohort's HVG panel.
pub fn hvg_expression(spot: &SpotRecord, hvg: &[usize], scale: f64) -> Result<Vec<f64>> {
    let full = lognorm(&spot.expr_raw, scale)?;
    Ok(hvg.iter().map(|&j| full[j]).collect())
}

/// Per-slide min-max scaling of coordinates to `[0, 1]²`; a degenerate axis maps to 0.5.
pub fn normalize_coords(spots: &[SpotRecord]) -> Vec<[f64; 2]> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for s in spots {
        for a in 0..2 {
            lo[a] = lo[a].min(s.coord[a]);
            hi[a] = hi[a].max(s.coord[a]);
        }
    }
    spots
        .iter()
        .map(|s| {
            let mut out = [0.5; 2];
            for a in 0..2 {
                let span = hi[a] - lo[a];
                if span > 0.0 {
                    out[a] = (s.coord[a] - lo[a]) / span;
                }
            }
            out
        })
        .collect()
}

/// Per-gene z-scoring with training-slide statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub epsilon: f64,
}

impl Standardizer {
    /// Mean and population standard deviation of log-normalized HVG expression
    /// over every spot of `train_slides`.
    pub fn fit(source: &dyn SlideSource, train_slides: &[String]) -> Result<Self> {
        let hvg = source.hvg_index();
        let mut rows = Vec::new();
        for id in train_slides {
            let spots = source.load_slide(id)?;
            if spots.is_empty() {
                return Err(Error::InvalidFold(format!("training slide '{id}' is empty")));
            }
            for s in spots.iter() {
                rows.push(hvg_expression(s, hvg, source.lib_scale())?);
            }
        }
        Self::fit_rows(&rows, hvg.len())
    }

    pub fn fit_rows(rows: &[Vec<f64>], g: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidFold("no training spots to fit the standardizer".into()));
        }
        let n = rows.len() as f64;
        let mut mu = vec![0.0; g];
        for r in rows {
            for (m, v) in mu.iter_mut().zip(r) {
                *m += v;
            }
        }
        mu.iter_mut().for_each(|m| *m /= n);
        let sigma = column_variances(rows, g).into_iter().map(f64::sqrt).collect();
        Ok(Self {
            mu,
            sigma,
            epsilon: STD_EPS,
        })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    fn check(&self, g: &[f64], op: &'static str) -> Result<()> {
        if g.len() != self.mu.len() {
            return Err(Error::shape(op, format!("{} genes vs {}", g.len(), self.mu.len())));
        }
        Ok(())
    }

    /// `(g − μ) / (σ + ε)`.
    pub fn apply(&self, g: &[f64]) -> Result<Vec<f64>> {
        self.check(g, "standardize")?;
        Ok(g.iter()
            .zip(self.mu.iter().zip(&self.sigma))
            .map(|(&x, (&m, &s))| (x - m) / (s + self.epsilon))
            .collect())
    }

    pub fn invert(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check(z, "unstandardize")?;
        Ok(z.iter()
            .zip(self.mu.iter().zip(&self.sigma))
            .map(|(&x, (&m, &s))| x * (s + self.epsilon) + m)
            .collect())
    }
}

/// One slide's spots as dense matrices, expression standardized with a fold's statistics.
#[derive(Debug, Clone)]
pub struct SlideTensors {
    pub slide_id: String,
    pub spot_ids: Vec<String>,
    /// `N×D_img` image features.
    pub feats: Tensor2<f64>,
    /// Raw coordinates, used for neighbourhood graphs.
    pub coords: Vec<[f64; 2]>,
    /// `N×2` per-slide min-max normalized coordinates.
    pub coords_norm: Tensor2<f64>,
    /// `N×G` log-normalized HVG expression.
    pub expr_log: Tensor2<f64>,
    /// `N×G` standardized HVG expression.
    pub expr_std: Tensor2<f64>,
}

impl SlideTensors {
    pub fn load(source: &dyn SlideSource, id: &str, standardizer: &Standardizer) -> Result<Self> {
        let spots = source.load_slide(id)?;
        let hvg = source.hvg_index();
        let n = spots.len();
        let g = hvg.len();
        let mut feats = Vec::with_capacity(n * source.d_img());
        let mut expr_log = Vec::with_capacity(n * g);
        let mut expr_std = Vec::with_capacity(n * g);
        for s in spots.iter() {
            feats.extend_from_slice(&s.feat);
            let e = hvg_expression(s, hvg, source.lib_scale())?;
            expr_std.extend(standardizer.apply(&e)?);
            expr_log.extend(e);
        }
        let norm: Vec<f64> = normalize_coords(&spots).into_iter().flatten().collect();
        Ok(Self {
            slide_id: id.to_string(),
            spot_ids: spots.iter().map(|s| s.spot_id.clone()).collect(),
            feats: Tensor2::from_vec(n, source.d_img(), feats)?,
            coords: spots.iter().map(|s| s.coord).collect(),
            coords_norm: Tensor2::from_vec(n, 2, norm)?,
            expr_log: Tensor2::from_vec(n, g, expr_log)?,
            expr_std: Tensor2::from_vec(n, g, expr_std)?,
        })
    }

    pub fn len(&self) -> usize {
        self.spot_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spot_ids.is_empty()
    }
}

/// One leave-one-slide-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosoFold {
    pub train_slides: Vec<String>,
    pub test_slide: String,
    pub standardizer: Standardizer,
}

impl LosoFold {
    /// Builds the fold holding out `test_slide`, fitting on every other slide.
    pub fn holding_out(source: &dyn SlideSource, test_slide: &str) -> Result<Self> {
        let ids = source.slide_ids();
        if ids.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "leave-one-slide-out needs at least 2 slides, cohort has {}",
                ids.len()
            )));
        }
        if !ids.iter().any(|s| s == test_slide) {
            return Err(Error::InvalidFold(format!("unknown slide '{test_slide}'")));
        }
        let train_slides: Vec<String> = ids.into_iter().filter(|s| s != test_slide).collect();
        let standardizer = Standardizer::fit(source, &train_slides)?;
        Ok(Self {
            train_slides,
            test_slide: test_slide.to_string(),
            standardizer,
        })
    }
}

/// One fold per slide, in slide order.
pub fn make_folds(source: &dyn SlideSource) -> Result<Vec<LosoFold>> {
    let ids = source.slide_ids();
    if ids.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "leave-one-slide-out needs at least 2 slides, cohort has {}",
            ids.len()
        )));
    }
    ids.iter().map(|id| LosoFold::holding_out(source, id)).collect()
}
