//! Post-hoc calibration: gallery retrieval estimate plus a regularized residual.
//!
//! The gallery holds the frozen image features `z = F_H` of every training-slide
//! spot with its standardized expression. A query's estimate is the
//! temperature-softmax weighted mean of its top-k cosine neighbours' expression;
//! a small [`CorrectionNet`] then adds a residual `Δ = r_η(z)`, penalized by
//! `λ_Δ·mean‖Δ‖²` during its training.

mod correction;

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cohort::{LosoFold, SlideSource, SlideTensors};
use crate::encoders::{self, check_header, ModelParams, CHECKPOINT_VERSION};
use crate::error::{Error, Result};
use crate::numkernel::{NamedTensors, Tensor2, GUARD_EPS};
use crate::scalar::Real;

pub use correction::{
    predict, predict_batch, run_variant, train_correction, Anchor, CalibOutcome, CorrectionFit,
    CorrectionNet, CorrectionTrace, Variant,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    pub k_gallery: usize,
    pub tau_t: f64,
    pub lambda_delta: f64,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            k_gallery: 50,
            tau_t: 0.1,
            lambda_delta: 0.1,
            hidden: 256,
            epochs: 20,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_gallery == 0 {
            return Err(Error::InvalidConfig("k_gallery must be at least 1".into()));
        }
        if !(self.tau_t > 0.0) {
            return Err(Error::InvalidConfig(format!("tau_t must be positive, got {}", self.tau_t)));
        }
        if !(self.lambda_delta >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda_delta must be ≥ 0, got {}",
                self.lambda_delta
            )));
        }
        if self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("hidden and batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Frozen training-spot embeddings and their standardized expression.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryBank<T> {
    /// `N_tr×d_embed` raw `F_H`
    pub z_raw: Tensor2<T>,
    /// `z_raw` with rows L2-normalized
    pub z: Tensor2<T>,
    /// `N_tr×G`
    pub g_std: Tensor2<T>,
    /// (slide_id, spot_id) of every row
    pub origin: Vec<(String, String)>,
}

pub fn l2_normalize_rows<T: Real>(x: &Tensor2<T>) -> Tensor2<T> {
    let mut out = x.clone();
    let eps = T::lit(GUARD_EPS);
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

impl<T: Real> GalleryBank<T> {
    pub fn new(z_raw: Tensor2<T>, g_std: Tensor2<T>, origin: Vec<(String, String)>) -> Result<Self> {
        if z_raw.rows() != g_std.rows() || z_raw.rows() != origin.len() {
            return Err(Error::shape(
                "gallery",
                format!(
                    "{} embeddings, {} expression rows, {} origins",
                    z_raw.rows(),
                    g_std.rows(),
                    origin.len()
                ),
            ));
        }
        if z_raw.rows() == 0 {
            return Err(Error::InvalidFold("gallery has no training spots".into()));
        }
        Ok(Self {
            z: l2_normalize_rows(&z_raw),
            z_raw,
            g_std,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    pub fn d_embed(&self) -> usize {
        self.z.cols()
    }

    pub fn n_genes(&self) -> usize {
        self.g_std.cols()
    }

    /// Slides that contributed rows, in first-seen order.
    pub fn slides(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for (s, _) in &self.origin {
            if !out.contains(&s.as_str()) {
                out.push(s);
            }
        }
        out
    }

    /// Cosine similarity of every query row against every bank row, `Q×N_tr`.
    pub fn similarities(&self, queries: &Tensor2<T>) -> Result<Tensor2<T>> {
        if queries.cols() != self.d_embed() {
            return Err(Error::shape(
                "retrieve",
                format!("query has {} columns, gallery {}", queries.cols(), self.d_embed()),
            ));
        }
        l2_normalize_rows(queries).matmul_nt(&self.z)
    }

    pub fn to_named(&self, fold_id: &str) -> NamedTensors {
        let mut nt = NamedTensors::new(json!({
            "version": CHECKPOINT_VERSION,
            "kind": "gallery",
            "fold": fold_id,
            "d_embed": self.d_embed(),
            "g": self.n_genes(),
            "n_tr": self.len(),
        }));
        nt.push("z", &self.z_raw);
        nt.push("g_std", &self.g_std);
        nt
    }

    /// Writes `gallery.chrt` and `gallery_origin.csv` into `dir`.
    pub fn export(&self, dir: &Path, fold_id: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.to_named(fold_id).write(&dir.join("gallery.chrt"))?;
        let path = dir.join("gallery_origin.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        w.write_record(["row", "slide_id", "spot_id"]).map_err(|e| Error::csv(&path, e))?;
        for (i, (s, p)) in self.origin.iter().enumerate() {
            w.write_record([i.to_string().as_str(), s, p]).map_err(|e| Error::csv(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn import(dir: &Path) -> Result<Self> {
        let nt = NamedTensors::read(&dir.join("gallery.chrt"))?;
        check_header(&nt.header, "gallery")?;
        let path = dir.join("gallery_origin.csv");
        let mut r = csv::Reader::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        let mut origin = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::csv(&path, e))?;
            origin.push((rec[1].to_string(), rec[2].to_string()));
        }
        Self::new(nt.get("z")?.cast(), nt.get("g_std")?.cast(), origin)
    }
}

/// Gallery from the fold's training slides, in slide order then spot order.
///
/// Only `fold.train_slides` are loaded from `source`.
pub fn build_gallery<T: Real>(params: &ModelParams<T>, fold: &LosoFold, source: &dyn SlideSource) -> Result<GalleryBank<T>> {
    if fold.train_slides.is_empty() {
        return Err(Error::InvalidFold("no training slides for the gallery".into()));
    }
    let mut z_rows = Vec::new();
    let mut g_rows = Vec::new();
    let mut origin = Vec::new();
    for id in &fold.train_slides {
        if *id == fold.test_slide {
            return Err(Error::InvalidFold(format!("test slide '{id}' listed for training")));
        }
        let st = SlideTensors::load(source, id, &fold.standardizer)?;
        let z = encoders::image_features(params, &st.feats.cast())?;
        z_rows.extend_from_slice(z.data());
        g_rows.extend(st.expr_std.data().iter().map(|&v| T::lit(v)));
        origin.extend(st.spot_ids.iter().map(|s| (id.clone(), s.clone())));
    }
    let n = origin.len();
    let d = params.config.d_embed;
    let g = source.n_hvg();
    GalleryBank::new(Tensor2::from_vec(n, d, z_rows)?, Tensor2::from_vec(n, g, g_rows)?, origin)
}

/// Top-k of one similarity row by (similarity desc, index asc), skipping `exclude`.
pub fn top_k<T: Real>(sims: &[T], k: usize, exclude: Option<usize>) -> Result<Vec<(usize, T)>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let mut cand: Vec<(usize, T)> = sims
        .iter()
        .copied()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .collect();
    if cand.is_empty() {
        return Err(Error::Retrieval("no retrieval candidates left".into()));
    }
    let k = k.min(cand.len());
    let cmp = |a: &(usize, T), b: &(usize, T)| {
        b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0))
    };
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, cmp);
        cand.truncate(k);
    }
    cand.sort_by(cmp);
    Ok(cand)
}

/// Neighbour indices and cosine similarities of `z_q`, best first.
pub fn retrieve<T: Real>(z_q: &[T], bank: &GalleryBank<T>, k: usize, exclude: Option<usize>) -> Result<Vec<(usize, T)>> {
    let sims = bank.similarities(&Tensor2::row_vector(z_q))?;
    top_k(sims.row(0), k, exclude)
}

/// Retrieval-weighted estimate for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate<T> {
    pub neighbors: Vec<usize>,
    pub similarities: Vec<T>,
    /// softmax(sim / τ_t), summing to one
    pub weights: Vec<T>,
    /// `G` standardized expression
    pub value: Vec<T>,
}

fn combine<T: Real>(nb: Vec<(usize, T)>, bank: &GalleryBank<T>, tau_t: T) -> Estimate<T> {
    let m = nb.iter().map(|x| x.1).fold(T::neg_infinity(), T::max);
    let mut weights: Vec<T> = nb.iter().map(|x| ((x.1 - m) / tau_t).exp()).collect();
    let s: T = weights.iter().copied().sum();
    weights.iter_mut().for_each(|w| *w /= s);
    let mut value = vec![T::zero(); bank.n_genes()];
    for (&(i, _), &w) in nb.iter().zip(&weights) {
        for (v, &e) in value.iter_mut().zip(bank.g_std.row(i)) {
            *v += w * e;
        }
    }
    Estimate {
        neighbors: nb.iter().map(|x| x.0).collect(),
        similarities: nb.iter().map(|x| x.1).collect(),
        weights,
        value,
    }
}

pub fn estimate<T: Real>(z_q: &[T], bank: &GalleryBank<T>, cfg: &CalibConfig, exclude: Option<usize>) -> Result<Estimate<T>> {
    cfg.validate()?;
    let nb = retrieve(z_q, bank, cfg.k_gallery, exclude)?;
    Ok(combine(nb, bank, T::lit(cfg.tau_t)))
}

/// Estimates for every query row. With `exclude_self`, query `i` is gallery row
/// `i` and is removed from its own candidates.
pub fn estimate_batch<T: Real>(
    queries: &Tensor2<T>,
    bank: &GalleryBank<T>,
    k: usize,
    tau_t: f64,
    exclude_self: bool,
) -> Result<Vec<Estimate<T>>> {
    if exclude_self && queries.rows() != bank.len() {
        return Err(Error::shape(
            "estimate_batch",
            format!("{} self-queries for a gallery of {}", queries.rows(), bank.len()),
        ));
    }
    let sims = bank.similarities(queries)?;
    (0..queries.rows())
        .map(|q| {
            let nb = top_k(sims.row(q), k, exclude_self.then_some(q))?;
            Ok(combine(nb, bank, T::lit(tau_t)))
        })
        .collect()
}

/// Stacks estimate values into a `Q×G` matrix.
pub fn stack_values<T: Real>(est: &[Estimate<T>], g: usize) -> Result<Tensor2<T>> {
    Tensor2::from_vec(est.len(), g, est.iter().flat_map(|e| e.value.iter().copied()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_bank(seed: u64, n: usize, d: usize, g: usize) -> GalleryBank<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor2::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let e = Tensor2::from_vec(n, g, (0..n * g).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let origin = (0..n).map(|i| (format!("s{}", i % 2), format!("p{i}"))).collect();
        GalleryBank::new(z, e, origin).unwrap()
    }

    #[test]
    fn self_query_ranks_first_unless_excluded() {
        let bank = random_bank(1, 12, 5, 3);
        let q = bank.z_raw.row(4).to_vec();
        let nb = retrieve(&q, &bank, 3, None).unwrap();
        assert_eq!(nb[0].0, 4);
        assert!((nb[0].1 - 1.0).abs() < 1e-12);
        let nb = retrieve(&q, &bank, 11, Some(4)).unwrap();
        assert_eq!(nb.len(), 11);
        assert!(nb.iter().all(|x| x.0 != 4));
    }

    #[test]
    fn order_matches_brute_force() {
        let bank = random_bank(2, 5, 4, 2);
        let q = [0.3, -0.2, 0.9, 0.1];
        let qn = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let mut brute: Vec<(usize, f64)> = (0..5)
            .map(|i| {
                let r = bank.z_raw.row(i);
                let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                (i, r.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / (rn * qn))
            })
            .collect();
        brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let nb = retrieve(&q, &bank, 5, None).unwrap();
        for (a, b) in nb.iter().zip(&brute) {
            assert_eq!(a.0, b.0);
            assert!((a.1 - b.1).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_break_by_index() {
        let z = Tensor2::from_rows(&[[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]]).unwrap();
        let bank = GalleryBank::new(z, Tensor2::zeros(3, 1), (0..3).map(|i| ("a".into(), i.to_string())).collect()).unwrap();
        let nb = retrieve(&[1.0, 0.0], &bank, 2, None).unwrap();
        assert_eq!(nb.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn empty_candidates_fail() {
        let z = Tensor2::from_rows(&[[1.0, 0.0]]).unwrap();
        let bank = GalleryBank::new(z, Tensor2::zeros(1, 1), vec![("a".into(), "0".into())]).unwrap();
        assert!(matches!(retrieve(&[1.0, 0.0], &bank, 1, Some(0)), Err(Error::Retrieval(_))));
    }

    #[test]
    fn estimate_closed_forms() {
        let z = Tensor2::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let e = Tensor2::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let bank = GalleryBank::new(z, e, vec![("a".into(), "0".into()), ("a".into(), "1".into())]).unwrap();
        let cfg = CalibConfig {
            k_gallery: 2,
            tau_t: 1.0,
            ..Default::default()
        };
        let est = estimate(&[1.0, 0.0], &bank, &cfg, None).unwrap();
        let e1 = 1f64.exp();
        assert!((est.weights[0] - e1 / (e1 + 1.0)).abs() < 1e-15);
        assert!((est.weights[1] - 1.0 / (e1 + 1.0)).abs() < 1e-15);
        assert!((est.weights[0] - 0.731_058_578_6).abs() < 1e-9);

        let k1 = CalibConfig { k_gallery: 1, ..cfg.clone() };
        assert_eq!(estimate(&[0.2, 0.9], &bank, &k1, None).unwrap().value, vec![0.0, 1.0]);
    }

    #[test]
    fn sharp_temperature_is_nearest_neighbour() {
        let bank = random_bank(3, 30, 6, 4);
        let cfg = CalibConfig {
            k_gallery: 10,
            tau_t: 1e-6,
            ..Default::default()
        };
        let q = [0.1, 0.5, -0.3, 0.2, 0.0, 0.7];
        let est = estimate(&q, &bank, &cfg, None).unwrap();
        let nn = bank.g_std.row(est.neighbors[0]);
        let d: f64 = est.value.iter().zip(nn).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(d < 1e-6);
        assert!((est.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn batch_estimates_exclude_self() {
        let bank = random_bank(4, 9, 3, 2);
        let est = estimate_batch(&bank.z_raw, &bank, 50, 0.1, true).unwrap();
        for (i, e) in est.iter().enumerate() {
            assert_eq!(e.neighbors.len(), 8);
            assert!(!e.neighbors.contains(&i));
        }
    }

    #[test]
    fn export_round_trip() {
        let bank = random_bank(5, 7, 3, 2);
        let dir = tempfile::tempdir().unwrap();
        bank.export(dir.path(), "fold-s0").unwrap();
        assert_eq!(GalleryBank::<f64>::import(dir.path()).unwrap(), bank);
        assert_eq!(bank.slides(), vec!["s0", "s1"]);
    }
}
