use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{LosoFold, SlideSource, SlideTensors};
use crate::encoders::ModelParams;
use crate::error::{Error, Result};
use crate::numkernel::{Adam, AdamConfig, Graph, Tensor2};
use crate::objectives::{total_loss, Batch, LossWeights, TopoPrior};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        Ok(())
    }
}

/// Per-epoch mean of each loss term; `None` for terms with zero weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    #[serde(rename = "L_reg")]
    pub l_reg: Option<f64>,
    #[serde(rename = "L_con")]
    pub l_con: Option<f64>,
    #[serde(rename = "L_spa")]
    pub l_spa: Option<f64>,
    pub total: f64,
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Index chunks of one epoch: each slide shuffled and cut into batches, then the
/// batch order shuffled across slides. Chunks with a single spot are dropped.
fn epoch_batches(rng: &mut ChaCha8Rng, sizes: &[usize], batch_size: usize) -> Vec<(usize, Vec<usize>)> {
    let mut out = Vec::new();
    for (s, &n) in sizes.iter().enumerate() {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        for chunk in idx.chunks(batch_size) {
            if chunk.len() >= 2 {
                out.push((s, chunk.to_vec()));
            }
        }
    }
    out.shuffle(rng);
    out
}

fn make_batch<T: Real>(slide: &SlideTensors, idx: &[usize], w: &LossWeights) -> Result<Batch<T>> {
    let coords: Vec<[f64; 2]> = idx.iter().map(|&i| slide.coords[i]).collect();
    Ok(Batch {
        feats: slide.feats.select_rows(idx).cast(),
        coords: slide.coords_norm.select_rows(idx).cast(),
        expr: slide.expr_std.select_rows(idx).cast(),
        prior: TopoPrior::from_coords(&coords, w.k_knn, &w.alpha)?,
    })
}

/// Stage-1 representation learning on the fold's training slides.
///
/// Every mini-batch comes from a single slide. Batches, their order and the
/// updates are fully determined by `cfg.seed` and `init`.
pub fn train_stage1<T: Real>(
    source: &dyn SlideSource,
    fold: &LosoFold,
    init: ModelParams<T>,
    w: &LossWeights,
    cfg: &TrainConfig,
) -> Result<(ModelParams<T>, Vec<TraceRow>)> {
    w.validate()?;
    cfg.validate()?;
    if fold.train_slides.iter().any(|s| *s == fold.test_slide) {
        return Err(Error::InvalidFold(format!(
            "test slide '{}' is listed for training",
            fold.test_slide
        )));
    }
    let mut params = init;
    if cfg.epochs == 0 {
        return Ok((params, Vec::new()));
    }
    let slides = fold
        .train_slides
        .iter()
        .map(|id| SlideTensors::load(source, id, &fold.standardizer))
        .collect::<Result<Vec<_>>>()?;
    if slides.is_empty() {
        return Err(Error::InvalidFold("no training slides".into()));
    }
    let sizes: Vec<usize> = slides.iter().map(|s| s.len()).collect();

    let shapes: Vec<(usize, usize)> = params.tensors().iter().map(|(_, t)| t.shape()).collect();
    let mut adam = Adam::<T>::new(cfg.adam, &shapes);
    let mut adam_tau = Adam::<T>::new(cfg.adam, &[(1, 1)]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let batches = epoch_batches(&mut rng, &sizes, cfg.batch_size);
        if batches.is_empty() {
            return Err(Error::InvalidFold("training slides yield no batch of two or more spots".into()));
        }
        let mut sums = [0.0f64; 4];
        for (s, idx) in &batches {
            let batch = make_batch::<T>(&slides[*s], idx, w)?;
            let mut g = Graph::new();
            let nodes = params.bind(&mut g, true);
            let terms = total_loss(&mut g, &nodes, &params.config, &batch, w)?;
            g.backward(terms.total)?;
            let (grads, g_tau) = nodes.grads(&g);
            if !g_tau.is_finite() || grads.iter().any(|t| !t.is_finite()) {
                return Err(Error::Numeric {
                    op: "total: backward".into(),
                });
            }
            for (slot, term) in sums.iter_mut().zip([terms.reg, terms.con, terms.spa, Some(terms.total)]) {
                if let Some(id) = term {
                    *slot += g.value(id).item().as_f64();
                }
            }
            adam.step(&mut params.tensors_mut(), &grads)?;
            let mut tau = Tensor2::scalar(params.log_tau);
            adam_tau.step(&mut [&mut tau], &[Tensor2::scalar(g_tau)])?;
            params.log_tau = tau.item();
        }
        let n = batches.len() as f64;
        let on = |lambda: f64, v: f64| (lambda > 0.0).then_some(v / n);
        let row = TraceRow {
            epoch,
            l_reg: on(w.lambda_reg, sums[0]),
            l_con: on(w.lambda_con, sums[1]),
            l_spa: on(w.lambda_spa, sums[2]),
            total: sums[3] / n,
        };
        log::debug!("epoch {epoch}: total {:.6}", row.total);
        trace.push(row);
    }
    Ok((params, trace))
}
