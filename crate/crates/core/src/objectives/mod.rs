//! Training losses of the representation stage and the stage-1 training loop.
//!
//! * [`loss_reg`]: MSE + λ_mae·MAE + λ_PCC·(1 − mean batch PCC over genes).
//! * [`loss_contrastive`]: symmetric cross-entropy over temperature-scaled cosine
//!   similarities between projected `F_M` and `F_G`.
//! * [`loss_spa`]: squared Frobenius distance between the normalized `F_G`
//!   cosine-similarity matrix and the normalized multi-hop prior.

mod topology;
mod train;

use serde::{Deserialize, Serialize};

use crate::encoders::{self, EncoderConfig, ModelNodes};
use crate::error::{Error, Result};
use crate::numkernel::{Graph, NodeId, Tensor2, GUARD_EPS};
use crate::scalar::Real;

pub use topology::{build_knn_graph, multihop, TopoPrior};
pub use train::{train_stage1, write_trace, TraceRow, TrainConfig};

/// Within-batch variance a gene needs, on both sides, to count in the PCC term.
pub const PCC_MIN_VAR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_mae: f64,
    pub lambda_pcc: f64,
    pub lambda_con: f64,
    pub lambda_reg: f64,
    pub lambda_spa: f64,
    pub alpha: Vec<f64>,
    pub h_hop: usize,
    pub k_knn: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mae: 0.5,
            lambda_pcc: 0.5,
            lambda_con: 1.0,
            lambda_reg: 1.0,
            lambda_spa: 0.1,
            alpha: vec![1.0, 0.5],
            h_hop: 2,
            k_knn: 6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            self.lambda_mae,
            self.lambda_pcc,
            self.lambda_con,
            self.lambda_reg,
            self.lambda_spa,
        ];
        if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::InvalidConfig(format!("loss weights must be finite and ≥ 0: {lambdas:?}")));
        }
        if self.h_hop == 0 || self.k_knn == 0 {
            return Err(Error::InvalidConfig("h_hop and k_knn must be at least 1".into()));
        }
        if self.alpha.len() != self.h_hop {
            return Err(Error::InvalidConfig(format!(
                "alpha has {} entries for h_hop = {}",
                self.alpha.len(),
                self.h_hop
            )));
        }
        Ok(())
    }
}

/// Regression loss node plus whether the PCC term was dropped for a batch of one.
#[derive(Debug, Clone, Copy)]
pub struct RegLoss {
    pub loss: NodeId,
    pub pcc_skipped: bool,
}

fn col_variances<T: Real>(t: &Tensor2<T>) -> Vec<f64> {
    let n = t.rows() as f64;
    (0..t.cols())
        .map(|c| {
            let col: Vec<f64> = t.column(c).iter().map(|v| v.as_f64()).collect();
            let m = col.iter().sum::<f64>() / n;
            col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
        })
        .collect()
}

/// Correlation-aware regression loss between predictions and standardized targets.
pub fn loss_reg<T: Real>(g: &mut Graph<T>, pred: NodeId, target: NodeId, w: &LossWeights) -> Result<RegLoss> {
    let (sp, st) = (g.shape(pred), g.shape(target));
    if sp != st {
        return Err(Error::shape("loss_reg", format!("prediction {sp:?} vs target {st:?}")));
    }
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff)?;
    let mut loss = g.mean(sq)?;
    if w.lambda_mae != 0.0 {
        let ab = g.abs(diff)?;
        let mae = g.mean(ab)?;
        let mae = g.scale(mae, T::lit(w.lambda_mae))?;
        loss = g.add(loss, mae)?;
    }
    let b = sp.0;
    if b < 2 {
        log::warn!("loss_reg: batch of {b} spot(s); PCC term skipped");
        return Ok(RegLoss {
            loss,
            pcc_skipped: true,
        });
    }
    if w.lambda_pcc == 0.0 {
        return Ok(RegLoss {
            loss,
            pcc_skipped: false,
        });
    }
    let vp = col_variances(g.value(pred));
    let vt = col_variances(g.value(target));
    let admissible: Vec<usize> = (0..sp.1)
        .filter(|&j| vp[j] >= PCC_MIN_VAR && vt[j] >= PCC_MIN_VAR)
        .collect();
    let one_minus = if admissible.is_empty() {
        g.scalar(T::one())
    } else {
        let p = g.select_cols(pred, &admissible)?;
        let t = g.select_cols(target, &admissible)?;
        let pm = g.mean_per_col(p)?;
        let tm = g.mean_per_col(t)?;
        let pc = g.sub(p, pm)?;
        let tc = g.sub(t, tm)?;
        let prod = g.mul(pc, tc)?;
        let cov = g.sum_per_col(prod)?;
        let p2 = g.square(pc)?;
        let t2 = g.square(tc)?;
        let sp2 = g.sum_per_col(p2)?;
        let st2 = g.sum_per_col(t2)?;
        let vv = g.mul(sp2, st2)?;
        let den = g.sqrt(vv)?;
        let pcc = g.div(cov, den)?;
        let mean_pcc = g.mean(pcc)?;
        let one = g.scalar(T::one());
        g.sub(one, mean_pcc)?
    };
    let term = g.scale(one_minus, T::lit(w.lambda_pcc))?;
    Ok(RegLoss {
        loss: g.add(loss, term)?,
        pcc_skipped: false,
    })
}

/// `0.5·(L_{M→G} + L_{G→M})`, each the mean cross-entropy of
/// `row_softmax(P_M P_Gᵀ / τ)` against the diagonal.
///
/// Both inputs must have unit rows; `tau` is a `1×1` node holding a positive value.
pub fn loss_contrastive<T: Real>(g: &mut Graph<T>, p_m: NodeId, p_g: NodeId, tau: NodeId) -> Result<NodeId> {
    let (sm, sg) = (g.shape(p_m), g.shape(p_g));
    if sm != sg {
        return Err(Error::shape("loss_contrastive", format!("{sm:?} vs {sg:?}")));
    }
    for (name, id) in [("P_M", p_m), ("P_G", p_g)] {
        let v = g.value(id);
        for r in 0..v.rows() {
            let n = v.row(r).iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!(
                    "loss_contrastive: row {r} of {name} has norm {n}, expected 1"
                )));
            }
        }
    }
    if g.shape(tau) != (1, 1) || !(g.value(tau).item() > T::zero()) {
        return Err(Error::Contract("loss_contrastive: tau must be a positive 1x1 value".into()));
    }
    let b = sm.0;
    let pgt = g.transpose(p_g)?;
    let sim = g.matmul(p_m, pgt)?;
    let logits = g.div(sim, tau)?;
    let eye = g.constant(Tensor2::identity(b));
    let mut dirs = Vec::with_capacity(2);
    for transposed in [false, true] {
        let l = if transposed { g.transpose(logits)? } else { logits };
        let ls = g.row_log_softmax(l)?;
        let diag = g.mul(ls, eye)?;
        let s = g.sum(diag)?;
        dirs.push(g.scale(s, T::lit(-1.0 / b as f64))?);
    }
    let both = g.add(dirs[0], dirs[1])?;
    g.scale(both, T::lit(0.5))
}

/// `‖S̃ − Ã‖²_F` where `S` holds cosine similarities of the `F_G` rows, both matrices
/// have their diagonal zeroed and are divided by their Frobenius norm (a zero matrix
/// stays zero).
pub fn loss_spa<T: Real>(g: &mut Graph<T>, f_g: NodeId, prior: &TopoPrior) -> Result<NodeId> {
    let (b, _) = g.shape(f_g);
    if prior.a_topo.shape() != (b, b) {
        return Err(Error::shape(
            "loss_spa",
            format!("prior is {:?} for a batch of {b}", prior.a_topo.shape()),
        ));
    }
    if b < 2 {
        log::warn!("loss_spa: batch of {b} spot(s); topology loss is 0");
        return Ok(g.scalar(T::zero()));
    }
    let a_tilde = normalized_offdiag(&prior.a_topo.cast::<T>());
    let a = g.constant(a_tilde);
    let fn_ = g.row_l2_normalize(f_g, T::lit(GUARD_EPS))?;
    let fnt = g.transpose(fn_)?;
    let s = g.matmul(fn_, fnt)?;
    let mask = g.constant(Tensor2::filled(b, b, T::one()).zip_map(&Tensor2::identity(b), |x, i| x - i));
    let s0 = g.mul(s, mask)?;
    let s0v = g.value(s0);
    let s_tilde = if s0v.data().iter().all(|v| *v == T::zero()) {
        g.constant(Tensor2::zeros(b, b))
    } else {
        let sq = g.square(s0)?;
        let fro2 = g.sum(sq)?;
        let fro = g.sqrt(fro2)?;
        g.div(s0, fro)?
    };
    let d = g.sub(s_tilde, a)?;
    let d2 = g.square(d)?;
    g.sum(d2)
}

/// Zero diagonal, then divide by the Frobenius norm (zero matrices stay zero).
pub fn normalized_offdiag<T: Real>(m: &Tensor2<T>) -> Tensor2<T> {
    let mut out = m.clone();
    for i in 0..m.rows().min(m.cols()) {
        out.set(i, i, T::zero());
    }
    let fro = out.data().iter().map(|&v| v * v).sum::<T>().sqrt();
    if fro == T::zero() {
        out
    } else {
        out.map(|v| v / fro)
    }
}

/// One single-slide mini-batch.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `B×D_img`
    pub feats: Tensor2<T>,
    /// `B×2`, normalized per slide
    pub coords: Tensor2<T>,
    /// `B×G` standardized targets
    pub expr: Tensor2<T>,
    pub prior: TopoPrior,
}

/// Nodes of every weighted term; a term whose weight is zero is not built.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub reg: Option<NodeId>,
    pub con: Option<NodeId>,
    pub spa: Option<NodeId>,
    pub total: NodeId,
}

/// Prefixes the failing term to a numeric error.
fn in_term<T>(term: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric { op } => Error::Numeric {
            op: format!("{term}: {op}"),
        },
        other => other,
    })
}

/// `λ_con·L_con + λ_reg·L_reg + λ_spa·L_spa` for one batch.
///
/// A non-finite intermediate fails with [`Error::Numeric`] naming the term
/// (`L_reg`, `L_con` or `L_spa`) and the operation.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    p: &ModelNodes,
    cfg: &EncoderConfig,
    batch: &Batch<T>,
    w: &LossWeights,
) -> Result<LossTerms> {
    let feats = g.constant(batch.feats.clone());
    let target = g.constant(batch.expr.clone());
    let f_h = in_term("F_H", encoders::encode_image(g, p, cfg, feats))?;
    let mut parts = Vec::new();

    let reg = if w.lambda_reg > 0.0 {
        let l = in_term("L_reg", (|| {
            let pred = encoders::regress(g, p, cfg, f_h)?;
            Ok(loss_reg(g, pred, target, w)?.loss)
        })())?;
        parts.push(g.scale(l, T::lit(w.lambda_reg))?);
        Some(l)
    } else {
        None
    };

    let f_g = if w.lambda_con > 0.0 || w.lambda_spa > 0.0 {
        Some(in_term("F_G", encoders::encode_gene(g, p, cfg, target))?)
    } else {
        None
    };

    let con = match f_g {
        Some(f_g) if w.lambda_con > 0.0 => {
            let l = in_term("L_con", (|| {
                let coords = g.constant(batch.coords.clone());
                let (f_c, _) = encoders::encode_coord(g, p, coords)?;
                let f_m = encoders::fuse(g, p, f_h, f_c)?;
                let p_m = encoders::project(g, &p.proj_m, f_m)?;
                let p_g = encoders::project(g, &p.proj_g, f_g)?;
                let tau = g.exp(p.log_tau)?;
                loss_contrastive(g, p_m, p_g, tau)
            })())?;
            parts.push(g.scale(l, T::lit(w.lambda_con))?);
            Some(l)
        }
        _ => None,
    };

    let spa = match f_g {
        Some(f_g) if w.lambda_spa > 0.0 => {
            let l = in_term("L_spa", loss_spa(g, f_g, &batch.prior))?;
            parts.push(g.scale(l, T::lit(w.lambda_spa))?);
            Some(l)
        }
        _ => None,
    };

    let mut total = g.scalar(T::zero());
    for part in parts {
        total = in_term("total", g.add(total, part))?;
    }
    Ok(LossTerms { reg, con, spa, total })
}
