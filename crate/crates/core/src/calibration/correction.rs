use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::calibration::{estimate, estimate_batch, stack_values, CalibConfig, GalleryBank};
use crate::encoders::{check_header, linear, Linear, LinearNodes, ModelParams, CHECKPOINT_VERSION};
use crate::error::{Error, Result};
use crate::numkernel::{Adam, AdamConfig, Graph, NamedTensors, NodeId, Tensor2};
use crate::objectives::{loss_reg, LossWeights};
use crate::scalar::Real;

/// Two-layer residual network `Δ = W₂·relu(W₁ z + b₁) + b₂`; the output layer
/// starts at zero so an untrained net adds nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionNet<T> {
    pub l1: Linear<T>,
    pub l2: Linear<T>,
}

impl<T: Real> CorrectionNet<T> {
    pub fn init(d_embed: usize, hidden: usize, g: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            l1: Linear::he(&mut rng, d_embed, hidden, true),
            l2: Linear::zeros(hidden, g, true),
        }
    }

    fn bind(&self, g: &mut Graph<T>, trainable: bool) -> [LinearNodes; 2] {
        [self.l1.bind(g, trainable), self.l2.bind(g, trainable)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor2<T>> {
        let mut out = Vec::new();
        for l in [&mut self.l1, &mut self.l2] {
            out.push(&mut l.w);
            if let Some(b) = &mut l.b {
                out.push(b);
            }
        }
        out
    }

    /// `Δ` for every row of `z`.
    pub fn forward(&self, z: &Tensor2<T>) -> Result<Tensor2<T>> {
        let mut g = Graph::new();
        let nodes = self.bind(&mut g, false);
        let x = g.constant(z.clone());
        let y = residual(&mut g, &nodes, x)?;
        Ok(g.value(y).clone())
    }

    pub fn to_named(&self) -> NamedTensors {
        let mut nt = NamedTensors::new(json!({
            "version": CHECKPOINT_VERSION,
            "kind": "correction",
            "d_embed": self.l1.d_in(),
            "hidden": self.l1.d_out(),
            "g": self.l2.d_out(),
        }));
        for (name, l) in [("l1", &self.l1), ("l2", &self.l2)] {
            nt.push(format!("{name}.w"), &l.w);
            if let Some(b) = &l.b {
                nt.push(format!("{name}.b"), b);
            }
        }
        nt
    }

    pub fn from_named(nt: &NamedTensors) -> Result<Self> {
        check_header(&nt.header, "correction")?;
        let lin = |name: &str| -> Result<Linear<T>> {
            Ok(Linear {
                w: nt.get(&format!("{name}.w"))?.cast(),
                b: Some(nt.get(&format!("{name}.b"))?.cast()),
            })
        };
        let (l1, l2) = (lin("l1")?, lin("l2")?);
        if l1.d_out() != l2.d_in() {
            return Err(Error::Format("correction layers do not chain".into()));
        }
        Ok(Self { l1, l2 })
    }
}

fn residual<T: Real>(g: &mut Graph<T>, nodes: &[LinearNodes; 2], x: NodeId) -> Result<NodeId> {
    let h = linear(g, &nodes[0], x)?;
    let h = g.relu(h)?;
    linear(g, &nodes[1], h)
}

/// Base prediction the residual is added to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// gallery retrieval estimate
    Estimate,
    /// stage-1 regression head applied to `F_H`
    Regression,
}

/// The four calibration designs compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    EstimateOnly,
    CorrectionOnly,
    NoConstraint,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::EstimateOnly,
        Variant::CorrectionOnly,
        Variant::NoConstraint,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::EstimateOnly => "estimate_only",
            Variant::CorrectionOnly => "correction_only",
            Variant::NoConstraint => "no_constraint",
            Variant::Full => "full",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::EstimateOnly => "Estimate only",
            Variant::CorrectionOnly => "Correction only",
            Variant::NoConstraint => "Estimate + Correction (no constraint)",
            Variant::Full => "Estimate + Correction + constraint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionTrace {
    pub epoch: usize,
    pub loss: f64,
    pub mean_delta_sq: f64,
}

/// Result of training a correction net on one fold's gallery.
#[derive(Debug, Clone)]
pub struct CorrectionFit<T> {
    pub net: CorrectionNet<T>,
    pub trace: Vec<CorrectionTrace>,
    /// Base predictions for the training spots (self-excluded for the estimate anchor).
    pub base: Tensor2<T>,
    /// Neighbour sets used for each training spot; empty for the regression anchor.
    pub neighbors: Vec<Vec<usize>>,
}

fn regression_from_features<T: Real>(params: &ModelParams<T>, z_raw: &Tensor2<T>) -> Result<Tensor2<T>> {
    let mut g = Graph::new();
    let phi = params.phi.bind(&mut g, false);
    let x = g.constant(z_raw.clone());
    let y = linear(&mut g, &phi, x)?;
    Ok(g.value(y).clone())
}

fn mean_sq_norm<T: Real>(d: &Tensor2<T>) -> f64 {
    if d.rows() == 0 {
        return 0.0;
    }
    d.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / d.rows() as f64
}

/// Trains the residual on gallery (training-slide) spots with the stage-1 weights frozen.
///
/// Each training spot's estimate is retrieved with the spot itself removed from the
/// candidates, so `k` is effectively capped at `N_tr − 1`. The loss is the
/// regression loss on `base + Δ` plus `lambda_delta · mean‖Δ‖²`.
pub fn train_correction<T: Real>(
    params: &ModelParams<T>,
    bank: &GalleryBank<T>,
    anchor: Anchor,
    w: &LossWeights,
    cfg: &CalibConfig,
    lambda_delta: f64,
) -> Result<CorrectionFit<T>> {
    cfg.validate()?;
    let before = params.checksum();
    let (base, neighbors) = match anchor {
        Anchor::Estimate => {
            if bank.len() < 2 {
                return Err(Error::Retrieval("self-excluded retrieval needs at least 2 gallery rows".into()));
            }
            let k = cfg.k_gallery.min(bank.len() - 1);
            let est = estimate_batch(&bank.z_raw, bank, k, cfg.tau_t, true)?;
            let base = stack_values(&est, bank.n_genes())?;
            (base, est.into_iter().map(|e| e.neighbors).collect())
        }
        Anchor::Regression => (regression_from_features(params, &bank.z_raw)?, Vec::new()),
    };

    let mut net = CorrectionNet::init(bank.d_embed(), cfg.hidden, bank.n_genes(), cfg.seed);
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    };
    let shapes: Vec<(usize, usize)> = net.tensors_mut().iter().map(|t| t.shape()).collect();
    let mut adam = Adam::new(adam_cfg, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c0de);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let n = bank.len();

    for epoch in 1..=cfg.epochs {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let (mut loss_sum, mut delta_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in idx.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut g = Graph::new();
            let nodes = net.bind(&mut g, true);
            let z = g.constant(bank.z_raw.select_rows(chunk));
            let base_b = g.constant(base.select_rows(chunk));
            let target = g.constant(bank.g_std.select_rows(chunk));
            let delta = residual(&mut g, &nodes, z)?;
            let pred = g.add(base_b, delta)?;
            let mut loss = loss_reg(&mut g, pred, target, w)?.loss;
            let d2 = g.square(delta)?;
            let d2s = g.sum(d2)?;
            let mean_d2 = g.scale(d2s, T::lit(1.0 / b as f64))?;
            if lambda_delta > 0.0 {
                let pen = g.scale(mean_d2, T::lit(lambda_delta))?;
                loss = g.add(loss, pen)?;
            }
            g.backward(loss)?;
            let grads: Vec<Tensor2<T>> = [nodes[0].w, nodes[0].b.expect("bias"), nodes[1].w, nodes[1].b.expect("bias")]
                .iter()
                .map(|&id| g.grad(id).cloned().expect("trainable leaf"))
                .collect();
            if grads.iter().any(|t| !t.is_finite()) {
                return Err(Error::Numeric {
                    op: "correction: backward".into(),
                });
            }
            loss_sum += g.value(loss).item().as_f64();
            delta_sum += g.value(mean_d2).item().as_f64();
            batches += 1;
            adam.step(&mut net.tensors_mut(), &grads)?;
        }
        trace.push(CorrectionTrace {
            epoch,
            loss: loss_sum / batches as f64,
            mean_delta_sq: delta_sum / batches as f64,
        });
    }
    if params.checksum() != before {
        return Err(Error::Contract("stage-1 parameters changed during calibration".into()));
    }
    Ok(CorrectionFit {
        net,
        trace,
        base,
        neighbors,
    })
}

/// Calibrated prediction `estimate(z_q) + Δ(z_q)` for one held-out query.
pub fn predict<T: Real>(z_q: &[T], bank: &GalleryBank<T>, net: &CorrectionNet<T>, cfg: &CalibConfig) -> Result<Vec<T>> {
    let est = estimate(z_q, bank, cfg, None)?;
    let delta = net.forward(&Tensor2::row_vector(z_q))?;
    Ok(est.value.iter().zip(delta.data()).map(|(&e, &d)| e + d).collect())
}

/// [`predict`] for every row of `queries`; returns (prediction, estimate, Δ).
pub fn predict_batch<T: Real>(
    queries: &Tensor2<T>,
    bank: &GalleryBank<T>,
    net: &CorrectionNet<T>,
    cfg: &CalibConfig,
) -> Result<(Tensor2<T>, Tensor2<T>, Tensor2<T>)> {
    cfg.validate()?;
    let est = estimate_batch(queries, bank, cfg.k_gallery, cfg.tau_t, false)?;
    let base = stack_values(&est, bank.n_genes())?;
    let delta = net.forward(queries)?;
    let pred = base.zip_map(&delta, |a, b| a + b);
    Ok((pred, base, delta))
}

/// Held-out predictions of one calibration variant.
#[derive(Debug, Clone)]
pub struct CalibOutcome<T> {
    pub variant: Variant,
    /// `N_test×G` standardized predictions
    pub pred: Tensor2<T>,
    /// mean‖Δ‖² over held-out spots
    pub mean_delta_sq: f64,
    /// mean‖Δ‖² over training spots after training
    pub train_mean_delta_sq: f64,
    pub trace: Vec<CorrectionTrace>,
    pub net: Option<CorrectionNet<T>>,
}

/// Runs one calibration design for the held-out image features `z_test` (`F_H`).
pub fn run_variant<T: Real>(
    params: &ModelParams<T>,
    bank: &GalleryBank<T>,
    z_test: &Tensor2<T>,
    w: &LossWeights,
    cfg: &CalibConfig,
    variant: Variant,
) -> Result<CalibOutcome<T>> {
    cfg.validate()?;
    if variant == Variant::EstimateOnly {
        let est = estimate_batch(z_test, bank, cfg.k_gallery, cfg.tau_t, false)?;
        return Ok(CalibOutcome {
            variant,
            pred: stack_values(&est, bank.n_genes())?,
            mean_delta_sq: 0.0,
            train_mean_delta_sq: 0.0,
            trace: Vec::new(),
            net: None,
        });
    }
    let (anchor, lambda_delta) = match variant {
        Variant::CorrectionOnly => (Anchor::Regression, cfg.lambda_delta),
        Variant::NoConstraint => (Anchor::Estimate, 0.0),
        _ => (Anchor::Estimate, cfg.lambda_delta),
    };
    let fit = train_correction(params, bank, anchor, w, cfg, lambda_delta)?;
    let train_mean_delta_sq = mean_sq_norm(&fit.net.forward(&bank.z_raw)?);
    let base = match anchor {
        Anchor::Estimate => {
            let est = estimate_batch(z_test, bank, cfg.k_gallery, cfg.tau_t, false)?;
            stack_values(&est, bank.n_genes())?
        }
        Anchor::Regression => regression_from_features(params, z_test)?,
    };
    let delta = fit.net.forward(z_test)?;
    Ok(CalibOutcome {
        variant,
        pred: base.zip_map(&delta, |a, b| a + b),
        mean_delta_sq: mean_sq_norm(&delta),
        train_mean_delta_sq,
        trace: fit.trace,
        net: Some(fit.net),
    })
}
