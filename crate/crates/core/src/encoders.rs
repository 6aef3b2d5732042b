//! The four networks, the fusion layer and the two projection heads.
//!
//! Parameters live in plain [`Tensor2`] storage ([`ModelParams`]). To evaluate or
//! differentiate, they are bound into a [`Graph`] as leaves ([`ModelNodes`]), and
//! every forward function works on node ids.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::numkernel::{Graph, NamedTensors, NodeId, Tensor2, GUARD_EPS};
use crate::scalar::Real;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_img: usize,
    pub d_hidden: usize,
    pub d_embed: usize,
    pub d_proj: usize,
    pub g: usize,
    pub depth: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_img: 32,
            d_hidden: 64,
            d_embed: 64,
            d_proj: 32,
            g: 50,
            depth: 2,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_img, self.d_hidden, self.d_embed, self.d_proj, self.g, self.depth];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "encoder dimensions and depth must be at least 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Dense layer `x·W + b` with `W: in×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub w: Tensor2<T>,
    pub b: Option<Tensor2<T>>,
}

impl<T: Real> Linear<T> {
    /// He-normal weights, zero bias.
    pub fn he(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, bias: bool) -> Self {
        let normal = Normal::new(0.0, (2.0 / d_in as f64).sqrt()).expect("valid std");
        let data = (0..d_in * d_out).map(|_| T::lit(normal.sample(rng))).collect();
        Self {
            w: Tensor2::from_vec(d_in, d_out, data).expect("sized"),
            b: bias.then(|| Tensor2::zeros(1, d_out)),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            w: Tensor2::zeros(d_in, d_out),
            b: bias.then(|| Tensor2::zeros(1, d_out)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w.cols()
    }
}

/// Stack of [`Linear`] layers with relu between them and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Real> Mlp<T> {
    /// `depth` layers: `d_in → d_hidden → … → d_out`.
    pub fn he(rng: &mut ChaCha8Rng, d_in: usize, d_hidden: usize, d_out: usize, depth: usize) -> Self {
        let layers = (0..depth)
            .map(|i| {
                let a = if i == 0 { d_in } else { d_hidden };
                let b = if i + 1 == depth { d_out } else { d_hidden };
                Linear::he(rng, a, b, true)
            })
            .collect();
        Self { layers }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearNodes {
    pub w: NodeId,
    pub b: Option<NodeId>,
}

#[derive(Debug, Clone)]
pub struct MlpNodes {
    pub layers: Vec<LinearNodes>,
}

impl<T: Real> Linear<T> {
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> LinearNodes {
        let mut leaf = |t: &Tensor2<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        LinearNodes {
            w: leaf(&self.w),
            b: self.b.as_ref().map(leaf),
        }
    }
}

impl<T: Real> Mlp<T> {
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> MlpNodes {
        MlpNodes {
            layers: self.layers.iter().map(|l| l.bind(g, trainable)).collect(),
        }
    }
}

pub fn linear<T: Real>(g: &mut Graph<T>, l: &LinearNodes, x: NodeId) -> Result<NodeId> {
    let y = g.matmul(x, l.w)?;
    match l.b {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

pub fn mlp<T: Real>(g: &mut Graph<T>, m: &MlpNodes, x: NodeId) -> Result<NodeId> {
    let mut h = x;
    for (i, l) in m.layers.iter().enumerate() {
        h = linear(g, l, h)?;
        if i + 1 < m.layers.len() {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

/// Every trainable weight of the representation-learning stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: EncoderConfig,
    /// image encoder
    pub theta: Mlp<T>,
    /// coordinate encoder
    pub psi: Mlp<T>,
    /// gene encoder
    pub omega: Mlp<T>,
    /// regression head
    pub phi: Linear<T>,
    pub fuse: Linear<T>,
    pub proj_m: Linear<T>,
    pub proj_g: Linear<T>,
    /// `τ = exp(log_tau)`
    pub log_tau: T,
}

/// Initial contrastive temperature.
pub const TAU_INIT: f64 = 0.07;

impl<T: Real> ModelParams<T> {
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = &config;
        Ok(Self {
            theta: Mlp::he(&mut rng, c.d_img, c.d_hidden, c.d_embed, c.depth),
            psi: Mlp::he(&mut rng, 2, c.d_hidden, c.d_embed, c.depth),
            omega: Mlp::he(&mut rng, c.g, c.d_hidden, c.d_embed, c.depth),
            phi: Linear::he(&mut rng, c.d_embed, c.g, true),
            fuse: Linear::he(&mut rng, 2 * c.d_embed, c.d_embed, true),
            proj_m: Linear::he(&mut rng, c.d_embed, c.d_proj, false),
            proj_g: Linear::he(&mut rng, c.d_embed, c.d_proj, false),
            log_tau: T::lit(TAU_INIT.ln()),
            config,
        })
    }

    pub fn tau(&self) -> T {
        self.log_tau.exp()
    }

    /// Named views of every tensor, in a fixed order shared by all flattening,
    /// binding and serialization code.
    pub fn tensors(&self) -> Vec<(String, &Tensor2<T>)> {
        let mut out = Vec::new();
        fn push_lin<'a, T>(out: &mut Vec<(String, &'a Tensor2<T>)>, name: &str, l: &'a Linear<T>) {
            out.push((format!("{name}.w"), &l.w));
            if let Some(b) = &l.b {
                out.push((format!("{name}.b"), b));
            }
        }
        for (name, m) in [("theta", &self.theta), ("psi", &self.psi), ("omega", &self.omega)] {
            for (i, l) in m.layers.iter().enumerate() {
                push_lin(&mut out, &format!("{name}.{i}"), l);
            }
        }
        push_lin(&mut out, "phi", &self.phi);
        push_lin(&mut out, "fuse", &self.fuse);
        push_lin(&mut out, "proj_m", &self.proj_m);
        push_lin(&mut out, "proj_g", &self.proj_g);
        out
    }

    /// Mutable tensors in the order of [`ModelParams::tensors`], followed by nothing:
    /// `log_tau` is handled separately as a scalar.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2<T>> {
        let mut out = Vec::new();
        fn lin<'a, T>(out: &mut Vec<&'a mut Tensor2<T>>, l: &'a mut Linear<T>) {
            out.push(&mut l.w);
            if let Some(b) = &mut l.b {
                out.push(b);
            }
        }
        for m in [&mut self.theta, &mut self.psi, &mut self.omega] {
            for l in &mut m.layers {
                lin(&mut out, l);
            }
        }
        lin(&mut out, &mut self.phi);
        lin(&mut out, &mut self.fuse);
        lin(&mut out, &mut self.proj_m);
        lin(&mut out, &mut self.proj_g);
        out
    }

    pub fn n_values(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum::<usize>() + 1
    }

    /// All values concatenated, with `log_tau` last.
    pub fn to_flat(&self) -> Vec<T> {
        let mut v: Vec<T> = self.tensors().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        v.push(self.log_tau);
        v
    }

    /// Copy of `self` with values replaced from a [`ModelParams::to_flat`] vector.
    pub fn with_flat(&self, flat: &[T]) -> Result<Self> {
        if flat.len() != self.n_values() {
            return Err(Error::shape(
                "with_flat",
                format!("{} values for {} parameters", flat.len(), self.n_values()),
            ));
        }
        let mut out = self.clone();
        let mut pos = 0;
        for t in out.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
        out.log_tau = flat[pos];
        Ok(out)
    }

    /// Order-sensitive 64-bit FNV-1a digest over every value's bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.to_flat() {
            for byte in v.bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ModelNodes {
        let log_tau = if trainable {
            g.param(Tensor2::scalar(self.log_tau))
        } else {
            g.constant(Tensor2::scalar(self.log_tau))
        };
        ModelNodes {
            theta: self.theta.bind(g, trainable),
            psi: self.psi.bind(g, trainable),
            omega: self.omega.bind(g, trainable),
            phi: self.phi.bind(g, trainable),
            fuse: self.fuse.bind(g, trainable),
            proj_m: self.proj_m.bind(g, trainable),
            proj_g: self.proj_g.bind(g, trainable),
            log_tau,
        }
    }

    pub fn to_named(&self) -> NamedTensors {
        let mut nt = NamedTensors::new(json!({
            "version": CHECKPOINT_VERSION,
            "kind": "stage1",
            "config": self.config,
        }));
        for (name, t) in self.tensors() {
            nt.push(name, t);
        }
        nt.push("log_tau", &Tensor2::scalar(self.log_tau));
        nt
    }

    pub fn from_named(nt: &NamedTensors) -> Result<Self> {
        check_header(&nt.header, "stage1")?;
        let config: EncoderConfig = serde_json::from_value(nt.header["config"].clone())
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let mut out = Self::init(config)?;
        let names: Vec<String> = out.tensors().into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(out.tensors_mut()) {
            let src = nt.get(name)?;
            if src.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, config expects {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.cast();
        }
        out.log_tau = T::lit(nt.get("log_tau")?.item());
        Ok(out)
    }
}

pub(crate) fn check_header(header: &serde_json::Value, kind: &str) -> Result<()> {
    let version = header["version"]
        .as_u64()
        .ok_or_else(|| Error::Format("checkpoint header has no version".into()))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    if header["kind"] != kind {
        return Err(Error::Format(format!(
            "expected a {kind} checkpoint, found {}",
            header["kind"]
        )));
    }
    Ok(())
}

/// [`ModelParams`] bound into a graph.
#[derive(Debug, Clone)]
pub struct ModelNodes {
    pub theta: MlpNodes,
    pub psi: MlpNodes,
    pub omega: MlpNodes,
    pub phi: LinearNodes,
    pub fuse: LinearNodes,
    pub proj_m: LinearNodes,
    pub proj_g: LinearNodes,
    pub log_tau: NodeId,
}

impl ModelNodes {
    /// Leaves in the order of [`ModelParams::to_flat`].
    pub fn leaves(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut lin = |l: &LinearNodes| {
            out.push(l.w);
            out.extend(l.b);
        };
        for m in [&self.theta, &self.psi, &self.omega] {
            m.layers.iter().for_each(&mut lin);
        }
        lin(&self.phi);
        lin(&self.fuse);
        lin(&self.proj_m);
        lin(&self.proj_g);
        out.push(self.log_tau);
        out
    }

    /// Gradients for every tensor leaf (zeros where unreached) and for `log_tau`.
    pub fn grads<T: Real>(&self, g: &Graph<T>) -> (Vec<Tensor2<T>>, T) {
        let leaves = self.leaves();
        let (tau, rest) = leaves.split_last().expect("log_tau leaf");
        let grads = rest
            .iter()
            .map(|&id| {
                g.grad(id).cloned().unwrap_or_else(|| {
                    let (r, c) = g.shape(id);
                    Tensor2::zeros(r, c)
                })
            })
            .collect();
        let gt = g.grad(*tau).map_or(T::zero(), |t| t.item());
        (grads, gt)
    }
}

fn check_cols<T: Real>(g: &Graph<T>, x: NodeId, cols: usize, op: &'static str) -> Result<()> {
    let (_, c) = g.shape(x);
    if c != cols {
        return Err(Error::shape(op, format!("input has {c} columns, expected {cols}")));
    }
    Ok(())
}

/// Histology features `F_H` from image features.
pub fn encode_image<T: Real>(g: &mut Graph<T>, p: &ModelNodes, cfg: &EncoderConfig, feats: NodeId) -> Result<NodeId> {
    check_cols(g, feats, cfg.d_img, "encode_image")?;
    mlp(g, &p.theta, feats)
}

/// Standardized expression predicted from `F_H`.
pub fn regress<T: Real>(g: &mut Graph<T>, p: &ModelNodes, cfg: &EncoderConfig, f_h: NodeId) -> Result<NodeId> {
    check_cols(g, f_h, cfg.d_embed, "regress")?;
    linear(g, &p.phi, f_h)
}

/// Coordinate features `F_C` from per-slide normalized coordinates.
///
/// Inputs outside the `[-0.5, 1.5]` guard band are still encoded; the returned
/// flag is `true` when that happened.
pub fn encode_coord<T: Real>(g: &mut Graph<T>, p: &ModelNodes, coords: NodeId) -> Result<(NodeId, bool)> {
    check_cols(g, coords, 2, "encode_coord")?;
    let (lo, hi) = (T::lit(-0.5), T::lit(1.5));
    let out_of_band = g.value(coords).data().iter().any(|&v| v < lo || v > hi);
    if out_of_band {
        log::warn!("encode_coord: coordinates outside [-0.5, 1.5]; were they normalized per slide?");
    }
    Ok((mlp(g, &p.psi, coords)?, out_of_band))
}

/// Coordinate-guided morphology representation `F_M = [F_H | F_C]·W + b`.
pub fn fuse<T: Real>(g: &mut Graph<T>, p: &ModelNodes, f_h: NodeId, f_c: NodeId) -> Result<NodeId> {
    let cat = g.concat_cols(f_h, f_c)?;
    linear(g, &p.fuse, cat)
}

/// Gene features `F_G` from standardized expression.
pub fn encode_gene<T: Real>(g: &mut Graph<T>, p: &ModelNodes, cfg: &EncoderConfig, expr: NodeId) -> Result<NodeId> {
    check_cols(g, expr, cfg.g, "encode_gene")?;
    mlp(g, &p.omega, expr)
}

/// Linear projection without bias followed by row L2 normalization.
pub fn project<T: Real>(g: &mut Graph<T>, head: &LinearNodes, f: NodeId) -> Result<NodeId> {
    let y = linear(g, head, f)?;
    g.row_l2_normalize(y, T::lit(GUARD_EPS))
}

/// Frozen `F_H` for a batch of feature rows, evaluated without gradient tracking.
pub fn image_features<T: Real>(params: &ModelParams<T>, feats: &Tensor2<T>) -> Result<Tensor2<T>> {
    let mut g = Graph::new();
    if feats.cols() != params.config.d_img {
        return Err(Error::shape(
            "image_features",
            format!("input has {} columns, expected {}", feats.cols(), params.config.d_img),
        ));
    }
    let theta = params.theta.bind(&mut g, false);
    let x = g.constant(feats.clone());
    let y = mlp(&mut g, &theta, x)?;
    Ok(g.value(y).clone())
}

/// Stage-1 regression head output for a batch of feature rows.
pub fn regression_predictions<T: Real>(params: &ModelParams<T>, feats: &Tensor2<T>) -> Result<Tensor2<T>> {
    let mut g = Graph::new();
    let nodes = params.bind(&mut g, false);
    let x = g.constant(feats.clone());
    let f_h = encode_image(&mut g, &nodes, &params.config, x)?;
    let y = regress(&mut g, &nodes, &params.config, f_h)?;
    Ok(g.value(y).clone())
}
