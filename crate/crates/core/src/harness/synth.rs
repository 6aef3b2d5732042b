//! Synthetic cohorts with a controllable per-slide feature shift.
//!
//! Each slide gets its own latent field `z(p) ∈ R^L`, a sum of Gaussian bumps over
//! the unit square. Genes and image features read the field through loadings
//! shared by the whole cohort:
//!
//! ```text
//! count_j = round(exp(μ_j + (W_g z)_j + σ_e ε))
//! feat    = a_s ⊙ (W_x z) + b_s + σ_f ε
//! ```
//!
//! `a_s = exp(shift · n)` and `b_s = shift · n'` (`n, n' ~ N(0, 1)` per slide and
//! feature) emulate stain or scanner differences between slides.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, SpotRecord};
use crate::error::{Error, Result};

/// Grid pitch in coordinate units.
const PITCH: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_slides: usize,
    pub spots_per_slide: usize,
    pub g: usize,
    pub d_img: usize,
    pub n_latent: usize,
    /// Gaussian bumps per latent channel per slide
    pub n_bumps: usize,
    pub noise_expr: f64,
    pub noise_feat: f64,
    /// std of the latent-to-feature loadings
    pub feat_loading: f64,
    pub shift_strength: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_slides: 6,
            spots_per_slide: 400,
            g: 50,
            d_img: 32,
            n_latent: 4,
            n_bumps: 4,
            noise_expr: 1.2,
            noise_feat: 0.5,
            feat_loading: 1.0,
            shift_strength: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [self.n_slides, self.spots_per_slide, self.g, self.d_img, self.n_latent, self.n_bumps];
        if counts.contains(&0) {
            return Err(Error::InvalidConfig(format!("synthetic counts must be at least 1: {self:?}")));
        }
        for (name, v) in [
            ("noise_expr", self.noise_expr),
            ("noise_feat", self.noise_feat),
            ("feat_loading", self.feat_loading),
            ("shift_strength", self.shift_strength),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

struct Bump {
    center: [f64; 2],
    width: f64,
    amp: f64,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<Vec<f64>> {
    let d = Normal::new(0.0, std).expect("valid std");
    (0..rows).map(|_| (0..cols).map(|_| d.sample(rng)).collect()).collect()
}

fn matvec(m: &[Vec<f64>], z: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum()).collect()
}

/// Generates the cohort in memory; every value is a function of `cfg` alone.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Cohort> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let l = cfg.n_latent;
    let w_g = matrix(&mut rng, cfg.g, l, 0.6);
    let w_x = matrix(&mut rng, cfg.d_img, l, cfg.feat_loading);
    let mu: Vec<f64> = (0..cfg.g).map(|_| rng.gen_range(1.0..4.0)).collect();
    let side = (cfg.spots_per_slide as f64).sqrt().ceil() as usize;

    let mut spots = Vec::with_capacity(cfg.n_slides * cfg.spots_per_slide);
    for s in 0..cfg.n_slides {
        let slide_id = format!("slide_{s:02}");
        let bumps: Vec<Vec<Bump>> = (0..l)
            .map(|_| {
                (0..cfg.n_bumps)
                    .map(|_| Bump {
                        center: [rng.gen(), rng.gen()],
                        width: rng.gen_range(0.1..0.3),
                        amp: 1.5 * normal(&mut rng),
                    })
                    .collect()
            })
            .collect();
        let scale: Vec<f64> = (0..cfg.d_img).map(|_| (cfg.shift_strength * normal(&mut rng)).exp()).collect();
        let offset: Vec<f64> = (0..cfg.d_img).map(|_| cfg.shift_strength * normal(&mut rng)).collect();

        for i in 0..cfg.spots_per_slide {
            let (gx, gy) = ((i % side) as f64, (i / side) as f64);
            let jitter = [rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25)];
            let coord = [(gx + jitter[0]) * PITCH, (gy + jitter[1]) * PITCH];
            let u = [(gx + 0.5) / side as f64, (gy + 0.5) / side as f64];
            let z: Vec<f64> = bumps
                .iter()
                .map(|bs| {
                    bs.iter()
                        .map(|b| {
                            let d2 = (u[0] - b.center[0]).powi(2) + (u[1] - b.center[1]).powi(2);
                            b.amp * (-d2 / (2.0 * b.width * b.width)).exp()
                        })
                        .sum()
                })
                .collect();
            let expr_raw = matvec(&w_g, &z)
                .iter()
                .zip(&mu)
                .map(|(&a, &m)| (m + a + cfg.noise_expr * normal(&mut rng)).exp().round())
                .collect();
            let feat = matvec(&w_x, &z)
                .iter()
                .enumerate()
                .map(|(k, &a)| scale[k] * a + offset[k] + cfg.noise_feat * normal(&mut rng))
                .collect();
            spots.push(SpotRecord {
                slide_id: slide_id.clone(),
                spot_id: format!("spot_{i:04}"),
                coord,
                feat,
                expr_raw,
            });
        }
    }
    let genes = (0..cfg.g).map(|j| format!("gene_{j:03}")).collect();
    Cohort::new(format!("synthetic-{}", cfg.seed), genes, None, cfg.d_img, spots)
}
