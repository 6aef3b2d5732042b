use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{self, build_gallery, run_variant, CalibConfig, CorrectionTrace, Variant};
use crate::cohort::{Cohort, DiskCohort, LosoFold, SlideSource, SlideTensors};
use crate::encoders::{image_features, EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::harness::synth::{generate_synthetic, SynthConfig};
use crate::metrics::{write_per_gene_csv, MetricsReport};
use crate::objectives::{train_stage1, write_trace, LossWeights, TraceRow, TrainConfig};

/// Which loss terms stage-1 training keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Full,
    RegCon,
    RegTopo,
    ConTopo,
    RegOnly,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Full,
        Objective::RegCon,
        Objective::RegTopo,
        Objective::ConTopo,
        Objective::RegOnly,
    ];

    /// (topology, regression, contrastive)
    pub fn terms(self) -> (bool, bool, bool) {
        match self {
            Objective::Full => (true, true, true),
            Objective::RegCon => (false, true, true),
            Objective::RegTopo => (true, true, false),
            Objective::ConTopo => (true, false, true),
            Objective::RegOnly => (false, true, false),
        }
    }

    /// `base` with the dropped terms' weights set to exactly zero.
    pub fn weights(self, base: &LossWeights) -> LossWeights {
        let (topo, reg, con) = self.terms();
        let mut w = base.clone();
        if !topo {
            w.lambda_spa = 0.0;
        }
        if !reg {
            w.lambda_reg = 0.0;
        }
        if !con {
            w.lambda_con = 0.0;
        }
        w
    }

    pub fn label(self) -> &'static str {
        match self {
            Objective::Full => "Full objective",
            Objective::RegCon => "Regression + Contrastive",
            Objective::RegTopo => "Topology + Regression",
            Objective::ConTopo => "Contrastive + Topology",
            Objective::RegOnly => "Regression only",
        }
    }
}

/// One row of the ablation grid: a training objective paired with a calibration design.
///
/// Calibration ablations use the full objective; objective ablations use full calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExperimentVariant {
    pub objective: Objective,
    pub calibration: Variant,
}

impl ExperimentVariant {
    pub const NAMES: [&'static str; 8] = [
        "full",
        "estimate_only",
        "correction_only",
        "no_constraint",
        "reg_con",
        "reg_topo",
        "con_topo",
        "reg_only",
    ];

    pub fn parse(name: &str) -> Option<Self> {
        let objective = match name {
            "reg_con" => Objective::RegCon,
            "reg_topo" => Objective::RegTopo,
            "con_topo" => Objective::ConTopo,
            "reg_only" => Objective::RegOnly,
            _ => {
                return Variant::parse(name).map(|calibration| Self {
                    objective: Objective::Full,
                    calibration,
                })
            }
        };
        Some(Self {
            objective,
            calibration: Variant::Full,
        })
    }

    pub fn name(self) -> &'static str {
        match self.objective {
            Objective::Full => self.calibration.name(),
            Objective::RegCon => "reg_con",
            Objective::RegTopo => "reg_topo",
            Objective::ConTopo => "con_topo",
            Objective::RegOnly => "reg_only",
        }
    }
}

impl fmt::Display for ExperimentVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Cohort directory; when absent a synthetic cohort is generated from `synth`.
    pub cohort: Option<PathBuf>,
    pub synth: SynthConfig,
    /// Keep only the most variable genes; `None` keeps the cohort's panel.
    pub hvg_genes: Option<usize>,
    /// `d_img` and `g` are taken from the cohort.
    pub encoder: EncoderConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub calib: CalibConfig,
    pub variants: Vec<String>,
    /// Replicate ids; each gets its own initialization and batch order.
    pub seeds: Vec<u64>,
    pub root_seed: u64,
    pub heg_ks: Vec<usize>,
    /// Held-out slides to evaluate; empty means every slide.
    pub folds: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            cohort: None,
            synth: SynthConfig::default(),
            hvg_genes: None,
            encoder: EncoderConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            calib: CalibConfig::default(),
            variants: ExperimentVariant::NAMES.iter().map(|s| s.to_string()).collect(),
            seeds: vec![0, 1, 2],
            root_seed: 0,
            heg_ks: vec![10, 25],
            folds: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn parsed_variants(&self) -> Result<Vec<ExperimentVariant>> {
        if self.variants.is_empty() {
            return Err(Error::InvalidConfig("at least one variant is required".into()));
        }
        let mut out = Vec::new();
        for name in &self.variants {
            let v = ExperimentVariant::parse(name).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown variant '{name}', expected one of {}",
                    ExperimentVariant::NAMES.join(", ")
                ))
            })?;
            if !out.contains(&v) {
                out.push(v);
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.parsed_variants()?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if self.heg_ks.contains(&0) {
            return Err(Error::InvalidConfig("HEG sizes must be at least 1".into()));
        }
        if let Some(p) = &self.cohort {
            if !p.is_dir() {
                return Err(Error::InvalidConfig(format!("cohort directory {} does not exist", p.display())));
            }
        } else {
            self.synth.validate()?;
        }
        self.loss.validate()?;
        self.train.validate()?;
        self.calib.validate()
    }

    /// Opens or generates the cohort. Disk cohorts stay lazy so each fold only
    /// reads the slides it uses.
    pub fn open_source(&self) -> Result<Box<dyn SlideSource>> {
        match &self.cohort {
            Some(root) => {
                let disk = DiskCohort::open(root)?;
                match self.hvg_genes {
                    None => Ok(Box::new(disk)),
                    Some(g) => {
                        let hvg = disk.load_all()?.select_hvg(g)?;
                        Ok(Box::new(disk.with_hvg(hvg)?))
                    }
                }
            }
            None => {
                let mut c: Cohort = generate_synthetic(&self.synth)?;
                if let Some(g) = self.hvg_genes {
                    c.select_hvg(g)?;
                }
                Ok(Box::new(c))
            }
        }
    }

    /// Encoder config with the input and output widths of `source`.
    pub fn encoder_for(&self, source: &dyn SlideSource) -> EncoderConfig {
        EncoderConfig {
            d_img: source.d_img(),
            g: source.n_hvg(),
            ..self.encoder
        }
    }

    pub fn test_slides(&self, source: &dyn SlideSource) -> Result<Vec<String>> {
        let all = source.slide_ids();
        if self.folds.is_empty() {
            return Ok(all);
        }
        for f in &self.folds {
            if !all.contains(f) {
                return Err(Error::InvalidConfig(format!("fold '{f}' is not a slide of the cohort")));
            }
        }
        Ok(all.into_iter().filter(|s| self.folds.contains(s)).collect())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Random stream a seed is drawn for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Batches = 2,
    Correction = 3,
}

/// Seed for one (replicate, fold, stream): SplitMix64 folded over
/// `root, replicate, fold index, stream`. Objective variants share seeds so their
/// comparison is paired.
pub fn derive_seed(root: u64, replicate: u64, fold: usize, stream: Stream) -> u64 {
    [replicate, fold as u64, stream as u64]
        .into_iter()
        .fold(splitmix64(root), |acc, x| splitmix64(acc ^ splitmix64(x)))
}

/// Per-cell configs with derived seeds.
pub fn cell_configs(
    cfg: &ExperimentConfig,
    encoder: EncoderConfig,
    replicate: u64,
    fold_index: usize,
) -> (EncoderConfig, TrainConfig, CalibConfig) {
    let seed = |s| derive_seed(cfg.root_seed, replicate, fold_index, s);
    (
        EncoderConfig {
            seed: seed(Stream::Init),
            ..encoder
        },
        TrainConfig {
            seed: seed(Stream::Batches),
            ..cfg.train.clone()
        },
        CalibConfig {
            seed: seed(Stream::Correction),
            ..cfg.calib.clone()
        },
    )
}

/// Everything written to a cell's `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub variant: String,
    pub objective: Objective,
    pub calibration: Variant,
    pub seed: u64,
    /// mean‖Δ‖² over held-out spots
    pub mean_delta_sq: f64,
    /// mean‖Δ‖² over training spots
    pub train_mean_delta_sq: f64,
    pub metrics: MetricsReport,
}

impl CellMetrics {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// A cell that did not produce metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub variant: String,
    pub fold_id: String,
    pub seed: u64,
    pub message: String,
    pub numeric: bool,
}

pub fn cell_dir(out: &Path, variant: &str, fold_id: &str, seed: u64) -> PathBuf {
    out.join(variant).join(fold_id).join(seed.to_string())
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutcome {
    pub cells: Vec<CellMetrics>,
    pub errors: Vec<CellError>,
}

struct Task {
    objective: Objective,
    fold_index: usize,
    test_slide: String,
    replicate: u64,
    calibrations: Vec<Variant>,
}

fn write_correction_trace(path: &Path, rows: &[CorrectionTrace]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Stage-1 training for one fold and replicate under `objective`.
pub fn train_cell(
    cfg: &ExperimentConfig,
    source: &dyn SlideSource,
    fold: &LosoFold,
    fold_index: usize,
    replicate: u64,
    objective: Objective,
) -> Result<(ModelParams<f64>, Vec<TraceRow>)> {
    let (enc, train, _) = cell_configs(cfg, cfg.encoder_for(source), replicate, fold_index);
    let init = ModelParams::init(enc)?;
    train_stage1(source, fold, init, &objective.weights(&cfg.loss), &train)
}

fn run_task(
    cfg: &ExperimentConfig,
    source: &dyn SlideSource,
    task: &Task,
    out: &Path,
) -> Vec<std::result::Result<CellMetrics, CellError>> {
    let fail = |v: Variant, e: &Error| CellError {
        variant: ExperimentVariant {
            objective: task.objective,
            calibration: v,
        }
        .name()
        .to_string(),
        fold_id: task.test_slide.clone(),
        seed: task.replicate,
        message: e.to_string(),
        numeric: e.is_numeric(),
    };
    let w = task.objective.weights(&cfg.loss);
    let (_, _, calib) = cell_configs(cfg, cfg.encoder_for(source), task.replicate, task.fold_index);

    let stage1 = (|| {
        let fold = LosoFold::holding_out(source, &task.test_slide)?;
        let (params, trace) = train_cell(cfg, source, &fold, task.fold_index, task.replicate, task.objective)?;
        let bank = build_gallery(&params, &fold, source)?;
        let test = SlideTensors::load(source, &task.test_slide, &fold.standardizer)?;
        let z_test = image_features(&params, &test.feats)?;
        Ok::<_, Error>((params, trace, bank, test, z_test))
    })();
    let (params, trace, bank, test, z_test) = match stage1 {
        Ok(v) => v,
        Err(e) => return task.calibrations.iter().map(|&v| Err(fail(v, &e))).collect(),
    };
    let genes = source.hvg_names();

    task.calibrations
        .iter()
        .map(|&v| {
            let variant = ExperimentVariant {
                objective: task.objective,
                calibration: v,
            };
            let dir = cell_dir(out, variant.name(), &task.test_slide, task.replicate);
            let result = (|| {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let outcome = run_variant(&params, &bank, &z_test, &w, &calib, v)?;
                let report = MetricsReport::evaluate(
                    &task.test_slide,
                    &genes,
                    &test.expr_std,
                    &test.expr_log,
                    &outcome.pred,
                    &cfg.heg_ks,
                )?;
                let cell = CellMetrics {
                    variant: variant.name().to_string(),
                    objective: task.objective,
                    calibration: v,
                    seed: task.replicate,
                    mean_delta_sq: outcome.mean_delta_sq,
                    train_mean_delta_sq: outcome.train_mean_delta_sq,
                    metrics: report,
                };
                write_trace(&dir.join("trace.csv"), &trace)?;
                if !outcome.trace.is_empty() {
                    write_correction_trace(&dir.join("correction_trace.csv"), &outcome.trace)?;
                }
                write_per_gene_csv(&dir.join("per_gene_pcc.csv"), &task.test_slide, &cell.metrics)?;
                cell.write_json(&dir.join("metrics.json"))?;
                Ok::<_, Error>(cell)
            })();
            result.map_err(|e| {
                let err = fail(v, &e);
                if std::fs::create_dir_all(&dir).is_ok() {
                    let _ = std::fs::write(dir.join("error.txt"), format!("{}\n", err.message));
                }
                err
            })
        })
        .collect()
}

/// Runs every fold × seed × variant cell and writes the report tree under `out`.
///
/// Cells that fail are recorded (and get an `error.txt`); the others continue.
/// Configuration problems that affect every cell are returned as errors.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let variants = cfg.parsed_variants()?;
    let source = cfg.open_source()?;
    let source: &dyn SlideSource = source.as_ref();
    let all_slides = source.slide_ids();
    if all_slides.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "leave-one-slide-out needs at least 2 slides, cohort has {}",
            all_slides.len()
        )));
    }
    cfg.encoder_for(source).validate()?;
    let tests = cfg.test_slides(source)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resolved = serde_json::to_string_pretty(cfg).map_err(|e| Error::json(out, e))?;
    let cfg_path = out.join("config.json");
    std::fs::write(&cfg_path, resolved + "\n").map_err(|e| Error::io(&cfg_path, e))?;

    let mut tasks = Vec::new();
    for objective in Objective::ALL {
        let calibrations: Vec<Variant> = variants
            .iter()
            .filter(|v| v.objective == objective)
            .map(|v| v.calibration)
            .collect();
        if calibrations.is_empty() {
            continue;
        }
        for test_slide in &tests {
            let fold_index = all_slides.iter().position(|s| s == test_slide).expect("known slide");
            for &replicate in &cfg.seeds {
                tasks.push(Task {
                    objective,
                    fold_index,
                    test_slide: test_slide.clone(),
                    replicate,
                    calibrations: calibrations.clone(),
                });
            }
        }
    }
    log::info!("running {} stage-1 tasks", tasks.len());

    let results: Vec<_> = tasks.par_iter().flat_map_iter(|t| run_task(cfg, source, t, out)).collect();
    let mut outcome = ExperimentOutcome::default();
    for r in results {
        match r {
            Ok(c) => outcome.cells.push(c),
            Err(e) => {
                log::warn!("cell {}/{}/{} failed: {}", e.variant, e.fold_id, e.seed, e.message);
                outcome.errors.push(e);
            }
        }
    }
    crate::harness::report::write_summary(out, &outcome, Some(cfg))?;
    Ok(outcome)
}

/// The stage-1 parameters and gallery for one fold, as used by the `calibrate` command.
pub fn gallery_for(
    params: &ModelParams<f64>,
    source: &dyn SlideSource,
    test_slide: &str,
) -> Result<(LosoFold, calibration::GalleryBank<f64>)> {
    let fold = LosoFold::holding_out(source, test_slide)?;
    let bank = build_gallery(params, &fold, source)?;
    Ok((fold, bank))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for name in ExperimentVariant::NAMES {
            assert_eq!(ExperimentVariant::parse(name).unwrap().name(), name);
        }
        assert!(ExperimentVariant::parse("nope").is_none());
    }

    #[test]
    fn dropping_topology_zeroes_its_weight_exactly() {
        let base = LossWeights::default();
        let w = ExperimentVariant::parse("reg_con").unwrap().objective.weights(&base);
        assert_eq!(w.lambda_spa, 0.0);
        assert_eq!((w.lambda_reg, w.lambda_con), (base.lambda_reg, base.lambda_con));
        let w = Objective::RegOnly.weights(&base);
        assert_eq!((w.lambda_spa, w.lambda_con), (0.0, 0.0));
    }

    #[test]
    fn variant_grid_covers_both_ablation_tables() {
        let vs: Vec<_> = ExperimentVariant::NAMES.iter().filter_map(|n| ExperimentVariant::parse(n)).collect();
        let mut calib: Vec<_> = vs.iter().filter(|v| v.objective == Objective::Full).map(|v| v.calibration).collect();
        calib.sort();
        assert_eq!(calib, Variant::ALL.to_vec());
        let mut objectives: Vec<_> = vs.iter().filter(|v| v.calibration == Variant::Full).map(|v| v.objective).collect();
        objectives.sort();
        assert_eq!(objectives, Objective::ALL.to_vec());
    }

    #[test]
    fn seeds_differ_by_stream_fold_and_replicate() {
        let a = derive_seed(0, 0, 0, Stream::Init);
        assert_ne!(a, derive_seed(0, 0, 0, Stream::Batches));
        assert_ne!(a, derive_seed(0, 0, 1, Stream::Init));
        assert_ne!(a, derive_seed(0, 1, 0, Stream::Init));
        assert_ne!(a, derive_seed(1, 0, 0, Stream::Init));
        assert_eq!(a, derive_seed(0, 0, 0, Stream::Init));
    }

    #[test]
    fn unknown_variant_is_a_config_error() {
        let cfg = ExperimentConfig {
            variants: vec!["full".into(), "bogus".into()],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        let cfg = ExperimentConfig {
            variants: vec![],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }
}
