use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use chrep::calibration::run_variant;
use chrep::cohort::{write_cohort, LosoFold, SlideSource, SlideTensors};
use chrep::encoders::{image_features, ModelParams};
use chrep::harness::{
    collect_cells, gallery_for, generate_synthetic, run_experiment, train_cell, write_summary, ExperimentConfig,
    ExperimentVariant, SynthConfig,
};
use chrep::metrics::{write_per_gene_csv, MetricsReport};
use chrep::numkernel::NamedTensors;
use chrep::objectives::write_trace;
use chrep::{Error, Result, Tensor};

#[derive(Parser, Debug)]
#[command(name = "chrep", version, about = "Histology-to-spatial-expression prediction with gallery calibration")]
struct Cli {
    /// Root seed; overrides the configuration file
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration (synthetic config for `gen`, experiment config otherwise)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort directory
    Gen,
    /// Train stage 1 for one held-out slide and write a checkpoint
    Train {
        /// Held-out slide id
        #[arg(long)]
        fold: String,
        /// Objective variant (full, reg_con, reg_topo, con_topo, reg_only)
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long, default_value_t = 0)]
        replicate: u64,
    },
    /// Build the gallery, train the correction net and predict the held-out slide
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fold: String,
        /// Calibration variant (full, estimate_only, correction_only, no_constraint)
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long, default_value_t = 0)]
        replicate: u64,
    },
    /// Score a predictions file against the held-out slide
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        fold: String,
    },
    /// Run the whole leave-one-slide-out grid
    Run,
    /// Rebuild summary tables from an existing output tree
    Report,
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("--out is required".into()))
}

fn experiment_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_json_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.root_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::InvalidInput(format!("cannot create {}: {e}", dir.display())))
}

fn fold_index(source: &dyn SlideSource, fold: &str) -> Result<usize> {
    source
        .slide_ids()
        .iter()
        .position(|s| s == fold)
        .ok_or_else(|| Error::InvalidConfig(format!("fold '{fold}' is not a slide of the cohort")))
}

fn parse_variant(name: &str) -> Result<ExperimentVariant> {
    ExperimentVariant::parse(name).ok_or_else(|| {
        Error::InvalidConfig(format!(
            "unknown variant '{name}', expected one of {}",
            ExperimentVariant::NAMES.join(", ")
        ))
    })
}

fn write_predictions(path: &Path, spot_ids: &[String], genes: &[String], pred: &Tensor) -> Result<()> {
    let io = |e: csv::Error| Error::InvalidInput(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let header: Vec<&str> = std::iter::once("spot_id").chain(genes.iter().map(String::as_str)).collect();
    w.write_record(&header).map_err(io)?;
    for (i, id) in spot_ids.iter().enumerate() {
        let row: Vec<String> = std::iter::once(id.clone())
            .chain(pred.row(i).iter().map(|v| v.to_string()))
            .collect();
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

/// Reads predictions and returns them in `spot_ids` order.
fn read_predictions(path: &Path, spot_ids: &[String], genes: &[String]) -> Result<Tensor> {
    let bad = |msg: String| Error::InvalidInput(format!("{}: {msg}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    let cols: Vec<&str> = header.iter().skip(1).collect();
    if cols != genes.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(bad("gene columns do not match the cohort panel".into()));
    }
    let mut rows = std::collections::BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|e| bad(format!("'{v}': {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.insert(rec[0].to_string(), vals);
    }
    let ordered = spot_ids
        .iter()
        .map(|id| rows.remove(id).ok_or_else(|| bad(format!("no prediction for spot '{id}'"))))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&ordered)
}

fn gen(cli: &Cli) -> Result<()> {
    let out = out_dir(cli)?;
    let mut cfg: SynthConfig = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let cohort = generate_synthetic(&cfg)?;
    write_cohort(&cohort, out)?;
    println!("wrote {} slides, {} spots to {}", cohort.slides.len(), cohort.n_spots(), out.display());
    Ok(())
}

fn train(cli: &Cli, fold: &str, variant: &str, replicate: u64) -> Result<()> {
    let cfg = experiment_config(cli)?;
    let out = out_dir(cli)?;
    let objective = parse_variant(variant)?.objective;
    let source = cfg.open_source()?;
    let idx = fold_index(source.as_ref(), fold)?;
    let lfold = LosoFold::holding_out(source.as_ref(), fold)?;
    let (params, trace) = train_cell(&cfg, source.as_ref(), &lfold, idx, replicate, objective)?;
    create_dir(out)?;
    params.to_named().write(&out.join("params.chrt"))?;
    write_trace(&out.join("trace.csv"), &trace)?;
    println!("checkpoint {} (checksum {:016x})", out.join("params.chrt").display(), params.checksum());
    Ok(())
}

fn calibrate(cli: &Cli, checkpoint: &Path, fold: &str, variant: &str, replicate: u64) -> Result<()> {
    let cfg = experiment_config(cli)?;
    let out = out_dir(cli)?;
    let calibration = parse_variant(variant)?.calibration;
    let params: ModelParams<f64> = ModelParams::from_named(&NamedTensors::read(checkpoint)?)?;
    let source = cfg.open_source()?;
    let source = source.as_ref();
    let idx = fold_index(source, fold)?;
    let (_, _, calib) = chrep::harness::cell_configs(&cfg, params.config, replicate, idx);
    let (lfold, bank) = gallery_for(&params, source, fold)?;
    create_dir(out)?;
    bank.export(out, fold)?;
    let test = SlideTensors::load(source, fold, &lfold.standardizer)?;
    let z_test = image_features(&params, &test.feats)?;
    let outcome = run_variant(&params, &bank, &z_test, &cfg.loss, &calib, calibration)?;
    if let Some(net) = &outcome.net {
        net.to_named().write(&out.join("correction.chrt"))?;
    }
    write_predictions(&out.join("predictions.csv"), &test.spot_ids, &source.hvg_names(), &outcome.pred)?;
    println!(
        "{}: {} held-out spots, mean squared correction {:.6}",
        calibration.name(),
        test.len(),
        outcome.mean_delta_sq
    );
    Ok(())
}

fn eval(cli: &Cli, predictions: &Path, fold: &str) -> Result<()> {
    let cfg = experiment_config(cli)?;
    let out = out_dir(cli)?;
    let source = cfg.open_source()?;
    let source = source.as_ref();
    fold_index(source, fold)?;
    let lfold = LosoFold::holding_out(source, fold)?;
    let test = SlideTensors::load(source, fold, &lfold.standardizer)?;
    let genes = source.hvg_names();
    let pred = read_predictions(predictions, &test.spot_ids, &genes)?;
    let report = MetricsReport::evaluate(fold, &genes, &test.expr_std, &test.expr_log, &pred, &cfg.heg_ks)?;
    create_dir(out)?;
    report.write_json(&out.join("metrics.json"))?;
    write_per_gene_csv(&out.join("per_gene_pcc.csv"), fold, &report)?;
    match report.pcc_acg {
        Some(p) => println!("{fold}: PCC(ACG) {p:.4}, MSE {:.4}, MAE {:.4}", report.mse, report.mae),
        None => println!("{fold}: PCC(ACG) undefined, MSE {:.4}, MAE {:.4}", report.mse, report.mae),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = experiment_config(cli)?;
    let out = out_dir(cli)?;
    let outcome = run_experiment(&cfg, out)?;
    println!(
        "{} cells written to {}, {} failed",
        outcome.cells.len(),
        out.display(),
        outcome.errors.len()
    );
    if let Some(e) = outcome.errors.first() {
        let err = format!("{}/{}/{}: {}", e.variant, e.fold_id, e.seed, e.message);
        return Err(if outcome.errors.iter().any(|e| e.numeric) {
            Error::Numeric { op: err }
        } else {
            Error::InvalidInput(err)
        });
    }
    Ok(())
}

fn report(cli: &Cli) -> Result<()> {
    let out = out_dir(cli)?;
    if !out.is_dir() {
        return Err(Error::InvalidInput(format!("{} is not a directory", out.display())));
    }
    let outcome = collect_cells(out)?;
    let cfg_path = out.join("config.json");
    let cfg = cfg_path
        .is_file()
        .then(|| ExperimentConfig::from_json_file(&cfg_path))
        .transpose()?;
    write_summary(out, &outcome, cfg.as_ref())?;
    println!("summarized {} cells in {}", outcome.cells.len(), out.join("summary.md").display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Gen => gen(&cli),
        Command::Train {
            fold,
            variant,
            replicate,
        } => train(&cli, fold, variant, *replicate),
        Command::Calibrate {
            checkpoint,
            fold,
            variant,
            replicate,
        } => calibrate(&cli, checkpoint, fold, variant, *replicate),
        Command::Eval { predictions, fold } => eval(&cli, predictions, fold),
        Command::Run => run(&cli),
        Command::Report => report(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
