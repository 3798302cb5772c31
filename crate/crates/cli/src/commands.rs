//! The `simulate`, `train` and `evaluate` commands. Each validates its inputs
//! before creating the output directory.

use std::path::{Path, PathBuf};

use scoregen::dataset::TimeSeries;
use scoregen::evaluation::{Evaluation, EvaluationReport};
use scoregen::models::{Checkpoint, OracleForecaster, Role};

use crate::config::RunConfig;
use crate::pipeline::{self, PreparedData, Trained};
use crate::CliError;

pub const SERIES_FILE: &str = "series.txt";
pub const GENERATOR_FILE: &str = "generator.ckpt";
pub const DISCRIMINATOR_FILE: &str = "discriminator.ckpt";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const CURVE_FILE: &str = "val_curve.csv";
pub const SWEEP_FILE: &str = "sweep.json";
pub const EVAL_JSON_FILE: &str = "evaluation.json";
pub const EVAL_CSV_FILE: &str = "evaluation.csv";
pub const FORECASTS_FILE: &str = "forecasts.csv";
pub const CONFIG_FILE: &str = "config.toml";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))
}

/// Row count and per-component mean and standard deviation.
pub fn series_summary(ts: &TimeSeries) -> String {
    let (mean, std) = ts.moments();
    let mut s = format!("{} rows x {} components, dt {}\n", ts.len(), ts.dim(), ts.dt_record());
    for (c, (m, sd)) in mean.iter().zip(&std).enumerate() {
        s.push_str(&format!("  component {c}: mean {m:.6} std {sd:.6}\n"));
    }
    s
}

/// Simulates (or re-reads) the configured series and writes it to `out`.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<(PathBuf, TimeSeries), CliError> {
    cfg.validate()?;
    let ts = pipeline::load_series(cfg)?;
    create_dir(out)?;
    let path = out.join(SERIES_FILE);
    ts.save(&path)?;
    Ok((path, ts))
}

/// Writes the checkpoint(s), run log, validation curve and sweep table.
pub fn write_training(dir: &Path, cfg: &RunConfig, trained: &Trained, data: &PreparedData) -> Result<(), CliError> {
    create_dir(dir)?;
    Checkpoint::generator(&trained.generator, &data.normalizer).save(&dir.join(GENERATOR_FILE))?;
    if let Some(disc) = &trained.discriminator {
        Checkpoint::discriminator(disc, &data.normalizer).save(&dir.join(DISCRIMINATOR_FILE))?;
    }
    pipeline::write_json(&dir.join(TRAIN_REPORT_FILE), &trained.report)?;
    pipeline::write_text(&dir.join(CURVE_FILE), &pipeline::curve_csv(&trained.report))?;
    pipeline::write_json(&dir.join(SWEEP_FILE), &trained.sweep)?;
    pipeline::write_text(&dir.join(CONFIG_FILE), &cfg.to_toml())
}

/// Trains `cfg.train.method` (with a sweep when enabled) and writes the result.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<Trained, CliError> {
    cfg.validate()?;
    let series = pipeline::load_series(cfg)?;
    let data = pipeline::prepare(cfg, &series)?;
    let trained = pipeline::train_method(cfg, cfg.train.method, &data)?;
    write_training(out, cfg, &trained, &data)?;
    Ok(trained)
}

/// Writes the report as JSON, the table row as CSV and the per-case forecasts.
pub fn write_evaluation(dir: &Path, ev: &Evaluation) -> Result<(), CliError> {
    create_dir(dir)?;
    pipeline::write_json(&dir.join(EVAL_JSON_FILE), &ev.report)?;
    let csv = format!("{}\n{}\n", EvaluationReport::CSV_HEADER, ev.report.csv_row());
    pipeline::write_text(&dir.join(EVAL_CSV_FILE), &csv)?;
    pipeline::write_text(&dir.join(FORECASTS_FILE), &pipeline::forecasts_csv(ev))
}

/// What `evaluate` scores.
#[derive(Debug, Clone)]
pub enum Subject {
    Checkpoint(PathBuf),
    /// Forecaster whose members all equal the verification.
    Oracle,
}

/// Evaluates a generator checkpoint (or the oracle) on the test split.
pub fn evaluate(cfg: &RunConfig, subject: &Subject, out: &Path) -> Result<Evaluation, CliError> {
    cfg.validate()?;
    let ckpt = match subject {
        Subject::Checkpoint(path) => {
            let c = Checkpoint::load(path).map_err(|e| CliError::Config(format!("cannot load checkpoint {}: {e}", path.display())))?;
            if c.role != Role::Generator {
                return Err(CliError::Config(format!("{} is not a generator checkpoint", path.display())));
            }
            Some(c)
        }
        Subject::Oracle => None,
    };
    let series = pipeline::load_series(cfg)?;
    if let Some(c) = &ckpt {
        if (c.k, c.d) != (cfg.data.k, series.dim()) {
            return Err(CliError::Config(format!(
                "checkpoint expects windows of shape [{}, {}] but the data gives [{}, {}]",
                c.k,
                c.d,
                cfg.data.k,
                series.dim()
            )));
        }
    }
    let ev = match ckpt {
        Some(c) => {
            let label = cfg.train.method.label();
            let (gen, norm) = c.into_generator()?;
            let data = pipeline::prepare_with(cfg, &series, Some(norm))?;
            pipeline::evaluate(cfg, &gen, label, &data)?
        }
        None => {
            let data = pipeline::prepare(cfg, &series)?;
            pipeline::evaluate(cfg, &OracleForecaster { dim: data.dim() }, "Oracle", &data)?
        }
    };
    write_evaluation(out, &ev)?;
    Ok(ev)
}
