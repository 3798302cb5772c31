//! End-to-end reproduction of the Lorenz63 and Lorenz96 tables: simulate,
//! sweep-train every method, evaluate, and compare with the published
//! values and the acceptance tolerances.

use std::path::Path;

use serde::Serialize;

use scoregen::evaluation::EvaluationReport;
use scoregen::simulate::{LORENZ63_PRESET, LORENZ96_PRESET};

use crate::commands;
use crate::config::{MethodKey, RunConfig};
use crate::pipeline::{self, PreparedData};
use crate::CliError;

pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Table {
    Lorenz63,
    Lorenz96,
}

impl Table {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "lorenz63" => Ok(Table::Lorenz63),
            "lorenz96" => Ok(Table::Lorenz96),
            _ => Err(CliError::Config(format!("unknown table `{s}` (expected lorenz63 or lorenz96)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Table::Lorenz63 => "lorenz63",
            Table::Lorenz96 => "lorenz96",
        }
    }

    pub fn preset(self) -> &'static str {
        match self {
            Table::Lorenz63 => LORENZ63_PRESET,
            Table::Lorenz96 => LORENZ96_PRESET,
        }
    }

    /// Published rows in table order.
    pub fn published(self) -> &'static [PublishedRow] {
        match self {
            Table::Lorenz63 => &LORENZ63_ROWS,
            Table::Lorenz96 => &LORENZ96_ROWS,
        }
    }

    pub fn methods(self) -> Vec<MethodKey> {
        self.published().iter().map(|r| r.method).collect()
    }

    /// Acceptance bounds on individual metrics.
    pub fn bounds(self) -> Vec<Bound> {
        use Metric::*;
        let b = |method, metric, limit| Bound { method, metric, limit };
        match self {
            Table::Lorenz63 => vec![
                b(MethodKey::Energy, RSquared, 0.90),
                b(MethodKey::Energy, Nrmse, 0.06),
                b(MethodKey::Energy, Calibration, 0.15),
                b(MethodKey::Kernel, RSquared, 0.95),
            ],
            Table::Lorenz96 => vec![
                b(MethodKey::Energy, RSquared, 0.90),
                b(MethodKey::Energy, Calibration, 0.25),
                b(MethodKey::KernelVariogram, RSquared, 0.90),
                b(MethodKey::KernelVariogram, Calibration, 0.25),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PublishedRow {
    pub method: MethodKey,
    pub calibration_error: f64,
    pub nrmse: f64,
    pub r_squared: f64,
}

const fn row(method: MethodKey, calibration_error: f64, nrmse: f64, r_squared: f64) -> PublishedRow {
    PublishedRow { method, calibration_error, nrmse, r_squared }
}

pub const LORENZ63_ROWS: [PublishedRow; 3] = [
    row(MethodKey::Energy, 0.0370, 0.0293, 0.9692),
    row(MethodKey::Kernel, 0.1220, 0.0155, 0.9913),
    row(MethodKey::Gan, 0.4930, 0.0880, 0.7212),
];

pub const LORENZ96_ROWS: [PublishedRow; 5] = [
    row(MethodKey::Energy, 0.1091, 0.0175, 0.9925),
    row(MethodKey::Kernel, 0.1334, 0.0172, 0.9929),
    row(MethodKey::EnergyVariogram, 0.1427, 0.0174, 0.9927),
    row(MethodKey::KernelVariogram, 0.1291, 0.0149, 0.9946),
    row(MethodKey::Gan, 0.4872, 0.0873, 0.8151),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Calibration,
    Nrmse,
    RSquared,
}

impl Metric {
    fn of(self, r: &EvaluationReport) -> f64 {
        match self {
            Metric::Calibration => r.calibration_error,
            Metric::Nrmse => r.nrmse,
            Metric::RSquared => r.r_squared,
        }
    }

    /// Higher is better only for R².
    fn passes(self, value: f64, limit: f64) -> bool {
        match self {
            Metric::RSquared => value >= limit,
            _ => value <= limit,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Metric::Calibration => "cal_error",
            Metric::Nrmse => "nrmse",
            Metric::RSquared => "r2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bound {
    pub method: MethodKey,
    pub metric: Metric,
    pub limit: f64,
}

/// Outcome of one acceptance check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodResult {
    pub method: String,
    pub published: PublishedRow,
    pub obtained: Option<EvaluationReport>,
    pub selected_lr: Option<f64>,
    pub selected_lr_disc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReproduceReport {
    pub table: Table,
    pub config: String,
    pub rows: Vec<MethodResult>,
    pub checks: Vec<Check>,
    pub complete: bool,
}

impl ReproduceReport {
    pub fn passed(&self) -> bool {
        self.complete && self.checks.iter().all(|c| c.passed)
    }

    fn result(&self, method: MethodKey) -> Option<&EvaluationReport> {
        self.rows.iter().find(|r| r.published.method == method).and_then(|r| r.obtained.as_ref())
    }

    fn selected(&self, method: MethodKey) -> bool {
        self.rows.iter().any(|r| r.published.method == method)
    }

    /// Recomputes the checks from the rows obtained so far. Checks on methods
    /// outside the run are omitted; selected rows that did not produce a
    /// result fail every check that needs them.
    fn update_checks(&mut self) {
        let mut checks = Vec::new();
        for b in self.table.bounds().into_iter().filter(|b| self.selected(b.method)) {
            let name = format!("{} {} {} {}", b.method.label(), b.metric.symbol(), if b.metric == Metric::RSquared { ">=" } else { "<=" }, b.limit);
            let check = match self.result(b.method) {
                Some(r) => {
                    let v = b.metric.of(r);
                    Check { name, passed: b.metric.passes(v, b.limit), detail: format!("{v:.4}") }
                }
                None => Check { name, passed: false, detail: "not available".into() },
            };
            checks.push(check);
        }
        let gan = self.result(MethodKey::Gan).map(|r| r.calibration_error);
        let rivals = self.table.published().iter().filter(|p| p.method != MethodKey::Gan && self.selected(p.method));
        for p in rivals.filter(|_| self.selected(MethodKey::Gan)) {
            let name = format!("{} cal_error < GAN cal_error", p.method.label());
            let check = match (self.result(p.method), gan) {
                (Some(r), Some(g)) => Check {
                    name,
                    passed: r.calibration_error < g,
                    detail: format!("{:.4} vs {g:.4}", r.calibration_error),
                },
                _ => Check { name, passed: false, detail: "not available".into() },
            };
            checks.push(check);
        }
        self.checks = checks;
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,cal_error,nrmse,r2,published_cal_error,published_nrmse,published_r2,status\n");
        for r in &self.rows {
            let p = &r.published;
            let (obtained, status) = match (&r.obtained, &r.failure) {
                (Some(o), _) => (format!("{:.4},{:.4},{:.4}", o.calibration_error, o.nrmse, o.r_squared), "ok".to_string()),
                (None, Some(f)) => (",,".into(), format!("failed: {}", f.replace([',', '\n'], " "))),
                (None, None) => (",,".into(), "not run".into()),
            };
            s.push_str(&format!(
                "{},{obtained},{:.4},{:.4},{:.4},{status}\n",
                r.method, p.calibration_error, p.nrmse, p.r_squared
            ));
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("# Reproduction: {}\n\n", self.table.name());
        s.push_str("| Method | cal. error | NRMSE | R² | published cal. error | published NRMSE | published R² | lr | best epoch |\n");
        s.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let p = &r.published;
            let got = match (&r.obtained, &r.failure) {
                (Some(o), _) => format!("{:.4} | {:.4} | {:.4}", o.calibration_error, o.nrmse, o.r_squared),
                (None, Some(_)) => "FAILED | | ".into(),
                (None, None) => "not run | | ".into(),
            };
            let lr = match (r.selected_lr, r.selected_lr_disc) {
                (Some(g), Some(d)) => format!("{g:e} / {d:e}"),
                (Some(g), None) => format!("{g:e}"),
                _ => String::new(),
            };
            let epoch = r.best_epoch.map(|e| e.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "| {} | {got} | {:.4} | {:.4} | {:.4} | {lr} | {epoch} |\n",
                r.method, p.calibration_error, p.nrmse, p.r_squared
            ));
        }
        s.push_str("\n## Acceptance checks\n\n");
        for c in &self.checks {
            s.push_str(&format!("- {} {}: {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
        }
        let failures: Vec<&MethodResult> = self.rows.iter().filter(|r| r.failure.is_some()).collect();
        if !failures.is_empty() {
            s.push_str("\n## Failures\n\n");
            for r in failures {
                s.push_str(&format!("- {}: {}\n", r.method, r.failure.as_deref().unwrap_or_default()));
            }
        }
        s.push_str(&format!("\nOverall: {}\n", if self.passed() { "PASS" } else { "FAIL" }));
        s.push_str("\n## Configuration\n\n```toml\n");
        s.push_str(&self.config);
        s.push_str("```\n");
        s
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        pipeline::write_text(&dir.join(REPORT_MD), &self.to_markdown())?;
        pipeline::write_text(&dir.join(REPORT_CSV), &self.to_csv())?;
        pipeline::write_json(&dir.join(REPORT_JSON), self)
    }
}

/// Scale and scope overrides for a reproduction run.
#[derive(Debug, Clone, Default)]
pub struct ReproduceOptions {
    /// Recorded time units after burn-in.
    pub duration: Option<f64>,
    pub epochs: Option<usize>,
    pub no_sweep: bool,
    /// Subset of the table's methods (table order is kept).
    pub methods: Option<Vec<MethodKey>>,
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
    pub verbose: bool,
}

/// Run configuration for `table`: `base`, or the preset defaults with a
/// learning-rate sweep, plus the given overrides.
pub fn reproduce_config(table: Table, base: Option<RunConfig>, opts: &ReproduceOptions) -> Result<RunConfig, CliError> {
    let mut cfg = match base {
        Some(c) => c,
        None => RunConfig::defaults_for(table.preset())?,
    };
    if cfg.data.file.is_none() && cfg.data.preset != table.preset() {
        return Err(CliError::Config(format!(
            "the {} table needs preset `{}`, the configuration selects `{}`",
            table.name(),
            table.preset(),
            cfg.data.preset
        )));
    }
    // a table run always sweeps the learning-rate grid unless told not to
    cfg.train.sweep = !opts.no_sweep;
    if opts.duration.is_some() {
        cfg.data.duration = opts.duration;
    }
    if let Some(e) = opts.epochs {
        cfg.train.epochs = e;
    }
    if let Some(j) = opts.jobs {
        cfg.jobs = j;
    }
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    cfg.train.verbose |= opts.verbose;
    if let Some(ms) = &opts.methods {
        for m in ms {
            if !table.methods().contains(m) {
                return Err(CliError::Config(format!("method {} is not part of the {} table", m.key(), table.name())));
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the table and writes the report into `out` after every method, so an
/// interrupted or failing run still leaves a partial report. `progress` is
/// told about each finished method.
pub fn reproduce(
    table: Table,
    cfg: &RunConfig,
    methods: Option<&[MethodKey]>,
    out: &Path,
    mut progress: impl FnMut(&MethodResult),
) -> Result<ReproduceReport, CliError> {
    cfg.validate()?;
    let selected: Vec<MethodKey> = table.methods().into_iter().filter(|m| methods.is_none_or(|ms| ms.contains(m))).collect();
    let mut report = ReproduceReport {
        table,
        config: cfg.to_toml(),
        rows: table
            .published()
            .iter()
            .filter(|p| selected.contains(&p.method))
            .map(|p| MethodResult {
                method: p.method.label().to_string(),
                published: *p,
                obtained: None,
                selected_lr: None,
                selected_lr_disc: None,
                best_epoch: None,
                failure: None,
            })
            .collect(),
        checks: Vec::new(),
        complete: false,
    };
    let data = pipeline::load_series(cfg).and_then(|s| pipeline::prepare(cfg, &s));
    let data: PreparedData = match data {
        Ok(d) => d,
        Err(e) => {
            for r in &mut report.rows {
                r.failure = Some(format!("data preparation: {e}"));
            }
            report.update_checks();
            report.write(out)?;
            return Ok(report);
        }
    };
    for i in 0..report.rows.len() {
        let method = report.rows[i].published.method;
        let outcome = pipeline::train_method(cfg, method, &data).and_then(|trained| {
            let dir = out.join(method.key());
            commands::write_training(&dir, cfg, &trained, &data)?;
            let ev = pipeline::evaluate(cfg, &trained.generator, method.label(), &data)?;
            commands::write_evaluation(&dir, &ev)?;
            Ok((trained, ev))
        });
        let row = &mut report.rows[i];
        match outcome {
            Ok((trained, ev)) => {
                row.selected_lr = Some(trained.report.lr);
                row.selected_lr_disc = trained.report.lr_disc;
                row.best_epoch = Some(trained.report.best_epoch);
                row.obtained = Some(ev.report);
            }
            Err(e) => row.failure = Some(e.to_string()),
        }
        progress(&report.rows[i]);
        report.update_checks();
        report.write(out)?;
    }
    report.complete = report.rows.iter().all(|r| r.obtained.is_some());
    report.update_checks();
    report.write(out)?;
    Ok(report)
}
