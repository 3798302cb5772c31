//! Simulate or load, split, window, train and evaluate: the steps shared by
//! every command.

use std::path::Path;

use serde::Serialize;

use scoregen::dataset::{build_windows, split_series, Normalizer, TimeSeries, WindowedDataset};
use scoregen::evaluation::{evaluate_model, Evaluation};
use scoregen::models::{Activation, DiscriminatorModel, GeneratorModel};
use scoregen::scoring::{cyclic_weight_matrix, tune_gaussian_bandwidth, ScoringRule, WeightMatrix, WeightedTerm, BANDWIDTH_SUBSAMPLE};
use scoregen::training::{derive_seed, fit, lr_sweep, sweep_candidates, Candidate, Method, SweepEntry, TrainConfig, TrainReport};

use crate::config::{MethodKey, RunConfig, VariogramWeights};
use crate::CliError;

/// Seed streams derived from a run or candidate seed.
const GEN_INIT_STREAM: u64 = 10;
const DISC_INIT_STREAM: u64 = 11;
const BANDWIDTH_STREAM: u64 = 12;
const EVAL_STREAM: u64 = 20;

/// Windowed, normalized splits and the statistics used to normalize them.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub normalizer: Normalizer,
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
}

impl PreparedData {
    pub fn dim(&self) -> usize {
        self.train.dim()
    }
}

/// Reads `data.file` when set, else runs the configured simulator.
pub fn load_series(cfg: &RunConfig) -> Result<TimeSeries, CliError> {
    match &cfg.data.file {
        Some(path) => TimeSeries::load(path).map_err(|e| match e {
            scoregen::Error::Io(io) => CliError::Config(format!("cannot read series {}: {io}", path.display())),
            other => other.into(),
        }),
        None => Ok(cfg.simulation()?.run(&cfg.data.preset)?),
    }
}

/// Chronological split, normalization fitted on the training segment, windows.
pub fn prepare(cfg: &RunConfig, series: &TimeSeries) -> Result<PreparedData, CliError> {
    prepare_with(cfg, series, None)
}

/// As [`prepare`], but with `normalizer` (e.g. a checkpoint's) when given.
pub fn prepare_with(cfg: &RunConfig, series: &TimeSeries, normalizer: Option<Normalizer>) -> Result<PreparedData, CliError> {
    let (k, l) = (cfg.data.k, cfg.data.l);
    let [train, val, test] = split_series(series, cfg.data.split, k + l)?;
    let normalizer = match normalizer {
        Some(n) => n,
        None if cfg.data.normalize => Normalizer::fit(&train)?,
        None => Normalizer::identity(series.dim()),
    };
    let window = |ts: &TimeSeries| -> Result<WindowedDataset, CliError> { Ok(build_windows(&normalizer.apply(ts)?, k, l)?) };
    Ok(PreparedData { train: window(&train)?, val: window(&val)?, test: window(&test)?, normalizer })
}

fn variogram_rule(cfg: &RunConfig, d: usize) -> Result<ScoringRule, CliError> {
    let weights = match cfg.train.variogram_weights {
        VariogramWeights::Cyclic => cyclic_weight_matrix(d)?,
        VariogramWeights::Ones => WeightMatrix::ones(d),
    };
    Ok(ScoringRule::Variogram { p: cfg.train.variogram_p, weights })
}

/// Scoring rule for `method`, or `None` for the GAN. An unset kernel
/// bandwidth is tuned on the normalized validation targets.
pub fn scoring_rule(cfg: &RunConfig, method: MethodKey, data: &PreparedData) -> Result<Option<ScoringRule>, CliError> {
    let d = data.dim();
    let kernel = || -> Result<ScoringRule, CliError> {
        let gamma = match cfg.train.kernel_gamma {
            Some(g) => g,
            None => tune_gaussian_bandwidth(data.val.targets(), BANDWIDTH_SUBSAMPLE, derive_seed(cfg.seed, BANDWIDTH_STREAM))?,
        };
        Ok(ScoringRule::kernel(gamma))
    };
    let energy = ScoringRule::Energy { beta: cfg.train.energy_beta };
    let [w1, w2] = cfg.train.term_weights;
    let pair = |a: ScoringRule, b: ScoringRule| ScoringRule::WeightedSum {
        terms: vec![WeightedTerm { weight: w1, rule: a }, WeightedTerm { weight: w2, rule: b }],
    };
    let rule = match method {
        MethodKey::Energy => energy,
        MethodKey::Kernel => kernel()?,
        MethodKey::Variogram => variogram_rule(cfg, d)?,
        MethodKey::EnergyVariogram => pair(energy, variogram_rule(cfg, d)?),
        MethodKey::KernelVariogram => pair(kernel()?, variogram_rule(cfg, d)?),
        MethodKey::Gan => return Ok(None),
    };
    rule.validate(Some(d))?;
    Ok(Some(rule))
}

/// Training settings for one method; the learning rates are set per candidate.
pub fn train_config(cfg: &RunConfig, rule: Option<ScoringRule>) -> TrainConfig {
    let t = &cfg.train;
    let gan = rule.is_none();
    let mut tc = TrainConfig::new(rule.map_or(Method::Gan, Method::ScoringRule));
    tc.members = if gan { 1 } else { t.members };
    tc.batch_size = t.batch_size;
    tc.epochs = t.epochs;
    tc.lr = t.lr;
    tc.lr_disc = t.lr_disc;
    tc.optimizer = t.optimizer;
    tc.patience = t.patience;
    tc.seed = cfg.seed;
    tc.disc_steps = t.disc_steps;
    tc.val_members = t.val_members.unwrap_or(if gan { 100 } else { t.members });
    tc.verbose = t.verbose;
    tc
}

/// Sweep candidates for `method`: the configured grids, or the single
/// configured rate pair when sweeping is off.
pub fn candidates(cfg: &RunConfig, method: MethodKey) -> Vec<Candidate> {
    let gan = method == MethodKey::Gan;
    if cfg.train.sweep {
        let disc = gan.then_some(cfg.train.lr_disc_grid.as_slice());
        sweep_candidates(&cfg.train.lr_grid, disc, cfg.seed)
    } else {
        let disc_rates = [cfg.train.lr_disc];
        sweep_candidates(&[cfg.train.lr], gan.then_some(&disc_rates[..]), cfg.seed)
    }
}

/// Selected model of a (possibly single-candidate) sweep.
#[derive(Debug, Clone)]
pub struct Trained {
    pub method: MethodKey,
    pub rule: Option<ScoringRule>,
    pub generator: GeneratorModel,
    pub discriminator: Option<DiscriminatorModel>,
    pub report: TrainReport,
    pub sweep: Vec<SweepEntry>,
}

/// Freshly initialized generator (and discriminator for the GAN) for a
/// candidate seed.
pub fn initial_models(
    cfg: &RunConfig,
    method: MethodKey,
    d: usize,
    seed: u64,
) -> scoregen::Result<(GeneratorModel, Option<DiscriminatorModel>)> {
    let act = Activation::LeakyRelu { slope: cfg.model.leaky_slope };
    let k = cfg.data.k;
    let gen = GeneratorModel::new(k, d, cfg.model.latent_for(d), &cfg.model.hidden_for(d), act, derive_seed(seed, GEN_INIT_STREAM))?;
    let disc = match method {
        MethodKey::Gan => Some(DiscriminatorModel::new(k, d, &cfg.model.disc_hidden_for(d), act, derive_seed(seed, DISC_INIT_STREAM))?),
        _ => None,
    };
    Ok((gen, disc))
}

/// Trains every candidate on up to `cfg.jobs` threads and keeps the best.
pub fn train_method(cfg: &RunConfig, method: MethodKey, data: &PreparedData) -> Result<Trained, CliError> {
    let d = data.dim();
    let rule = scoring_rule(cfg, method, data)?;
    let base = train_config(cfg, rule.clone());
    base.validate(d)?;
    let cands = candidates(cfg, method);
    let run = |c: &Candidate| -> scoregen::Result<(TrainReport, (GeneratorModel, Option<DiscriminatorModel>))> {
        let mut tc = base.clone();
        tc.lr = c.lr;
        tc.lr_disc = c.lr_disc.unwrap_or(tc.lr_disc);
        tc.seed = c.seed;
        let (mut gen, mut disc) = initial_models(cfg, method, d, c.seed)?;
        let report = fit(&mut gen, disc.as_mut(), &data.train, &data.val, &tc)?;
        Ok((report, (gen, disc)))
    };
    let out = lr_sweep(&cands, cfg.jobs, run)?;
    let (generator, discriminator) = out.artifact;
    Ok(Trained { method, rule, generator, discriminator, report: out.report, sweep: out.entries })
}

/// Evaluates on the test split with the configured ensemble size.
pub fn evaluate(cfg: &RunConfig, model: &dyn scoregen::models::Forecaster, label: &str, data: &PreparedData) -> Result<Evaluation, CliError> {
    Ok(evaluate_model(model, label, &data.test, &data.normalizer, cfg.eval.members, derive_seed(cfg.seed, EVAL_STREAM))?)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

/// Per-epoch curve: `epoch,train_loss,val_score[,disc_loss]`.
pub fn curve_csv(report: &TrainReport) -> String {
    let gan = !report.disc_loss.is_empty();
    let mut s = String::from(if gan { "epoch,train_loss,val_score,disc_loss\n" } else { "epoch,train_loss,val_score\n" });
    for (i, (t, v)) in report.train_loss.iter().zip(&report.val_score).enumerate() {
        s.push_str(&format!("{},{t:e},{v:e}", i + 1));
        if gan {
            s.push_str(&format!(",{:e}", report.disc_loss[i]));
        }
        s.push('\n');
    }
    s
}

/// Per-window forecast summary in physical units: verification, ensemble
/// mean, median and the central interval bounds for every component.
pub fn forecasts_csv(ev: &Evaluation) -> String {
    let d = ev.verifications.shape()[1];
    let n = ev.verifications.shape()[0];
    let mut s = String::from("case");
    for c in 0..d {
        for col in ["verification", "mean", "median", "lower", "upper"] {
            s.push_str(&format!(",{col}_{c}"));
        }
    }
    s.push('\n');
    let st = &ev.stats;
    for i in 0..n {
        s.push_str(&i.to_string());
        for c in 0..d {
            let j = i * d + c;
            for a in [&ev.verifications, &st.mean, &st.median, &st.lower, &st.upper] {
                s.push_str(&format!(",{:e}", a.data()[j]));
            }
        }
        s.push('\n');
    }
    s
}
