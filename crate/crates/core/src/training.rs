//! Scoring-rule minimization and adversarial training of the generator, with
//! early stopping and learning-rate sweeps.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::WindowedDataset;
use crate::diff::{Array, Tape};
use crate::error::{Error, Result};
use crate::models::{DiscriminatorModel, GeneratorModel, LatentSampler, Mlp};
use crate::scoring::{ForecastEnsemble, ScoringRule};

pub const DEFAULT_LR_GRID: [f64; 5] = [1e-2, 3e-3, 1e-3, 3e-4, 1e-4];
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// A discriminator loss below this for a whole epoch is reported as saturation.
pub const SATURATION_LOSS: f64 = 1e-6;
/// Upper bound on `windows · members² · d` per validation chunk.
const VALIDATION_CHUNK_WORK: usize = 4_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ScoringRule(ScoringRule),
    Gan,
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::ScoringRule(rule) => rule.name(),
            Method::Gan => "GAN".to_string(),
        }
    }

    pub fn is_gan(&self) -> bool {
        matches!(self, Method::Gan)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// Ensemble members per window in each training step.
    pub members: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Discriminator learning rate (GAN only).
    pub lr_disc: f64,
    pub optimizer: OptimizerKind,
    pub patience: usize,
    pub seed: u64,
    /// Discriminator updates per generator update (GAN only).
    pub disc_steps: usize,
    /// Ensemble members used to score the validation split.
    pub val_members: usize,
    /// Scoring rule for validation; `None` uses the training rule, or the
    /// energy score for the GAN.
    pub val_rule: Option<ScoringRule>,
    pub verbose: bool,
}

impl TrainConfig {
    pub fn new(method: Method) -> Self {
        let gan = method.is_gan();
        Self {
            method,
            members: if gan { 1 } else { 10 },
            batch_size: 1000,
            epochs: 1000,
            lr: 1e-3,
            lr_disc: 1e-3,
            optimizer: OptimizerKind::Adam,
            patience: 20,
            seed: 0,
            disc_steps: 1,
            val_members: if gan { 100 } else { 10 },
            val_rule: None,
            verbose: false,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match &self.method {
            Method::ScoringRule(rule) => {
                rule.validate(Some(dim))?;
                let min = rule.min_members().max(2);
                if self.members < min {
                    return Err(Error::invalid(format!(
                        "scoring-rule training needs m >= {min} ensemble members, got {}",
                        self.members
                    )));
                }
            }
            Method::Gan => {
                if self.members != 1 {
                    return Err(Error::invalid("GAN training draws a single latent per window (m = 1)"));
                }
                if self.disc_steps == 0 {
                    return Err(Error::invalid("disc_steps must be >= 1"));
                }
                if !(self.lr_disc >= 0.0 && self.lr_disc.is_finite()) {
                    return Err(Error::invalid(format!("lr_disc must be finite and >= 0, got {}", self.lr_disc)));
                }
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        let val = self.validation_rule();
        val.validate(Some(dim))?;
        if self.val_members < val.min_members().max(2) {
            return Err(Error::invalid(format!(
                "validation needs at least {} members, got {}",
                val.min_members().max(2),
                self.val_members
            )));
        }
        Ok(())
    }

    pub fn validation_rule(&self) -> ScoringRule {
        match (&self.val_rule, &self.method) {
            (Some(rule), _) => rule.clone(),
            (None, Method::ScoringRule(rule)) => rule.clone(),
            (None, Method::Gan) => ScoringRule::energy(),
        }
    }
}

/// Per-run log: losses per epoch, the validation curve and the selected epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: String,
    pub lr: f64,
    pub lr_disc: Option<f64>,
    pub seed: u64,
    /// Mean batch loss per epoch; for the GAN, the generator loss.
    pub train_loss: Vec<f64>,
    /// Mean discriminator loss per epoch (GAN only).
    pub disc_loss: Vec<f64>,
    pub val_score: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val: f64,
    pub epochs_run: usize,
    pub warnings: Vec<String>,
    /// Not serialized so that run logs are reproducible byte for byte.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Optimizer state for one parameter list.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<Array>,
    second: Vec<Array>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, params: &[Array]) -> Self {
        let zeros = || params.iter().map(|p| Array::zeros(p.shape())).collect();
        Self { kind, lr, step: 0, first: zeros(), second: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One descent step on `params`. Non-finite gradients abort without changes.
pub fn optimizer_step(params: &mut [Array], grads: &[Array], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::invalid("parameter, gradient and optimizer lists differ in length"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape("optimizer step", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::Numerical(format!("non-finite gradient for parameter block {i}")));
        }
    }
    state.step += 1;
    let lr = state.lr;
    match state.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * d;
                }
            }
        }
        OptimizerKind::Adam => {
            let t = state.step as i32;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                let m = state.first[i].data_mut();
                let v = state.second[i].data_mut();
                for (j, (w, d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                    m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * d;
                    v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * d * d;
                    let mhat = m[j] / c1;
                    let vhat = v[j] / c2;
                    *w -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
    Ok(())
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random streams of one training run.
#[derive(Debug, Clone)]
pub struct RunRng {
    pub shuffle: ChaCha8Rng,
    pub latents: LatentSampler,
}

impl RunRng {
    pub fn new(seed: u64, latent_dim: usize) -> Self {
        Self {
            shuffle: ChaCha8Rng::seed_from_u64(derive_seed(seed, 1)),
            latents: LatentSampler::new(latent_dim, derive_seed(seed, 2)),
        }
    }
}

/// Shuffled index batches of one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn nan_abort(batch: usize, loss: f64, net: &Mlp) -> Error {
    Error::Numerical(format!(
        "loss {loss} at batch {batch}; parameter norm {:.6e}",
        net.param_norm()
    ))
}

fn collect_grads(grads: &crate::diff::Gradients, bound: &[crate::diff::Var<'_>]) -> Vec<Array> {
    bound.iter().map(|v| grads.get_or_zeros(*v)).collect()
}

/// One shuffled pass of scoring-rule minimization; returns the mean batch loss.
pub fn train_sr_epoch(
    gen: &mut GeneratorModel,
    data: &WindowedDataset,
    rule: &ScoringRule,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    rng: &mut RunRng,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InsufficientData("training split has no windows".into()));
    }
    let mut total = 0.0;
    let plan = epoch_batches(data.len(), cfg.batch_size, &mut rng.shuffle);
    for (b, idx) in plan.iter().enumerate() {
        let windows = data.gather_windows(idx);
        let targets = data.gather_targets(idx);
        let tape = Tape::new();
        let bound = gen.net().bind(&tape, true);
        let ens = gen.sample_on_tape(&bound, &windows, cfg.members, &mut rng.latents)?;
        let loss = rule.estimate(&ens, &targets)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(nan_abort(b, value, gen.net()));
        }
        let grads = collect_grads(&tape.backward(loss)?, &bound);
        drop(tape);
        optimizer_step(gen.net_mut().params_mut(), &grads, opt)?;
        total += value;
    }
    Ok(total / plan.len() as f64)
}

/// Losses of one adversarial epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanEpoch {
    /// Mean of `−[log D(real) + log(1 − D(fake))]`.
    pub disc_loss: f64,
    /// Mean of `log(1 − D(fake))`.
    pub gen_loss: f64,
}

/// One shuffled pass of conditional GAN training: per batch, `disc_steps`
/// discriminator ascents on `log D(real) + log(1 − D(fake))`, then one generator
/// descent on `log(1 − D(fake))`, all with a single latent per window.
#[allow(clippy::too_many_arguments)]
pub fn train_gan_epoch(
    gen: &mut GeneratorModel,
    disc: &mut DiscriminatorModel,
    data: &WindowedDataset,
    cfg: &TrainConfig,
    gen_opt: &mut OptimizerState,
    disc_opt: &mut OptimizerState,
    rng: &mut RunRng,
) -> Result<GanEpoch> {
    if data.is_empty() {
        return Err(Error::InsufficientData("training split has no windows".into()));
    }
    let (mut disc_total, mut gen_total) = (0.0, 0.0);
    let plan = epoch_batches(data.len(), cfg.batch_size, &mut rng.shuffle);
    for (b, idx) in plan.iter().enumerate() {
        let windows = data.gather_windows(idx);
        let targets = data.gather_targets(idx);
        let mut latents = gen.draw_latents(&windows, 1, &mut rng.latents)?;
        for step in 0..cfg.disc_steps {
            if step > 0 {
                latents = gen.draw_latents(&windows, 1, &mut rng.latents)?;
            }
            let fake = gen.net().forward(&gen.assemble_input(&windows, 1, &latents)?)?;
            let tape = Tape::new();
            let bound = disc.net().bind(&tape, true);
            let d_real = disc.forward_on_tape(&bound, &windows, tape.constant(targets.clone()))?;
            let d_fake = disc.forward_on_tape(&bound, &windows, tape.constant(fake))?;
            let objective = d_real.ln().add(d_fake.neg().offset(1.0).ln())?.mean();
            let loss = objective.neg();
            let value = loss.item();
            if !value.is_finite() {
                return Err(nan_abort(b, value, disc.net()));
            }
            let grads = collect_grads(&tape.backward(loss)?, &bound);
            drop(tape);
            optimizer_step(disc.net_mut().params_mut(), &grads, disc_opt)?;
            if step + 1 == cfg.disc_steps {
                disc_total += value;
            }
        }
        let tape = Tape::new();
        let gen_bound = gen.net().bind(&tape, true);
        let disc_bound = disc.net().bind(&tape, false);
        let fake = gen.ensemble_with_latents(&gen_bound, &windows, 1, &latents)?;
        let d_fake = disc.forward_on_tape(&disc_bound, &windows, fake.samples())?;
        let loss = d_fake.neg().offset(1.0).ln().mean();
        let value = loss.item();
        if !value.is_finite() {
            return Err(nan_abort(b, value, gen.net()));
        }
        let grads = collect_grads(&tape.backward(loss)?, &gen_bound);
        drop(tape);
        optimizer_step(gen.net_mut().params_mut(), &grads, gen_opt)?;
        gen_total += value;
    }
    let n = plan.len() as f64;
    Ok(GanEpoch { disc_loss: disc_total / n, gen_loss: gen_total / n })
}

/// Mean scoring-rule estimate over all windows of `data`, with latents drawn
/// from a fresh stream seeded by `seed`. No gradients are recorded.
pub fn validation_score(
    gen: &GeneratorModel,
    data: &WindowedDataset,
    rule: &ScoringRule,
    members: usize,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InsufficientData("validation split has no windows".into()));
    }
    let mut sampler = LatentSampler::new(gen.latent_dim(), seed);
    let chunk = (VALIDATION_CHUNK_WORK / (members * members * data.dim()).max(1)).clamp(1, data.len());
    let mut total = 0.0;
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(chunk) {
        let windows = data.gather_windows(idx);
        let targets = data.gather_targets(idx);
        let samples = gen.sample(&windows, members, &mut sampler)?;
        let tape = Tape::new();
        let ens = ForecastEnsemble::new(tape.constant(samples), members)?;
        total += rule.estimate(&ens, &targets)?.item() * idx.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Patience rule: only strict improvements reset the counter; the first best wins.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, stale: 0, epoch: 0 }
    }

    /// Records the next epoch's score; returns whether it is a new best.
    pub fn observe(&mut self, score: f64) -> bool {
        self.epoch += 1;
        if score < self.best {
            self.best = score;
            self.best_epoch = self.epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Trains until the validation score fails to improve for `patience` epochs
/// (or `epochs` is reached) and leaves the best-epoch parameters in the models.
///
/// `disc` is required for the GAN method and ignored otherwise.
pub fn fit(
    gen: &mut GeneratorModel,
    mut disc: Option<&mut DiscriminatorModel>,
    train: &WindowedDataset,
    val: &WindowedDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate(gen.dim())?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InsufficientData("training and validation splits need at least one window each".into()));
    }
    if train.dim() != gen.dim() || val.dim() != gen.dim() {
        return Err(Error::shape("dataset vs generator", &[train.dim(), val.dim()], &[gen.dim()]));
    }
    if cfg.method.is_gan() && disc.is_none() {
        return Err(Error::invalid("GAN training needs a discriminator"));
    }
    let start = Instant::now();
    let val_rule = cfg.validation_rule();
    let val_seed = derive_seed(cfg.seed, 3);
    let mut rng = RunRng::new(cfg.seed, gen.latent_dim());
    let mut gen_opt = OptimizerState::new(cfg.optimizer, cfg.lr, gen.net().params());
    let mut disc_opt = disc
        .as_deref()
        .map(|d| OptimizerState::new(cfg.optimizer, cfg.lr_disc, d.net().params()));
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_gen = gen.clone();
    let mut best_disc = disc.as_deref().cloned();
    let mut report = TrainReport {
        method: cfg.method.name(),
        lr: cfg.lr,
        lr_disc: cfg.method.is_gan().then_some(cfg.lr_disc),
        seed: cfg.seed,
        train_loss: Vec::new(),
        disc_loss: Vec::new(),
        val_score: Vec::new(),
        best_epoch: 0,
        best_val: f64::INFINITY,
        epochs_run: 0,
        warnings: Vec::new(),
        wall_time_secs: 0.0,
    };
    for epoch in 1..=cfg.epochs {
        match &cfg.method {
            Method::ScoringRule(rule) => {
                let loss = train_sr_epoch(gen, train, rule, cfg, &mut gen_opt, &mut rng)?;
                report.train_loss.push(loss);
            }
            Method::Gan => {
                let d = disc.as_deref_mut().expect("checked above");
                let out = train_gan_epoch(gen, d, train, cfg, &mut gen_opt, disc_opt.as_mut().unwrap(), &mut rng)?;
                if out.disc_loss < SATURATION_LOSS {
                    report.warnings.push(format!(
                        "epoch {epoch}: discriminator saturated (loss {:.3e})",
                        out.disc_loss
                    ));
                }
                report.train_loss.push(out.gen_loss);
                report.disc_loss.push(out.disc_loss);
            }
        }
        let score = validation_score(gen, val, &val_rule, cfg.val_members, val_seed)?;
        if !score.is_finite() {
            return Err(Error::Numerical(format!("validation score {score} at epoch {epoch}")));
        }
        report.val_score.push(score);
        report.epochs_run = epoch;
        if stopper.observe(score) {
            best_gen = gen.clone();
            best_disc = disc.as_deref().cloned();
        }
        if cfg.verbose {
            eprintln!(
                "[{} lr={:e}] epoch {epoch}: train {:.6} val {:.6}{}",
                report.method,
                cfg.lr,
                report.train_loss[epoch - 1],
                score,
                if stopper.best_epoch() == epoch { " *" } else { "" }
            );
        }
        if stopper.should_stop() {
            break;
        }
    }
    *gen = best_gen;
    if let (Some(d), Some(best)) = (disc, best_disc) {
        *d = best;
    }
    report.best_epoch = stopper.best_epoch();
    report.best_val = stopper.best();
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// One candidate of a sweep and how it ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub lr: f64,
    pub lr_disc: Option<f64>,
    pub seed: u64,
    pub best_val: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome<T> {
    pub best: usize,
    pub report: TrainReport,
    pub artifact: T,
    pub entries: Vec<SweepEntry>,
}

/// A learning-rate candidate: generator rate and, for the GAN, discriminator rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub lr: f64,
    pub lr_disc: Option<f64>,
    pub seed: u64,
}

/// Candidates for `rates` (and the full product with `disc_rates` when given).
/// The first candidate keeps `seed`; the others get derived seeds.
pub fn sweep_candidates(rates: &[f64], disc_rates: Option<&[f64]>, seed: u64) -> Vec<Candidate> {
    let pairs: Vec<(f64, Option<f64>)> = match disc_rates {
        Some(dr) => rates.iter().flat_map(|&g| dr.iter().map(move |&d| (g, Some(d)))).collect(),
        None => rates.iter().map(|&g| (g, None)).collect(),
    };
    pairs
        .into_iter()
        .enumerate()
        .map(|(i, (lr, lr_disc))| Candidate {
            lr,
            lr_disc,
            seed: if i == 0 { seed } else { derive_seed(seed, 100 + i as u64) },
        })
        .collect()
}

/// Runs `run` for every candidate on up to `jobs` threads and keeps the one
/// with the lowest best validation score (earliest candidate on ties).
pub fn lr_sweep<T, F>(candidates: &[Candidate], jobs: usize, run: F) -> Result<SweepOutcome<T>>
where
    T: Send,
    F: Fn(&Candidate) -> Result<(TrainReport, T)> + Sync,
{
    if candidates.is_empty() {
        return Err(Error::invalid("learning-rate sweep needs at least one candidate"));
    }
    let slots: Vec<Mutex<Option<Result<(TrainReport, T)>>>> = candidates.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = jobs.clamp(1, candidates.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= candidates.len() {
                    break;
                }
                let out = run(&candidates[i]);
                *slots[i].lock().unwrap() = Some(out);
            });
        }
    });
    let mut entries = Vec::with_capacity(candidates.len());
    let mut best: Option<(usize, TrainReport, T)> = None;
    for (i, slot) in slots.into_iter().enumerate() {
        let c = candidates[i];
        let result = slot.into_inner().unwrap().expect("every candidate ran");
        let mut entry = SweepEntry { lr: c.lr, lr_disc: c.lr_disc, seed: c.seed, best_val: None, error: None };
        match result {
            Ok((report, artifact)) if report.best_val.is_finite() => {
                entry.best_val = Some(report.best_val);
                let better = best.as_ref().is_none_or(|(_, r, _)| report.best_val < r.best_val);
                if better {
                    best = Some((i, report, artifact));
                }
            }
            Ok((report, _)) => entry.error = Some(format!("non-finite validation score {}", report.best_val)),
            Err(e) => entry.error = Some(e.to_string()),
        }
        entries.push(entry);
    }
    match best {
        Some((best, report, artifact)) => Ok(SweepOutcome { best, report, artifact, entries }),
        None => {
            let diag: Vec<String> = entries
                .iter()
                .map(|e| format!("lr={} lr_disc={:?}: {}", e.lr, e.lr_disc, e.error.as_deref().unwrap_or("?")))
                .collect();
            Err(Error::Numerical(format!("all sweep candidates failed: {}", diag.join("; "))))
        }
    }
}
