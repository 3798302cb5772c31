//! Declarative run configuration (TOML). Every field has a default; unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use scoregen::simulate::{Simulation, LORENZ63_PRESET, LORENZ96_PRESET};
use scoregen::training::{OptimizerKind, DEFAULT_LR_GRID};

use crate::CliError;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_ENV: &str = "SCOREGEN_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKey {
    Energy,
    Kernel,
    Variogram,
    EnergyVariogram,
    KernelVariogram,
    Gan,
}

impl MethodKey {
    pub const ALL: [MethodKey; 6] = [
        MethodKey::Energy,
        MethodKey::Kernel,
        MethodKey::Variogram,
        MethodKey::EnergyVariogram,
        MethodKey::KernelVariogram,
        MethodKey::Gan,
    ];

    /// Row label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            MethodKey::Energy => "Energy",
            MethodKey::Kernel => "Kernel",
            MethodKey::Variogram => "Variogram",
            MethodKey::EnergyVariogram => "Energy-Variogram",
            MethodKey::KernelVariogram => "Kernel-Variogram",
            MethodKey::Gan => "GAN",
        }
    }

    /// File-system and command-line name.
    pub fn key(self) -> &'static str {
        match self {
            MethodKey::Energy => "energy",
            MethodKey::Kernel => "kernel",
            MethodKey::Variogram => "variogram",
            MethodKey::EnergyVariogram => "energy_variogram",
            MethodKey::KernelVariogram => "kernel_variogram",
            MethodKey::Gan => "gan",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CliError> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        MethodKey::ALL
            .into_iter()
            .find(|m| m.key() == norm)
            .ok_or_else(|| CliError::Config(format!("unknown method `{s}`")))
    }

    pub fn uses_kernel(self) -> bool {
        matches!(self, MethodKey::Kernel | MethodKey::KernelVariogram)
    }

    pub fn uses_variogram(self) -> bool {
        matches!(self, MethodKey::Variogram | MethodKey::EnergyVariogram | MethodKey::KernelVariogram)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariogramWeights {
    /// `1 / cyclic distance` between component indices.
    Cyclic,
    /// All off-diagonal weights 1.
    Ones,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Simulator preset; ignored when `file` is set.
    pub preset: String,
    /// Series file to load instead of simulating.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    /// Recorded time units after burn-in; overrides the preset's length.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    pub split: [f64; 3],
    pub k: usize,
    pub l: usize,
    pub normalize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            preset: LORENZ63_PRESET.to_string(),
            file: None,
            duration: None,
            split: [0.6, 0.2, 0.2],
            k: 10,
            l: 1,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Generator hidden widths; defaults to five layers of 50 (one observed
    /// component) or 128 (several).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    /// Defaults to 1 for one observed component and 8 otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    /// Discriminator hidden widths; defaults to the generator's.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disc_hidden: Option<Vec<usize>>,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: None, latent_dim: None, disc_hidden: None, leaky_slope: 0.01 }
    }
}

impl ModelConfig {
    pub fn hidden_for(&self, d: usize) -> Vec<usize> {
        self.hidden.clone().unwrap_or_else(|| vec![if d == 1 { 50 } else { 128 }; 5])
    }

    pub fn latent_for(&self, d: usize) -> usize {
        self.latent_dim.unwrap_or(if d == 1 { 1 } else { 8 })
    }

    pub fn disc_hidden_for(&self, d: usize) -> Vec<usize> {
        self.disc_hidden.clone().unwrap_or_else(|| self.hidden_for(d))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub method: MethodKey,
    /// Ensemble size per training step (forced to 1 for the GAN).
    pub members: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_disc: f64,
    pub optimizer: OptimizerKind,
    pub patience: usize,
    pub disc_steps: usize,
    /// Validation ensemble size; defaults to `members` (100 for the GAN).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_members: Option<usize>,
    /// Sweep `lr_grid` (and `lr_disc_grid` for the GAN) instead of a single rate.
    pub sweep: bool,
    pub lr_grid: Vec<f64>,
    pub lr_disc_grid: Vec<f64>,
    pub energy_beta: f64,
    /// Kernel bandwidth; tuned by the median heuristic on the validation
    /// targets when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel_gamma: Option<f64>,
    pub variogram_p: f64,
    pub variogram_weights: VariogramWeights,
    /// Weights of the two terms of the combined rules.
    pub term_weights: [f64; 2],
    pub verbose: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            method: MethodKey::Energy,
            members: 10,
            batch_size: 1000,
            epochs: 1000,
            lr: 1e-3,
            lr_disc: 1e-3,
            optimizer: OptimizerKind::Adam,
            patience: 20,
            disc_steps: 1,
            val_members: None,
            sweep: false,
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            lr_disc_grid: DEFAULT_LR_GRID.to_vec(),
            energy_beta: 1.0,
            kernel_gamma: None,
            variogram_p: 1.0,
            variogram_weights: VariogramWeights::Cyclic,
            term_weights: [1.0, 1.0],
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub members: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { members: scoregen::evaluation::DEFAULT_EVAL_MEMBERS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads for sweeps.
    pub jobs: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("scoregen-out"),
            jobs: 1,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Defaults for a simulator preset with every derived value filled in.
    pub fn defaults_for(preset: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let d = match preset {
            LORENZ63_PRESET => 1,
            LORENZ96_PRESET => 8,
            _ => return Err(CliError::Config(format!("unknown preset `{preset}`"))),
        };
        cfg.data.preset = preset.to_string();
        cfg.model.hidden = Some(cfg.model.hidden_for(d));
        cfg.model.latent_dim = Some(cfg.model.latent_for(d));
        cfg.model.disc_hidden = Some(cfg.model.disc_hidden_for(d));
        Ok(cfg)
    }

    /// Output directory: `override_dir`, else the environment variable, else the config.
    pub fn resolve_output(&self, override_dir: Option<&Path>) -> PathBuf {
        if let Some(p) = override_dir {
            return p.to_path_buf();
        }
        match std::env::var_os(OUTPUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }

    pub fn simulation(&self) -> Result<Simulation, CliError> {
        let mut sim = Simulation::preset(&self.data.preset)
            .ok_or_else(|| CliError::Config(format!("unknown preset `{}`", self.data.preset)))?;
        if let Some(units) = self.data.duration {
            if !(units > 0.0 && units.is_finite()) {
                return Err(CliError::Config(format!("data.duration must be > 0, got {units}")));
            }
            let sched = sim.schedule_mut();
            sched.duration = sched.burn_in + units;
        }
        Ok(sim)
    }

    /// Checks everything that does not depend on the data dimension.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.data.file.is_none() {
            self.simulation()?.schedule().record_count().map_err(|e| CliError::Config(e.to_string()))?;
        }
        let s = self.data.split;
        if s.iter().any(|f| !(*f > 0.0)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("data.split must be three positive fractions summing to 1, got {s:?}"));
        }
        if self.data.k == 0 || self.data.l == 0 {
            return bad("data.k and data.l must be >= 1".into());
        }
        if self.jobs == 0 {
            return bad("jobs must be >= 1".into());
        }
        for hidden in [&self.model.hidden, &self.model.disc_hidden].into_iter().flatten() {
            if hidden.is_empty() || hidden.contains(&0) {
                return bad(format!("hidden widths must be a nonempty list of positive ints, got {hidden:?}"));
            }
        }
        if !(self.model.leaky_slope >= 0.0 && self.model.leaky_slope < 1.0) {
            return bad(format!("model.leaky_slope must lie in [0, 1), got {}", self.model.leaky_slope));
        }
        let t = &self.train;
        if t.sweep && (t.lr_grid.is_empty() || (t.method == MethodKey::Gan && t.lr_disc_grid.is_empty())) {
            return bad("sweep needs nonempty learning-rate grids".into());
        }
        for lr in t.lr_grid.iter().chain(&t.lr_disc_grid) {
            if !(*lr >= 0.0 && lr.is_finite()) {
                return bad(format!("learning rates must be finite and >= 0, got {lr}"));
            }
        }
        if t.term_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return bad(format!("train.term_weights must be positive, got {:?}", t.term_weights));
        }
        if let Some(g) = t.kernel_gamma {
            if !(g > 0.0 && g.is_finite()) {
                return bad(format!("train.kernel_gamma must be > 0, got {g}"));
            }
        }
        if self.eval.members < scoregen::evaluation::MIN_CALIBRATION_MEMBERS {
            return bad(format!(
                "eval.members must be at least {}, got {}",
                scoregen::evaluation::MIN_CALIBRATION_MEMBERS,
                self.eval.members
            ));
        }
        Ok(())
    }
}
