//! Fully connected generator and discriminator networks, latent sampling and
//! the text checkpoint format.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{fmt_f64, Normalizer, WindowedDataset};
use crate::diff::{array::gemm, Array, Tape, Var};
use crate::error::{Error, Result};
use crate::scoring::ForecastEnsemble;

pub const DISCRIMINATOR_EPS: f64 = 1e-7;
pub const DEFAULT_HIDDEN_LAYERS: usize = 5;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu { slope: DEFAULT_LEAKY_SLOPE }
    }
}

impl Activation {
    fn on_tape<'t>(&self, x: Var<'t>) -> Var<'t> {
        match *self {
            Activation::LeakyRelu { slope } => x.leaky_relu(slope),
        }
    }

    fn apply(&self, x: &mut [f64]) {
        match *self {
            Activation::LeakyRelu { slope } => {
                for v in x {
                    if !(*v > 0.0) {
                        *v *= slope;
                    }
                }
            }
        }
    }

    fn describe(&self) -> String {
        match *self {
            Activation::LeakyRelu { slope } => format!("leaky_relu {}", fmt_f64(slope)),
        }
    }

    fn parse(tokens: &[&str], line: usize) -> Result<Self> {
        match tokens {
            ["leaky_relu", slope] => Ok(Activation::LeakyRelu { slope: parse_num(slope, line)? }),
            _ => Err(Error::Parse { line, msg: format!("unknown activation {tokens:?}") }),
        }
    }
}

/// Stack of affine layers with an activation after every layer but the last.
///
/// Parameters are stored as `[W_0, b_0, W_1, b_1, ...]` with `W_i` of shape
/// `[widths[i], widths[i + 1]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    params: Vec<Array>,
}

impl Mlp {
    /// Fan-in scaled uniform weights, `U(±sqrt(6 / fan_in))`, and zero biases.
    pub fn new(widths: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut mlp = Self::zeros(widths, activation)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in 0..mlp.layers() {
            let bound = (6.0 / widths[layer] as f64).sqrt();
            for w in mlp.params[2 * layer].data_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(mlp)
    }

    pub fn zeros(widths: &[usize], activation: Activation) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::invalid(format!(
                "network needs an input, at least one hidden layer and an output, got widths {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::invalid(format!("layer widths must be positive, got {widths:?}")));
        }
        let params = widths
            .windows(2)
            .flat_map(|w| [Array::zeros(&[w[0], w[1]]), Array::zeros(&[w[1]])])
            .collect();
        Ok(Self { widths: widths.to_vec(), activation, params })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// `Σ (w_in + 1) · w_out` over layers.
    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn params(&self) -> &[Array] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array] {
        &mut self.params
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut at = 0;
        for p in &mut self.params {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn param_norm(&self) -> f64 {
        self.params.iter().map(|p| p.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    /// Records the parameters on `tape`, as trainable leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| if trainable { tape.param(p.clone()) } else { tape.constant(p.clone()) })
            .collect()
    }

    /// Differentiable forward pass of `x: [n, widths[0]]` using bound parameters.
    pub fn forward_on_tape<'t>(&self, bound: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        if bound.len() != self.params.len() {
            return Err(Error::invalid("bound parameter list does not match the network"));
        }
        let mut h = x;
        for layer in 0..self.layers() {
            h = h.matmul(bound[2 * layer])?.add(bound[2 * layer + 1])?;
            if layer + 1 < self.layers() {
                h = self.activation.on_tape(h);
            }
        }
        Ok(h)
    }

    /// Forward pass without recording, for inference.
    pub fn forward(&self, x: &Array) -> Result<Array> {
        let (n, w) = x.dims2()?;
        if w != self.input_width() {
            return Err(Error::shape("network input", &[n, self.input_width()], x.shape()));
        }
        let mut h = x.data().to_vec();
        for layer in 0..self.layers() {
            let (wi, wo) = (self.widths[layer], self.widths[layer + 1]);
            let mut out = vec![0.0; n * wo];
            gemm(n, wi, wo, &h, false, self.params[2 * layer].data(), false, &mut out, 0.0);
            let bias = self.params[2 * layer + 1].data();
            for row in out.chunks_exact_mut(wo) {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += b;
                }
            }
            if layer + 1 < self.layers() {
                self.activation.apply(&mut out);
            }
            h = out;
        }
        Array::matrix(n, self.output_width(), h)
    }
}

/// Standard normal latent draws from a seeded stream.
#[derive(Debug, Clone)]
pub struct LatentSampler {
    latent_dim: usize,
    rng: ChaCha8Rng,
}

impl LatentSampler {
    pub fn new(latent_dim: usize, seed: u64) -> Self {
        Self { latent_dim, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// `count` latent vectors as a `[count, latent_dim]` array.
    pub fn draw(&mut self, count: usize) -> Array {
        let data = (0..count * self.latent_dim).map(|_| self.rng.sample(StandardNormal)).collect();
        Array::new(vec![count, self.latent_dim], data).expect("consistent latent shape")
    }
}

/// Conditional generator: maps a flattened `k × d` window and a latent vector
/// to a `d`-dimensional forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    net: Mlp,
    latent_dim: usize,
    k: usize,
    d: usize,
}

impl GeneratorModel {
    pub fn new(k: usize, d: usize, latent_dim: usize, hidden: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let widths = io_widths(k * d + latent_dim, hidden, d)?;
        Ok(Self { net: Mlp::new(&widths, activation, seed)?, latent_dim, k, d })
    }

    pub fn from_net(net: Mlp, k: usize, d: usize, latent_dim: usize) -> Result<Self> {
        if net.input_width() != k * d + latent_dim || net.output_width() != d {
            return Err(Error::invalid(format!(
                "generator widths {:?} do not fit k={k}, d={d}, latent_dim={latent_dim}",
                net.widths()
            )));
        }
        Ok(Self { net, latent_dim, k, d })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn window_shape(&self) -> (usize, usize) {
        (self.k, self.d)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Builds the `[n * m, k·d + latent_dim]` input, each window repeated `m`
    /// times and paired with consecutive latent rows.
    pub fn assemble_input(&self, windows: &Array, m: usize, latents: &Array) -> Result<Array> {
        let kd = self.k * self.d;
        let (n, w) = windows.dims2()?;
        if w != kd {
            return Err(Error::shape("generator window", &[n, kd], windows.shape()));
        }
        if latents.shape() != [n * m, self.latent_dim] {
            return Err(Error::shape("generator latents", &[n * m, self.latent_dim], latents.shape()));
        }
        let width = kd + self.latent_dim;
        let mut data = Vec::with_capacity(n * m * width);
        for i in 0..n {
            let win = windows.row(i);
            for j in 0..m {
                data.extend_from_slice(win);
                data.extend_from_slice(latents.row(i * m + j));
            }
        }
        Array::matrix(n * m, width, data)
    }

    /// Single differentiable forward pass for one window and one latent vector.
    pub fn forward_one<'t>(&self, bound: &[Var<'t>], window: &Array, z: &Array) -> Result<Var<'t>> {
        let tape = bound
            .first()
            .ok_or_else(|| Error::invalid("no bound parameters"))?
            .tape();
        let windows = window.clone().reshape(vec![1, self.k * self.d])?;
        let z = z.clone().reshape(vec![1, self.latent_dim])?;
        let input = self.assemble_input(&windows, 1, &z)?;
        let out = self.net.forward_on_tape(bound, tape.constant(input))?;
        out.reshape(&[self.d])
    }

    /// Differentiable ensemble for `windows: [n, k·d]`, `m` fresh latents per window.
    pub fn sample_on_tape<'t>(
        &self,
        bound: &[Var<'t>],
        windows: &Array,
        m: usize,
        sampler: &mut LatentSampler,
    ) -> Result<ForecastEnsemble<'t>> {
        let latents = self.draw_latents(windows, m, sampler)?;
        self.ensemble_with_latents(bound, windows, m, &latents)
    }

    pub fn ensemble_with_latents<'t>(
        &self,
        bound: &[Var<'t>],
        windows: &Array,
        m: usize,
        latents: &Array,
    ) -> Result<ForecastEnsemble<'t>> {
        let tape = bound
            .first()
            .ok_or_else(|| Error::invalid("no bound parameters"))?
            .tape();
        let input = self.assemble_input(windows, m, latents)?;
        let out = self.net.forward_on_tape(bound, tape.constant(input))?;
        ForecastEnsemble::new(out, m)
    }

    /// Ensemble `[n * m, d]` without recording gradients.
    pub fn sample(&self, windows: &Array, m: usize, sampler: &mut LatentSampler) -> Result<Array> {
        let latents = self.draw_latents(windows, m, sampler)?;
        self.net.forward(&self.assemble_input(windows, m, &latents)?)
    }

    pub fn draw_latents(&self, windows: &Array, m: usize, sampler: &mut LatentSampler) -> Result<Array> {
        if m < 1 {
            return Err(Error::invalid("ensemble size must be at least 1"));
        }
        if sampler.latent_dim() != self.latent_dim {
            return Err(Error::invalid(format!(
                "sampler draws {}-dimensional latents, generator expects {}",
                sampler.latent_dim(),
                self.latent_dim
            )));
        }
        let (n, _) = windows.dims2()?;
        Ok(sampler.draw(n * m))
    }
}

/// Binary critic on `(window, candidate)` pairs with output in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorModel {
    net: Mlp,
    k: usize,
    d: usize,
}

impl DiscriminatorModel {
    pub fn new(k: usize, d: usize, hidden: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let widths = io_widths(k * d + d, hidden, 1)?;
        Ok(Self { net: Mlp::new(&widths, activation, seed)?, k, d })
    }

    pub fn from_net(net: Mlp, k: usize, d: usize) -> Result<Self> {
        if net.input_width() != k * d + d || net.output_width() != 1 {
            return Err(Error::invalid(format!(
                "discriminator widths {:?} do not fit k={k}, d={d}",
                net.widths()
            )));
        }
        Ok(Self { net, k, d })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    /// `D(window, candidate)` per row as an `[n]` node, clamped to
    /// `[1e-7, 1 - 1e-7]`. `candidates` may be a node so gradients reach the
    /// generator.
    pub fn forward_on_tape<'t>(&self, bound: &[Var<'t>], windows: &Array, candidates: Var<'t>) -> Result<Var<'t>> {
        let kd = self.k * self.d;
        let (n, w) = windows.dims2()?;
        if w != kd {
            return Err(Error::shape("discriminator window", &[n, kd], windows.shape()));
        }
        if candidates.shape() != [n, self.d] {
            return Err(Error::shape("discriminator candidate", &[n, self.d], &candidates.shape()));
        }
        let tape = candidates.tape();
        let input = Var::concat(&[tape.constant(windows.clone()), candidates], 1)?;
        let logits = self.net.forward_on_tape(bound, input)?;
        Ok(logits
            .sigmoid()
            .clamp(DISCRIMINATOR_EPS, 1.0 - DISCRIMINATOR_EPS)
            .reshape(&[n])?)
    }

    /// Non-recording evaluation for a single pair.
    pub fn forward(&self, window: &[f64], candidate: &[f64]) -> Result<f64> {
        if window.len() != self.k * self.d || candidate.len() != self.d {
            return Err(Error::shape(
                "discriminator input",
                &[self.k * self.d, self.d],
                &[window.len(), candidate.len()],
            ));
        }
        let mut row = window.to_vec();
        row.extend_from_slice(candidate);
        let logit = self.net.forward(&Array::matrix(1, row.len(), row)?)?.data()[0];
        Ok(logistic(logit).clamp(DISCRIMINATOR_EPS, 1.0 - DISCRIMINATOR_EPS))
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn io_widths(input: usize, hidden: &[usize], output: usize) -> Result<Vec<usize>> {
    if hidden.is_empty() {
        return Err(Error::invalid("at least one hidden layer is required"));
    }
    let mut widths = vec![input];
    widths.extend_from_slice(hidden);
    widths.push(output);
    Ok(widths)
}

/// Something that can produce forecast ensembles for windows of a dataset.
pub trait Forecaster {
    fn dim(&self) -> usize;

    /// `[idx.len() * m, d]` samples in the dataset's units, grouped by window.
    fn forecast(&self, data: &WindowedDataset, idx: &[usize], m: usize, sampler: &mut LatentSampler) -> Result<Array>;

    fn latent_dim(&self) -> usize;
}

impl Forecaster for GeneratorModel {
    fn dim(&self) -> usize {
        self.d
    }

    fn forecast(&self, data: &WindowedDataset, idx: &[usize], m: usize, sampler: &mut LatentSampler) -> Result<Array> {
        self.sample(&data.gather_windows(idx), m, sampler)
    }

    fn latent_dim(&self) -> usize {
        self.latent_dim
    }
}

/// Forecaster that returns the verification itself for every member.
#[derive(Debug, Clone, Copy)]
pub struct OracleForecaster {
    pub dim: usize,
}

impl Forecaster for OracleForecaster {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forecast(&self, data: &WindowedDataset, idx: &[usize], m: usize, _: &mut LatentSampler) -> Result<Array> {
        if m < 1 {
            return Err(Error::invalid("ensemble size must be at least 1"));
        }
        let targets = data.gather_targets(idx);
        let mut out = Vec::with_capacity(idx.len() * m * self.dim);
        for i in 0..idx.len() {
            for _ in 0..m {
                out.extend_from_slice(targets.row(i));
            }
        }
        Array::matrix(idx.len() * m, self.dim, out)
    }

    fn latent_dim(&self) -> usize {
        0
    }
}

/// A network with its data geometry and the normalization used in training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub role: Role,
    pub net: Mlp,
    pub k: usize,
    pub d: usize,
    pub latent_dim: usize,
    pub normalizer: Normalizer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Generator,
    Discriminator,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Generator => "generator",
            Role::Discriminator => "discriminator",
        }
    }
}

const CHECKPOINT_MAGIC: &str = "scoregen-checkpoint 1";

impl Checkpoint {
    pub fn generator(gen: &GeneratorModel, normalizer: &Normalizer) -> Self {
        Self {
            role: Role::Generator,
            net: gen.net.clone(),
            k: gen.k,
            d: gen.d,
            latent_dim: gen.latent_dim,
            normalizer: normalizer.clone(),
        }
    }

    pub fn discriminator(disc: &DiscriminatorModel, normalizer: &Normalizer) -> Self {
        Self {
            role: Role::Discriminator,
            net: disc.net.clone(),
            k: disc.k,
            d: disc.d,
            latent_dim: 0,
            normalizer: normalizer.clone(),
        }
    }

    pub fn into_generator(self) -> Result<(GeneratorModel, Normalizer)> {
        if self.role != Role::Generator {
            return Err(Error::invalid("checkpoint does not hold a generator"));
        }
        Ok((GeneratorModel::from_net(self.net, self.k, self.d, self.latent_dim)?, self.normalizer))
    }

    pub fn into_discriminator(self) -> Result<(DiscriminatorModel, Normalizer)> {
        if self.role != Role::Discriminator {
            return Err(Error::invalid("checkpoint does not hold a discriminator"));
        }
        Ok((DiscriminatorModel::from_net(self.net, self.k, self.d)?, self.normalizer))
    }

    /// Header lines followed by one parameter per line with 17 significant digits.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let join = |v: &[f64]| v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(" ");
        let widths: Vec<String> = self.net.widths().iter().map(|w| w.to_string()).collect();
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(w, "role {}", self.role.as_str())?;
        writeln!(w, "widths {}", widths.join(" "))?;
        writeln!(w, "latent_dim {}", self.latent_dim)?;
        writeln!(w, "window {} {}", self.k, self.d)?;
        writeln!(w, "activation {}", self.net.activation().describe())?;
        writeln!(w, "norm_mean {}", join(&self.normalizer.mean))?;
        writeln!(w, "norm_std {}", join(&self.normalizer.std))?;
        writeln!(w, "params {}", self.net.param_count())?;
        for v in self.net.flat_params() {
            writeln!(w, "{}", fmt_f64(v))?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |key: &str| -> Result<(usize, Vec<String>)> {
            let (no, line) = lines
                .next()
                .ok_or_else(|| Error::Parse { line: 0, msg: format!("missing `{key}` line") })?;
            let line = line?;
            let mut tokens = line.split_whitespace().map(str::to_string);
            match tokens.next() {
                Some(t) if t == key => Ok((no, tokens.collect())),
                _ => Err(Error::Parse { line: no, msg: format!("expected `{key}`") }),
            }
        };
        let (no, magic) = next("scoregen-checkpoint")?;
        if magic != ["1"] {
            return Err(Error::Parse { line: no, msg: "unsupported checkpoint version".into() });
        }
        let (no, role) = next("role")?;
        let role = match role.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
            ["generator"] => Role::Generator,
            ["discriminator"] => Role::Discriminator,
            _ => return Err(Error::Parse { line: no, msg: format!("unknown role {role:?}") }),
        };
        let (no, widths) = next("widths")?;
        let widths: Vec<usize> = widths.iter().map(|t| parse_num(t, no)).collect::<Result<_>>()?;
        let (no, latent) = next("latent_dim")?;
        let latent_dim = parse_single(&latent, no)?;
        let (no, window) = next("window")?;
        let [k, d]: [usize; 2] = window
            .iter()
            .map(|t| parse_num(t, no))
            .collect::<Result<Vec<usize>>>()?
            .try_into()
            .map_err(|_| Error::Parse { line: no, msg: "window needs k and d".into() })?;
        let (no, act) = next("activation")?;
        let activation = Activation::parse(&act.iter().map(String::as_str).collect::<Vec<_>>(), no)?;
        let (no, mean) = next("norm_mean")?;
        let mean: Vec<f64> = mean.iter().map(|t| parse_num(t, no)).collect::<Result<_>>()?;
        let (no, std) = next("norm_std")?;
        let std: Vec<f64> = std.iter().map(|t| parse_num(t, no)).collect::<Result<_>>()?;
        let (no, count) = next("params")?;
        let count: usize = parse_single(&count, no)?;
        let mut net = Mlp::zeros(&widths, activation).map_err(|e| Error::Parse { line: 3, msg: e.to_string() })?;
        if count != net.param_count() {
            return Err(Error::Parse {
                line: no,
                msg: format!("parameter count {count} does not match widths ({})", net.param_count()),
            });
        }
        let mut flat = Vec::with_capacity(count);
        for (no, line) in lines.by_ref().take(count) {
            flat.push(parse_num(line?.trim(), no)?);
        }
        if flat.len() != count {
            return Err(Error::Parse { line: no + flat.len(), msg: "truncated parameter list".into() });
        }
        net.set_flat_params(&flat)?;
        if mean.len() != d || std.len() != d {
            return Err(Error::Parse { line: no, msg: "normalizer dimension does not match d".into() });
        }
        let ckpt = Self { role, net, k, d, latent_dim, normalizer: Normalizer { mean, std } };
        match role {
            Role::Generator => GeneratorModel::from_net(ckpt.net.clone(), k, d, latent_dim).map(|_| ())?,
            Role::Discriminator => DiscriminatorModel::from_net(ckpt.net.clone(), k, d).map(|_| ())?,
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(std::fs::File::open(path)?))
    }
}

fn parse_num<T: std::str::FromStr>(tok: &str, line: usize) -> Result<T> {
    tok.parse().map_err(|_| Error::Parse { line, msg: format!("cannot parse `{tok}`") })
}

fn parse_single<T: std::str::FromStr>(tokens: &[String], line: usize) -> Result<T> {
    match tokens {
        [t] => parse_num(t, line),
        _ => Err(Error::Parse { line, msg: "expected a single value".into() }),
    }
}
