//! Ensemble estimators of the energy, Gaussian-kernel and variogram scores.
//!
//! Every estimator takes a [`ForecastEnsemble`] holding `members` draws for
//! each of `windows` forecast cases, stacked window-major into a
//! `[windows * members, d]` node, and returns the mean over windows of the
//! per-window estimate as a differentiable scalar.
//!
//! Scores are penalties (lower is better) and follow the statistical
//! convention: the energy and kernel scores here are twice the values used
//! in parts of the forecast-verification literature.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Array, Var};
use crate::error::{Error, Result};

/// Square weight matrix for the variogram score, serialized as rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct WeightMatrix(Array);

impl WeightMatrix {
    pub fn new(matrix: Array) -> Result<Self> {
        let (r, c) = matrix.dims2()?;
        if r != c {
            return Err(Error::invalid(format!("weight matrix must be square, got {r}x{c}")));
        }
        for i in 0..r {
            for j in 0..r {
                let w = matrix.data()[i * r + j];
                if !(w >= 0.0 && w.is_finite()) {
                    return Err(Error::invalid(format!("weight w[{i}][{j}] = {w} is not >= 0")));
                }
                if w != matrix.data()[j * r + i] {
                    return Err(Error::invalid(format!("weight matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self(matrix))
    }

    /// All off-diagonal weights equal to one.
    pub fn ones(d: usize) -> Self {
        let mut m = Array::full(&[d, d], 1.0);
        for i in 0..d {
            m.data_mut()[i * d + i] = 0.0;
        }
        Self(m)
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.data()[i * self.dim() + j]
    }

    pub fn as_array(&self) -> &Array {
        &self.0
    }
}

impl TryFrom<Vec<Vec<f64>>> for WeightMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(Array::from_rows(&rows)?)
    }
}

impl From<WeightMatrix> for Vec<Vec<f64>> {
    fn from(w: WeightMatrix) -> Self {
        let d = w.dim();
        w.0.data().chunks(d.max(1)).map(<[f64]>::to_vec).collect()
    }
}

/// A scoring rule together with its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoringRule {
    Energy { beta: f64 },
    /// Gaussian kernel score with bandwidth `gamma`.
    Kernel { gamma: f64 },
    Variogram { p: f64, weights: WeightMatrix },
    WeightedSum { terms: Vec<WeightedTerm> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedTerm {
    pub weight: f64,
    pub rule: ScoringRule,
}

impl ScoringRule {
    pub fn energy() -> Self {
        ScoringRule::Energy { beta: 1.0 }
    }

    pub fn kernel(gamma: f64) -> Self {
        ScoringRule::Kernel { gamma }
    }

    pub fn variogram(weights: WeightMatrix) -> Self {
        ScoringRule::Variogram { p: 1.0, weights }
    }

    /// Unit-weight sum of the given rules.
    pub fn sum_of(rules: Vec<ScoringRule>) -> Self {
        ScoringRule::WeightedSum {
            terms: rules
                .into_iter()
                .map(|rule| WeightedTerm { weight: 1.0, rule })
                .collect(),
        }
    }

    /// Checks hyperparameter ranges; with `dim` also checks weight-matrix size.
    pub fn validate(&self, dim: Option<usize>) -> Result<()> {
        match self {
            ScoringRule::Energy { beta } => {
                if !(*beta > 0.0 && *beta < 2.0) {
                    return Err(Error::invalid(format!("energy score needs 0 < beta < 2, got {beta}")));
                }
            }
            ScoringRule::Kernel { gamma } => {
                if !(*gamma > 0.0 && gamma.is_finite()) {
                    return Err(Error::invalid(format!("kernel bandwidth must be > 0, got {gamma}")));
                }
            }
            ScoringRule::Variogram { p, weights } => {
                if !(*p > 0.0 && p.is_finite()) {
                    return Err(Error::invalid(format!("variogram order must be > 0, got {p}")));
                }
                if let Some(d) = dim {
                    if weights.dim() != d {
                        return Err(Error::shape("variogram weights", &[d, d], weights.0.shape()));
                    }
                }
            }
            ScoringRule::WeightedSum { terms } => {
                if terms.is_empty() {
                    return Err(Error::invalid("weighted sum of zero scoring rules"));
                }
                for t in terms {
                    if !(t.weight > 0.0 && t.weight.is_finite()) {
                        return Err(Error::invalid(format!(
                            "weighted-sum weights must be > 0, got {}",
                            t.weight
                        )));
                    }
                    t.rule.validate(dim)?;
                }
            }
        }
        Ok(())
    }

    /// Smallest ensemble size for which the estimator is defined.
    pub fn min_members(&self) -> usize {
        match self {
            ScoringRule::Energy { .. } | ScoringRule::Kernel { .. } => 2,
            ScoringRule::Variogram { .. } => 1,
            ScoringRule::WeightedSum { terms } => {
                terms.iter().map(|t| t.rule.min_members()).max().unwrap_or(1)
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            ScoringRule::Energy { .. } => "energy".into(),
            ScoringRule::Kernel { .. } => "kernel".into(),
            ScoringRule::Variogram { .. } => "variogram".into(),
            ScoringRule::WeightedSum { terms } => terms
                .iter()
                .map(|t| t.rule.name())
                .collect::<Vec<_>>()
                .join("+"),
        }
    }

    /// Estimate averaged over the ensemble's windows.
    pub fn estimate<'t>(&self, ens: &ForecastEnsemble<'t>, targets: &Array) -> Result<Var<'t>> {
        match self {
            ScoringRule::Energy { beta } => energy_score(ens, targets, *beta),
            ScoringRule::Kernel { gamma } => kernel_score(ens, targets, *gamma),
            ScoringRule::Variogram { p, weights } => variogram_score(ens, targets, *p, weights),
            ScoringRule::WeightedSum { terms } => weighted_sum(ens, targets, terms),
        }
    }
}

/// `members` generated samples for each of `windows` forecast cases.
#[derive(Debug, Clone, Copy)]
pub struct ForecastEnsemble<'t> {
    samples: Var<'t>,
    windows: usize,
    members: usize,
    dim: usize,
}

impl<'t> ForecastEnsemble<'t> {
    /// Wraps a `[windows * members, d]` node whose rows are grouped by window.
    pub fn new(samples: Var<'t>, members: usize) -> Result<Self> {
        let shape = samples.shape();
        let (rows, dim) = match shape.as_slice() {
            &[r, d] => (r, d),
            _ => return Err(Error::invalid(format!("ensemble must be 2-D, got {shape:?}"))),
        };
        if members == 0 || rows % members != 0 {
            return Err(Error::invalid(format!(
                "{rows} ensemble rows are not a multiple of {members} members"
            )));
        }
        Ok(Self {
            samples,
            windows: rows / members,
            members,
            dim,
        })
    }

    pub fn samples(&self) -> Var<'t> {
        self.samples
    }

    pub fn windows(&self) -> usize {
        self.windows
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn require_members(&self, min: usize, what: &str) -> Result<()> {
        if self.members < min {
            return Err(Error::invalid(format!(
                "{what} needs at least {min} ensemble members (the pairwise U-statistic \
                 averages over m(m-1) ordered pairs), got {}",
                self.members
            )));
        }
        Ok(())
    }

    fn check_targets(&self, targets: &Array) -> Result<()> {
        let ok = match targets.shape() {
            &[w, d] => w == self.windows && d == self.dim,
            &[d] => self.windows == 1 && d == self.dim,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::shape("targets", &[self.windows, self.dim], targets.shape()))
        }
    }

    /// Targets repeated once per member, as a constant `[windows * members, d]`.
    fn repeated_targets(&self, targets: &Array) -> Var<'t> {
        let mut data = Vec::with_capacity(self.windows * self.members * self.dim);
        for w in 0..self.windows {
            let row = &targets.data()[w * self.dim..(w + 1) * self.dim];
            for _ in 0..self.members {
                data.extend_from_slice(row);
            }
        }
        let arr = Array::matrix(self.windows * self.members, self.dim, data)
            .expect("sized from ensemble shape");
        self.samples.tape().constant(arr)
    }

    /// Row indices of all unordered member pairs `j < k` within each window.
    fn pair_rows(&self) -> (Vec<usize>, Vec<usize>) {
        let m = self.members;
        let per = m * (m - 1) / 2;
        let mut a = Vec::with_capacity(self.windows * per);
        let mut b = Vec::with_capacity(self.windows * per);
        for w in 0..self.windows {
            let base = w * m;
            for j in 0..m {
                for k in j + 1..m {
                    a.push(base + j);
                    b.push(base + k);
                }
            }
        }
        (a, b)
    }
}

fn pow_unless_one<'t>(v: Var<'t>, p: f64) -> Var<'t> {
    if p == 1.0 {
        v
    } else {
        v.powf(p)
    }
}

/// Energy score estimate
/// `(2/m) Σ_j ‖x_j − y‖^β − (1/(m(m−1))) Σ_{j≠k} ‖x_j − x_k‖^β`.
pub fn energy_score<'t>(ens: &ForecastEnsemble<'t>, targets: &Array, beta: f64) -> Result<Var<'t>> {
    ens.require_members(2, "energy score")?;
    ens.check_targets(targets)?;
    let (m, w) = (ens.members as f64, ens.windows as f64);
    let x = ens.samples;
    let to_obs = pow_unless_one(x.sub(ens.repeated_targets(targets))?.norm_last()?, beta)
        .sum()
        .scale(2.0 / (m * w));
    let (ia, ib) = ens.pair_rows();
    // unordered pairs counted once, hence 2 / (m(m-1))
    let spread = pow_unless_one(
        x.select_rows(&ia)?.sub(x.select_rows(&ib)?)?.norm_last()?,
        beta,
    )
    .sum()
    .scale(2.0 / (m * (m - 1.0) * w));
    to_obs.sub(spread)
}

/// Gaussian kernel `exp(−‖a − b‖² / (2γ²))` evaluated row-wise.
fn gaussian_rows<'t>(a: Var<'t>, b: Var<'t>, gamma: f64) -> Result<Var<'t>> {
    Ok(a.sub(b)?
        .square()
        .sum_last()?
        .scale(-1.0 / (2.0 * gamma * gamma))
        .exp())
}

/// Gaussian kernel score estimate
/// `(1/(m(m−1))) Σ_{j≠k} k(x_j, x_k) − (2/m) Σ_j k(x_j, y)`.
pub fn kernel_score<'t>(ens: &ForecastEnsemble<'t>, targets: &Array, gamma: f64) -> Result<Var<'t>> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("kernel bandwidth must be > 0, got {gamma}")));
    }
    ens.require_members(2, "kernel score")?;
    ens.check_targets(targets)?;
    let (m, w) = (ens.members as f64, ens.windows as f64);
    let x = ens.samples;
    let (ia, ib) = ens.pair_rows();
    let spread = gaussian_rows(x.select_rows(&ia)?, x.select_rows(&ib)?, gamma)?
        .sum()
        .scale(2.0 / (m * (m - 1.0) * w));
    let to_obs = gaussian_rows(x, ens.repeated_targets(targets), gamma)?
        .sum()
        .scale(2.0 / (m * w));
    spread.sub(to_obs)
}

/// Variogram score estimate
/// `(1/m) Σ_k Σ_{i,j} w_ij (|y_i − y_j|^p − |x_{k,i} − x_{k,j}|^p)²`.
///
/// Pairs with zero weight (including the diagonal) are skipped; they
/// contribute nothing.
pub fn variogram_score<'t>(
    ens: &ForecastEnsemble<'t>,
    targets: &Array,
    p: f64,
    weights: &WeightMatrix,
) -> Result<Var<'t>> {
    ens.check_targets(targets)?;
    let d = ens.dim;
    if weights.dim() != d {
        return Err(Error::shape("variogram weights", &[d, d], weights.0.shape()));
    }
    let tape = ens.samples.tape();
    let (mut ci, mut cj, mut wv) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..d {
        for j in 0..d {
            let w = weights.get(i, j);
            if w > 0.0 {
                ci.push(i);
                cj.push(j);
                wv.push(w);
            }
        }
    }
    if ci.is_empty() {
        return Ok(tape.constant(Array::scalar(0.0)));
    }
    let npairs = ci.len();
    let x = ens.samples;
    let sample_vg = pow_unless_one(x.select_cols(&ci)?.sub(x.select_cols(&cj)?)?.abs(), p);

    let mut obs = Vec::with_capacity(ens.windows * ens.members * npairs);
    for w in 0..ens.windows {
        let y = &targets.data()[w * d..(w + 1) * d];
        let row: Vec<f64> = ci
            .iter()
            .zip(&cj)
            .map(|(&i, &j)| (y[i] - y[j]).abs().powf(p))
            .collect();
        for _ in 0..ens.members {
            obs.extend_from_slice(&row);
        }
    }
    let obs_vg = tape.constant(Array::matrix(ens.windows * ens.members, npairs, obs)?);
    let wrow = tape.constant(Array::vector(wv));
    let scale = 1.0 / (ens.members * ens.windows) as f64;
    Ok(obs_vg.sub(sample_vg)?.square().mul(wrow)?.sum().scale(scale))
}

/// `Σ_r w_r · S_r` over the given terms.
pub fn weighted_sum<'t>(
    ens: &ForecastEnsemble<'t>,
    targets: &Array,
    terms: &[WeightedTerm],
) -> Result<Var<'t>> {
    let mut acc: Option<Var<'t>> = None;
    for t in terms {
        if !(t.weight > 0.0) {
            return Err(Error::invalid(format!("weighted-sum weights must be > 0, got {}", t.weight)));
        }
        let term = t.rule.estimate(ens, targets)?.scale(t.weight);
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(term)?,
        });
    }
    acc.ok_or_else(|| Error::invalid("weighted sum of zero scoring rules"))
}

/// Maximum number of points used when tuning the kernel bandwidth.
pub const BANDWIDTH_SUBSAMPLE: usize = 5000;

/// Median of all pairwise Euclidean distances among `points` (rows).
///
/// Inputs with more than `cap` rows are first subsampled uniformly without
/// replacement using `seed`.
pub fn tune_gaussian_bandwidth(points: &Array, cap: usize, seed: u64) -> Result<f64> {
    let (n, d) = points.dims2()?;
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "bandwidth tuning needs at least 2 points, got {n}"
        )));
    }
    let rows: Vec<usize> = if n > cap.max(2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, n, cap.max(2)).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n).collect()
    };
    let data = points.data();
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for (a, &i) in rows.iter().enumerate() {
        let xi = &data[i * d..(i + 1) * d];
        for &j in &rows[a + 1..] {
            let xj = &data[j * d..(j + 1) * d];
            let s: f64 = xi.iter().zip(xj).map(|(u, v)| (u - v) * (u - v)).sum();
            dists.push(s.sqrt());
        }
    }
    let gamma = median(&mut dists);
    if !(gamma > 0.0) {
        return Err(Error::invalid(
            "median pairwise distance is zero; bandwidth would be 0",
        ));
    }
    Ok(gamma)
}

/// Median, averaging the two central values for even lengths. Reorders `v`.
pub(crate) fn median(v: &mut [f64]) -> f64 {
    let n = v.len();
    assert!(n > 0, "median of empty slice");
    let cmp = |a: &f64, b: &f64| a.total_cmp(b);
    let (_, &mut hi, _) = v.select_nth_unstable_by(n / 2, cmp);
    if n % 2 == 1 {
        hi
    } else {
        let lo = v[..n / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Weights `1 / cyclic distance` for `d` variables on a ring; zero diagonal.
pub fn cyclic_weight_matrix(d: usize) -> Result<WeightMatrix> {
    if d < 2 {
        return Err(Error::invalid(format!("cyclic weight matrix needs d >= 2, got {d}")));
    }
    let mut m = Array::zeros(&[d, d]);
    for i in 0..d {
        for j in 0..d {
            if i != j {
                let gap = i.abs_diff(j);
                m.data_mut()[i * d + j] = 1.0 / gap.min(d - gap) as f64;
            }
        }
    }
    Ok(WeightMatrix(m))
}

/// Largest grid accepted by [`grid_weight_matrix`] by default (a 32 x 64 grid).
pub const GRID_CELL_CAP: usize = 2048;

/// Inverse Euclidean grid distance, longitude treated as periodic.
///
/// Component `i` sits at latitude `i / n_lon`, longitude `i % n_lon`.
pub fn grid_weight_matrix(n_lat: usize, n_lon: usize, cap: usize) -> Result<WeightMatrix> {
    if n_lat < 1 || n_lon < 2 {
        return Err(Error::invalid(format!(
            "grid weight matrix needs n_lat >= 1 and n_lon >= 2, got {n_lat}x{n_lon}"
        )));
    }
    let n = n_lat
        .checked_mul(n_lon)
        .filter(|&n| n <= cap)
        .ok_or_else(|| {
            Error::invalid(format!("{n_lat}x{n_lon} grid exceeds the cap of {cap} cells"))
        })?;
    let mut m = Array::zeros(&[n, n]);
    for i in 0..n {
        let (lat_i, lon_i) = (i / n_lon, i % n_lon);
        for j in 0..n {
            if i == j {
                continue;
            }
            let (lat_j, lon_j) = (j / n_lon, j % n_lon);
            let dlat = lat_i.abs_diff(lat_j) as f64;
            let gap = lon_i.abs_diff(lon_j);
            let dlon = gap.min(n_lon - gap) as f64;
            m.data_mut()[i * n + j] = 1.0 / (dlat * dlat + dlon * dlon).sqrt();
        }
    }
    Ok(WeightMatrix(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tape;

    fn ens_of<'t>(tape: &'t Tape, rows: &[Vec<f64>]) -> ForecastEnsemble<'t> {
        let v = tape.param(Array::from_rows(rows).unwrap());
        ForecastEnsemble::new(v, rows.len()).unwrap()
    }

    fn y(v: &[f64]) -> Array {
        Array::vector(v.to_vec())
    }

    #[test]
    fn energy_hand_examples() {
        let tape = Tape::new();
        let e = ens_of(&tape, &[vec![0.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(energy_score(&e, &y(&[3.0, 4.0]), 1.0).unwrap().item(), 10.0);

        let e = ens_of(&tape, &[vec![3.0, 4.0], vec![3.0, 4.0]]);
        for beta in [0.5, 1.0, 1.7] {
            assert_eq!(energy_score(&e, &y(&[3.0, 4.0]), beta).unwrap().item(), 0.0);
        }

        let e = ens_of(&tape, &[vec![0.0, 0.0], vec![6.0, 8.0]]);
        assert_eq!(energy_score(&e, &y(&[3.0, 4.0]), 1.0).unwrap().item(), 0.0);
    }

    #[test]
    fn energy_rejects_single_member() {
        let tape = Tape::new();
        let e = ens_of(&tape, &[vec![1.0, 2.0]]);
        let err = energy_score(&e, &y(&[0.0, 0.0]), 1.0).unwrap_err().to_string();
        assert!(err.contains("U-statistic"), "{err}");
        assert!(kernel_score(&e, &y(&[0.0, 0.0]), 1.0).is_err());
    }

    #[test]
    fn kernel_hand_examples() {
        let tape = Tape::new();
        let e = ens_of(&tape, &[vec![1.0, -1.0], vec![1.0, -1.0]]);
        assert_eq!(kernel_score(&e, &y(&[1.0, -1.0]), 0.7).unwrap().item(), -1.0);

        let gamma = 0.8;
        let r = gamma * 2f64.sqrt();
        let e = ens_of(&tape, &[vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]]);
        let s = kernel_score(&e, &y(&[r, 0.0]), gamma).unwrap().item();
        assert!((s - (1.0 - 2.0 * (-1.0f64).exp())).abs() < 1e-12, "{s}");
        assert!((s - 0.26424).abs() < 1e-5);

        assert!(kernel_score(&e, &y(&[r, 0.0]), 0.0).is_err());
        assert!(kernel_score(&e, &y(&[r, 0.0]), -1.0).is_err());
    }

    #[test]
    fn gaussian_kernel_at_gamma_sqrt2() {
        let tape = Tape::new();
        let gamma = 1.3;
        let a = tape.constant(Array::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let b = tape.constant(Array::matrix(1, 2, vec![gamma * 2f64.sqrt(), 0.0]).unwrap());
        let k = gaussian_rows(a, b, gamma).unwrap().item();
        assert!((k - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn variogram_hand_examples() {
        let tape = Tape::new();
        let w = WeightMatrix::new(Array::full(&[2, 2], 1.0)).unwrap();
        let e = ens_of(&tape, &[vec![0.0, 0.0]]);
        assert_eq!(variogram_score(&e, &y(&[1.0, 3.0]), 1.0, &w).unwrap().item(), 8.0);

        let e = ens_of(&tape, &[vec![1.0, 3.0], vec![1.0, 3.0]]);
        assert_eq!(variogram_score(&e, &y(&[1.0, 3.0]), 1.0, &w).unwrap().item(), 0.0);

        let bad = WeightMatrix::ones(3);
        assert!(variogram_score(&e, &y(&[1.0, 3.0]), 1.0, &bad).is_err());
    }

    #[test]
    fn weighted_sum_examples() {
        let tape = Tape::new();
        let e = ens_of(&tape, &[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let obs = y(&[3.0, 4.0]);
        let energy = ScoringRule::energy();
        let vario = ScoringRule::variogram(WeightMatrix::new(Array::full(&[2, 2], 1.0)).unwrap());

        let single = ScoringRule::sum_of(vec![energy.clone()]);
        assert_eq!(
            single.estimate(&e, &obs).unwrap().item(),
            energy.estimate(&e, &obs).unwrap().item()
        );

        // 10 from the energy term; variogram: pairs (1,2),(2,1) each (1 - 0)^2
        let both = ScoringRule::sum_of(vec![energy.clone(), vario.clone()]);
        assert_eq!(both.estimate(&e, &obs).unwrap().item(), 12.0);

        let doubled = ScoringRule::WeightedSum {
            terms: vec![
                WeightedTerm { weight: 2.0, rule: energy },
                WeightedTerm { weight: 2.0, rule: vario },
            ],
        };
        assert_eq!(doubled.estimate(&e, &obs).unwrap().item(), 24.0);

        let empty = ScoringRule::WeightedSum { terms: vec![] };
        assert!(empty.estimate(&e, &obs).is_err());
        assert!(empty.validate(None).is_err());
    }

    #[test]
    fn rule_validation() {
        assert!(ScoringRule::Energy { beta: 2.0 }.validate(None).is_err());
        assert!(ScoringRule::Energy { beta: 0.0 }.validate(None).is_err());
        assert!(ScoringRule::energy().validate(None).is_ok());
        assert!(ScoringRule::kernel(0.0).validate(None).is_err());
        let v = ScoringRule::variogram(WeightMatrix::ones(3));
        assert!(v.validate(Some(3)).is_ok());
        assert!(v.validate(Some(4)).is_err());
        let neg = ScoringRule::WeightedSum {
            terms: vec![WeightedTerm { weight: -1.0, rule: ScoringRule::energy() }],
        };
        assert!(neg.validate(None).is_err());
        assert!(WeightMatrix::try_from(vec![vec![0.0, 1.0], vec![2.0, 0.0]]).is_err());
        assert!(WeightMatrix::try_from(vec![vec![0.0, -1.0], vec![-1.0, 0.0]]).is_err());
    }

    #[test]
    fn bandwidth_examples() {
        let pts = Array::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0], vec![0.0, 3.0]]).unwrap();
        assert_eq!(tune_gaussian_bandwidth(&pts, 5000, 0).unwrap(), 2.0);

        let pts = Array::from_rows(&[vec![0.0, 0.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(tune_gaussian_bandwidth(&pts, 5000, 0).unwrap(), 2.0);

        let v = [0.3, -1.0];
        let rows: Vec<Vec<f64>> = (0..4).map(|i| vec![v[0] + i as f64, v[1]]).collect();
        let pts = Array::from_rows(&rows).unwrap();
        assert_eq!(tune_gaussian_bandwidth(&pts, 5000, 0).unwrap(), 1.5);

        let one = Array::from_rows(&[vec![1.0]]).unwrap();
        assert!(tune_gaussian_bandwidth(&one, 5000, 0).is_err());
        let same = Array::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        assert!(tune_gaussian_bandwidth(&same, 5000, 0).is_err());
    }

    #[test]
    fn bandwidth_subsampling_is_seeded() {
        let rows: Vec<Vec<f64>> = (0..300).map(|i| vec![(i as f64 * 0.37).sin()]).collect();
        let pts = Array::from_rows(&rows).unwrap();
        let a = tune_gaussian_bandwidth(&pts, 50, 9).unwrap();
        let b = tune_gaussian_bandwidth(&pts, 50, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cyclic_weights() {
        let w = cyclic_weight_matrix(8).unwrap();
        assert_eq!(w.get(0, 1), 1.0);
        assert_eq!(w.get(0, 4), 0.25);
        assert_eq!(w.get(0, 7), 1.0);
        assert_eq!(w.get(7, 0), 1.0);
        assert_eq!(cyclic_weight_matrix(4).unwrap().get(0, 2), 0.5);
        assert!((0..8).all(|i| w.get(i, i) == 0.0));
        assert!(cyclic_weight_matrix(1).is_err());
    }

    #[test]
    fn grid_weights() {
        let w = grid_weight_matrix(5, 64, GRID_CELL_CAP).unwrap();
        let idx = |lat: usize, lon: usize| lat * 64 + lon;
        assert_eq!(w.get(idx(2, 10), idx(2, 11)), 1.0);
        assert_eq!(w.get(idx(1, 0), idx(1, 63)), 1.0);
        assert!((w.get(idx(0, 5), idx(3, 9)) - 0.2).abs() < 1e-15);
        assert_eq!(w.get(idx(4, 4), idx(4, 4)), 0.0);
        assert!(grid_weight_matrix(64, 64, GRID_CELL_CAP).is_err());
        assert!(grid_weight_matrix(1, 1, GRID_CELL_CAP).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn rule_serde_round_trip() {
        let rule = ScoringRule::sum_of(vec![
            ScoringRule::kernel(0.5),
            ScoringRule::variogram(cyclic_weight_matrix(3).unwrap()),
        ]);
        let json = serde_json::to_string(&rule).unwrap();
        assert!(json.contains("weighted_sum"));
        let back: ScoringRule = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rule);
    }
}
