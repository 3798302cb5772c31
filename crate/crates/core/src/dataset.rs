//! Time series containers, chronological splits, sliding windows and
//! standardization.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::Array;
use crate::error::{Error, Result};

/// A recorded realization: `T` rows of `d` components.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    values: Array,
    dt_record: f64,
    origin: String,
}

impl TimeSeries {
    pub fn new(values: Array, dt_record: f64, origin: impl Into<String>) -> Result<Self> {
        let (t, d) = values.dims2()?;
        if t == 0 || d == 0 {
            return Err(Error::InsufficientData(format!(
                "time series needs at least one row and one component, got {t}x{d}"
            )));
        }
        if let Some(pos) = values.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite value at row {}, component {}",
                pos / d,
                pos % d
            )));
        }
        Ok(Self {
            values,
            dt_record,
            origin: origin.into(),
        })
    }

    pub fn values(&self) -> &Array {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dt_record(&self) -> f64 {
        self.dt_record
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.values.row(t)
    }

    /// Rows `start..end` as a new series.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::invalid(format!(
                "row range {start}..{end} invalid for {} rows",
                self.len()
            )));
        }
        let d = self.dim();
        let data = self.values.data()[start * d..end * d].to_vec();
        Self::new(Array::matrix(end - start, d, data)?, self.dt_record, self.origin.clone())
    }

    /// Per-component mean and population standard deviation.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let (t, d) = (self.len(), self.dim());
        let mut mean = vec![0.0; d];
        for r in 0..t {
            for (m, v) in mean.iter_mut().zip(self.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        let mut var = vec![0.0; d];
        for r in 0..t {
            for ((s, v), m) in var.iter_mut().zip(self.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / t as f64).sqrt()).collect();
        (mean, std)
    }

    /// Writes the text format: a `d dt_record origin` header line, then one
    /// row per line with 17 significant digits per value.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut buf = String::new();
        writeln!(buf, "{} {} {}", self.dim(), fmt_f64(self.dt_record), self.origin).ok();
        for r in 0..self.len() {
            let row: Vec<String> = self.row(r).iter().map(|v| fmt_f64(*v)).collect();
            buf.push_str(&row.join(" "));
            buf.push('\n');
        }
        w.write_all(buf.as_bytes())?;
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or(Error::Parse { line: 1, msg: "empty file".into() })??;
        let mut parts = header.splitn(3, ' ');
        let d: usize = parse_token(parts.next(), 1, "dimension")?;
        let dt: f64 = parse_token(parts.next(), 1, "dt_record")?;
        let origin = parts.next().unwrap_or("").trim().to_string();
        let mut data = Vec::new();
        let mut rows = 0;
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let before = data.len();
            for tok in line.split_whitespace() {
                data.push(parse_token(Some(tok), i + 2, "value")?);
            }
            if data.len() - before != d {
                return Err(Error::Parse {
                    line: i + 2,
                    msg: format!("expected {d} values, found {}", data.len() - before),
                });
            }
            rows += 1;
        }
        Self::new(Array::matrix(rows, d, data)?, dt, origin)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Lossless decimal rendering with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_token<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::Parse { line, msg: format!("missing {what}") })?;
    tok.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad {what} {tok:?}"),
    })
}

/// Splits chronologically into train/validation/test segments.
///
/// Boundaries sit at `floor(T * cumulative fraction)`. Every segment must hold
/// at least `min_len` rows.
pub fn split_series(
    ts: &TimeSeries,
    fractions: [f64; 3],
    min_len: usize,
) -> Result<[TimeSeries; 3]> {
    if fractions.iter().any(|f| !(*f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }
    let t = ts.len();
    let b1 = (t as f64 * fractions[0]).floor() as usize;
    let b2 = ((t as f64 * (fractions[0] + fractions[1])).floor() as usize).max(b1);
    let bounds = [(0, b1), (b1, b2), (b2, t)];
    for (name, (s, e)) in ["train", "validation", "test"].iter().zip(bounds) {
        if e - s < min_len.max(1) {
            return Err(Error::InsufficientData(format!(
                "{name} split has {} rows, needs at least {}",
                e - s,
                min_len.max(1)
            )));
        }
    }
    Ok([
        ts.slice(0, b1)?,
        ts.slice(b1, b2)?,
        ts.slice(b2, t)?,
    ])
}

/// Prequential pairs: the `k` rows ending at `index_map[i]` and the row `l`
/// steps later.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    windows: Array,
    targets: Array,
    k: usize,
    l: usize,
    index_map: Vec<usize>,
}

impl WindowedDataset {
    /// Pairs supplied directly: `windows` is `[N, k, d]` or `[N, k·d]`,
    /// `targets` is `[N, d]`. The index map is `0..N`.
    pub fn from_pairs(windows: Array, targets: Array, k: usize, l: usize) -> Result<Self> {
        let (n, d) = targets.dims2()?;
        if k == 0 || n == 0 || d == 0 {
            return Err(Error::invalid("need at least one pair with k >= 1 and d >= 1"));
        }
        if windows.len() != n * k * d || windows.shape()[0] != n {
            return Err(Error::shape("paired windows", &[n, k, d], windows.shape()));
        }
        if !windows.all_finite() || !targets.all_finite() {
            return Err(Error::invalid("pairs contain non-finite values"));
        }
        Ok(Self {
            windows: windows.reshape(vec![n, k, d])?,
            targets,
            k,
            l,
            index_map: (0..n).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.index_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_map.is_empty()
    }

    pub fn window_len(&self) -> usize {
        self.k
    }

    pub fn lead(&self) -> usize {
        self.l
    }

    pub fn dim(&self) -> usize {
        self.targets.shape()[1]
    }

    /// `[N, k, d]`.
    pub fn windows(&self) -> &Array {
        &self.windows
    }

    /// `[N, d]`.
    pub fn targets(&self) -> &Array {
        &self.targets
    }

    /// 0-based source row of each window's last observation.
    pub fn index_map(&self) -> &[usize] {
        &self.index_map
    }

    /// Window `i`, flattened to `k * d` values (time-major).
    pub fn window(&self, i: usize) -> &[f64] {
        let w = self.k * self.dim();
        &self.windows.data()[i * w..(i + 1) * w]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        self.targets.row(i)
    }

    /// Selected windows flattened into `[idx.len(), k * d]`.
    pub fn gather_windows(&self, idx: &[usize]) -> Array {
        let w = self.k * self.dim();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(self.window(i));
        }
        Array::matrix(idx.len(), w, data).expect("consistent sizes")
    }

    /// Selected targets as `[idx.len(), d]`.
    pub fn gather_targets(&self, idx: &[usize]) -> Array {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.target(i));
        }
        Array::matrix(idx.len(), d, data).expect("consistent sizes")
    }
}

/// Builds the `N = T − l − k + 1` window/target pairs of a series.
pub fn build_windows(ts: &TimeSeries, k: usize, l: usize) -> Result<WindowedDataset> {
    if k == 0 || l == 0 {
        return Err(Error::invalid(format!("window k and lead l must be >= 1, got k={k}, l={l}")));
    }
    let (t, d) = (ts.len(), ts.dim());
    if t < k + l {
        return Err(Error::InsufficientData(format!(
            "series of {t} rows is too short for k={k}, l={l}: needs at least {}",
            k + l
        )));
    }
    let n = t - l - k + 1;
    let src = ts.values().data();
    let mut windows = Vec::with_capacity(n * k * d);
    let mut targets = Vec::with_capacity(n * d);
    let mut index_map = Vec::with_capacity(n);
    for i in 0..n {
        let last = i + k - 1;
        windows.extend_from_slice(&src[i * d..(last + 1) * d]);
        targets.extend_from_slice(ts.row(last + l));
        index_map.push(last);
    }
    Ok(WindowedDataset {
        windows: Array::new(vec![n, k, d], windows)?,
        targets: Array::matrix(n, d, targets)?,
        k,
        l,
        index_map,
    })
}

/// Per-component standardization fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Population (1/N) statistics of `train`.
    pub fn fit(train: &TimeSeries) -> Result<Self> {
        let (mean, std) = train.moments();
        if let Some(c) = std.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::invalid(format!("component {c} has zero variance")));
        }
        Ok(Self { mean, std })
    }

    /// Identity transform on `d` components.
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, ts: &TimeSeries) -> Result<TimeSeries> {
        let values = self.apply_array(ts.values())?;
        TimeSeries::new(values, ts.dt_record(), ts.origin())
    }

    /// Standardizes an array whose last axis holds the components.
    pub fn apply_array(&self, a: &Array) -> Result<Array> {
        self.map_last(a, |v, m, s| (v - m) / s)
    }

    /// Maps standardized values back to physical units.
    pub fn invert_array(&self, a: &Array) -> Result<Array> {
        self.map_last(a, |v, m, s| v * s + m)
    }

    fn map_last(&self, a: &Array, f: impl Fn(f64, f64, f64) -> f64) -> Result<Array> {
        let d = self.dim();
        if a.shape().last() != Some(&d) {
            return Err(Error::shape("normalizer", &[d], a.shape()));
        }
        let mut out = a.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % d;
            *v = f(*v, self.mean[c], self.std[c]);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(rows: usize, d: usize) -> TimeSeries {
        let data = (0..rows * d).map(|i| (i as f64 * 0.731).sin() * 3.0 + i as f64 * 0.01).collect();
        TimeSeries::new(Array::matrix(rows, d, data).unwrap(), 0.3, "test").unwrap()
    }

    #[test]
    fn split_lengths() {
        let lens = |t| {
            let s = split_series(&series(t, 1), [0.6, 0.2, 0.2], 1).unwrap();
            [s[0].len(), s[1].len(), s[2].len()]
        };
        assert_eq!(lens(10), [6, 2, 2]);
        assert_eq!(lens(11), [6, 2, 3]);
    }

    #[test]
    fn split_reassembles_source() {
        let ts = series(37, 2);
        let parts = split_series(&ts, [0.6, 0.2, 0.2], 2).unwrap();
        let joined: Vec<f64> = parts.iter().flat_map(|p| p.values().data().to_vec()).collect();
        assert_eq!(joined, ts.values().data());
    }

    #[test]
    fn split_rejects_short_segments_and_bad_fractions() {
        assert!(split_series(&series(10, 1), [0.6, 0.2, 0.2], 3).is_err());
        assert!(split_series(&series(10, 1), [0.6, 0.2, 0.3], 1).is_err());
        assert!(split_series(&series(10, 1), [0.8, 0.0, 0.2], 1).is_err());
    }

    #[test]
    fn windows_follow_prequential_indexing() {
        let ts = series(5, 1);
        let ds = build_windows(&ts, 2, 1).unwrap();
        assert_eq!(ds.len(), 3);
        // first pair: rows 1..2 and row 3 in 1-based indexing
        assert_eq!(ds.window(0), &[ts.row(0)[0], ts.row(1)[0]]);
        assert_eq!(ds.target(0), ts.row(2));
        assert_eq!(ds.index_map(), &[1, 2, 3]);

        let markov = build_windows(&ts, 1, 1).unwrap();
        assert_eq!(markov.len(), 4);

        let err = build_windows(&ts, 4, 2).unwrap_err().to_string();
        assert!(err.contains("at least 6"), "{err}");
    }

    #[test]
    fn normalizer_examples() {
        let ts = TimeSeries::new(Array::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap(), 1.0, "x").unwrap();
        let n = Normalizer::fit(&ts).unwrap();
        assert_eq!(n.mean, vec![2.0]);
        assert!((n.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);

        let shifted = TimeSeries::new(
            Array::matrix(3, 1, vec![101.0, 102.0, 103.0]).unwrap(),
            1.0,
            "x",
        )
        .unwrap();
        let a = n.apply(&ts).unwrap();
        let b = Normalizer::fit(&shifted).unwrap().apply(&shifted).unwrap();
        for (x, y) in a.values().data().iter().zip(b.values().data()) {
            assert!((x - y).abs() < 1e-12);
        }

        let flat = TimeSeries::new(Array::matrix(3, 2, vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap(), 1.0, "x")
            .unwrap();
        let err = Normalizer::fit(&flat).unwrap_err().to_string();
        assert!(err.contains("component 1"), "{err}");
    }

    #[test]
    fn standardized_training_split_moments() {
        let ts = series(200, 3);
        let n = Normalizer::fit(&ts).unwrap();
        let (mean, std) = n.apply(&ts).unwrap().moments();
        for c in 0..3 {
            assert!(mean[c].abs() < 1e-9);
            assert!((std[c] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn file_round_trip_is_lossless() {
        let ts = series(13, 3);
        let mut buf = Vec::new();
        ts.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(&format!("3 {} test\n", fmt_f64(0.3))), "{text}");
        let back = TimeSeries::read_from(&buf[..]).unwrap();
        assert_eq!(back, ts);
    }

    #[test]
    fn file_parse_errors_carry_line_numbers() {
        let bad = b"2 0.1 x\n1 2\n3\n";
        let err = TimeSeries::read_from(&bad[..]).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    proptest! {
        #[test]
        fn normalizer_round_trip(vals in prop::collection::vec(-1e3f64..1e3, 12..40)) {
            let rows = vals.len() / 2;
            let ts = TimeSeries::new(
                Array::matrix(rows, 2, vals[..rows * 2].to_vec()).unwrap(), 1.0, "p").unwrap();
            prop_assume!(ts.moments().1.iter().all(|s| *s > 1e-6));
            let n = Normalizer::fit(&ts).unwrap();
            let back = n.invert_array(&n.apply_array(ts.values()).unwrap()).unwrap();
            for (x, y) in back.data().iter().zip(ts.values().data()) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }

        #[test]
        fn normalizer_ignores_held_out_rows(
            vals in prop::collection::vec(-10f64..10.0, 60),
            noise in prop::collection::vec(-100f64..100.0, 20),
        ) {
            let base = TimeSeries::new(Array::matrix(60, 1, vals.clone()).unwrap(), 1.0, "p").unwrap();
            let mut perturbed = vals;
            for (v, e) in perturbed[40..].iter_mut().zip(&noise) {
                *v += e;
            }
            let pert = TimeSeries::new(Array::matrix(60, 1, perturbed).unwrap(), 1.0, "p").unwrap();
            let a = split_series(&base, [0.6, 0.2, 0.2], 1).unwrap();
            let b = split_series(&pert, [0.6, 0.2, 0.2], 1).unwrap();
            prop_assume!(a[0].moments().1[0] > 0.0);
            prop_assert_eq!(Normalizer::fit(&a[0]).unwrap(), Normalizer::fit(&b[0]).unwrap());
        }

        #[test]
        fn targets_align_with_source(t in 3usize..40, k in 1usize..5, l in 1usize..4) {
            prop_assume!(t >= k + l);
            let ts = series(t, 2);
            let ds = build_windows(&ts, k, l).unwrap();
            prop_assert_eq!(ds.len(), t - l - k + 1);
            for i in 0..ds.len() {
                prop_assert_eq!(ds.target(i), ts.row(ds.index_map()[i] + l));
                let last = &ds.window(i)[(k - 1) * 2..];
                prop_assert_eq!(last, ts.row(ds.index_map()[i]));
            }
        }
    }
}
