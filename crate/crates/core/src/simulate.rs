//! Lorenz63 and two-scale Lorenz96 simulators with fixed-step integrators.

use serde::{Deserialize, Serialize};

use crate::dataset::TimeSeries;
use crate::diff::Array;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    Rk4,
}

/// Integration and recording schedule shared by both systems. Times are in
/// model time units; `duration` is the total integration time including the
/// burn-in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub dt: f64,
    pub record_every: f64,
    pub burn_in: f64,
    pub duration: f64,
}

impl Schedule {
    fn steps(&self) -> Result<(u64, u64, u64)> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.burn_in >= 0.0 && self.duration > self.burn_in) {
            return Err(Error::invalid(format!(
                "need duration > burn_in >= 0, got duration {} and burn_in {}",
                self.duration, self.burn_in
            )));
        }
        let ratio = self.record_every / self.dt;
        if !(ratio >= 1.0) || (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::invalid(format!(
                "record_every {} must be a positive integer multiple of dt {}",
                self.record_every, self.dt
            )));
        }
        let per_record = ratio.round() as u64;
        let burn = (self.burn_in / self.dt).round() as u64;
        let total = (self.duration / self.dt).round() as u64;
        Ok((per_record, burn, total))
    }

    /// Number of rows [`simulate`] records.
    pub fn record_count(&self) -> Result<usize> {
        let (per, burn, total) = self.steps()?;
        Ok(((total - burn) / per) as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lorenz63Params {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub init: [f64; 3],
}

impl Default for Lorenz63Params {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 2.667,
            init: [0.0, 1.0, 1.05],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lorenz96Params {
    /// Number of slow variables.
    pub k: usize,
    /// Fast variables per slow variable.
    pub j: usize,
    pub h: f64,
    pub b: f64,
    pub c: f64,
    pub f: f64,
    /// Slow state followed by the `k * j` fast state.
    pub init: Vec<f64>,
}

impl Default for Lorenz96Params {
    fn default() -> Self {
        let (k, j) = (8, 32);
        let mut init = vec![0.0; k + k * j];
        init[0] = 1.0;
        init[k] = 1.0;
        Self {
            k,
            j,
            h: 1.0,
            b: 10.0,
            c: 10.0,
            f: 20.0,
            init,
        }
    }
}

impl Lorenz96Params {
    pub fn state_len(&self) -> usize {
        self.k + self.k * self.j
    }

    fn validate(&self) -> Result<()> {
        if self.k < 4 || self.j < 1 {
            return Err(Error::invalid(format!(
                "Lorenz96 needs K >= 4 and J >= 1, got K={} J={}",
                self.k, self.j
            )));
        }
        if self.init.len() != self.state_len() {
            return Err(Error::invalid(format!(
                "Lorenz96 initial state has {} entries, expected K + K*J = {}",
                self.init.len(),
                self.state_len()
            )));
        }
        Ok(())
    }
}

/// `(σ(y − x), x(ρ − z) − y, xy − βz)`.
pub fn lorenz63_drift(s: &[f64; 3], p: &Lorenz63Params) -> [f64; 3] {
    let [x, y, z] = *s;
    [p.sigma * (y - x), x * (p.rho - z) - y, x * y - p.beta * z]
}

/// Two-scale Lorenz96 drift. Slow variables and fast variables are each
/// indexed cyclically within their own block.
pub fn lorenz96_drift(state: &[f64], p: &Lorenz96Params) -> Result<Vec<f64>> {
    if state.len() != p.state_len() {
        return Err(Error::shape("lorenz96 state", &[p.state_len()], &[state.len()]));
    }
    let mut out = vec![0.0; state.len()];
    lorenz96_drift_into(state, p, &mut out);
    Ok(out)
}

fn lorenz96_drift_into(state: &[f64], p: &Lorenz96Params, out: &mut [f64]) {
    let (k, j) = (p.k, p.j);
    let nf = k * j;
    let (x, y) = state.split_at(k);
    let (dx, dy) = out.split_at_mut(k);
    let coupling = p.h * p.c / p.b;
    for i in 0..k {
        let xm1 = x[(i + k - 1) % k];
        let xm2 = x[(i + k - 2) % k];
        let xp1 = x[(i + 1) % k];
        let fast: f64 = y[i * j..(i + 1) * j].iter().sum();
        dx[i] = -xm1 * (xm2 - xp1) - x[i] + p.f - coupling * fast;
    }
    let cb = p.c * p.b;
    for q in 0..nf {
        let yp1 = y[(q + 1) % nf];
        let yp2 = y[(q + 2) % nf];
        let ym1 = y[(q + nf - 1) % nf];
        dy[q] = -cb * yp1 * (yp2 - ym1) - p.c * y[q] + coupling * x[q / j];
    }
}

/// `s + dt · f(s)`.
pub fn euler_step(state: &[f64], drift: impl Fn(&[f64], &mut [f64]), dt: f64) -> Vec<f64> {
    let mut stepper = Stepper::new(state.len());
    let mut s = state.to_vec();
    stepper.euler(&mut s, &drift, dt);
    s
}

/// Classical four-stage Runge–Kutta step.
pub fn rk4_step(state: &[f64], drift: impl Fn(&[f64], &mut [f64]), dt: f64) -> Vec<f64> {
    let mut stepper = Stepper::new(state.len());
    let mut s = state.to_vec();
    stepper.rk4(&mut s, &drift, dt);
    s
}

/// Scratch buffers for in-place stepping.
struct Stepper {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Stepper {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    fn euler(&mut self, s: &mut [f64], f: &impl Fn(&[f64], &mut [f64]), dt: f64) {
        f(s, &mut self.k1);
        for (v, d) in s.iter_mut().zip(&self.k1) {
            *v += dt * d;
        }
    }

    fn rk4(&mut self, s: &mut [f64], f: &impl Fn(&[f64], &mut [f64]), dt: f64) {
        let half = 0.5 * dt;
        f(s, &mut self.k1);
        for i in 0..s.len() {
            self.tmp[i] = s[i] + half * self.k1[i];
        }
        f(&self.tmp, &mut self.k2);
        for i in 0..s.len() {
            self.tmp[i] = s[i] + half * self.k2[i];
        }
        f(&self.tmp, &mut self.k3);
        for i in 0..s.len() {
            self.tmp[i] = s[i] + dt * self.k3[i];
        }
        f(&self.tmp, &mut self.k4);
        let sixth = dt / 6.0;
        for i in 0..s.len() {
            s[i] += sixth * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }

    fn step(&mut self, scheme: Scheme, s: &mut [f64], f: &impl Fn(&[f64], &mut [f64]), dt: f64) {
        match scheme {
            Scheme::Euler => self.euler(s, f, dt),
            Scheme::Rk4 => self.rk4(s, f, dt),
        }
    }
}

/// Integrates `drift` from `init` and records the `select`ed components.
///
/// Recording uses the `record_every` grid anchored at t = 0: the first row is
/// the first grid state at or after `burn_in`, and
/// `floor((duration − burn_in) / record_every)` rows are kept.
pub fn integrate(
    init: &[f64],
    drift: impl Fn(&[f64], &mut [f64]),
    schedule: &Schedule,
    scheme: Scheme,
    select: &[usize],
    origin: &str,
) -> Result<TimeSeries> {
    let (per, burn, _) = schedule.steps()?;
    let rows = schedule.record_count()?;
    if rows == 0 {
        return Err(Error::InsufficientData("schedule records zero rows".into()));
    }
    if select.is_empty() {
        return Err(Error::invalid("no components selected for recording"));
    }
    if let Some(&bad) = select.iter().find(|&&c| c >= init.len()) {
        return Err(Error::invalid(format!(
            "component {bad} out of range for a {}-dimensional state",
            init.len()
        )));
    }
    let first = burn.div_ceil(per) * per;
    let last = first + (rows as u64 - 1) * per;
    let mut state = init.to_vec();
    let mut stepper = Stepper::new(state.len());
    let mut data = Vec::with_capacity(rows * select.len());
    let mut step: u64 = 0;
    loop {
        if step >= first && (step - first) % per == 0 {
            data.extend(select.iter().map(|&c| state[c]));
            if step == last {
                break;
            }
        }
        stepper.step(scheme, &mut state, &drift, schedule.dt);
        step += 1;
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite state after integration step {step}"
            )));
        }
    }
    TimeSeries::new(
        Array::matrix(rows, select.len(), data)?,
        schedule.record_every,
        origin,
    )
}

pub fn simulate_lorenz63(
    params: &Lorenz63Params,
    schedule: &Schedule,
    scheme: Scheme,
    select: &[usize],
    origin: &str,
) -> Result<TimeSeries> {
    let drift = |s: &[f64], out: &mut [f64]| {
        out.copy_from_slice(&lorenz63_drift(&[s[0], s[1], s[2]], params));
    };
    integrate(&params.init, drift, schedule, scheme, select, origin)
}

pub fn simulate_lorenz96(
    params: &Lorenz96Params,
    schedule: &Schedule,
    scheme: Scheme,
    select: &[usize],
    origin: &str,
) -> Result<TimeSeries> {
    params.validate()?;
    let drift = |s: &[f64], out: &mut [f64]| lorenz96_drift_into(s, params, out);
    integrate(&params.init, drift, schedule, scheme, select, origin)
}

/// A fully specified simulation: system, schedule, scheme and recorded components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "system", rename_all = "snake_case")]
pub enum Simulation {
    Lorenz63 {
        params: Lorenz63Params,
        schedule: Schedule,
        scheme: Scheme,
        select: Vec<usize>,
    },
    Lorenz96 {
        params: Lorenz96Params,
        schedule: Schedule,
        scheme: Scheme,
        select: Vec<usize>,
    },
}

pub const LORENZ63_PRESET: &str = "lorenz63-paper";
pub const LORENZ96_PRESET: &str = "lorenz96-paper";

impl Simulation {
    /// Euler with dt 0.01 from (0, 1, 1.05); 10 units of burn-in followed by
    /// 9000 recorded units; only `y` is kept, every 0.3 units.
    pub fn lorenz63_paper() -> Self {
        Simulation::Lorenz63 {
            params: Lorenz63Params::default(),
            schedule: Schedule {
                dt: 0.01,
                record_every: 0.3,
                burn_in: 10.0,
                duration: 10.0 + 9000.0,
            },
            scheme: Scheme::Euler,
            select: vec![1],
        }
    }

    /// RK4 with dt 0.001, K = 8, J = 32; 2 units of burn-in followed by
    /// `recorded_units` (4000 for the full run); slow variables every 0.2.
    pub fn lorenz96_paper(recorded_units: f64) -> Self {
        let params = Lorenz96Params::default();
        let k = params.k;
        Simulation::Lorenz96 {
            params,
            schedule: Schedule {
                dt: 0.001,
                record_every: 0.2,
                burn_in: 2.0,
                duration: 2.0 + recorded_units,
            },
            scheme: Scheme::Rk4,
            select: (0..k).collect(),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            LORENZ63_PRESET => Some(Self::lorenz63_paper()),
            LORENZ96_PRESET => Some(Self::lorenz96_paper(4000.0)),
            _ => None,
        }
    }

    pub fn schedule(&self) -> &Schedule {
        match self {
            Simulation::Lorenz63 { schedule, .. } | Simulation::Lorenz96 { schedule, .. } => schedule,
        }
    }

    pub fn schedule_mut(&mut self) -> &mut Schedule {
        match self {
            Simulation::Lorenz63 { schedule, .. } | Simulation::Lorenz96 { schedule, .. } => schedule,
        }
    }

    pub fn run(&self, origin: &str) -> Result<TimeSeries> {
        match self {
            Simulation::Lorenz63 { params, schedule, scheme, select } => {
                simulate_lorenz63(params, schedule, *scheme, select, origin)
            }
            Simulation::Lorenz96 { params, schedule, scheme, select } => {
                simulate_lorenz96(params, schedule, *scheme, select, origin)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lorenz63_drift_examples() {
        let p = Lorenz63Params::default();
        assert_eq!(lorenz63_drift(&[0.0, 0.0, 0.0], &p), [0.0, 0.0, 0.0]);

        let q = (p.beta * (p.rho - 1.0)).sqrt();
        let d = lorenz63_drift(&[q, q, p.rho - 1.0], &p);
        assert!(d.iter().all(|v| v.abs() < 1e-9), "{d:?}");

        assert_eq!(lorenz63_drift(&[0.0, 1.0, 1.05], &p)[0], 10.0);
    }

    #[test]
    fn lorenz96_drift_examples() {
        let mut p = Lorenz96Params { h: 0.0, ..Default::default() };
        let mut s = vec![0.0; p.state_len()];
        s[..p.k].fill(p.f);
        let d = lorenz96_drift(&s, &p).unwrap();
        assert!(d[..p.k].iter().all(|v| *v == 0.0));

        p.h = 1.0;
        let zero = vec![0.0; p.state_len()];
        let d = lorenz96_drift(&zero, &p).unwrap();
        assert!(d[..p.k].iter().all(|v| *v == p.f));
        assert!(d[p.k..].iter().all(|v| *v == 0.0));

        assert!(lorenz96_drift(&zero[1..], &p).is_err());
    }

    #[test]
    fn lorenz96_default_constants_match_specialized_equations() {
        let p = Lorenz96Params::default();
        assert_eq!(p.c * p.b, 100.0);
        assert_eq!(p.c, 10.0);
        assert_eq!(p.h * p.c / p.b, 1.0);
        assert_eq!(p.f, 20.0);

        // one fast variable perturbed: dy_j = -100 y_{j+1}(y_{j+2} - y_{j-1}) - 10 y_j + x_k
        let mut s = vec![0.0; p.state_len()];
        let (k, nf) = (p.k, p.k * p.j);
        for (q, v) in s[k..].iter_mut().enumerate() {
            *v = (q as f64 * 0.37).sin();
        }
        for (i, v) in s[..k].iter_mut().enumerate() {
            *v = i as f64 - 3.0;
        }
        let d = lorenz96_drift(&s, &p).unwrap();
        let y = &s[k..];
        for q in [0, 5, 31, 32, 255] {
            let expect = -100.0 * y[(q + 1) % nf] * (y[(q + 2) % nf] - y[(q + nf - 1) % nf])
                - 10.0 * y[q]
                + s[q / p.j];
            assert!((d[k + q] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn steps_preserve_fixed_points() {
        let zero = |_: &[f64], out: &mut [f64]| out.fill(0.0);
        let s = [1.5, -2.0];
        assert_eq!(euler_step(&s, zero, 0.1), s);
        assert_eq!(rk4_step(&s, zero, 0.1), s);
    }

    #[test]
    fn exponential_oracle() {
        let f = |s: &[f64], out: &mut [f64]| out[0] = s[0];
        assert!((euler_step(&[1.0], f, 0.1)[0] - 1.1).abs() < 1e-15);
        let r = rk4_step(&[1.0], f, 0.1)[0];
        let taylor4 = 1.0 + 0.1 + 0.01 / 2.0 + 0.001 / 6.0 + 0.0001 / 24.0;
        assert!((r - taylor4).abs() < 1e-15, "{r}");
        // local truncation error is about dt^5 / 120
        assert!((r - 0.1f64.exp()).abs() < 1e-7, "{r}");
    }

    #[test]
    fn rk4_local_error_order() {
        let f = |s: &[f64], out: &mut [f64]| out[0] = s[0];
        let err = |dt: f64| (rk4_step(&[1.0], f, dt)[0] - dt.exp()).abs();
        let ratio = err(0.2) / err(0.1);
        assert!((ratio - 32.0).abs() < 3.0, "ratio {ratio}");
    }

    #[test]
    fn record_counts() {
        let mut sched = Schedule { dt: 0.01, record_every: 0.3, burn_in: 10.0, duration: 9000.0 };
        assert_eq!(sched.record_count().unwrap(), 29_966);
        sched.duration = 9010.0;
        assert_eq!(sched.record_count().unwrap(), 30_000);

        let l96 = Schedule { dt: 0.001, record_every: 0.2, burn_in: 2.0, duration: 4000.0 };
        assert_eq!(l96.record_count().unwrap(), 19_990);
        assert_eq!(Simulation::lorenz96_paper(4000.0).schedule().record_count().unwrap(), 20_000);

        let bad = Schedule { dt: 0.01, record_every: 0.305, burn_in: 0.0, duration: 1.0 };
        assert!(bad.record_count().is_err());
        let bad = Schedule { dt: 0.01, record_every: 0.3, burn_in: 5.0, duration: 5.0 };
        assert!(bad.record_count().is_err());
    }

    #[test]
    fn recording_grid_anchor() {
        // f = 1 so the state equals elapsed time
        let one = |_: &[f64], out: &mut [f64]| out[0] = 1.0;
        let sched = Schedule { dt: 0.1, record_every: 0.3, burn_in: 1.0, duration: 2.5 };
        let ts = integrate(&[0.0], one, &sched, Scheme::Euler, &[0], "t").unwrap();
        assert_eq!(ts.len(), 5);
        let got: Vec<f64> = ts.values().data().to_vec();
        for (g, e) in got.iter().zip([1.2, 1.5, 1.8, 2.1, 2.4]) {
            assert!((g - e).abs() < 1e-9, "{got:?}");
        }
    }

    #[test]
    fn divergence_reports_step() {
        let blow = |s: &[f64], out: &mut [f64]| out[0] = s[0] * s[0];
        let sched = Schedule { dt: 0.5, record_every: 0.5, burn_in: 0.0, duration: 100.0 };
        let err = integrate(&[10.0], blow, &sched, Scheme::Euler, &[0], "x").unwrap_err();
        assert!(matches!(err, Error::Numerical(ref m) if m.contains("step")), "{err}");
    }

    #[test]
    fn short_lorenz63_run_is_deterministic_and_bounded() {
        let mut sim = Simulation::lorenz63_paper();
        sim.schedule_mut().duration = 310.0;
        let a = sim.run("l63").unwrap();
        let b = sim.run("l63").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1000);
        assert!(a.values().data().iter().all(|v| v.abs() < 100.0));
    }
}
