use scoregen::simulate::*;

fn empirical_rk4_order() -> f64 {
    let f = |s: &[f64], out: &mut [f64]| out[0] = s[0];
    let err = |dt: f64| (rk4_step(&[1.0], f, dt)[0] - dt.exp()).abs();
    let dts = [0.2, 0.1, 0.05, 0.025];
    let xs: Vec<f64> = dts.iter().map(|d: &f64| d.ln()).collect();
    let ys: Vec<f64> = dts.iter().map(|&d| err(d).ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 4.0, ys.iter().sum::<f64>() / 4.0);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    // one-step error is O(dt^5); the global order is one less
    cov / var - 1.0
}

#[test]
fn rk4_empirical_order() {
    let order = empirical_rk4_order();
    assert!(order >= 3.8, "{order}");
}

#[test]
fn lorenz96_rotation_equivariance_is_exact() {
    let p = Lorenz96Params::default();
    let (k, j) = (p.k, p.j);
    let mut init = vec![0.0; p.state_len()];
    for (i, v) in init.iter_mut().enumerate() {
        *v = ((i * 7919) % 23) as f64 / 23.0 - 0.5;
    }
    let mut rotated = vec![0.0; init.len()];
    for i in 0..k {
        rotated[(i + 1) % k] = init[i];
    }
    for q in 0..k * j {
        rotated[k + (q + j) % (k * j)] = init[k + q];
    }
    let sched = Schedule { dt: 0.001, record_every: 0.01, burn_in: 0.0, duration: 0.5 };
    let all: Vec<usize> = (0..p.state_len()).collect();
    let a = simulate_lorenz96(&Lorenz96Params { init, ..p.clone() }, &sched, Scheme::Rk4, &all, "a").unwrap();
    let b = simulate_lorenz96(&Lorenz96Params { init: rotated, ..p.clone() }, &sched, Scheme::Rk4, &all, "b").unwrap();
    for t in 0..a.len() {
        let (ra, rb) = (a.row(t), b.row(t));
        for i in 0..k {
            assert_eq!(rb[(i + 1) % k], ra[i]);
        }
        for q in 0..k * j {
            assert_eq!(rb[k + (q + j) % (k * j)], ra[k + q]);
        }
    }
}

#[test]
fn lorenz63_preset_is_bounded_and_has_expected_length() {
    let Simulation::Lorenz63 { params, schedule, scheme, .. } = Simulation::lorenz63_paper() else {
        unreachable!()
    };
    let ts = simulate_lorenz63(&params, &schedule, scheme, &[0, 1, 2], "full").unwrap();
    assert_eq!(ts.len(), 30_000);
    assert!(ts.values().data().iter().all(|v| v.abs() < 100.0));
    let y = Simulation::lorenz63_paper().run("y").unwrap();
    assert_eq!(y.dim(), 1);
    for t in [0, 17, 29_999] {
        assert_eq!(y.row(t)[0], ts.row(t)[1]);
    }
}

#[test]
fn lorenz96_short_run_records_slow_variables() {
    let ts = Simulation::lorenz96_paper(20.0).run("l96").unwrap();
    assert_eq!(ts.len(), 100);
    assert_eq!(ts.dim(), 8);
    assert_eq!(ts.dt_record(), 0.2);
    assert!(ts.values().all_finite());
    assert_eq!(ts, Simulation::lorenz96_paper(20.0).run("l96").unwrap());
}

#[test]
fn preset_lookup() {
    assert_eq!(Simulation::preset(LORENZ63_PRESET), Some(Simulation::lorenz63_paper()));
    assert!(Simulation::preset("nope").is_none());
    let bad = Lorenz96Params { k: 3, j: 1, init: vec![0.0; 6], ..Default::default() };
    let sched = Schedule { dt: 0.01, record_every: 0.01, burn_in: 0.0, duration: 1.0 };
    assert!(simulate_lorenz96(&bad, &sched, Scheme::Rk4, &[0], "x").is_err());
}
