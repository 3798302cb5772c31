//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! The op set is small: elementwise arithmetic with suffix broadcasting,
//! matrix products, concatenation, a handful of pointwise nonlinearities,
//! reductions and row/column gathers. That is enough to express fully
//! connected networks and the ensemble scoring-rule estimators.
//!
//! ```
//! use scoregen::diff::{Array, Tape};
//!
//! let tape = Tape::new();
//! let w = tape.param(Array::vector(vec![1.0, 2.0, 3.0]));
//! let loss = w.mul(w).unwrap().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

pub(crate) mod array;
mod tape;

pub use array::Array;
pub use tape::{Gradients, Tape, Var};

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(x: &Array, step: f64, f: impl Fn(&Array) -> f64) -> Array {
    let mut grad = Array::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Largest elementwise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &Array, b: &Array, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
        let n = shape.iter().product();
        Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Checks the tape gradient of `build` against central differences.
    fn check(x: Array, build: impl for<'t> Fn(Var<'t>) -> Result<Var<'t>>) {
        let eval = |a: &Array| {
            let tape = Tape::new();
            let v = tape.constant(a.clone());
            build(v).unwrap().item()
        };
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let root = build(v).unwrap();
        let grads = tape.backward(root).unwrap();
        let analytic = grads.get_or_zeros(v);
        let numeric = finite_difference(&x, 1e-5, eval);
        let err = max_relative_error(&analytic, &numeric, 1e-3);
        assert!(err < 1e-4, "rel err {err}: {analytic:?} vs {numeric:?}");
    }

    #[test]
    fn norm_of_3_4() {
        let tape = Tape::new();
        let x = tape.param(Array::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        let n = x.norm_last().unwrap();
        assert_eq!(n.value().data(), &[5.0]);
        let g = tape.backward(n.sum()).unwrap();
        let g = g.get(x).unwrap();
        assert!((g.data()[0] - 0.6).abs() < 1e-15);
        assert!((g.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn exp_of_zero_is_one() {
        let tape = Tape::new();
        let x = tape.constant(Array::zeros(&[2, 3]));
        assert!(x.exp().value().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn abs_subgradient() {
        for (x, expected) in [(2.0, 1.0), (-2.0, -1.0), (0.0, 0.0)] {
            let tape = Tape::new();
            let v = tape.param(Array::scalar(x));
            let g = tape.backward(v.abs()).unwrap();
            assert_eq!(g.get(v).unwrap().data()[0], expected);
        }
    }

    #[test]
    fn sum_of_squares() {
        let tape = Tape::new();
        let w = tape.param(Array::vector(vec![1.0, 2.0, 3.0]));
        let root = w.mul(w).unwrap().sum();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn norm_at_zero_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(Array::matrix(1, 3, vec![0.0; 3]).unwrap());
        let root = x.norm_last().unwrap().sum();
        let g = tape.backward(root).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::new();
        let x = tape.param(Array::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Array::zeros(&[2, 3]));
        let b = tape.constant(Array::zeros(&[2, 2]));
        let msg = a.add(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
        assert!(a.matmul(a).is_err());
        assert!(Var::concat(&[a, b], 0).is_err());
    }

    #[test]
    fn constants_do_not_record() {
        let tape = Tape::new();
        let a = tape.constant(Array::vector(vec![1.0, 2.0]));
        let s = a.mul(a).unwrap().sum();
        assert!(!s.requires_grad());
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).is_none());
    }

    #[test]
    fn repeated_backward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let x = tape.param(random(&[4, 3], &mut rng));
        let w = tape.param(random(&[3, 2], &mut rng));
        let root = x.matmul(w).unwrap().leaky_relu(0.01).norm_last().unwrap().sum();
        let g1 = tape.backward(root).unwrap();
        let g2 = tape.backward(root).unwrap();
        assert_eq!(g1.get(x).unwrap(), g2.get(x).unwrap());
        assert_eq!(g1.get(w).unwrap(), g2.get(w).unwrap());
    }

    #[test]
    fn gradient_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = random(&[3, 4], &mut rng);
        let (a, b) = (0.7, -1.3);
        let grad_of = |which: u8| {
            let tape = Tape::new();
            let x = tape.param(x0.clone());
            let f = x.exp().sum();
            let g = x.abs().powf(1.5).sum();
            let root = match which {
                0 => f,
                1 => g,
                _ => f.scale(a).add(g.scale(b)).unwrap(),
            };
            tape.backward(root).unwrap().get_or_zeros(x)
        };
        let (gf, gg, gs) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..x0.len() {
            let lin = a * gf.data()[i] + b * gg.data()[i];
            assert!((lin - gs.data()[i]).abs() < 1e-12 * lin.abs().max(1.0));
        }
    }

    #[test]
    fn finite_differences_per_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let c = random(&[3, 4], &mut rng);
            let w = random(&[4, 2], &mut rng);
            let bias = random(&[4], &mut rng);

            check(random(&[3, 4], &mut rng), |x| Ok(x.exp().sum()));
            check(random(&[3, 4], &mut rng), |x| Ok(x.square().sum()));
            check(random(&[3, 4], &mut rng), |x| Ok(x.abs().offset(0.5).ln().sum()));
            check(random(&[3, 4], &mut rng), |x| Ok(x.abs().powf(0.7).mean()));
            check(random(&[3, 4], &mut rng), |x| Ok(x.leaky_relu(0.01).sum()));
            check(random(&[3, 4], &mut rng), |x| Ok(x.sigmoid().scale(3.0).sum()));
            check(random(&[3, 4], &mut rng), |x| Ok(x.clamp(-1.0, 1.0).sum()));
            check(random(&[3, 4], &mut rng), |x| {
                let c = x.tape().constant(c.clone());
                Ok(x.mul(c)?.sub(c)?.square().sum())
            });
            check(random(&[3, 4], &mut rng), |x| {
                let b = x.tape().constant(bias.clone());
                Ok(x.add(b)?.square().sum())
            });
            check(bias.clone(), |b| {
                let x = b.tape().constant(c.clone());
                Ok(x.mul(b)?.sum())
            });
            check(random(&[3, 4], &mut rng), |x| {
                let w = x.tape().constant(w.clone());
                Ok(x.matmul(w)?.square().sum())
            });
            check(w.clone(), |w| {
                let x = w.tape().constant(c.clone());
                Ok(x.matmul(w)?.leaky_relu(0.1).sum())
            });
            check(random(&[3, 4], &mut rng), |x| Ok(x.norm_last()?.sum()));
            check(random(&[3, 4], &mut rng), |x| Ok(x.sum_last()?.square().sum()));
            check(random(&[3, 4], &mut rng), |x| {
                Ok(x.select_rows(&[2, 0, 2])?.square().sum())
            });
            check(random(&[3, 4], &mut rng), |x| {
                Ok(x.select_cols(&[3, 1, 1])?.square().sum())
            });
            check(random(&[3, 4], &mut rng), |x| {
                let y = x.tape().constant(c.clone());
                Ok(Var::concat(&[x, y, x], 1)?.reshape(&[36])?.square().sum())
            });
            check(random(&[3, 4], &mut rng), |x| {
                Ok(Var::concat(&[x, x.exp()], 0)?.norm_last()?.sum())
            });
        }
    }

    #[test]
    fn two_layer_perceptron_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random(&[5, 3], &mut rng);
        let w1 = random(&[3, 6], &mut rng);
        let b1 = random(&[6], &mut rng);
        let w2 = random(&[6, 1], &mut rng);
        check(w1, |w1| {
            let t = w1.tape();
            let h = t
                .constant(x.clone())
                .matmul(w1)?
                .add(t.constant(b1.clone()))?
                .leaky_relu(0.01);
            Ok(h.matmul(t.constant(w2.clone()))?.sum())
        });
    }
}
