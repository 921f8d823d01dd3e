//! Test-only oracles: direct-loop reference networks and a generic
//! finite-difference gradient harness.
#![allow(dead_code)]

pub mod reference;
pub mod suites;

use cyclegan::gradcheck::{central_difference, max_relative_error, DEFAULT_STEP};
use cyclegan::{Rng, Result, Tape, Tensor, Var};

pub fn random_tensor(dims: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| rng.uniform() * 2.0 - 1.0)
}

/// Random values with magnitude in [0.2, 1], away from ReLU/L1 kinks.
pub fn away_from_zero(dims: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| {
        let mag = 0.2 + 0.8 * rng.uniform();
        if rng.uniform() < 0.5 { -mag } else { mag }
    })
}

/// Builds `loss = build(inputs)` on a fresh f64 tape (test mode) and
/// compares its analytic gradient w.r.t. every input against central
/// differences. Returns the worst relative error.
pub fn grad_check(
    inputs: &[Tensor<f64>],
    floor: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new().with_finite_checks(true);
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &vars).expect("forward");
        tape.value(loss).item().unwrap()
    };

    let mut tape = Tape::new().with_finite_checks(true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars).expect("forward");
    let grads = tape.backward(loss).expect("backward");

    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut values = inputs.to_vec();
        let mut x = values[i].data().to_vec();
        let numeric = central_difference(&mut x, DEFAULT_STEP, None, |x| {
            values[i] = Tensor::new(inputs[i].dims(), x.to_vec()).unwrap();
            eval(&values)
        });
        worst = worst.max(max_relative_error(&analytic, &numeric, floor));
    }
    worst
}
