//! Shared helpers for integration tests: seeded tensors and an independent
//! central-finite-difference gradient oracle.

#![allow(dead_code)]

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vsr_core::diffops::{Tape, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_simple_fn(dim, || rng.random::<f64>() * 2.0 - 1.0)
}

pub fn rand_tensor_f32(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f32> {
    Array4::from_shape_simple_fn(dim, || (rng.random::<f64>() * 2.0 - 1.0) as f32)
}

/// Checks the tape gradient of every leaf against central finite
/// differences with step `1e-5`, at 64-bit precision.
///
/// `build` must register one leaf per entry of `inits` (in order, all with
/// gradients enabled) and return the scalar root. The check never reads the
/// tape's backward machinery for the reference values: it re-evaluates the
/// forward function at perturbed inputs.
pub fn check_gradients(
    inits: &[Array4<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    max_rel_err: f64,
) {
    let h = 1e-5;

    let eval = |values: &[Array4<f64>]| -> f64 {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let root = build(&mut tape, &vars);
        tape.scalar_value(root)
    };

    // Analytic gradients from one taped backward pass.
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inits.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let root = build(&mut tape, &vars);
    tape.backward(root).expect("backward");
    let analytic: Vec<Array4<f64>> = vars
        .iter()
        .zip(inits.iter())
        .map(|(v, init)| {
            tape.grad(*v)
                .cloned()
                .unwrap_or_else(|| Array4::zeros(init.dim()))
        })
        .collect();

    for (li, init) in inits.iter().enumerate() {
        let dim = init.dim();
        for idx in ndarray::indices(dim) {
            let mut plus = inits.to_vec();
            plus[li][idx] += h;
            let mut minus = inits.to_vec();
            minus[li][idx] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[li][idx];
            let denom = a.abs().max(fd.abs()).max(1e-4);
            let rel = (a - fd).abs() / denom;
            assert!(
                rel <= max_rel_err,
                "leaf {li} element {:?}: analytic {a} vs fd {fd} (rel {rel:.3e})",
                idx
            );
        }
    }
}
