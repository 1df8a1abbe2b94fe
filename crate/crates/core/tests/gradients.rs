//! Finite-difference verification of every differentiable operator, at
//! 64-bit precision: analytic tape gradients against central differences.

mod common;

use common::{check_gradients, rand_tensor, rng};
use vsr_core::diffops::Padding;

#[test]
fn conv2d_gradients_all_inputs() {
    // Three random shape configurations per the gradient-correctness rule.
    let shapes = [
        ((1, 2, 4, 4), (3, 2, 3, 3)),
        ((2, 1, 5, 3), (2, 1, 3, 3)),
        ((1, 3, 3, 3), (1, 3, 5, 5)),
    ];
    for (si, (xdim, wdim)) in shapes.iter().enumerate() {
        for pad in [Padding::Zero, Padding::Circular] {
            let mut r = rng(100 + si as u64);
            let x = rand_tensor(&mut r, *xdim);
            let w = rand_tensor(&mut r, *wdim);
            let b = rand_tensor(&mut r, (1, wdim.0, 1, 1));
            let t = rand_tensor(&mut r, (xdim.0, wdim.0, xdim.2, xdim.3));
            check_gradients(
                &[x, w, b],
                |tape, vars| {
                    let y = tape.conv2d(vars[0], vars[1], Some(vars[2]), pad).unwrap();
                    let target = tape.leaf(t.clone(), false);
                    tape.mse_loss(y, target).unwrap()
                },
                1e-4,
            );
        }
    }
}

#[test]
fn conv2d_transpose_gradients() {
    for pad in [Padding::Zero, Padding::Circular] {
        let mut r = rng(200);
        let y = rand_tensor(&mut r, (1, 3, 4, 4));
        let w = rand_tensor(&mut r, (3, 2, 3, 3));
        check_gradients(
            &[y, w],
            |tape, vars| {
                let x = tape.conv2d_transpose(vars[0], vars[1], pad).unwrap();
                let zero = tape.leaf(ndarray::Array4::zeros((1, 2, 4, 4)), false);
                tape.mse_loss(x, zero).unwrap()
            },
            1e-4,
        );
    }
}

#[test]
fn relu_gradients() {
    for seed in [300, 301, 302] {
        let mut r = rng(seed);
        let x = rand_tensor(&mut r, (1, 2, 4, 3));
        check_gradients(
            &[x],
            |tape, vars| {
                let y = tape.relu(vars[0]);
                tape.sum(y)
            },
            1e-4,
        );
    }
}

#[test]
fn pixel_shuffle_gradients() {
    for (seed, s) in [(400u64, 2usize), (401, 3), (402, 1)] {
        let mut r = rng(seed);
        let x = rand_tensor(&mut r, (1, 2 * s * s, 3, 3));
        let t = rand_tensor(&mut r, (1, 2, 3 * s, 3 * s));
        check_gradients(
            &[x],
            |tape, vars| {
                let y = tape.pixel_shuffle(vars[0], s).unwrap();
                let target = tape.leaf(t.clone(), false);
                tape.mse_loss(y, target).unwrap()
            },
            1e-4,
        );
    }
}

#[test]
fn pixel_unshuffle_gradients() {
    let mut r = rng(450);
    let x = rand_tensor(&mut r, (1, 1, 6, 6));
    let t = rand_tensor(&mut r, (1, 4, 3, 3));
    check_gradients(
        &[x],
        |tape, vars| {
            let y = tape.pixel_unshuffle(vars[0], 2).unwrap();
            let target = tape.leaf(t.clone(), false);
            tape.mse_loss(y, target).unwrap()
        },
        1e-4,
    );
}

#[test]
fn concat_add_scale_gradients() {
    let mut r = rng(500);
    let a = rand_tensor(&mut r, (1, 2, 3, 3));
    let b = rand_tensor(&mut r, (1, 3, 3, 3));
    let t = rand_tensor(&mut r, (1, 5, 3, 3));
    check_gradients(
        &[a, b],
        |tape, vars| {
            let cat = tape.concat_channels(&[vars[0], vars[1]]).unwrap();
            let scaled = tape.scale(cat, 1.7);
            let target = tape.leaf(t.clone(), false);
            tape.mse_loss(scaled, target).unwrap()
        },
        1e-4,
    );
}

#[test]
fn luma_and_repeat_gradients() {
    let mut r = rng(600);
    let x = rand_tensor(&mut r, (1, 3, 3, 3));
    let t = rand_tensor(&mut r, (1, 4, 3, 3));
    check_gradients(
        &[x],
        |tape, vars| {
            let y = tape.luma(vars[0]).unwrap();
            let rep = tape.repeat_channels(y, 4);
            let target = tape.leaf(t.clone(), false);
            tape.mse_loss(rep, target).unwrap()
        },
        1e-4,
    );
}

#[test]
fn pick_pixel_abs_gradients() {
    let mut r = rng(700);
    let x = rand_tensor(&mut r, (1, 2, 3, 3));
    check_gradients(
        &[x],
        |tape, vars| {
            let p = tape.pick_pixel(vars[0], 0, 1, 2, 0).unwrap();
            tape.abs(p)
        },
        1e-4,
    );
}

#[test]
fn chained_conv_relu_shuffle_gradients() {
    // A small composite mirroring one network stage.
    let mut r = rng(800);
    let x = rand_tensor(&mut r, (1, 2, 4, 4));
    let w1 = rand_tensor(&mut r, (4, 2, 3, 3));
    let b1 = rand_tensor(&mut r, (1, 4, 1, 1));
    let t = rand_tensor(&mut r, (1, 1, 8, 8));
    check_gradients(
        &[x, w1, b1],
        |tape, vars| {
            let c = tape
                .conv2d(vars[0], vars[1], Some(vars[2]), Padding::Zero)
                .unwrap();
            let a = tape.relu(c);
            let y = tape.pixel_shuffle(a, 2).unwrap();
            let target = tape.leaf(t.clone(), false);
            tape.mse_loss(y, target).unwrap()
        },
        1e-4,
    );
}
