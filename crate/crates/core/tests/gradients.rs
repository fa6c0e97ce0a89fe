//! Tape gradients against central differences, op by op and end to end.

mod support;

use mdcgan::tensor::gradcheck::finite_diff_check_with;
use mdcgan::tensor::{finite_diff_check, CheckOptions, ConvGeometry, Graph};
use mdcgan::train::GeneratorLoss;
use support::*;

#[test]
fn every_op_matches_central_differences_f64() {
    let failures: Vec<String> = op_errors_f64()
        .into_iter()
        .filter(|(_, e)| !(*e <= TOL_F64))
        .map(|(n, e)| format!("{n}: {e:.3e}"))
        .collect();
    assert!(failures.is_empty(), "ops over tolerance {TOL_F64}: {failures:?}");
}

#[test]
fn every_op_matches_central_differences_f32() {
    let failures: Vec<String> = op_errors_f32()
        .into_iter()
        .filter(|(_, e)| !(*e <= TOL_F32))
        .map(|(n, e)| format!("{n}: {e:.3e}"))
        .collect();
    assert!(failures.is_empty(), "ops over tolerance {TOL_F32}: {failures:?}");
}

#[test]
fn op_list_covers_the_tape() {
    let names: Vec<&str> = op_cases::<f64>().iter().map(|c| c.0.split('/').next().unwrap()).collect();
    for op in [
        "add",
        "sub",
        "mul",
        "neg",
        "scale",
        "add_scalar",
        "reshape",
        "sum",
        "mean",
        "relu",
        "leaky_relu",
        "tanh",
        "sigmoid",
        "linear",
        "conv2d",
        "conv_transpose2d",
        "batch_norm2d",
        "channel_mask",
        "bce",
        "bce_with_logits",
    ] {
        assert!(names.contains(&op), "no gradient case for {op}");
    }
}

#[test]
fn transposed_conv_is_the_input_gradient_of_conv() {
    // For y = conv(x, w), dL/dx with upstream u equals conv_transpose(u, w).
    for (k, s, p, h) in [(4, 2, 1, 8), (3, 1, 1, 5), (4, 1, 0, 7), (3, 2, 0, 9)] {
        let geo = ConvGeometry::new(k, s, p);
        let x = rand_tensor::<f64>(&[2, 3, h, h], -1.0, 1.0, 70).with_requires_grad(true);
        let w = rand_tensor::<f64>(&[4, 3, k, k], -1.0, 1.0, 71);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let wv = g.constant(w.clone());
        let y = g.conv2d(xv, wv, None, geo).unwrap();
        let u = rand_tensor::<f64>(g.value(y).shape(), -1.0, 1.0, 72);
        let uv = g.constant(u.clone());
        let prod = g.mul(y, uv).unwrap();
        let loss = g.sum(prod);
        let dx = g.backward(loss).unwrap().tensor(xv).unwrap();

        let mut g2 = Graph::new();
        let uv = g2.constant(u);
        let wv = g2.constant(w);
        let t = g2.conv_transpose2d(uv, wv, None, geo).unwrap();
        let t = g2.value(t);
        assert_eq!(t.shape(), dx.shape(), "k={k} s={s} p={p}");
        let worst = t
            .data()
            .iter()
            .zip(dx.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-12, "k={k} s={s} p={p}: {worst}");
    }
}

#[test]
fn gradcheck_flags_a_wrong_gradient() {
    // A function whose tape gradient is deliberately inconsistent with its value.
    let x = rand_tensor::<f64>(&[4], 0.5, 1.0, 80);
    let err = finite_diff_check(
        |g, v| {
            let detached = g.value(v).clone();
            let c = g.constant(detached);
            let sq = g.mul(v, c)?; // value x^2, tape gradient x instead of 2x
            Ok(g.sum(sq))
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err > 0.3, "{err}");
}

#[test]
fn model_loss_gradients_scale8_f64() {
    for r in end_to_end_f64() {
        assert!(r.error <= TOL_F64, "{}: {:.3e} at {}", r.label, r.error, r.at);
    }
}

#[test]
fn model_loss_gradients_scale8_f32() {
    for r in end_to_end_f32() {
        assert!(r.error <= TOL_F32, "{}: {:.3e} at {}", r.label, r.error, r.at);
    }
}

#[test]
fn generator_step_leaves_discriminator_gradients_empty() {
    let mut e2e = EndToEnd::<f64>::new();
    e2e.disc.zero_grad();
    e2e.g_loss(GeneratorLoss::NonSaturating, true);
    assert!(e2e.disc.parameters().all(|(_, t)| t.grad().is_none()));
}

#[test]
fn checker_with_coordinate_cap_uses_largest_entries() {
    let x = rand_tensor::<f64>(&[10], -1.0, 1.0, 95);
    let err = finite_diff_check_with(
        |g, v| {
            let c = g.mul(v, v)?;
            let c = g.mul(c, v)?;
            Ok(g.sum(c))
        },
        &x,
        &CheckOptions::f64().with_max_coords(3),
    )
    .unwrap();
    assert!(err < TOL_F64);
}

