//! Central finite differences (h = 1e-3, evaluated on the f64 shadow
//! implementations in the parent module) against the tape's analytic
//! gradients.

use super::*;
use condadapt_core::{Activation, Result, Rng, Tape, Tensor, Var};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
pub const INSTANCES: u64 = 10;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
type Shadow = Box<dyn Fn(&[Vec<f64>]) -> f64>;

pub struct Check {
    inputs: Vec<Tensor>,
    build: Build,
    shadow: Shadow,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Worst relative error over all inputs of one instance.
fn relative_error(check: &Check) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = check.inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = (check.build)(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();

    let base: Vec<Vec<f64>> = check.inputs.iter().map(to64).collect();
    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let analytic = to64(&grads.wrt(*var));
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = base.clone();
            plus[i][j] += STEP;
            let mut minus = base.clone();
            minus[i][j] -= STEP;
            *slot = ((check.shadow)(&plus) - (check.shadow)(&minus)) / (2.0 * STEP);
        }
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&analytic).max(norm(&numeric)).max(1e-8);
        worst = worst.max(norm(&diff) / scale);
    }
    worst
}

/// Worst relative error of `make` over [`INSTANCES`] seeded instances.
pub fn worst_error(make: &dyn Fn(&mut Rng) -> Check) -> f64 {
    (0..INSTANCES)
        .map(|seed| relative_error(&make(&mut Rng::new(0xfd00 + seed))))
        .fold(0.0, f64::max)
}

/// Wraps a tensor-valued op into `mse(op(..), target)`.
fn with_target(
    target: Tensor,
    op: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
    shadow: impl Fn(&[Vec<f64>]) -> Vec<f64> + 'static,
) -> (Build, Shadow) {
    let t64 = to64(&target);
    let build: Build = Box::new(move |tape, v| {
        let out = op(tape, v)?;
        let t = tape.constant(target.clone());
        tape.mse(out, t)
    });
    let shadow_fn: Shadow = Box::new(move |x| mse_against(&shadow(x), &t64));
    (build, shadow_fn)
}

pub type Maker = Box<dyn Fn(&mut Rng) -> Check>;

/// One entry per differentiable operator, plus a chained composite.
pub fn suite() -> Vec<(&'static str, Maker)> {
    vec![
        ("conv2d", Box::new(check_conv2d)),
        ("conv_transpose2d", Box::new(check_conv_transpose2d)),
        ("channel_bias", Box::new(check_channel_bias)),
        ("instance_norm", Box::new(check_instance_norm)),
        ("relu", Box::new(activation_check(Activation::Relu, |v| v.max(0.0)))),
        ("leaky_relu", Box::new(activation_check(Activation::LeakyRelu(0.2), |v| if v > 0.0 { v } else { 0.2 * v }))),
        ("tanh", Box::new(activation_check(Activation::Tanh, f64::tanh))),
        ("sigmoid", Box::new(activation_check(Activation::Sigmoid, |v| 1.0 / (1.0 + (-v).exp())))),
        ("linear", Box::new(check_linear)),
        ("add", Box::new(check_add)),
        ("affine", Box::new(check_affine)),
        ("concat_channels", Box::new(check_concat_channels)),
        ("reshape", Box::new(check_reshape)),
        ("channels_last", Box::new(check_channels_last)),
        ("l2_normalize", Box::new(check_l2_normalize)),
        ("softmax_cross_entropy", Box::new(check_softmax_cross_entropy)),
        ("l1_loss", Box::new(check_l1_loss)),
        ("squared_error", Box::new(check_squared_error)),
        ("mse", Box::new(check_mse)),
        ("sum", Box::new(check_sum)),
        ("mean", Box::new(check_mean)),
        ("composite", Box::new(check_composite)),
    ]
}

fn check_conv2d(rng: &mut Rng) -> Check {
    let stride = 1 + rng.below(2);
    let pad = rng.below(2);
    let x = random_tensor(rng, &[2, 2, 5, 5], 1.0);
    let k = random_tensor(rng, &[3, 2, 3, 3], 0.5);
    let (_, os) = conv2d(&to64(&x), [2, 2, 5, 5], &to64(&k), [3, 2, 3, 3], stride, pad);
    let target = random_tensor(rng, &os, 1.0);
    let (build, shadow) = with_target(
        target,
        move |t, v| t.conv2d(v[0], v[1], stride, pad),
        move |x| conv2d(&x[0], [2, 2, 5, 5], &x[1], [3, 2, 3, 3], stride, pad).0,
    );
    Check { inputs: vec![x, k], build, shadow }
}

fn check_conv_transpose2d(rng: &mut Rng) -> Check {
    let (kernel, stride, pad) = if rng.uniform() < 0.5 { (4, 2, 1) } else { (3, 1, 1) };
    let x = random_tensor(rng, &[2, 2, 3, 3], 1.0);
    let k = random_tensor(rng, &[2, 3, kernel, kernel], 0.5);
    let ks = [2, 3, kernel, kernel];
    let (_, os) = conv_transpose2d(&to64(&x), [2, 2, 3, 3], &to64(&k), ks, stride, pad);
    let target = random_tensor(rng, &os, 1.0);
    let (build, shadow) = with_target(
        target,
        move |t, v| t.conv_transpose2d(v[0], v[1], stride, pad),
        move |x| conv_transpose2d(&x[0], [2, 2, 3, 3], &x[1], ks, stride, pad).0,
    );
    Check { inputs: vec![x, k], build, shadow }
}

fn check_channel_bias(rng: &mut Rng) -> Check {
    let x = random_tensor(rng, &[2, 3, 2, 2], 1.0);
    let b = random_tensor(rng, &[3], 1.0);
    let target = random_tensor(rng, &[2, 3, 2, 2], 1.0);
    let (build, shadow) = with_target(
        target,
        |t, v| t.channel_bias(v[0], v[1]),
        |x| channel_bias(&x[0], [2, 3, 2, 2], &x[1]),
    );
    Check { inputs: vec![x, b], build, shadow }
}

fn check_instance_norm(rng: &mut Rng) -> Check {
    let x = random_tensor(rng, &[2, 2, 3, 3], 1.0);
    let g = random_tensor(rng, &[2], 1.0);
    let b = random_tensor(rng, &[2], 1.0);
    let target = random_tensor(rng, &[2, 2, 3, 3], 1.0);
    let (build, shadow) = with_target(
        target,
        |t, v| t.instance_norm(v[0], v[1], v[2], 1e-5),
        |x| instance_norm(&x[0], [2, 2, 3, 3], &x[1], &x[2], 1e-5),
    );
    Check { inputs: vec![x, g, b], build, shadow }
}

fn activation_check(kind: Activation, f: fn(f64) -> f64) -> impl Fn(&mut Rng) -> Check {
    move |rng| {
        let x = random_away_from_zero(rng, &[3, 4]);
        let target = random_tensor(rng, &[3, 4], 1.0);
        let (build, shadow) = with_target(
            target,
            move |t, v| t.activation(v[0], kind),
            move |x| x[0].iter().map(|&v| f(v)).collect(),
        );
        Check { inputs: vec![x], build, shadow }
    }
}

fn check_linear(rng: &mut Rng) -> Check {
    let x = random_tensor(rng, &[3, 4], 1.0);
    let w = random_tensor(rng, &[4, 2], 1.0);
    let b = random_tensor(rng, &[2], 1.0);
    let target = random_tensor(rng, &[3, 2], 1.0);
    let (build, shadow) = with_target(
        target,
        |t, v| t.linear(v[0], v[1], v[2]),
        |x| {
            let mut out = matmul(&x[0], 3, 4, &x[1], 2);
            out.iter_mut().enumerate().for_each(|(i, o)| *o += x[2][i % 2]);
            out
        },
    );
    Check { inputs: vec![x, w, b], build, shadow }
}

fn check_add(rng: &mut Rng) -> Check {
    let a = random_tensor(rng, &[2, 3], 1.0);
    let b = random_tensor(rng, &[2, 3], 1.0);
    let target = random_tensor(rng, &[2, 3], 1.0);
    let (build, shadow) = with_target(target, |t, v| t.add(v[0], v[1]), |x| {
        x[0].iter().zip(&x[1]).map(|(p, q)| p + q).collect()
    });
    Check { inputs: vec![a, b], build, shadow }
}

fn check_affine(rng: &mut Rng) -> Check {
    let a = random_tensor(rng, &[2, 3], 1.0);
    let mul = rng.uniform_in(-2.0, 2.0);
    let add = rng.uniform_in(-1.0, 1.0);
    let target = random_tensor(rng, &[2, 3], 1.0);
    let (build, shadow) = with_target(target, move |t, v| t.affine(v[0], mul, add), move |x| {
        x[0].iter().map(|p| p * f64::from(mul) + f64::from(add)).collect()
    });
    Check { inputs: vec![a], build, shadow }
}

fn check_concat_channels(rng: &mut Rng) -> Check {
    let a = random_tensor(rng, &[2, 1, 2, 2], 1.0);
    let b = random_tensor(rng, &[2, 2, 2, 2], 1.0);
    let target = random_tensor(rng, &[2, 3, 2, 2], 1.0);
    let (build, shadow) = with_target(target, |t, v| t.concat_channels(v[0], v[1]), |x| {
        let mut out = Vec::new();
        for s in 0..2 {
            out.extend_from_slice(&x[0][s * 4..(s + 1) * 4]);
            out.extend_from_slice(&x[1][s * 8..(s + 1) * 8]);
        }
        out
    });
    Check { inputs: vec![a, b], build, shadow }
}

fn check_reshape(rng: &mut Rng) -> Check {
    let a = random_tensor(rng, &[2, 3], 1.0);
    let target = random_tensor(rng, &[3, 2], 1.0);
    let (build, shadow) = with_target(target, |t, v| t.reshape(v[0], &[3, 2]), |x| x[0].clone());
    Check { inputs: vec![a], build, shadow }
}

fn check_channels_last(rng: &mut Rng) -> Check {
    let a = random_tensor(rng, &[2, 3, 2, 2], 1.0);
    let target = random_tensor(rng, &[8, 3], 1.0);
    let (build, shadow) = with_target(target, |t, v| t.channels_last(v[0]), |x| {
        let mut out = vec![0.0; 24];
        for s in 0..2 {
            for c in 0..3 {
                for p in 0..4 {
                    out[(s * 4 + p) * 3 + c] = x[0][(s * 3 + c) * 4 + p];
                }
            }
        }
        out
    });
    Check { inputs: vec![a], build, shadow }
}

fn check_l2_normalize(rng: &mut Rng) -> Check {
    let a = random_tensor(rng, &[3, 4], 1.0);
    let target = random_tensor(rng, &[3, 4], 0.5);
    let (build, shadow) = with_target(target, |t, v| t.l2_normalize(v[0]), |x| {
        x[0].chunks(4)
            .flat_map(|r| {
                let n = (r.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
                r.iter().map(move |v| v / n).collect::<Vec<_>>()
            })
            .collect()
    });
    Check { inputs: vec![a], build, shadow }
}

fn check_softmax_cross_entropy(rng: &mut Rng) -> Check {
    let logits = random_tensor(rng, &[4, 5], 2.0);
    let targets: Vec<usize> = (0..4).map(|_| rng.below(5)).collect();
    let t2 = targets.clone();
    Check {
        inputs: vec![logits],
        build: Box::new(move |t, v| t.softmax_cross_entropy(v[0], &targets)),
        shadow: Box::new(move |x| cross_entropy(&x[0], 5, &t2)),
    }
}

fn check_l1_loss(rng: &mut Rng) -> Check {
    let a = random_tensor(rng, &[2, 5], 1.0);
    let offset = random_away_from_zero(rng, &[2, 5]);
    let b = Tensor::new(&[2, 5], a.data().iter().zip(offset.data()).map(|(p, q)| p + q).collect()).unwrap();
    Check {
        inputs: vec![a, b],
        build: Box::new(|t, v| t.l1_loss(v[0], v[1])),
        shadow: Box::new(|x| x[0].iter().zip(&x[1]).map(|(p, q)| (p - q).abs()).sum::<f64>() / 10.0),
    }
}

fn check_squared_error(rng: &mut Rng) -> Check {
    let a = random_tensor(rng, &[3, 3], 1.0);
    let c = rng.uniform_in(-1.0, 1.0);
    Check {
        inputs: vec![a],
        build: Box::new(move |t, v| t.squared_error(v[0], c)),
        shadow: Box::new(move |x| x[0].iter().map(|p| (p - f64::from(c)).powi(2)).sum::<f64>() / 9.0),
    }
}

fn check_mse(rng: &mut Rng) -> Check {
    let a = random_tensor(rng, &[2, 4], 1.0);
    let b = random_tensor(rng, &[2, 4], 1.0);
    Check {
        inputs: vec![a, b],
        build: Box::new(|t, v| t.mse(v[0], v[1])),
        shadow: Box::new(|x| mse_against(&x[0], &x[1])),
    }
}

fn check_sum(rng: &mut Rng) -> Check {
    let a = random_tensor(rng, &[2, 3], 1.0);
    Check {
        inputs: vec![a],
        build: Box::new(|t, v| {
            let sq = t.squared_error(v[0], 0.3)?;
            let s = t.sum(v[0])?;
            let s2 = t.affine(s, 0.1, 0.0)?;
            t.add(sq, s2)
        }),
        shadow: Box::new(|x| {
            x[0].iter().map(|p| (p - 0.3f32 as f64).powi(2)).sum::<f64>() / 6.0 + 0.1f32 as f64 * x[0].iter().sum::<f64>()
        }),
    }
}

fn check_mean(rng: &mut Rng) -> Check {
    let a = random_tensor(rng, &[5], 1.0);
    Check {
        inputs: vec![a],
        build: Box::new(|t, v| {
            let m = t.mean(v[0])?;
            t.squared_error(m, 1.0)
        }),
        shadow: Box::new(|x| (x[0].iter().sum::<f64>() / 5.0 - 1.0).powi(2)),
    }
}

/// conv -> norm -> relu -> transposed conv -> tanh -> l1, the generator's
/// building blocks chained.
fn check_composite(rng: &mut Rng) -> Check {
    let x = random_tensor(rng, &[1, 2, 6, 6], 1.0);
    let k1 = random_tensor(rng, &[3, 2, 4, 4], 0.4);
    let g = random_tensor(rng, &[3], 1.0);
    let b = random_tensor(rng, &[3], 0.2);
    let k2 = random_tensor(rng, &[3, 2, 4, 4], 0.4);
    let target = random_tensor(rng, &[1, 2, 6, 6], 0.5);
    let t32 = target.clone();
    let t64 = to64(&target);
    Check {
        inputs: vec![x, k1, g, b, k2],
        build: Box::new(move |t, v| {
            let h = t.conv2d(v[0], v[1], 2, 1)?;
            let h = t.instance_norm(h, v[2], v[3], 1e-5)?;
            let h = t.activation(h, Activation::LeakyRelu(0.2))?;
            let h = t.conv_transpose2d(h, v[4], 2, 1)?;
            let h = t.activation(h, Activation::Tanh)?;
            let target = t.constant(t32.clone());
            t.mse(h, target)
        }),
        shadow: Box::new(move |x| {
            let (h, hs) = conv2d(&x[0], [1, 2, 6, 6], &x[1], [3, 2, 4, 4], 2, 1);
            let h = instance_norm(&h, hs, &x[2], &x[3], 1e-5);
            let h: Vec<f64> = h.iter().map(|&v| if v > 0.0 { v } else { 0.2 * v }).collect();
            let (h, _) = conv_transpose2d(&h, hs, &x[4], [3, 2, 4, 4], 2, 1);
            let h: Vec<f64> = h.iter().map(|v| v.tanh()).collect();
            mse_against(&h, &t64)
        }),
    }
}
