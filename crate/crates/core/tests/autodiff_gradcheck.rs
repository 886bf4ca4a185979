//! Finite-difference checks for every tape op, in double precision.
//!
//! Each check builds a scalar loss from the op under test, asks the tape for
//! the analytic gradient, then perturbs every input entry with a central
//! difference and compares.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sizemorph::autodiff::{NodeId, Tape};

const FD_STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

/// Weighted sum with fixed random weights, so the loss sees every output.
fn weighted_loss(tape: &mut Tape<f64>, out: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
    let w = randn(rng, tape.shape(out));
    let wn = tape.constant(w);
    let prod = tape.mul(out, wn);
    tape.sum_all(prod)
}

/// Check d(loss)/d(inputs[i]) for a graph builder, against central differences.
fn gradcheck(shapes: &[&[usize]], build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<ArrayD<f64>> = shapes.iter().map(|s| randn(&mut rng, s)).collect();

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| tape.var(v.clone())).collect();
    let loss = build(&mut tape, &ids);
    assert_eq!(tape.value(loss).len(), 1, "loss must be scalar");
    let grads = tape.backward(loss);

    for (k, base) in inputs.iter().enumerate() {
        let gid = grads.of(ids[k]).unwrap_or_else(|| panic!("missing grad for input {k}"));
        let g = tape.value(gid).clone();
        assert_eq!(g.shape(), base.shape(), "grad shape mismatch for input {k}");
        let flat = base.as_slice().unwrap();
        for idx in 0..flat.len() {
            let eval = |delta: f64| {
                let mut probe = inputs.to_vec();
                probe[k].as_slice_mut().unwrap()[idx] += delta;
                let mut t = Tape::new();
                let pids: Vec<NodeId> = probe.iter().map(|v| t.constant(v.clone())).collect();
                let l = build(&mut t, &pids);
                t.value(l).sum()
            };
            let fd = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let an = g.as_slice().unwrap()[idx];
            let denom = fd.abs().max(an.abs()).max(1.0);
            assert!(
                (fd - an).abs() / denom < TOL,
                "input {k} entry {idx}: analytic {an} vs fd {fd}"
            );
        }
    }
}

#[test]
fn elementwise_ops_match_finite_differences() {
    gradcheck(
        &[&[3, 4], &[3, 4]],
        |t, ids| {
            let s = t.add(ids[0], ids[1]);
            let d = t.sub(s, ids[1]);
            let m = t.mul(d, ids[1]);
            let n = t.neg(m);
            let sc = t.scale(n, 1.7);
            let a = t.add_scalar(sc, 0.3);
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            weighted_loss(t, a, &mut rng)
        },
        1,
    );
}

#[test]
fn nonlinearities_match_finite_differences() {
    gradcheck(
        &[&[2, 5]],
        |t, ids| {
            let lr = t.leaky_relu(ids[0], 0.2);
            let sp = t.softplus(lr);
            let sg = t.sigmoid(sp);
            let sq = t.square(sg);
            let shifted = t.add_scalar(sq, 1.0);
            let rs = t.rsqrt(shifted);
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            weighted_loss(t, rs, &mut rng)
        },
        2,
    );
}

#[test]
fn matmul_transpose_reshape_match_finite_differences() {
    gradcheck(
        &[&[3, 4], &[4, 2]],
        |t, ids| {
            let y = t.matmul(ids[0], ids[1]);
            let yt = t.transpose2(y);
            let r = t.reshape(yt, &[6]);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            weighted_loss(t, r, &mut rng)
        },
        3,
    );
}

#[test]
fn reductions_and_broadcast_match_finite_differences() {
    gradcheck(
        &[&[2, 3, 4]],
        |t, ids| {
            let s = t.sum_axes(ids[0], &[0, 2]);
            let b = t.broadcast(s, &[2, 3, 4]);
            let m = t.mul(b, ids[0]);
            t.mean_all(m)
        },
        4,
    );
}

#[test]
fn conv2d_matches_finite_differences() {
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        gradcheck(
            &[&[2, 3, 6, 6], &[4, 3, 3, 3]],
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], stride, pad);
                let mut rng = ChaCha8Rng::seed_from_u64(11);
                weighted_loss(t, y, &mut rng)
            },
            5 + stride as u64 * 10 + pad as u64,
        );
    }
}

#[test]
fn conv_bias_and_channel_gains_match_finite_differences() {
    gradcheck(
        &[&[2, 3, 4, 4], &[3], &[3], &[2, 3]],
        |t, ids| {
            let b = t.bias_add(ids[0], ids[1], 1);
            let v = t.mul_vec(b, ids[2], 1);
            let c = t.mul_channel(v, ids[3]);
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            weighted_loss(t, c, &mut rng)
        },
        6,
    );
}

#[test]
fn resize_matches_finite_differences() {
    gradcheck(
        &[&[1, 2, 3, 3]],
        |t, ids| {
            let up = t.resize(ids[0], 6, 6);
            let down = t.resize(up, 4, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            weighted_loss(t, down, &mut rng)
        },
        7,
    );
}

#[test]
fn grid_sample_matches_finite_differences_in_image_and_field() {
    // Keep sample positions away from integer lattice points and borders:
    // bilinear interpolation has derivative kinks there.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let img = randn(&mut rng, &[1, 2, 6, 6]);
    let h = 6usize;
    let mut fv = vec![0.0; 2 * h * h];
    for e in fv.iter_mut() {
        let mag: f64 = rng.gen_range(0.15..0.45);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        *e = sign * mag / (h as f64 / 2.0); // 0.15..0.45 px, clear of the lattice
    }
    let field = ArrayD::from_shape_vec(IxDyn(&[1, 2, h, h]), fv).unwrap();

    let build = |t: &mut Tape<f64>, ids: &[NodeId]| {
        let y = t.grid_sample(ids[0], ids[1]);
        let mut wrng = ChaCha8Rng::seed_from_u64(23);
        weighted_loss(t, y, &mut wrng)
    };

    let mut tape = Tape::new();
    let ids = vec![tape.var(img.clone()), tape.var(field.clone())];
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss);

    let inputs = [img, field];
    for k in 0..2 {
        let g = tape.value(grads.of(ids[k]).unwrap()).clone();
        let flat_len = inputs[k].len();
        for idx in 0..flat_len {
            let eval = |delta: f64| {
                let mut probe = inputs.to_vec();
                probe[k].as_slice_mut().unwrap()[idx] += delta;
                let mut t = Tape::new();
                let pids: Vec<NodeId> = probe.iter().map(|v| t.constant(v.clone())).collect();
                let l = build(&mut t, &pids);
                t.value(l).sum()
            };
            let fd = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let an = g.as_slice().unwrap()[idx];
            let denom = fd.abs().max(an.abs()).max(1.0);
            assert!(
                (fd - an).abs() / denom < 1e-6,
                "grid_sample input {k} entry {idx}: analytic {an} vs fd {fd}"
            );
        }
    }
}

#[test]
fn slice_pad_concat_flip_match_finite_differences() {
    gradcheck(
        &[&[2, 3, 4], &[2, 1, 4]],
        |t, ids| {
            let c = t.concat(&[ids[0], ids[1]], 1);
            let s = t.slice(c, &[(0, 2), (1, 4), (0, 3)]);
            let f = t.flip_w(s);
            let mut rng = ChaCha8Rng::seed_from_u64(29);
            weighted_loss(t, f, &mut rng)
        },
        8,
    );
}

/// Second-order check: the parameter gradient of an input-gradient penalty
/// (the R1 shape) against finite differences of the penalty itself.
#[test]
fn input_gradient_penalty_parameter_grads_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = randn(&mut rng, &[2, 2, 4, 4]);
    let w1 = randn(&mut rng, &[3, 2, 3, 3]);
    let b1 = randn(&mut rng, &[3]);
    let w2 = randn(&mut rng, &[3 * 2 * 2, 1]);

    // penalty(params) = mean over batch of sum_i (d logit_sum / d x_i)^2
    let penalty = |w1v: &ArrayD<f64>, b1v: &ArrayD<f64>, w2v: &ArrayD<f64>,
                   tape_out: &mut Option<(Tape<f64>, NodeId, NodeId, NodeId, NodeId)>|
     -> f64 {
        let mut t = Tape::new();
        let xin = t.var(x.clone());
        let w1n = t.var(w1v.clone());
        let b1n = t.var(b1v.clone());
        let w2n = t.var(w2v.clone());
        let c = t.conv2d(xin, w1n, 2, 1);
        let cb = t.bias_add(c, b1n, 1);
        let a = t.leaky_relu(cb, 0.2);
        let flat = t.reshape(a, &[2, 3 * 2 * 2]);
        let logit = t.matmul(flat, w2n);
        let logit_sum = t.sum_all(logit);
        let g1 = t.backward(logit_sum);
        let gx = g1.of(xin).expect("input grad");
        let sq = t.square(gx);
        let per = t.sum_all(sq);
        let pen = t.scale(per, 1.0 / 2.0);
        let v = t.value(pen).sum();
        *tape_out = Some((t, pen, w1n, b1n, w2n));
        v
    };

    let mut ctx = None;
    let _ = penalty(&w1, &b1, &w2, &mut ctx);
    let (mut tape, pen, w1n, b1n, w2n) = ctx.unwrap();
    let grads = tape.backward(pen);

    for (name, node, base) in [("w1", w1n, &w1), ("b1", b1n, &b1), ("w2", w2n, &w2)] {
        let g = tape.value(grads.of(node).expect("param grad")).clone();
        for idx in 0..base.len() {
            let eval = |delta: f64| {
                let mut pw1 = w1.clone();
                let mut pb1 = b1.clone();
                let mut pw2 = w2.clone();
                match name {
                    "w1" => pw1.as_slice_mut().unwrap()[idx] += delta,
                    "b1" => pb1.as_slice_mut().unwrap()[idx] += delta,
                    _ => pw2.as_slice_mut().unwrap()[idx] += delta,
                }
                let mut unused = None;
                penalty(&pw1, &pb1, &pw2, &mut unused)
            };
            let fd = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let an = g.as_slice().unwrap()[idx];
            let denom = fd.abs().max(an.abs()).max(1.0);
            assert!(
                (fd - an).abs() / denom < 1e-5,
                "{name} entry {idx}: analytic {an} vs fd {fd}"
            );
        }
    }
}
