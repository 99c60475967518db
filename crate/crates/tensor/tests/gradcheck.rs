//! Central finite-difference checks for every differentiable tape op.

use hparse_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(0.1..1.0))
}

/// Builds `Σ r ⊙ f(inputs)` and compares the analytic gradient of every
/// input with central differences.
fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars);
        random(tape.shape(out), &mut rng)
    };
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars);
        let l = tape.dot(out, probe.clone());
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    let loss = tape.dot(out, probe.clone());
    let grads = tape.backward(loss);
    let h = 1e-6;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "input {i} elem {j}: analytic {a} numeric {numeric}");
        }
    }
}

#[test]
fn conv2d_with_bias_stride_and_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
        let x = random(&[2, 3, 5, 6], &mut rng);
        let w = random(&[4, 3, k, k], &mut rng);
        let b = random(&[4], &mut rng);
        check(vec![x, w, b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad));
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[2, 3, 2, 2], &mut rng);
    let b = random(&[2, 3, 2, 2], &mut rng);
    check(vec![a.clone(), b.clone()], |t, v| {
        let s = t.add_n(&[v[0], v[1], v[0]]);
        let m = t.mul(s, v[1]);
        let g = t.sigmoid(m);
        let h = t.tanh(v[0]);
        let r = t.relu(v[1]);
        let q = t.affine(h, -0.7, 0.3);
        let z = t.add_n(&[g, q, r]);
        t.scale(z, 1.5)
    });
}

#[test]
fn channel_broadcast_concat_narrow() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3, 3, 2], &mut rng);
    let g = random(&[2, 1, 3, 2], &mut rng);
    check(vec![x, g], |t, v| {
        let m = t.mul_channel(v[0], v[1]);
        let c = t.concat(&[m, v[1], v[0]]);
        t.narrow(c, 2, 4)
    });
}

#[test]
fn softmax_on_channels_and_last_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 4, 2, 3], &mut rng);
    check(vec![x], |t, v| t.softmax(v[0], 1));
    let y = random(&[2, 3, 5], &mut rng);
    check(vec![y], |t, v| t.softmax(v[0], 2));
}

#[test]
fn batched_matmul_all_transposes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for ta in [false, true] {
        for tb in [false, true] {
            let a = if ta { random(&[2, 4, 3], &mut rng) } else { random(&[2, 3, 4], &mut rng) };
            let b = if tb { random(&[2, 5, 4], &mut rng) } else { random(&[2, 4, 5], &mut rng) };
            check(vec![a, b], move |t, v| t.bmm(v[0], v[1], ta, tb));
        }
    }
}

#[test]
fn pooling_resize_reshape_flip() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[1, 2, 4, 6], &mut rng);
    check(vec![x.clone()], |t, v| t.avg_pool2(v[0]));
    check(vec![x.clone()], |t, v| t.resize_bilinear(v[0], 8, 12));
    check(vec![x.clone()], |t, v| t.resize_bilinear(v[0], 3, 5));
    check(vec![x.clone()], |t, v| {
        let r = t.reshape(v[0], &[1, 2, 24]);
        t.softmax(r, 2)
    });
    check(vec![x], |t, v| t.flip_w(v[0]));
}

#[test]
fn negative_log_dot() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = positive(&[1, 3, 2, 2], &mut rng);
    let w = Tensor::from_fn(&[1, 3, 2, 2], |i| if i % 3 == 0 { 0.0 } else { 0.25 * i as f64 });
    check(vec![p], move |t, v| t.neg_log_dot(v[0], w.clone(), 1e-12));
}

#[test]
fn shared_input_accumulates() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(&[1], vec![3.0]), true);
    let y = tape.mul(x, x);
    let z = tape.add(y, x);
    let g = tape.backward(z);
    assert_eq!(g.get(x).unwrap().item(), 7.0);
}

#[test]
fn constants_get_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(&[1], vec![3.0]));
    let w = tape.leaf(Tensor::new(&[1], vec![2.0]), true);
    let y = tape.mul(x, w);
    let g = tape.backward(y);
    assert!(g.get(x).is_none());
    assert_eq!(g.get(w).unwrap().item(), 3.0);
}
