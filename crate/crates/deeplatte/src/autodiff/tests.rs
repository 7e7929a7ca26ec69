use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use super::{concat, grad_check, grad_check_multi, stack, Tape, TensorError};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

#[test]
fn sigmoid_of_zero_is_half() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0));
    assert_eq!(x.sigmoid().item().unwrap(), 0.5);
}

#[test]
fn matmul_identity_returns_operand() {
    let tape = Tape::new();
    let eye = Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let a = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let i = tape.leaf(eye);
    let av = tape.leaf(a.clone());
    let out = i.matmul(av).unwrap();
    assert_eq!(out.value().data(), a.data());
}

/// Direct sliding-window sum, the independent oracle for conv2d_same.
fn conv_oracle(
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kernel: &[f64],
    k: usize,
    cout: usize,
) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for xw in 0..w {
            for co in 0..cout {
                let mut acc = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        let (sy, sx) = (y + dy, xw + dx);
                        if sy < pad || sx < pad || sy - pad >= h || sx - pad >= w {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x[((sy - pad) * w + (sx - pad)) * cin + ci]
                                * kernel[((dy * k + dx) * cin + ci) * cout + co];
                        }
                    }
                }
                out[(y * w + xw) * cout + co] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_all_ones_counts_window_coverage() {
    // 3x3 all-ones kernel over an all-ones field: interior 9, corners 4.
    let (h, w) = (5, 6);
    let tape = Tape::new();
    let x = tape.leaf(Tensor::filled(&[1, h, w, 1], 1.0));
    let kernel = tape.leaf(Tensor::filled(&[3, 3, 1, 1], 1.0));
    let out = x.conv2d_same(kernel).unwrap().value();
    let d = out.data();
    assert_eq!(d[0], 4.0); // corner
    assert_eq!(d[w - 1], 4.0);
    assert_eq!(d[2 * w + 3], 9.0); // interior
    assert_eq!(d[1], 6.0); // edge
}

#[test]
fn conv_matches_sliding_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &(h, w, cin, cout, k) in &[(4usize, 5usize, 3usize, 2usize, 3usize), (6, 4, 2, 3, 5), (3, 3, 4, 4, 1)] {
        let x = rand_tensor(&mut rng, &[1, h, w, cin]);
        let kernel = rand_tensor(&mut rng, &[k, k, cin, cout]);
        let tape = Tape::new();
        let out = tape
            .leaf(x.clone())
            .conv2d_same(tape.leaf(kernel.clone()))
            .unwrap()
            .value();
        let expect = conv_oracle(x.data(), h, w, cin, kernel.data(), k, cout);
        for (a, b) in out.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn backward_of_square_is_forced_by_calculus() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let loss = x.square();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).data()[0], 6.0);
}

#[test]
fn backward_of_mean_spreads_uniformly() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(&[4], vec![1.0, -2.0, 0.5, 7.0]).unwrap());
    let loss = x.mean();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).data(), &[0.25; 4]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
    let y = x.square();
    assert!(matches!(tape.backward(y), Err(TensorError::Shape(_))));
}

#[test]
fn composite_sigmoid_dot_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = rand_tensor(&mut rng, &[6]);
    let x = rand_tensor(&mut rng, &[6]);
    let err = grad_check_multi(
        |_, vars| Ok(vars[0].mul(vars[1])?.sum().sigmoid().square()),
        &[w, x],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn every_op_passes_grad_check_at_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for trial in 0..5 {
        let v = rand_tensor(&mut rng, &[2, 3, 4]);
        let pos = {
            let mut t = rand_tensor(&mut rng, &[2, 3, 4]);
            for x in t.data_mut() {
                *x = x.abs() + 0.5;
            }
            t
        };
        let other = rand_tensor(&mut rng, &[4]);
        let mat_a = rand_tensor(&mut rng, &[3, 4]);
        let mat_b = rand_tensor(&mut rng, &[4, 2]);
        let img = rand_tensor(&mut rng, &[1, 3, 4, 2]);
        let ker = rand_tensor(&mut rng, &[3, 3, 2, 2]);

        let checks: Vec<(&str, f64)> = vec![
            ("add", grad_check_multi(|_, v| Ok(v[0].add(v[1])?.square().sum()), &[v.clone(), other.clone()], 1e-6).unwrap()),
            ("sub", grad_check_multi(|_, v| Ok(v[0].sub(v[1])?.square().sum()), &[v.clone(), other.clone()], 1e-6).unwrap()),
            ("mul", grad_check_multi(|_, v| Ok(v[0].mul(v[1])?.square().sum()), &[v.clone(), other.clone()], 1e-6).unwrap()),
            ("matmul", grad_check_multi(|_, v| Ok(v[0].matmul(v[1])?.square().sum()), &[mat_a.clone(), mat_b.clone()], 1e-6).unwrap()),
            ("conv", grad_check_multi(|_, v| Ok(v[0].conv2d_same(v[1])?.square().sum()), &[img.clone(), ker.clone()], 1e-6).unwrap()),
            ("sigmoid", grad_check(|_, x| Ok(x.sigmoid().sum().square()), &v, 1e-6).unwrap()),
            ("tanh", grad_check(|_, x| Ok(x.tanh().square().sum()), &v, 1e-6).unwrap()),
            ("exp", grad_check(|_, x| Ok(x.exp()?.sum()), &v, 1e-6).unwrap()),
            ("log", grad_check(|_, x| Ok(x.ln()?.sum()), &pos, 1e-6).unwrap()),
            ("sqrt", grad_check(|_, x| Ok(x.sqrt()?.sum()), &pos, 1e-6).unwrap()),
            ("recip", grad_check(|_, x| Ok(x.recip()?.sum()), &pos, 1e-6).unwrap()),
            ("abs", grad_check(|_, x| Ok(x.abs().square().sum()), &v, 1e-6).unwrap()),
            ("square", grad_check(|_, x| Ok(x.square().sum()), &v, 1e-6).unwrap()),
            ("mean", grad_check(|_, x| Ok(x.square().mean()), &v, 1e-6).unwrap()),
            ("concat", grad_check_multi(
                |_, v| Ok(concat(&[v[0], v[1]], 1)?.square().sum()),
                &[rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 2])],
                1e-6,
            ).unwrap()),
            ("stack", grad_check_multi(
                |_, v| Ok(stack(&[v[0], v[1]])?.square().sum()),
                &[rand_tensor(&mut rng, &[2, 2]), rand_tensor(&mut rng, &[2, 2])],
                1e-6,
            ).unwrap()),
            ("slice", grad_check(|_, x| Ok(x.slice(1, 1, 2)?.square().sum()), &v, 1e-6).unwrap()),
            ("gather", grad_check(|_, x| Ok(x.gather_rows(&[1, 0, 1])?.square().sum()), &v, 1e-6).unwrap()),
            ("pair_sq_diff", grad_check(
                |_, x| Ok(x.pair_sq_diff(&[(0, 1), (2, 3), (1, 2)])?.mean()),
                &rand_tensor(&mut rng, &[5]),
                1e-6,
            ).unwrap()),
            ("stc_spatial", grad_check(|_, x| x.stc_spatial(2), &rand_tensor(&mut rng, &[2, 3, 3, 2]), 1e-6).unwrap()),
            ("stc_temporal", grad_check(|_, x| x.stc_temporal(2), &rand_tensor(&mut rng, &[4, 2, 2, 2]), 1e-6).unwrap()),
        ];
        for (name, err) in checks {
            assert!(err < 1e-5, "trial {trial}: op {name} rel err {err}");
        }
    }
}

#[test]
fn gradients_are_linear_in_the_loss() {
    // grad(a·f + b·g) == a·grad f + b·grad g
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..5 {
        let x = rand_tensor(&mut rng, &[6]);
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let grad_of = |build: &dyn for<'t> Fn(super::Var<'t>) -> super::Var<'t>| {
            let tape = Tape::new();
            let v = tape.leaf(x.clone());
            let loss = build(v);
            tape.backward(loss).unwrap().get(v)
        };
        let gf = grad_of(&|v| v.square().sum());
        let gg = grad_of(&|v| v.tanh().mean());
        let gboth = grad_of(&|v| {
            let f = v.square().sum().scale(a);
            let g = v.tanh().mean().scale(b);
            f.add(g).unwrap()
        });
        for i in 0..x.len() {
            let expect = a * gf.data()[i] + b * gg.data()[i];
            assert!((gboth.data()[i] - expect).abs() < 1e-10);
        }
    }
}

#[test]
fn forward_values_are_deterministic_across_runs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = rand_tensor(&mut rng, &[1, 4, 4, 3]);
        let k = rand_tensor(&mut rng, &[3, 3, 3, 2]);
        let tape = Tape::new();
        let out = tape.leaf(x).conv2d_same(tape.leaf(k)).unwrap().tanh().sum();
        out.item().unwrap()
    };
    assert_eq!(run().to_bits(), run().to_bits());
}

#[test]
fn non_participating_leaf_gets_zero_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let unused = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let loss = x.square();
    let grads = tape.backward(loss).unwrap();
    assert!(!grads.touched(unused));
    assert_eq!(grads.get(unused).data(), &[0.0; 3]);
}

#[test]
fn hard_threshold_zeroes_small_magnitudes() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(&[4], vec![0.5, -5e-5, 1e-4, -0.3]).unwrap());
    let y = x.hard_threshold(1e-4);
    assert_eq!(y.value().data(), &[0.5, 0.0, 1e-4, -0.3]);
    let grads = tape.backward(y.sum()).unwrap();
    assert_eq!(grads.get(x).data(), &[1.0, 0.0, 1.0, 1.0]);
}

#[test]
fn detach_cuts_the_gradient_path() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let loss = x.detach().square();
    let grads = tape.backward(loss).unwrap();
    assert!(!grads.touched(x));
}

#[test]
fn domain_errors_on_invalid_inputs() {
    let tape = Tape::new();
    let neg = tape.leaf(Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
    assert!(matches!(neg.ln(), Err(TensorError::Domain(_))));
    assert!(matches!(neg.sqrt(), Err(TensorError::Domain(_))));
    let mism = tape.leaf(Tensor::from_vec(&[3], vec![1.0; 3]).unwrap());
    assert!(matches!(neg.add(mism), Err(TensorError::Shape(_))));
    assert!(Tensor::from_vec(&[2], vec![f64::NAN, 1.0]).is_err());
}
