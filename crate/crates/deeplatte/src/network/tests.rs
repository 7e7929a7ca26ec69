use super::*;
use crate::autodiff::{grad_check_multi, Tape};
use rand::Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        input_features: 5,
        latent_dim: 4,
        hidden: 3,
        kernels: vec![1, 3],
        tau: 1e-4,
        window: 3,
        k_s: 1,
        k_t: 1,
    }
}

fn rand_window(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize, p: usize) -> Tensor {
    let data: Vec<f64> = (0..t * h * w * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(&[t, h, w, p], data).unwrap()
}

#[test]
fn sparse_identity_weights_pass_input_through() {
    let mut model = Model::new(small_config(), 0).unwrap();
    model.sparse.weights = Tensor::filled(&[5], 1.0);
    let tape = Tape::new();
    let vars = model.register(&tape);
    let x = Tensor::from_vec(&[2, 5], (0..10).map(|i| i as f64).collect()).unwrap();
    let out = vars.sparse_forward(tape.leaf(x.clone())).unwrap();
    assert_eq!(out.value().data(), x.data());
}

#[test]
fn sparse_weight_below_tau_silences_the_channel() {
    let mut model = Model::new(small_config(), 0).unwrap();
    model.sparse.weights =
        Tensor::from_vec(&[5], vec![1.0, 5e-5, 0.3, -0.2, 2e-4]).unwrap();
    let tape = Tape::new();
    let vars = model.register(&tape);
    let x = tape.leaf(Tensor::filled(&[3, 5], 1.0e6));
    let out = vars.sparse_forward(x).unwrap().value();
    for row in out.data().chunks_exact(5) {
        assert_eq!(row[1], 0.0); // |5e-5| < 1e-4 regardless of the input
        assert_ne!(row[0], 0.0);
        assert_ne!(row[4], 0.0); // 2e-4 stays on
    }
}

#[test]
fn sparse_forward_scales_by_the_diagonal() {
    let mut model = Model::new(small_config(), 0).unwrap();
    model.config.input_features = 2;
    model.sparse.weights = Tensor::from_vec(&[2], vec![0.5, -0.3]).unwrap();
    let tape = Tape::new();
    let vars = model.register(&tape);
    let out = vars
        .sparse_forward(tape.leaf(Tensor::from_vec(&[2], vec![2.0, 2.0]).unwrap()))
        .unwrap()
        .value();
    assert_eq!(out.data(), &[1.0, -0.6]);
}

#[test]
fn selected_features_threshold_cases() {
    let mut model = Model::new(small_config(), 0).unwrap();
    model.sparse.weights = Tensor::zeros(&[5]);
    assert!(model.sparse.selected_features().iter().all(|m| !*m));
    model.sparse.weights = Tensor::from_vec(&[5], vec![1e-3, 1e-5, 0.0, -1e-3, 9.9e-5]).unwrap();
    assert_eq!(
        model.sparse.selected_features(),
        vec![true, false, false, true, false]
    );
}

#[test]
fn masking_is_idempotent() {
    let tape = Tape::new();
    let w = tape.leaf(Tensor::from_vec(&[4], vec![0.5, 5e-5, -2e-4, 0.0]).unwrap());
    let once = w.hard_threshold(1e-4);
    let twice = once.hard_threshold(1e-4);
    assert_eq!(once.value().data(), twice.value().data());
}

#[test]
fn zero_input_with_zero_biases_encodes_to_zero() {
    let model = Model::new(small_config(), 3).unwrap();
    let tape = Tape::new();
    let vars = model.register(&tape);
    let e = vars.encode(tape.leaf(Tensor::zeros(&[4, 5]))).unwrap();
    assert!(e.value().iter().all(|v| *v == 0.0));
}

#[test]
fn encoder_output_width_is_the_latent_dim_for_any_p() {
    for p in [1, 5, 20] {
        let mut cfg = small_config();
        cfg.input_features = p;
        let model = Model::new(cfg, 1).unwrap();
        let tape = Tape::new();
        let vars = model.register(&tape);
        let e = vars.encode(tape.leaf(Tensor::zeros(&[7, p]))).unwrap();
        assert_eq!(e.shape(), vec![7, 4]);
        let back = vars.decode(e).unwrap();
        assert_eq!(back.shape(), vec![7, p]);
    }
}

#[test]
fn zero_parameter_convlstm_step_follows_gate_algebra() {
    // all weights and biases zero: i=f=o=0.5, g=0, c' = 0.5c, h' = 0.5·tanh(0.5c)
    let mut model = Model::new(small_config(), 2).unwrap();
    for b in &mut model.convlstm.branches {
        b.weights = Tensor::zeros(b.weights.shape());
        b.bias = Tensor::zeros(b.bias.shape());
    }
    let tape = Tape::new();
    let vars = model.register(&tape);
    let (h, w, hid) = (2, 2, 3);
    let c0 = Tensor::filled(&[1, h, w, hid], 0.8);
    let state = (tape.leaf(Tensor::zeros(&[1, h, w, hid])), tape.leaf(c0));
    let e_t = tape.leaf(Tensor::filled(&[1, h, w, 4], 0.3));
    let (h1, c1) = vars.convlstm_step(0, state, e_t).unwrap();
    for v in c1.value().iter() {
        assert!((v - 0.4).abs() < 1e-15);
    }
    let want_h = 0.5 * (0.4f64).tanh();
    for v in h1.value().iter() {
        assert!((v - want_h).abs() < 1e-15);
    }
}

#[test]
fn convlstm_step_preserves_spatial_dims_for_all_kernels() {
    let mut cfg = small_config();
    cfg.kernels = vec![1, 3, 5];
    let model = Model::new(cfg, 4).unwrap();
    let tape = Tape::new();
    let vars = model.register(&tape);
    for branch in 0..3 {
        let state = (
            tape.leaf(Tensor::zeros(&[1, 5, 6, 3])),
            tape.leaf(Tensor::zeros(&[1, 5, 6, 3])),
        );
        let e_t = tape.leaf(Tensor::filled(&[1, 5, 6, 4], 0.1));
        let (h1, c1) = vars.convlstm_step(branch, state, e_t).unwrap();
        assert_eq!(h1.shape(), vec![1, 5, 6, 3]);
        assert_eq!(c1.shape(), vec![1, 5, 6, 3]);
    }
}

#[test]
fn single_cell_step_matches_scalar_lstm_oracle() {
    let mut cfg = small_config();
    cfg.input_features = 1;
    cfg.latent_dim = 1;
    cfg.hidden = 1;
    cfg.kernels = vec![1];
    let mut model = Model::new(cfg, 5).unwrap();
    let wt = [0.7, -0.2, 0.4, 0.9, -0.5, 0.3, 0.1, 0.6]; // [1,1,2,4] row-major
    let bias = [0.05, -0.1, 0.2, 0.0];
    model.convlstm.branches[0].weights = Tensor::from_vec(&[1, 1, 2, 4], wt.to_vec()).unwrap();
    model.convlstm.branches[0].bias = Tensor::from_vec(&[4], bias.to_vec()).unwrap();
    let tape = Tape::new();
    let vars = model.register(&tape);
    let (e_val, h_val, c_val) = (0.3, -0.4, 0.25);
    let state = (
        tape.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![h_val]).unwrap()),
        tape.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![c_val]).unwrap()),
    );
    let e_t = tape.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![e_val]).unwrap());
    let (h1, c1) = vars.convlstm_step(0, state, e_t).unwrap();

    // hand-rolled scalar LSTM: weight rows are [e; h] against gate columns i,f,o,g
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    let gate = |col: usize| e_val * wt[col] + h_val * wt[4 + col] + bias[col];
    let (i, f, o, g) = (
        sigmoid(gate(0)),
        sigmoid(gate(1)),
        sigmoid(gate(2)),
        gate(3).tanh(),
    );
    let c_want = f * c_val + i * g;
    let h_want = o * c_want.tanh();
    assert!((c1.value().data()[0] - c_want).abs() < 1e-14);
    assert!((h1.value().data()[0] - h_want).abs() < 1e-14);
}

#[test]
fn st_embed_concatenates_to_192_channels_with_default_config() {
    let model = Model::new(ModelConfig::new(6), 7).unwrap();
    assert_eq!(model.config.embedding_channels(), 192);
    let tape = Tape::new();
    let vars = model.register(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let e = tape.leaf(rand_window(&mut rng, 2, 4, 4, 32));
    let r = vars.st_embed(e).unwrap();
    assert_eq!(r.shape(), vec![2, 4, 4, 192]);
}

#[test]
fn st_embed_with_single_frame_window() {
    let model = Model::new(small_config(), 8).unwrap();
    let tape = Tape::new();
    let vars = model.register(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let e = tape.leaf(rand_window(&mut rng, 1, 3, 3, 4));
    let r = vars.st_embed(e).unwrap();
    assert_eq!(r.shape(), vec![1, 3, 3, 6]);
}

#[test]
fn st_embed_is_causal() {
    // two windows identical except the final frame: R at earlier times matches
    let model = Model::new(small_config(), 9).unwrap();
    let tape = Tape::new();
    let vars = model.register(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base = rand_window(&mut rng, 3, 4, 4, 4);
    let mut altered = base.clone();
    let frame = 2 * 4 * 4 * 4;
    for v in &mut altered.data_mut()[frame..] {
        *v += 0.5;
    }
    let r0 = vars.st_embed(tape.leaf(base)).unwrap().value();
    let r1 = vars.st_embed(tape.leaf(altered)).unwrap().value();
    let per_frame = 4 * 4 * 6;
    assert_eq!(r0.data()[..2 * per_frame], r1.data()[..2 * per_frame]);
    assert_ne!(r0.data()[2 * per_frame..], r1.data()[2 * per_frame..]);
}

#[test]
fn convlstm_parameter_count_matches_closed_form() {
    let model = Model::new(ModelConfig::new(20), 11).unwrap();
    let want: usize = [1usize, 3, 5]
        .iter()
        .map(|k| k * k * (32 + 64) * 64 * 4 + 4 * 64)
        .sum();
    assert_eq!(model.convlstm.parameter_count(), want);
}

#[test]
fn zero_weight_head_outputs_its_bias_everywhere() {
    let mut model = Model::new(small_config(), 12).unwrap();
    model.head.w1 = Tensor::zeros(model.head.w1.shape());
    model.head.w2 = Tensor::zeros(model.head.w2.shape());
    model.head.b2 = Tensor::from_vec(&[1], vec![0.75]).unwrap();
    let tape = Tape::new();
    let vars = model.register(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let r_data: Vec<f64> = (0..4 * 5 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = tape.leaf(Tensor::from_vec(&[4, 5, 6], r_data).unwrap());
    let out = vars.predict(r).unwrap();
    assert_eq!(out.shape(), vec![4, 5]);
    assert!(out.value().iter().all(|v| (v - 0.75).abs() < 1e-15));
}

#[test]
fn init_is_deterministic_per_seed() {
    let a = Model::new(small_config(), 77).unwrap();
    let b = Model::new(small_config(), 77).unwrap();
    for ((_, ta), (_, tb)) in a.params().iter().zip(b.params().iter()) {
        assert_eq!(ta.data(), tb.data());
    }
    let c = Model::new(small_config(), 78).unwrap();
    assert_ne!(
        a.autoencoder.enc_w1.data(),
        c.autoencoder.enc_w1.data()
    );
}

#[test]
fn every_block_passes_grad_check_on_small_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let model = Model::new(small_config(), 13).unwrap();
    let window = rand_window(&mut rng, 3, 4, 4, 5);
    let params: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t.clone()).collect();

    // composite: supervised MSE against a random target through the full pipeline
    let target: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let target = Tensor::from_vec(&[4, 4], target).unwrap();
    let err = grad_check_multi(
        |tape, vars| {
            let mv = model.vars_from_ordered(vars);
            let out = model.forward_window(&mv, tape, &window)?;
            let t = tape.constant(target.clone());
            Ok(out.prediction.sub(t)?.square().mean())
        },
        &params,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "composite pipeline rel err {err}");
}

#[test]
fn head_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let model = Model::new(small_config(), 14).unwrap();
    let r_data: Vec<f64> = (0..3 * 3 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = Tensor::from_vec(&[3, 3, 6], r_data).unwrap();
    let head_params = vec![
        model.head.w1.clone(),
        model.head.b1.clone(),
        model.head.w2.clone(),
        model.head.b2.clone(),
    ];
    let err = grad_check_multi(
        |tape, vars| {
            let flat = tape.constant(r.clone()).reshape(&[9, 6])?;
            let h = flat.matmul(vars[0])?.add(vars[1])?.tanh();
            Ok(h.matmul(vars[2])?.add(vars[3])?.square().mean())
        },
        &head_params,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "head rel err {err}");
}

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
