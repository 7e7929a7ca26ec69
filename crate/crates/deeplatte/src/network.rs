//! The learnable blocks: sparse feature-selection layer, autoencoder,
//! multi-kernel ConvLSTM stack, and the per-cell prediction head.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, stack, Tape, Tensor, TensorError, Var};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of input feature channels P.
    pub input_features: usize,
    /// Autoencoder latent width (channels entering the ConvLSTM stack).
    pub latent_dim: usize,
    /// Hidden width: ConvLSTM hidden channels and MLP hidden width.
    pub hidden: usize,
    /// ConvLSTM kernel sizes, one branch per entry (odd).
    pub kernels: Vec<usize>,
    /// Sparse-layer cutoff: features with |w| below it are switched off.
    pub tau: f64,
    /// Window length T′ (frames t−T′+1 ..= t).
    pub window: usize,
    /// Spatial neighborhood steps for the representation constraint.
    pub k_s: usize,
    /// Temporal neighborhood steps for the representation constraint.
    pub k_t: usize,
}

impl ModelConfig {
    pub fn new(input_features: usize) -> Self {
        ModelConfig {
            input_features,
            latent_dim: 32,
            hidden: 64,
            kernels: vec![1, 3, 5],
            tau: 1e-4,
            window: 7,
            k_s: 1,
            k_t: 1,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.input_features == 0
            || self.latent_dim == 0
            || self.hidden == 0
            || self.kernels.is_empty()
            || self.window == 0
            || self.k_s == 0
            || self.k_t == 0
            || !(self.tau > 0.0)
        {
            return Err(TensorError::Shape(format!("degenerate model config {self:?}")));
        }
        if let Some(k) = self.kernels.iter().find(|k| **k % 2 == 0) {
            return Err(TensorError::Shape(format!("kernel size {k} must be odd")));
        }
        Ok(())
    }

    /// Channels of the concatenated spatiotemporal embedding R.
    pub fn embedding_channels(&self) -> usize {
        self.hidden * self.kernels.len()
    }
}

/// Diagonal feature-selection layer with an L1-driven on/off gate.
#[derive(Debug, Clone)]
pub struct SparseLayer {
    /// Diagonal of the selection matrix, one weight per feature.
    pub weights: Tensor,
    pub tau: f64,
}

/// Initial value of every sparse weight: a uniform positive pass-through far
/// enough from the cutoff that selection is decided by training, close enough
/// that the L1 pull can retire an irrelevant feature within a few hundred
/// steps.
pub const SPARSE_INIT: f64 = 0.3;

impl SparseLayer {
    fn new(p: usize, tau: f64) -> Self {
        SparseLayer {
            weights: Tensor::filled(&[p], SPARSE_INIT),
            tau,
        }
    }

    /// Boolean keep-mask: `|w_p| ≥ τ`.
    pub fn selected_features(&self) -> Vec<bool> {
        self.weights.iter().map(|w| w.abs() >= self.tau).collect()
    }

    pub fn selected_count(&self) -> usize {
        self.selected_features().iter().filter(|m| **m).count()
    }
}

/// Pointwise encoder/decoder MLP pair (per-cell feature embedding).
#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub enc_w1: Tensor,
    pub enc_b1: Tensor,
    pub enc_w2: Tensor,
    pub enc_b2: Tensor,
    pub dec_w1: Tensor,
    pub dec_b1: Tensor,
    pub dec_w2: Tensor,
    pub dec_b2: Tensor,
}

/// One ConvLSTM layer: a single gate convolution over `[input, hidden]`
/// producing the four gates stacked on channels (i, f, o, g).
#[derive(Debug, Clone)]
pub struct ConvLstmBranch {
    pub kernel_size: usize,
    /// `[k, k, latent+hidden, 4·hidden]`
    pub weights: Tensor,
    /// `[4·hidden]`
    pub bias: Tensor,
}

/// One ConvLSTM branch per kernel size; hidden sequences are concatenated on
/// channels to form the spatiotemporal embedding.
#[derive(Debug, Clone)]
pub struct ConvLstmStack {
    pub branches: Vec<ConvLstmBranch>,
}

impl ConvLstmStack {
    /// Total learnable parameter count (weights + biases over all branches).
    pub fn parameter_count(&self) -> usize {
        self.branches
            .iter()
            .map(|b| b.weights.len() + b.bias.len())
            .sum()
    }
}

/// Per-cell MLP mapping the embedding to one predicted value.
#[derive(Debug, Clone)]
pub struct PredictionHead {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Per-channel input standardization learned from the training data and
/// applied ahead of the sparse layer (identity until trained).
#[derive(Debug, Clone)]
pub struct FeatureScaler {
    pub mean: Tensor,
    pub inv_std: Tensor,
}

impl FeatureScaler {
    fn identity(p: usize) -> Self {
        FeatureScaler {
            mean: Tensor::zeros(&[p]),
            inv_std: Tensor::filled(&[p], 1.0),
        }
    }

    /// Fits mean and 1/std per channel over a `[rows, P]` matrix.
    pub fn fit(data: &Tensor) -> Self {
        let (rows, p) = (data.shape()[0], data.shape()[1]);
        let mut mean = vec![0.0; p];
        for row in data.data().chunks_exact(p) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        let mut var = vec![0.0; p];
        for row in data.data().chunks_exact(p) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|s| {
                let sd = (s / rows as f64).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    1.0 // constant channel: leave it centered but unscaled
                }
            })
            .collect();
        FeatureScaler {
            mean: Tensor::from_vec_unchecked(&[p], mean),
            inv_std: Tensor::from_vec_unchecked(&[p], inv_std),
        }
    }
}

/// The full network: all parameters plus the bookkeeping that must travel
/// with a checkpoint.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub sparse: SparseLayer,
    pub autoencoder: Autoencoder,
    pub convlstm: ConvLstmStack,
    pub head: PredictionHead,
    pub scaler: FeatureScaler,
    /// Train-split cells of every period this model has been trained on;
    /// fine-tuning enforces exclusivity against these.
    pub prior_train_cells: BTreeSet<(usize, usize)>,
}

impl Model {
    /// Seeded initialization: matrix weights uniform in ±1/√fan_in, biases
    /// zero, sparse weights at [`SPARSE_INIT`].
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, TensorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = config.input_features;
        let (hid, lat) = (config.hidden, config.latent_dim);
        let mut init = |shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::from_vec_unchecked(shape, data)
        };
        let autoencoder = Autoencoder {
            enc_w1: init(&[p, hid], p),
            enc_b1: Tensor::zeros(&[hid]),
            enc_w2: init(&[hid, lat], hid),
            enc_b2: Tensor::zeros(&[lat]),
            dec_w1: init(&[lat, hid], lat),
            dec_b1: Tensor::zeros(&[hid]),
            dec_w2: init(&[hid, p], hid),
            dec_b2: Tensor::zeros(&[p]),
        };
        let branches = config
            .kernels
            .iter()
            .map(|&k| {
                let cin = lat + hid;
                ConvLstmBranch {
                    kernel_size: k,
                    weights: init(&[k, k, cin, 4 * hid], k * k * cin),
                    bias: Tensor::zeros(&[4 * hid]),
                }
            })
            .collect();
        let c_emb = config.embedding_channels();
        let head = PredictionHead {
            w1: init(&[c_emb, hid], c_emb),
            b1: Tensor::zeros(&[hid]),
            w2: init(&[hid, 1], hid),
            b2: Tensor::zeros(&[1]),
        };
        Ok(Model {
            sparse: SparseLayer::new(p, config.tau),
            autoencoder,
            convlstm: ConvLstmStack { branches },
            head,
            scaler: FeatureScaler::identity(p),
            prior_train_cells: BTreeSet::new(),
            config,
        })
    }

    /// All parameters in a fixed, checkpoint-stable order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("sparse.weights".into(), &self.sparse.weights),
            ("ae.enc_w1".into(), &self.autoencoder.enc_w1),
            ("ae.enc_b1".into(), &self.autoencoder.enc_b1),
            ("ae.enc_w2".into(), &self.autoencoder.enc_w2),
            ("ae.enc_b2".into(), &self.autoencoder.enc_b2),
            ("ae.dec_w1".into(), &self.autoencoder.dec_w1),
            ("ae.dec_b1".into(), &self.autoencoder.dec_b1),
            ("ae.dec_w2".into(), &self.autoencoder.dec_w2),
            ("ae.dec_b2".into(), &self.autoencoder.dec_b2),
        ];
        for b in &self.convlstm.branches {
            out.push((format!("convlstm.k{}.weights", b.kernel_size), &b.weights));
            out.push((format!("convlstm.k{}.bias", b.kernel_size), &b.bias));
        }
        out.push(("head.w1".into(), &self.head.w1));
        out.push(("head.b1".into(), &self.head.b1));
        out.push(("head.w2".into(), &self.head.w2));
        out.push(("head.b2".into(), &self.head.b2));
        out
    }

    /// Mutable view of the parameters, same order as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("sparse.weights".into(), &mut self.sparse.weights),
            ("ae.enc_w1".into(), &mut self.autoencoder.enc_w1),
            ("ae.enc_b1".into(), &mut self.autoencoder.enc_b1),
            ("ae.enc_w2".into(), &mut self.autoencoder.enc_w2),
            ("ae.enc_b2".into(), &mut self.autoencoder.enc_b2),
            ("ae.dec_w1".into(), &mut self.autoencoder.dec_w1),
            ("ae.dec_b1".into(), &mut self.autoencoder.dec_b1),
            ("ae.dec_w2".into(), &mut self.autoencoder.dec_w2),
            ("ae.dec_b2".into(), &mut self.autoencoder.dec_b2),
        ];
        for b in &mut self.convlstm.branches {
            out.push((format!("convlstm.k{}.weights", b.kernel_size), &mut b.weights));
            out.push((format!("convlstm.k{}.bias", b.kernel_size), &mut b.bias));
        }
        out.push(("head.w1".into(), &mut self.head.w1));
        out.push(("head.b1".into(), &mut self.head.b1));
        out.push(("head.w2".into(), &mut self.head.w2));
        out.push(("head.b2".into(), &mut self.head.b2));
        out
    }

    /// Registers every parameter on a tape and returns the handle bundle.
    pub fn register<'t>(&self, tape: &'t Tape) -> ModelVars<'t> {
        let leaves: Vec<Var<'t>> = self
            .params()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect();
        self.vars_from_ordered(&leaves)
    }

    /// Rebuilds the handle bundle from leaves laid out in [`Model::params`]
    /// order (the inverse of [`ModelVars::ordered`]).
    pub fn vars_from_ordered<'t>(&self, leaves: &[Var<'t>]) -> ModelVars<'t> {
        assert_eq!(leaves.len(), self.params().len(), "parameter count mismatch");
        let mut it = leaves.iter().copied();
        let mut next = || it.next().expect("checked length");
        let vars = ModelVars {
            sparse_weights: next(),
            enc_w1: next(),
            enc_b1: next(),
            enc_w2: next(),
            enc_b2: next(),
            dec_w1: next(),
            dec_b1: next(),
            dec_w2: next(),
            dec_b2: next(),
            branches: (0..self.convlstm.branches.len())
                .map(|_| BranchVars {
                    weights: next(),
                    bias: next(),
                })
                .collect(),
            head_w1: next(),
            head_b1: next(),
            head_w2: next(),
            head_b2: next(),
            tau: self.sparse.tau,
            hidden: self.config.hidden,
        };
        debug_assert_eq!(vars.ordered().len(), self.params().len());
        vars
    }
}

pub struct BranchVars<'t> {
    pub weights: Var<'t>,
    pub bias: Var<'t>,
}

/// Tape handles for all parameters of one forward pass.
pub struct ModelVars<'t> {
    pub sparse_weights: Var<'t>,
    pub enc_w1: Var<'t>,
    pub enc_b1: Var<'t>,
    pub enc_w2: Var<'t>,
    pub enc_b2: Var<'t>,
    pub dec_w1: Var<'t>,
    pub dec_b1: Var<'t>,
    pub dec_w2: Var<'t>,
    pub dec_b2: Var<'t>,
    pub branches: Vec<BranchVars<'t>>,
    pub head_w1: Var<'t>,
    pub head_b1: Var<'t>,
    pub head_w2: Var<'t>,
    pub head_b2: Var<'t>,
    tau: f64,
    hidden: usize,
}

impl<'t> ModelVars<'t> {
    /// Parameter handles in [`Model::params`] order.
    pub fn ordered(&self) -> Vec<Var<'t>> {
        let mut out = vec![
            self.sparse_weights,
            self.enc_w1,
            self.enc_b1,
            self.enc_w2,
            self.enc_b2,
            self.dec_w1,
            self.dec_b1,
            self.dec_w2,
            self.dec_b2,
        ];
        for b in &self.branches {
            out.push(b.weights);
            out.push(b.bias);
        }
        out.extend([self.head_w1, self.head_b1, self.head_w2, self.head_b2]);
        out
    }

    /// Sparse layer: `x_sp[..., p] = w_p·x[..., p]` where `|w_p| ≥ τ`, else 0.
    /// The on/off gate is recomputed from the current weights each pass.
    pub fn sparse_forward(&self, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let gated = self.sparse_weights.hard_threshold(self.tau);
        x.mul(gated)
    }

    /// Encoder: `[rows, P] -> [rows, latent]`, tanh activations.
    pub fn encode(&self, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let h = x.matmul(self.enc_w1)?.add(self.enc_b1)?.tanh();
        Ok(h.matmul(self.enc_w2)?.add(self.enc_b2)?.tanh())
    }

    /// Decoder: `[rows, latent] -> [rows, P]`, linear output.
    pub fn decode(&self, e: Var<'t>) -> Result<Var<'t>, TensorError> {
        let h = e.matmul(self.dec_w1)?.add(self.dec_b1)?.tanh();
        h.matmul(self.dec_w2)?.add(self.dec_b2)
    }

    /// One ConvLSTM update for a branch: gates from one convolution over the
    /// channel-concatenated `[input, hidden]` map.
    ///
    /// `i, f, o = σ(conv)`, `g = tanh(conv)`, `c′ = f⊙c + i⊙g`,
    /// `h′ = o⊙tanh(c′)`.
    pub fn convlstm_step(
        &self,
        branch: usize,
        state: (Var<'t>, Var<'t>),
        e_t: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>), TensorError> {
        let (h, c) = state;
        let hid = self.hidden;
        let b = &self.branches[branch];
        let x = concat(&[e_t, h], 3)?;
        let gates = x.conv2d_same(b.weights)?.add(b.bias)?;
        let i = gates.slice(3, 0, hid)?.sigmoid();
        let f = gates.slice(3, hid, hid)?.sigmoid();
        let o = gates.slice(3, 2 * hid, hid)?.sigmoid();
        let g = gates.slice(3, 3 * hid, hid)?.tanh();
        let c_next = f.mul(c)?.add(i.mul(g)?)?;
        let h_next = o.mul(c_next.tanh())?;
        Ok((h_next, c_next))
    }

    /// Unrolls every branch over the window from zero states and concatenates
    /// the hidden sequences on channels: `[T', H, W, latent] -> [T', H, W, C]`.
    pub fn st_embed(&self, e_window: Var<'t>) -> Result<Var<'t>, TensorError> {
        let shape = e_window.shape();
        if shape.len() != 4 {
            return Err(TensorError::Shape(format!(
                "st_embed expects [T,H,W,latent], got {shape:?}"
            )));
        }
        let (t_len, h, w) = (shape[0], shape[1], shape[2]);
        let tape = e_window.tape;
        let mut per_time: Vec<Vec<Var<'t>>> = vec![Vec::new(); t_len];
        for branch in 0..self.branches.len() {
            let mut state = (
                tape.constant(Tensor::zeros(&[1, h, w, self.hidden])),
                tape.constant(Tensor::zeros(&[1, h, w, self.hidden])),
            );
            for t in 0..t_len {
                let e_t = e_window.slice(0, t, 1)?;
                state = self.convlstm_step(branch, state, e_t)?;
                per_time[t].push(state.0);
            }
        }
        let frames: Vec<Var<'t>> = per_time
            .into_iter()
            .map(|hs| Ok(concat(&hs, 3)?.reshape(&[h, w, self.hidden * self.branches.len()])?))
            .collect::<Result<_, TensorError>>()?;
        stack(&frames)
    }

    /// Prediction head applied per cell: `[H, W, C] -> [H, W]`.
    pub fn predict(&self, r_t: Var<'t>) -> Result<Var<'t>, TensorError> {
        let shape = r_t.shape();
        if shape.len() != 3 {
            return Err(TensorError::Shape(format!(
                "predict expects [H,W,C], got {shape:?}"
            )));
        }
        let (h, w, ch) = (shape[0], shape[1], shape[2]);
        let flat = r_t.reshape(&[h * w, ch])?;
        let hidden = flat.matmul(self.head_w1)?.add(self.head_b1)?.tanh();
        let out = hidden.matmul(self.head_w2)?.add(self.head_b2)?;
        out.reshape(&[h, w])
    }
}

/// Everything a training step needs from one window's forward pass.
pub struct WindowOutput<'t> {
    /// Sparse-layer output, flattened to `[T'·H·W, P]`.
    pub x_sp: Var<'t>,
    /// Autoencoder reconstruction of `x_sp`, same shape.
    pub x_hat: Var<'t>,
    /// Spatiotemporal embeddings `[T', H, W, C]`.
    pub embeddings: Var<'t>,
    /// Prediction for the window's final time, `[H, W]`.
    pub prediction: Var<'t>,
}

impl Model {
    /// Full pipeline on one window `[T', H, W, P]` of raw features:
    /// standardize → sparse layer → encode → ConvLSTM stack → head.
    pub fn forward_window<'t>(
        &self,
        vars: &ModelVars<'t>,
        tape: &'t Tape,
        window: &Tensor,
    ) -> Result<WindowOutput<'t>, TensorError> {
        let shape = window.shape().to_vec();
        if shape.len() != 4 || shape[3] != self.config.input_features {
            return Err(TensorError::Shape(format!(
                "window shape {shape:?} does not end in P={}",
                self.config.input_features
            )));
        }
        let (t_len, h, w, p) = (shape[0], shape[1], shape[2], shape[3]);
        let x = tape.constant(window.clone());
        let mean = tape.constant(self.scaler.mean.clone());
        let inv_std = tape.constant(self.scaler.inv_std.clone());
        let x_norm = x.sub(mean)?.mul(inv_std)?;
        let x_sp = vars.sparse_forward(x_norm)?.reshape(&[t_len * h * w, p])?;
        let e = vars.encode(x_sp)?;
        let x_hat = vars.decode(e)?;
        let e_window = e.reshape(&[t_len, h, w, self.config.latent_dim])?;
        let embeddings = vars.st_embed(e_window)?;
        let r_last = embeddings
            .slice(0, t_len - 1, 1)?
            .reshape(&[h, w, self.config.embedding_channels()])?;
        let prediction = vars.predict(r_last)?;
        Ok(WindowOutput {
            x_sp,
            x_hat,
            embeddings,
            prediction,
        })
    }
}

#[cfg(test)]
mod tests;
