//! Differentiable operations recorded on the tape.

use super::tape::{BackwardFn, Var};
use super::tensor::{gemm, Tensor};
use super::TensorError;

/// How two shapes line up for an elementwise op: either identical, or the
/// smaller shape is a suffix of the larger and is repeated over the leading
/// dims (a scalar broadcasts with anything).
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, bool, bool), TensorError> {
    if a == b {
        return Ok((a.to_vec(), false, false));
    }
    if a.len() >= b.len() && a.ends_with(b) {
        return Ok((a.to_vec(), false, true));
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok((b.to_vec(), true, false));
    }
    Err(TensorError::Shape(format!(
        "shapes {a:?} and {b:?} are not broadcast-compatible"
    )))
}

/// Sums `grad` over leading dims so it matches `shape` (the broadcast operand).
fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let small: usize = shape.iter().product();
    let mut out = vec![0.0; small];
    for chunk in grad.data().chunks_exact(small.max(1)) {
        for (o, g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    Tensor::from_vec_unchecked(shape, out)
}

/// Evaluates a binary elementwise op under the broadcast rule.
fn zip_broadcast(a: &Tensor, b: &Tensor, out_shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (ad, bd) = (a.data(), b.data());
    let n: usize = out_shape.iter().product();
    let (la, lb) = (ad.len().max(1), bd.len().max(1));
    let mut out = Vec::with_capacity(n);
    if la == n && lb == n {
        out.extend(ad.iter().zip(bd).map(|(x, y)| f(*x, *y)));
    } else if lb < la {
        for (i, x) in ad.iter().enumerate() {
            out.push(f(*x, bd[i % lb]));
        }
    } else {
        for (i, y) in bd.iter().enumerate() {
            out.push(f(ad[i % la], *y));
        }
    }
    Tensor::from_vec_unchecked(out_shape, out)
}

impl<'t> Var<'t> {
    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        back: impl Fn(&Tensor, &Tensor, &Tensor) -> Tensor + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let y = Tensor::from_vec_unchecked(x.shape(), x.iter().map(|v| f(*v)).collect());
        let saved_y = y.clone();
        let id = self.id;
        let back_fn: BackwardFn = Box::new(move |g| vec![(id, back(g, &x, &saved_y))]);
        self.tape.push(y, Some(back_fn))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (a, b) = (self.value(), other.value());
        let (shape, a_bc, b_bc) = broadcast_shape(a.shape(), b.shape())?;
        let out = zip_broadcast(&a, &b, &shape, |x, y| x + y);
        let (ia, ib) = (self.id, other.id);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let back: BackwardFn = Box::new(move |g| {
            let ga = if a_bc { reduce_to(g, &sa) } else { g.clone() };
            let gb = if b_bc { reduce_to(g, &sb) } else { g.clone() };
            vec![(ia, ga), (ib, gb)]
        });
        Ok(self.tape.push(out, Some(back)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (a, b) = (self.value(), other.value());
        let (shape, a_bc, b_bc) = broadcast_shape(a.shape(), b.shape())?;
        let out = zip_broadcast(&a, &b, &shape, |x, y| x - y);
        let (ia, ib) = (self.id, other.id);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let back: BackwardFn = Box::new(move |g| {
            let ga = if a_bc { reduce_to(g, &sa) } else { g.clone() };
            let mut neg = g.clone();
            for v in neg.data_mut() {
                *v = -*v;
            }
            let gb = if b_bc { reduce_to(&neg, &sb) } else { neg };
            vec![(ia, ga), (ib, gb)]
        });
        Ok(self.tape.push(out, Some(back)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (a, b) = (self.value(), other.value());
        let (shape, a_bc, b_bc) = broadcast_shape(a.shape(), b.shape())?;
        let out = zip_broadcast(&a, &b, &shape, |x, y| x * y);
        let (ia, ib) = (self.id, other.id);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let back: BackwardFn = Box::new(move |g| {
            let g_times_b = zip_broadcast(g, &b, g.shape(), |x, y| x * y);
            let g_times_a = zip_broadcast(g, &a, g.shape(), |x, y| x * y);
            let ga = if a_bc { reduce_to(&g_times_b, &sa) } else { g_times_b };
            let gb = if b_bc { reduce_to(&g_times_a, &sb) } else { g_times_a };
            vec![(ia, ga), (ib, gb)]
        });
        Ok(self.tape.push(out, Some(back)))
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(
            |x| -x,
            |g, _, _| {
                let mut out = g.clone();
                for v in out.data_mut() {
                    *v = -*v;
                }
                out
            },
        )
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(
            move |x| c * x,
            move |g, _, _| {
                let mut out = g.clone();
                for v in out.data_mut() {
                    *v *= c;
                }
                out
            },
        )
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |g, _, _| g.clone())
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |g, _, y| {
                let mut out = g.clone();
                for (v, s) in out.data_mut().iter_mut().zip(y.data()) {
                    *v *= s * (1.0 - s);
                }
                out
            },
        )
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(
            |x| x.tanh(),
            |g, _, y| {
                let mut out = g.clone();
                for (v, t) in out.data_mut().iter_mut().zip(y.data()) {
                    *v *= 1.0 - t * t;
                }
                out
            },
        )
    }

    pub fn exp(self) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        if let Some(bad) = x.iter().find(|v| v.exp().is_infinite()) {
            return Err(TensorError::Domain(format!("exp overflow for input {bad}")));
        }
        Ok(self.unary(
            |x| x.exp(),
            |g, _, y| {
                let mut out = g.clone();
                for (v, e) in out.data_mut().iter_mut().zip(y.data()) {
                    *v *= e;
                }
                out
            },
        ))
    }

    pub fn ln(self) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        if let Some(bad) = x.iter().find(|v| **v <= 0.0) {
            return Err(TensorError::Domain(format!("log of nonpositive value {bad}")));
        }
        Ok(self.unary(
            |x| x.ln(),
            |g, x, _| {
                let mut out = g.clone();
                for (v, xv) in out.data_mut().iter_mut().zip(x.data()) {
                    *v /= xv;
                }
                out
            },
        ))
    }

    pub fn sqrt(self) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        if let Some(bad) = x.iter().find(|v| **v <= 0.0) {
            return Err(TensorError::Domain(format!("sqrt of nonpositive value {bad}")));
        }
        Ok(self.unary(
            |x| x.sqrt(),
            |g, _, y| {
                let mut out = g.clone();
                for (v, s) in out.data_mut().iter_mut().zip(y.data()) {
                    *v *= 0.5 / s;
                }
                out
            },
        ))
    }

    pub fn recip(self) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        if let Some(bad) = x.iter().find(|v| **v == 0.0) {
            return Err(TensorError::Domain(format!("reciprocal of zero ({bad})")));
        }
        Ok(self.unary(
            |x| 1.0 / x,
            |g, _, y| {
                let mut out = g.clone();
                for (v, r) in out.data_mut().iter_mut().zip(y.data()) {
                    *v *= -r * r;
                }
                out
            },
        ))
    }

    /// |x| with the subgradient convention sign(0) = 0.
    pub fn abs(self) -> Var<'t> {
        self.unary(
            |x| x.abs(),
            |g, x, _| {
                let mut out = g.clone();
                for (v, xv) in out.data_mut().iter_mut().zip(x.data()) {
                    *v *= if *xv > 0.0 {
                        1.0
                    } else if *xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                out
            },
        )
    }

    pub fn square(self) -> Var<'t> {
        self.unary(
            |x| x * x,
            |g, x, _| {
                let mut out = g.clone();
                for (v, xv) in out.data_mut().iter_mut().zip(x.data()) {
                    *v *= 2.0 * xv;
                }
                out
            },
        )
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let total: f64 = x.iter().sum();
        let shape = x.shape().to_vec();
        let id = self.id;
        let back: BackwardFn = Box::new(move |g| {
            let gv = g.data()[0];
            vec![(id, Tensor::filled(&shape, gv))]
        });
        self.tape.push(Tensor::scalar(total), Some(back))
    }

    pub fn mean(self) -> Var<'t> {
        let x = self.value();
        let n = x.len() as f64;
        let total: f64 = x.iter().sum();
        let shape = x.shape().to_vec();
        let id = self.id;
        let back: BackwardFn = Box::new(move |g| {
            let gv = g.data()[0] / n;
            vec![(id, Tensor::filled(&shape, gv))]
        });
        self.tape.push(Tensor::scalar(total / n), Some(back))
    }

    /// Matrix product of 2-d operands: `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape(format!(
                "matmul requires [m,k]·[k,n], got {sa:?} and {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, a.data(), false, b.data(), false, 0.0, &mut out);
        let (ia, ib) = (self.id, other.id);
        let back: BackwardFn = Box::new(move |g| {
            // dA = g·Bᵀ, dB = Aᵀ·g
            let mut da = vec![0.0; m * k];
            gemm(m, n, k, 1.0, g.data(), false, b.data(), true, 0.0, &mut da);
            let mut db = vec![0.0; k * n];
            gemm(k, m, n, 1.0, a.data(), true, g.data(), false, 0.0, &mut db);
            vec![
                (ia, Tensor::from_vec_unchecked(&[m, k], da)),
                (ib, Tensor::from_vec_unchecked(&[k, n], db)),
            ]
        });
        Ok(self.tape.push(Tensor::from_vec_unchecked(&[m, n], out), Some(back)))
    }

    /// Same-padded stride-1 convolution, channels last.
    ///
    /// Input `[n,h,w,c_in]`, kernel `[k,k,c_in,c_out]` with odd `k`; output
    /// `[n,h,w,c_out]`. Lowered to a GEMM over an im2col buffer that is kept
    /// for the backward pass.
    pub fn conv2d_same(self, kernel: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (x, w) = (self.value(), kernel.value());
        let (sx, sw) = (x.shape().to_vec(), w.shape().to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(TensorError::Shape(format!(
                "conv2d_same requires input [n,h,w,c_in] and kernel [k,k,c_in,c_out], got {sx:?} and {sw:?}"
            )));
        }
        let (n, h, wd, cin) = (sx[0], sx[1], sx[2], sx[3]);
        let (k, cout) = (sw[0], sw[3]);
        if sw[1] != k || sw[2] != cin {
            return Err(TensorError::Shape(format!(
                "kernel {sw:?} incompatible with input {sx:?}"
            )));
        }
        if k % 2 == 0 {
            return Err(TensorError::Shape(format!("conv kernel size {k} must be odd")));
        }
        let pad = (k - 1) / 2;
        let patch = k * k * cin;
        let cells = h * wd;
        let mut out = vec![0.0; n * cells * cout];
        let mut cols: Vec<Tensor> = Vec::with_capacity(n);
        for img in 0..n {
            let col = im2col(&x.data()[img * cells * cin..(img + 1) * cells * cin], h, wd, cin, k, pad);
            gemm(
                cells,
                patch,
                cout,
                1.0,
                col.data(),
                false,
                w.data(),
                false,
                0.0,
                &mut out[img * cells * cout..(img + 1) * cells * cout],
            );
            cols.push(col);
        }
        let (ix, iw) = (self.id, kernel.id);
        let back: BackwardFn = Box::new(move |g| {
            let mut dw = vec![0.0; patch * cout];
            let mut dx = vec![0.0; n * cells * cin];
            let mut dcol = vec![0.0; cells * patch];
            for img in 0..n {
                let gslice = &g.data()[img * cells * cout..(img + 1) * cells * cout];
                // dW += colᵀ·g
                gemm(patch, cells, cout, 1.0, cols[img].data(), true, gslice, false, 1.0, &mut dw);
                // dcol = g·Wᵀ, then scatter back to input positions
                gemm(cells, cout, patch, 1.0, gslice, false, w.data(), true, 0.0, &mut dcol);
                col2im(&dcol, h, wd, cin, k, pad, &mut dx[img * cells * cin..(img + 1) * cells * cin]);
            }
            vec![
                (ix, Tensor::from_vec_unchecked(&[n, h, wd, cin], dx)),
                (iw, Tensor::from_vec_unchecked(&[k, k, cin, cout], dw)),
            ]
        });
        Ok(self
            .tape
            .push(Tensor::from_vec_unchecked(&[n, h, wd, cout], out), Some(back)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        let out = x.reshaped(shape)?;
        let orig = x.shape().to_vec();
        let id = self.id;
        let back: BackwardFn = Box::new(move |g| {
            vec![(id, g.reshaped(&orig).expect("reshape backward preserves length"))]
        });
        Ok(self.tape.push(out, Some(back)))
    }

    /// Contiguous slice along one axis.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::Shape(format!(
                "slice axis {axis} range {start}..{} out of bounds for {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let id = self.id;
        let back: BackwardFn = Box::new(move |g| {
            let mut dx = vec![0.0; outer * dim * inner];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * dim + start) * inner;
                dx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            vec![(id, Tensor::from_vec_unchecked(&shape, dx))]
        });
        Ok(self.tape.push(Tensor::from_vec_unchecked(&out_shape, out), Some(back)))
    }

    /// Rows of a tensor selected along axis 0 (duplicates allowed).
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.is_empty() {
            return Err(TensorError::Shape("gather_rows on a scalar".into()));
        }
        let rows = shape[0];
        let inner: usize = shape[1..].iter().product();
        if let Some(bad) = indices.iter().find(|i| **i >= rows) {
            return Err(TensorError::Shape(format!(
                "gather index {bad} out of bounds for {rows} rows"
            )));
        }
        let idx = indices.to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = idx.len();
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in &idx {
            out.extend_from_slice(&x.data()[i * inner..(i + 1) * inner]);
        }
        let id = self.id;
        let back: BackwardFn = Box::new(move |g| {
            let mut dx = vec![0.0; rows * inner];
            for (r, &i) in idx.iter().enumerate() {
                let src = &g.data()[r * inner..(r + 1) * inner];
                for (d, s) in dx[i * inner..(i + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
            vec![(id, Tensor::from_vec_unchecked(&shape, dx))]
        });
        Ok(self.tape.push(Tensor::from_vec_unchecked(&out_shape, out), Some(back)))
    }

    /// Gate that zeroes entries with magnitude below `tau`; the gate pattern
    /// is treated as constant in the backward pass.
    pub fn hard_threshold(self, tau: f64) -> Var<'t> {
        let x = self.value();
        let mask: Vec<bool> = x.iter().map(|v| v.abs() >= tau).collect();
        let out = Tensor::from_vec_unchecked(
            x.shape(),
            x.iter().zip(&mask).map(|(v, m)| if *m { *v } else { 0.0 }).collect(),
        );
        let id = self.id;
        let back: BackwardFn = Box::new(move |g| {
            let mut dx = g.clone();
            for (v, m) in dx.data_mut().iter_mut().zip(&mask) {
                if !*m {
                    *v = 0.0;
                }
            }
            vec![(id, dx)]
        });
        self.tape.push(out, Some(back))
    }

    /// Copies the value onto the tape as a constant, cutting the gradient path.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    /// Squared differences `(x[a]-x[b])²` for a list of index pairs into a
    /// 1-d tensor.
    pub fn pair_sq_diff(self, pairs: &[(u32, u32)]) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        if x.shape().len() != 1 {
            return Err(TensorError::Shape(format!(
                "pair_sq_diff requires a 1-d tensor, got {:?}",
                x.shape()
            )));
        }
        let m = x.len();
        if let Some(bad) = pairs.iter().find(|(a, b)| *a as usize >= m || *b as usize >= m) {
            return Err(TensorError::Shape(format!(
                "pair index {bad:?} out of bounds for {m} values"
            )));
        }
        let d = x.data();
        let z: Vec<f64> = pairs
            .iter()
            .map(|&(a, b)| {
                let diff = d[a as usize] - d[b as usize];
                diff * diff
            })
            .collect();
        let pairs = pairs.to_vec();
        let id = self.id;
        let back: BackwardFn = Box::new(move |g| {
            let mut dx = vec![0.0; m];
            let d = x.data();
            for (l, &(a, b)) in pairs.iter().enumerate() {
                let two_diff = 2.0 * (d[a as usize] - d[b as usize]) * g.data()[l];
                dx[a as usize] += two_diff;
                dx[b as usize] -= two_diff;
            }
            vec![(id, Tensor::from_vec_unchecked(&[m], dx))]
        });
        let len = z.len();
        Ok(self.tape.push(Tensor::from_vec_unchecked(&[len], z), Some(back)))
    }

    /// Spatial smoothness penalty over `[t,h,w,c]` embeddings: for every cell
    /// and every Chebyshev ring `k = 1..=k_s`, sums `(1/k)·mean_c(R_i - R_j)²`
    /// over ordered neighbor pairs within each time slice. Border cells use
    /// only their existing neighbors.
    pub fn stc_spatial(self, k_s: usize) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        let s = x.shape().to_vec();
        if s.len() != 4 {
            return Err(TensorError::Shape(format!(
                "stc_spatial requires [t,h,w,c], got {s:?}"
            )));
        }
        let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
        let pairs = spatial_pairs(h, w, k_s);
        let d = x.data();
        let mut total = 0.0;
        for ti in 0..t {
            let base = ti * h * w * c;
            for &(i, j, inv_k) in &pairs {
                let (pi, pj) = (base + i * c, base + j * c);
                let mut acc = 0.0;
                for ch in 0..c {
                    let diff = d[pi + ch] - d[pj + ch];
                    acc += diff * diff;
                }
                total += inv_k * acc / c as f64;
            }
        }
        let id = self.id;
        let back: BackwardFn = Box::new(move |g| {
            let gv = g.data()[0];
            let d = x.data();
            let mut dx = vec![0.0; d.len()];
            for ti in 0..t {
                let base = ti * h * w * c;
                for &(i, j, inv_k) in &pairs {
                    let (pi, pj) = (base + i * c, base + j * c);
                    let scale = gv * inv_k * 2.0 / c as f64;
                    for ch in 0..c {
                        let diff = scale * (d[pi + ch] - d[pj + ch]);
                        dx[pi + ch] += diff;
                        dx[pj + ch] -= diff;
                    }
                }
            }
            vec![(id, Tensor::from_vec_unchecked(&s, dx))]
        });
        Ok(self.tape.push(Tensor::scalar(total), Some(back)))
    }

    /// Temporal smoothness penalty over `[t,h,w,c]` embeddings: same cell at
    /// lags `k = 1..=k_t`, ordered pairs, weighted `1/k`.
    pub fn stc_temporal(self, k_t: usize) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        let s = x.shape().to_vec();
        if s.len() != 4 {
            return Err(TensorError::Shape(format!(
                "stc_temporal requires [t,h,w,c], got {s:?}"
            )));
        }
        let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
        let cells = h * w;
        let d = x.data();
        let mut total = 0.0;
        for k in 1..=k_t {
            if k >= t {
                break;
            }
            let inv_k = 1.0 / k as f64;
            for ti in 0..t - k {
                let (b0, b1) = (ti * cells * c, (ti + k) * cells * c);
                for cell in 0..cells {
                    let (p0, p1) = (b0 + cell * c, b1 + cell * c);
                    let mut acc = 0.0;
                    for ch in 0..c {
                        let diff = d[p0 + ch] - d[p1 + ch];
                        acc += diff * diff;
                    }
                    // ordered pairs: (t, t+k) and (t+k, t) contribute equally
                    total += 2.0 * inv_k * acc / c as f64;
                }
            }
        }
        let id = self.id;
        let back: BackwardFn = Box::new(move |g| {
            let gv = g.data()[0];
            let d = x.data();
            let mut dx = vec![0.0; d.len()];
            for k in 1..=k_t {
                if k >= t {
                    break;
                }
                let inv_k = 1.0 / k as f64;
                for ti in 0..t - k {
                    let (b0, b1) = (ti * cells * c, (ti + k) * cells * c);
                    for cell in 0..cells {
                        let (p0, p1) = (b0 + cell * c, b1 + cell * c);
                        let scale = gv * inv_k * 4.0 / c as f64;
                        for ch in 0..c {
                            let diff = scale * (d[p0 + ch] - d[p1 + ch]);
                            dx[p0 + ch] += diff;
                            dx[p1 + ch] -= diff;
                        }
                    }
                }
            }
            vec![(id, Tensor::from_vec_unchecked(&s, dx))]
        });
        Ok(self.tape.push(Tensor::scalar(total), Some(back)))
    }
}

/// Concatenates along `axis`; shapes must agree on every other axis.
pub fn concat<'t>(vars: &[Var<'t>], axis: usize) -> Result<Var<'t>, TensorError> {
    if vars.is_empty() {
        return Err(TensorError::Shape("concat of zero tensors".into()));
    }
    let values: Vec<Tensor> = vars.iter().map(|v| v.value()).collect();
    let first = values[0].shape().to_vec();
    if axis >= first.len() {
        return Err(TensorError::Shape(format!(
            "concat axis {axis} out of bounds for {first:?}"
        )));
    }
    let mut dims = Vec::with_capacity(values.len());
    for v in &values {
        let s = v.shape();
        if s.len() != first.len()
            || s.iter()
                .zip(&first)
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(TensorError::Shape(format!(
                "concat shapes {:?} and {:?} differ off-axis",
                first,
                v.shape()
            )));
        }
        dims.push(s[axis]);
    }
    let total: usize = dims.iter().sum();
    let mut out_shape = first.clone();
    out_shape[axis] = total;
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * total * inner];
    let mut offset = 0;
    for (v, &dim) in values.iter().zip(&dims) {
        for o in 0..outer {
            let src = o * dim * inner;
            let dst = (o * total + offset) * inner;
            out[dst..dst + dim * inner].copy_from_slice(&v.data()[src..src + dim * inner]);
        }
        offset += dim;
    }
    let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    let back: BackwardFn = Box::new(move |g| {
        let mut grads = Vec::with_capacity(ids.len());
        let mut offset = 0;
        for (&id, shape) in ids.iter().zip(&shapes) {
            let dim = shape[axis];
            let mut part = vec![0.0; outer * dim * inner];
            for o in 0..outer {
                let src = (o * total + offset) * inner;
                let dst = o * dim * inner;
                part[dst..dst + dim * inner].copy_from_slice(&g.data()[src..src + dim * inner]);
            }
            grads.push((id, Tensor::from_vec_unchecked(shape, part)));
            offset += dim;
        }
        grads
    });
    Ok(vars[0].tape.push(Tensor::from_vec_unchecked(&out_shape, out), Some(back)))
}

/// Stacks equal-shaped tensors along a new leading axis.
pub fn stack<'t>(vars: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
    if vars.is_empty() {
        return Err(TensorError::Shape("stack of zero tensors".into()));
    }
    let values: Vec<Tensor> = vars.iter().map(|v| v.value()).collect();
    let first = values[0].shape().to_vec();
    if values.iter().any(|v| v.shape() != first) {
        return Err(TensorError::Shape("stack requires equal shapes".into()));
    }
    let inner: usize = first.iter().product();
    let mut out_shape = vec![values.len()];
    out_shape.extend_from_slice(&first);
    let mut out = Vec::with_capacity(values.len() * inner);
    for v in &values {
        out.extend_from_slice(v.data());
    }
    let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
    let back: BackwardFn = Box::new(move |g| {
        ids.iter()
            .enumerate()
            .map(|(i, &id)| {
                (
                    id,
                    Tensor::from_vec_unchecked(&first, g.data()[i * inner..(i + 1) * inner].to_vec()),
                )
            })
            .collect()
    });
    Ok(vars[0].tape.push(Tensor::from_vec_unchecked(&out_shape, out), Some(back)))
}

/// Ordered neighbor pairs `(i, j, 1/k)` for Chebyshev rings `k = 1..=k_s`
/// on an `h × w` grid, cells flattened row-major.
fn spatial_pairs(h: usize, w: usize, k_s: usize) -> Vec<(usize, usize, f64)> {
    let mut pairs = Vec::new();
    for r in 0..h as isize {
        for col in 0..w as isize {
            let i = (r as usize) * w + col as usize;
            for k in 1..=k_s as isize {
                let inv_k = 1.0 / k as f64;
                for dr in -k..=k {
                    for dc in -k..=k {
                        if dr.abs().max(dc.abs()) != k {
                            continue; // ring k only
                        }
                        let (nr, nc) = (r + dr, col + dc);
                        if nr < 0 || nr >= h as isize || nc < 0 || nc >= w as isize {
                            continue;
                        }
                        pairs.push((i, (nr as usize) * w + nc as usize, inv_k));
                    }
                }
            }
        }
    }
    pairs
}

/// Expands `[h,w,cin]` (flattened) into patch rows `[h·w, k·k·cin]` with zero
/// padding, so convolution becomes one GEMM.
fn im2col(x: &[f64], h: usize, w: usize, cin: usize, k: usize, pad: usize) -> Tensor {
    let patch = k * k * cin;
    let mut col = vec![0.0; h * w * patch];
    for y in 0..h {
        for xw in 0..w {
            let row = (y * w + xw) * patch;
            for dy in 0..k {
                let sy = y + dy;
                if sy < pad || sy >= h + pad {
                    continue;
                }
                let sy = sy - pad;
                for dx in 0..k {
                    let sx = xw + dx;
                    if sx < pad || sx >= w + pad {
                        continue;
                    }
                    let sx = sx - pad;
                    let src = (sy * w + sx) * cin;
                    let dst = row + (dy * k + dx) * cin;
                    col[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    Tensor::from_vec_unchecked(&[h * w, patch], col)
}

/// Adjoint of [`im2col`]: scatter-adds patch-row gradients back to input positions.
fn col2im(dcol: &[f64], h: usize, w: usize, cin: usize, k: usize, pad: usize, dx: &mut [f64]) {
    let patch = k * k * cin;
    for y in 0..h {
        for xw in 0..w {
            let row = (y * w + xw) * patch;
            for dy in 0..k {
                let sy = y + dy;
                if sy < pad || sy >= h + pad {
                    continue;
                }
                let sy = sy - pad;
                for dx_k in 0..k {
                    let sx = xw + dx_k;
                    if sx < pad || sx >= w + pad {
                        continue;
                    }
                    let sx = sx - pad;
                    let src = row + (dy * k + dx_k) * cin;
                    let dst = (sy * w + sx) * cin;
                    for ci in 0..cin {
                        dx[dst + ci] += dcol[src + ci];
                    }
                }
            }
        }
    }
}
