//! Reverse-mode autodiff over [`Tensor`]s.
//!
//! Evaluation is eager: every op computes its output when it is added, so
//! forward values are always available. `backward` walks the arena in reverse
//! creation order (which is topological) and accumulates gradients for every
//! node on a path to a gradient-requiring leaf.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

enum Op<S: Scalar> {
    Leaf,
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var, S),
    MulScalar(Var, S),
    Abs(Var),
    Ln(Var),
    Sqrt(Var),
    Tanh(Var),
    LeakyRelu(Var, S),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    /// Mean over columns: [C, T] -> [C, 1].
    MeanCols(Var),
    /// w [O, I] * x [I, 1] -> [O, 1].
    MatVec(Var, Var),
    /// a [M, K] * b [K, N] -> [M, N].
    Matmul(Var, Var),
    /// x [Ci, L], w [Co, Ci*K] -> [Co, Lout]; zero padding.
    Conv1d {
        x: Var,
        w: Var,
        in_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// x [C, L] + b [C, 1] broadcast over columns.
    AddBias(Var, Var),
    Decimate2(Var),
    Repeat2(Var),
    /// Concatenate along rows: [C1, L] + [C2, L] -> [C1+C2, L].
    ConcatRows(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    PadZeroCols {
        x: Var,
        left: usize,
    },
    /// Reflection padding (no edge repeat) on both sides of each row.
    PadReflectCols {
        x: Var,
        pad: usize,
    },
    /// [1, L] -> [frames, win] with frame f starting at f*hop.
    Frame {
        x: Var,
        win: usize,
        hop: usize,
    },
    /// x [F, W] * w [1, W] row-wise broadcast.
    MulRowBcast(Var, Var),
    /// Power spectrum per row: [F, n_fft] -> [F, n_fft/2 + 1].
    RfftPower {
        x: Var,
        spectra: Vec<Complex<S>>,
        inverse: Arc<dyn Fft<S>>,
    },
    /// Cosine similarity of two flat tensors -> scalar.
    CosSim {
        a: Var,
        b: Var,
        norm_a: S,
        norm_b: S,
    },
    /// Softmax cross-entropy of flat logits against a class index -> scalar.
    CrossEntropy {
        logits: Var,
        label: usize,
        softmax: Vec<S>,
    },
}

struct Node<S: Scalar> {
    op: Op<S>,
    out: Tensor<S>,
    needs_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    planner: FftPlanner<S>,
}

/// Gradients keyed by [`Var`], produced by [`Graph::backward`].
pub struct Grads<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient of the root w.r.t. `v`, or zeros if `v` was not on a grad path.
    pub fn get(&self, v: Var, rows: usize, cols: usize) -> Tensor<S> {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(rows, cols, g.clone()),
            None => Tensor::zeros(rows, cols),
        }
    }

    pub fn take_flat(&mut self, v: Var) -> Option<Vec<S>> {
        self.grads[v.0].take()
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            planner: FftPlanner::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].out
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].out.shape()
    }

    fn push(&mut self, op: Op<S>, out: Tensor<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            out,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, t: Tensor<S>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, t, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t, false)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.len(), rows * cols, "reshape size mismatch");
        let out = Tensor::new(rows, cols, t.data.clone());
        let ng = self.ng(x);
        self.push(Op::Reshape(x), out, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(ta.rows, ta.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), out, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(&x, &y)| x - y)
            .collect();
        let out = Tensor::new(ta.rows, ta.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), out, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(ta.rows, ta.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), out, ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.rows, t.cols, t.data.iter().map(|&v| v + c).collect());
        let ng = self.ng(x);
        self.push(Op::AddScalar(x, c), out, ng)
    }

    pub fn mul_scalar(&mut self, x: Var, c: S) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.rows, t.cols, t.data.iter().map(|&v| v * c).collect());
        let ng = self.ng(x);
        self.push(Op::MulScalar(x, c), out, ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.rows, t.cols, t.data.iter().map(|&v| v.abs()).collect());
        let ng = self.ng(x);
        self.push(Op::Abs(x), out, ng)
    }

    /// Natural log; inputs must be strictly positive.
    pub fn ln(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.rows, t.cols, t.data.iter().map(|&v| v.ln()).collect());
        let ng = self.ng(x);
        self.push(Op::Ln(x), out, ng)
    }

    /// Square root; inputs must be strictly positive for a finite gradient.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.rows, t.cols, t.data.iter().map(|&v| v.sqrt()).collect());
        let ng = self.ng(x);
        self.push(Op::Sqrt(x), out, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.rows, t.cols, t.data.iter().map(|&v| v.tanh()).collect());
        let ng = self.ng(x);
        self.push(Op::Tanh(x), out, ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut data = vec![S::zero(); t.len()];
        for r in 0..t.rows {
            for c in 0..t.cols {
                data[c * t.rows + r] = t.data[r * t.cols + c];
            }
        }
        let out = Tensor::new(t.cols, t.rows, data);
        let ng = self.ng(x);
        self.push(Op::Transpose(x), out, ng)
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: S) -> Var {
        let t = self.value(x);
        let data = t
            .data
            .iter()
            .map(|&v| if v >= S::zero() { v } else { v * alpha })
            .collect();
        let out = Tensor::new(t.rows, t.cols, data);
        let ng = self.ng(x);
        self.push(Op::LeakyRelu(x, alpha), out, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data.iter().fold(S::zero(), |acc, &v| acc + v);
        let ng = self.ng(x);
        self.push(Op::Sum(x), Tensor::scalar(s), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = S::of_usize(t.len());
        let s = t.data.iter().fold(S::zero(), |acc, &v| acc + v) / n;
        let ng = self.ng(x);
        self.push(Op::Mean(x), Tensor::scalar(s), ng)
    }

    pub fn mean_cols(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = S::of_usize(t.cols);
        let data = (0..t.rows)
            .map(|r| t.row_slice(r).iter().fold(S::zero(), |a, &v| a + v) / n)
            .collect();
        let out = Tensor::new(t.rows, 1, data);
        let ng = self.ng(x);
        self.push(Op::MeanCols(x), out, ng)
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (tw, tx) = (self.value(w), self.value(x));
        assert_eq!(tx.cols, 1, "matvec expects a column vector");
        assert_eq!(tw.cols, tx.rows, "matvec shape mismatch");
        let data = (0..tw.rows)
            .map(|o| {
                tw.row_slice(o)
                    .iter()
                    .zip(&tx.data)
                    .fold(S::zero(), |a, (&wi, &xi)| a + wi * xi)
            })
            .collect();
        let out = Tensor::new(tw.rows, 1, data);
        let ng = self.ng(w) || self.ng(x);
        self.push(Op::MatVec(w, x), out, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.rows, "matmul shape mismatch");
        let (m, k, n) = (ta.rows, ta.cols, tb.cols);
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            let a_row = ta.row_slice(i);
            let y_row = &mut data[i * n..(i + 1) * n];
            for (p, &av) in a_row.iter().enumerate().take(k) {
                let b_row = tb.row_slice(p);
                for (yv, &bv) in y_row.iter_mut().zip(b_row) {
                    *yv += av * bv;
                }
            }
        }
        let out = Tensor::new(m, n, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Matmul(a, b), out, ng)
    }

    pub fn conv1d(&mut self, x: Var, w: Var, in_ch: usize, kernel: usize, stride: usize, pad: usize) -> Var {
        assert!(stride >= 1);
        let (tx, tw) = (self.value(x), self.value(w));
        assert_eq!(tx.rows, in_ch, "conv1d input channels mismatch");
        assert_eq!(tw.cols, in_ch * kernel, "conv1d weight layout mismatch");
        let out_ch = tw.rows;
        let len = tx.cols;
        assert!(len + 2 * pad >= kernel, "conv1d input shorter than kernel");
        let out_len = (len + 2 * pad - kernel) / stride + 1;
        let mut data = vec![S::zero(); out_ch * out_len];
        for o in 0..out_ch {
            let w_row = tw.row_slice(o);
            let y_row = &mut data[o * out_len..(o + 1) * out_len];
            for c in 0..in_ch {
                let x_row = tx.row_slice(c);
                let w_oc = &w_row[c * kernel..(c + 1) * kernel];
                for (k, &wv) in w_oc.iter().enumerate() {
                    if wv == S::zero() {
                        continue;
                    }
                    // valid t range: 0 <= t*stride + k - pad < len
                    let (t0, t1) = conv_t_range(len, out_len, stride, pad, k);
                    if t0 > t1 {
                        continue;
                    }
                    if stride == 1 {
                        let off = t0 + k - pad;
                        for (yv, &xv) in y_row[t0..=t1].iter_mut().zip(&x_row[off..off + (t1 - t0 + 1)]) {
                            *yv += wv * xv;
                        }
                    } else {
                        for t in t0..=t1 {
                            y_row[t] += wv * x_row[t * stride + k - pad];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(out_ch, out_len, data);
        let ng = self.ng(x) || self.ng(w);
        self.push(
            Op::Conv1d {
                x,
                w,
                in_ch,
                kernel,
                stride,
                pad,
            },
            out,
            ng,
        )
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        assert_eq!(tb.shape(), (tx.rows, 1), "bias shape mismatch");
        let mut data = tx.data.clone();
        for c in 0..tx.rows {
            let bv = tb.data[c];
            for v in &mut data[c * tx.cols..(c + 1) * tx.cols] {
                *v += bv;
            }
        }
        let out = Tensor::new(tx.rows, tx.cols, data);
        let ng = self.ng(x) || self.ng(b);
        self.push(Op::AddBias(x, b), out, ng)
    }

    pub fn decimate2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out_len = t.cols.div_ceil(2);
        let mut data = Vec::with_capacity(t.rows * out_len);
        for r in 0..t.rows {
            let row = t.row_slice(r);
            data.extend(row.iter().step_by(2).copied());
        }
        let out = Tensor::new(t.rows, out_len, data);
        let ng = self.ng(x);
        self.push(Op::Decimate2(x), out, ng)
    }

    pub fn repeat2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut data = Vec::with_capacity(t.rows * t.cols * 2);
        for r in 0..t.rows {
            for &v in t.row_slice(r) {
                data.push(v);
                data.push(v);
            }
        }
        let out = Tensor::new(t.rows, t.cols * 2, data);
        let ng = self.ng(x);
        self.push(Op::Repeat2(x), out, ng)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.cols, "concat_rows column mismatch");
        let mut data = Vec::with_capacity((ta.rows + tb.rows) * ta.cols);
        data.extend_from_slice(&ta.data);
        data.extend_from_slice(&tb.data);
        let out = Tensor::new(ta.rows + tb.rows, ta.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::ConcatRows(a, b), out, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        assert!(start + len <= t.cols, "slice_cols out of range");
        let mut data = Vec::with_capacity(t.rows * len);
        for r in 0..t.rows {
            data.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let out = Tensor::new(t.rows, len, data);
        let ng = self.ng(x);
        self.push(Op::SliceCols { x, start, len }, out, ng)
    }

    pub fn pad_zero_cols(&mut self, x: Var, left: usize, right: usize) -> Var {
        let t = self.value(x);
        let out_cols = t.cols + left + right;
        let mut data = vec![S::zero(); t.rows * out_cols];
        for r in 0..t.rows {
            data[r * out_cols + left..r * out_cols + left + t.cols].copy_from_slice(t.row_slice(r));
        }
        let out = Tensor::new(t.rows, out_cols, data);
        let ng = self.ng(x);
        self.push(Op::PadZeroCols { x, left }, out, ng)
    }

    pub fn pad_reflect_cols(&mut self, x: Var, pad: usize) -> Var {
        let t = self.value(x);
        assert!(pad < t.cols, "reflection pad must be smaller than length");
        let out_cols = t.cols + 2 * pad;
        let mut data = Vec::with_capacity(t.rows * out_cols);
        for r in 0..t.rows {
            let row = t.row_slice(r);
            for j in 0..out_cols {
                data.push(row[mirror_index(j as isize - pad as isize, t.cols)]);
            }
        }
        let out = Tensor::new(t.rows, out_cols, data);
        let ng = self.ng(x);
        self.push(Op::PadReflectCols { x, pad }, out, ng)
    }

    pub fn frame(&mut self, x: Var, win: usize, hop: usize, n_frames: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.rows, 1, "frame expects a single-row signal");
        assert!(
            (n_frames - 1) * hop + win <= t.cols,
            "frame: signal too short for requested frames"
        );
        let mut data = Vec::with_capacity(n_frames * win);
        for f in 0..n_frames {
            data.extend_from_slice(&t.data[f * hop..f * hop + win]);
        }
        let out = Tensor::new(n_frames, win, data);
        let ng = self.ng(x);
        self.push(Op::Frame { x, win, hop }, out, ng)
    }

    pub fn mul_row_bcast(&mut self, x: Var, w: Var) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        assert_eq!(tw.shape(), (1, tx.cols), "row broadcast shape mismatch");
        let mut data = tx.data.clone();
        for r in 0..tx.rows {
            for (v, &wv) in data[r * tx.cols..(r + 1) * tx.cols].iter_mut().zip(&tw.data) {
                *v *= wv;
            }
        }
        let out = Tensor::new(tx.rows, tx.cols, data);
        let ng = self.ng(x) || self.ng(w);
        self.push(Op::MulRowBcast(x, w), out, ng)
    }

    /// Per-row power spectrum |rfft(row)|^2, keeping n_fft/2 + 1 bins.
    pub fn rfft_power(&mut self, x: Var) -> Var {
        let (rows, n_fft) = self.shape(x);
        let n_bins = n_fft / 2 + 1;
        let fwd = self.planner.plan_fft_forward(n_fft);
        let inverse = self.planner.plan_fft_inverse(n_fft);
        let mut spectra = Vec::with_capacity(rows * n_bins);
        let mut data = Vec::with_capacity(rows * n_bins);
        let mut buf = vec![Complex::new(S::zero(), S::zero()); n_fft];
        for r in 0..rows {
            for (bv, &xv) in buf.iter_mut().zip(self.nodes[x.0].out.row_slice(r)) {
                *bv = Complex::new(xv, S::zero());
            }
            fwd.process(&mut buf);
            for &c in buf.iter().take(n_bins) {
                spectra.push(c);
                data.push(c.re * c.re + c.im * c.im);
            }
        }
        let out = Tensor::new(rows, n_bins, data);
        let ng = self.ng(x);
        self.push(
            Op::RfftPower {
                x,
                spectra,
                inverse,
            },
            out,
            ng,
        )
    }

    /// Cosine similarity of two flat tensors. Errors on a zero-norm input.
    pub fn cos_sim(&mut self, a: Var, b: Var) -> crate::error::Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "cos_sim length mismatch");
        let dot = ta
            .data
            .iter()
            .zip(&tb.data)
            .fold(S::zero(), |acc, (&x, &y)| acc + x * y);
        let norm_a = ta
            .data
            .iter()
            .fold(S::zero(), |acc, &x| acc + x * x)
            .sqrt();
        let norm_b = tb
            .data
            .iter()
            .fold(S::zero(), |acc, &x| acc + x * x)
            .sqrt();
        if norm_a == S::zero() || norm_b == S::zero() {
            return Err(crate::error::Error::Degenerate(
                "cosine similarity of a zero-norm embedding".into(),
            ));
        }
        let out = Tensor::scalar(dot / (norm_a * norm_b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Op::CosSim {
                a,
                b,
                norm_a,
                norm_b,
            },
            out,
            ng,
        ))
    }

    /// Numerically stable softmax cross-entropy against a class index.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let t = self.value(logits);
        assert!(label < t.len(), "label out of range");
        let max = t.data.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
        let exps: Vec<S> = t.data.iter().map(|&v| (v - max).exp()).collect();
        let z = exps.iter().fold(S::zero(), |a, &v| a + v);
        let softmax: Vec<S> = exps.iter().map(|&v| v / z).collect();
        let loss = z.ln() + max - t.data[label];
        let ng = self.ng(logits);
        self.push(
            Op::CrossEntropy {
                logits,
                label,
                softmax,
            },
            Tensor::scalar(loss),
            ng,
        )
    }

    /// Backpropagate from a scalar root. Returns gradients for every node on
    /// a path to a gradient-requiring leaf.
    pub fn backward(&mut self, root: Var) -> Grads<S> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![S::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            // Leaves keep their gradient for the caller.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Grads { grads }
    }

    fn accum(&self, grads: &mut [Option<Vec<S>>], v: Var, contribution: &[S]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (gv, &c) in g.iter_mut().zip(contribution) {
                    *gv += c;
                }
            }
            None => grads[v.0] = Some(contribution.to_vec()),
        }
    }

    fn accum_owned(&self, grads: &mut [Option<Vec<S>>], v: Var, contribution: Vec<S>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (gv, c) in g.iter_mut().zip(contribution) {
                    *gv += c;
                }
            }
            None => grads[v.0] = Some(contribution),
        }
    }

    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => self.accum(grads, *x, g),
            Op::Add(a, b) => {
                self.accum(grads, *a, g);
                self.accum(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g);
                let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                self.accum_owned(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].out, &self.nodes[b.0].out);
                if self.ng(*a) {
                    let da: Vec<S> = g.iter().zip(&tb.data).map(|(&gv, &bv)| gv * bv).collect();
                    self.accum_owned(grads, *a, da);
                }
                if self.ng(*b) {
                    let db: Vec<S> = g.iter().zip(&ta.data).map(|(&gv, &av)| gv * av).collect();
                    self.accum_owned(grads, *b, db);
                }
            }
            Op::AddScalar(x, _) => self.accum(grads, *x, g),
            Op::MulScalar(x, c) => {
                let dx: Vec<S> = g.iter().map(|&v| v * *c).collect();
                self.accum_owned(grads, *x, dx);
            }
            Op::Abs(x) => {
                let tx = &self.nodes[x.0].out;
                let dx: Vec<S> = g
                    .iter()
                    .zip(&tx.data)
                    .map(|(&gv, &xv)| {
                        if xv > S::zero() {
                            gv
                        } else if xv < S::zero() {
                            -gv
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                self.accum_owned(grads, *x, dx);
            }
            Op::Ln(x) => {
                let tx = &self.nodes[x.0].out;
                let dx: Vec<S> = g.iter().zip(&tx.data).map(|(&gv, &xv)| gv / xv).collect();
                self.accum_owned(grads, *x, dx);
            }
            Op::Sqrt(x) => {
                let ty = &node.out;
                let half = S::of_f64(0.5);
                let dx: Vec<S> = g
                    .iter()
                    .zip(&ty.data)
                    .map(|(&gv, &yv)| gv * half / yv)
                    .collect();
                self.accum_owned(grads, *x, dx);
            }
            Op::Transpose(x) => {
                let (rows, cols) = node.out.shape();
                let mut dx = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dx[c * rows + r] = g[r * cols + c];
                    }
                }
                self.accum_owned(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let ty = &node.out;
                let dx: Vec<S> = g
                    .iter()
                    .zip(&ty.data)
                    .map(|(&gv, &yv)| gv * (S::one() - yv * yv))
                    .collect();
                self.accum_owned(grads, *x, dx);
            }
            Op::LeakyRelu(x, alpha) => {
                let tx = &self.nodes[x.0].out;
                let dx: Vec<S> = g
                    .iter()
                    .zip(&tx.data)
                    .map(|(&gv, &xv)| if xv >= S::zero() { gv } else { gv * *alpha })
                    .collect();
                self.accum_owned(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].out.len();
                self.accum_owned(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].out.len();
                let gv = g[0] / S::of_usize(n);
                self.accum_owned(grads, *x, vec![gv; n]);
            }
            Op::MeanCols(x) => {
                let tx = &self.nodes[x.0].out;
                let inv = S::one() / S::of_usize(tx.cols);
                let mut dx = vec![S::zero(); tx.len()];
                for r in 0..tx.rows {
                    let gv = g[r] * inv;
                    for v in &mut dx[r * tx.cols..(r + 1) * tx.cols] {
                        *v = gv;
                    }
                }
                self.accum_owned(grads, *x, dx);
            }
            Op::MatVec(w, x) => {
                let (tw, tx) = (&self.nodes[w.0].out, &self.nodes[x.0].out);
                if self.ng(*w) {
                    let mut dw = vec![S::zero(); tw.len()];
                    for o in 0..tw.rows {
                        let gv = g[o];
                        for (dv, &xv) in dw[o * tw.cols..(o + 1) * tw.cols].iter_mut().zip(&tx.data)
                        {
                            *dv = gv * xv;
                        }
                    }
                    self.accum_owned(grads, *w, dw);
                }
                if self.ng(*x) {
                    let mut dx = vec![S::zero(); tx.len()];
                    for o in 0..tw.rows {
                        let gv = g[o];
                        for (dv, &wv) in dx.iter_mut().zip(tw.row_slice(o)) {
                            *dv += gv * wv;
                        }
                    }
                    self.accum_owned(grads, *x, dx);
                }
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].out, &self.nodes[b.0].out);
                let (m, k, n) = (ta.rows, ta.cols, tb.cols);
                if self.ng(*a) {
                    // da = g . b^T
                    let mut da = vec![S::zero(); m * k];
                    for i2 in 0..m {
                        let g_row = &g[i2 * n..(i2 + 1) * n];
                        for p in 0..k {
                            let b_row = tb.row_slice(p);
                            da[i2 * k + p] = g_row
                                .iter()
                                .zip(b_row)
                                .fold(S::zero(), |acc, (&gv, &bv)| acc + gv * bv);
                        }
                    }
                    self.accum_owned(grads, *a, da);
                }
                if self.ng(*b) {
                    // db = a^T . g
                    let mut db = vec![S::zero(); k * n];
                    for i2 in 0..m {
                        let g_row = &g[i2 * n..(i2 + 1) * n];
                        let a_row = ta.row_slice(i2);
                        for (p, &av) in a_row.iter().enumerate() {
                            if av == S::zero() {
                                continue;
                            }
                            for (dv, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                                *dv += av * gv;
                            }
                        }
                    }
                    self.accum_owned(grads, *b, db);
                }
            }
            Op::Conv1d {
                x,
                w,
                in_ch,
                kernel,
                stride,
                pad,
            } => {
                let (tx, tw) = (&self.nodes[x.0].out, &self.nodes[w.0].out);
                let len = tx.cols;
                let out_ch = tw.rows;
                let out_len = node.out.cols;
                if self.ng(*x) {
                    let mut dx = vec![S::zero(); tx.len()];
                    for o in 0..out_ch {
                        let g_row = &g[o * out_len..(o + 1) * out_len];
                        let w_row = tw.row_slice(o);
                        for c in 0..*in_ch {
                            let dx_row = &mut dx[c * len..(c + 1) * len];
                            let w_oc = &w_row[c * kernel..(c + 1) * kernel];
                            for (k, &wv) in w_oc.iter().enumerate() {
                                if wv == S::zero() {
                                    continue;
                                }
                                let (t0, t1) = conv_t_range(len, out_len, *stride, *pad, k);
                                if t0 > t1 {
                                    continue;
                                }
                                if *stride == 1 {
                                    let off = t0 + k - pad;
                                    for (dv, &gv) in dx_row[off..off + (t1 - t0 + 1)]
                                        .iter_mut()
                                        .zip(&g_row[t0..=t1])
                                    {
                                        *dv += wv * gv;
                                    }
                                } else {
                                    for t in t0..=t1 {
                                        dx_row[t * stride + k - pad] += wv * g_row[t];
                                    }
                                }
                            }
                        }
                    }
                    self.accum_owned(grads, *x, dx);
                }
                if self.ng(*w) {
                    let mut dw = vec![S::zero(); tw.len()];
                    for o in 0..out_ch {
                        let g_row = &g[o * out_len..(o + 1) * out_len];
                        let dw_row = &mut dw[o * tw.cols..(o + 1) * tw.cols];
                        for c in 0..*in_ch {
                            let x_row = tx.row_slice(c);
                            for k in 0..*kernel {
                                let (t0, t1) = conv_t_range(len, out_len, *stride, *pad, k);
                                if t0 > t1 {
                                    continue;
                                }
                                let mut acc = S::zero();
                                if *stride == 1 {
                                    let off = t0 + k - pad;
                                    for (&gv, &xv) in
                                        g_row[t0..=t1].iter().zip(&x_row[off..off + (t1 - t0 + 1)])
                                    {
                                        acc += gv * xv;
                                    }
                                } else {
                                    for t in t0..=t1 {
                                        acc += g_row[t] * x_row[t * stride + k - pad];
                                    }
                                }
                                dw_row[c * kernel + k] += acc;
                            }
                        }
                    }
                    self.accum_owned(grads, *w, dw);
                }
            }
            Op::AddBias(x, b) => {
                let tx = &self.nodes[x.0].out;
                self.accum(grads, *x, g);
                if self.ng(*b) {
                    let db: Vec<S> = (0..tx.rows)
                        .map(|c| {
                            g[c * tx.cols..(c + 1) * tx.cols]
                                .iter()
                                .fold(S::zero(), |a, &v| a + v)
                        })
                        .collect();
                    self.accum_owned(grads, *b, db);
                }
            }
            Op::Decimate2(x) => {
                let tx = &self.nodes[x.0].out;
                let out_len = node.out.cols;
                let mut dx = vec![S::zero(); tx.len()];
                for r in 0..tx.rows {
                    for t in 0..out_len {
                        dx[r * tx.cols + 2 * t] = g[r * out_len + t];
                    }
                }
                self.accum_owned(grads, *x, dx);
            }
            Op::Repeat2(x) => {
                let tx = &self.nodes[x.0].out;
                let mut dx = vec![S::zero(); tx.len()];
                for r in 0..tx.rows {
                    for t in 0..tx.cols {
                        dx[r * tx.cols + t] =
                            g[r * tx.cols * 2 + 2 * t] + g[r * tx.cols * 2 + 2 * t + 1];
                    }
                }
                self.accum_owned(grads, *x, dx);
            }
            Op::ConcatRows(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].out, &self.nodes[b.0].out);
                self.accum(grads, *a, &g[..ta.len()]);
                self.accum(grads, *b, &g[ta.len()..ta.len() + tb.len()]);
            }
            Op::SliceCols { x, start, len } => {
                let tx = &self.nodes[x.0].out;
                let mut dx = vec![S::zero(); tx.len()];
                for r in 0..tx.rows {
                    dx[r * tx.cols + start..r * tx.cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accum_owned(grads, *x, dx);
            }
            Op::PadZeroCols { x, left } => {
                let tx = &self.nodes[x.0].out;
                let out_cols = node.out.cols;
                let mut dx = vec![S::zero(); tx.len()];
                for r in 0..tx.rows {
                    dx[r * tx.cols..(r + 1) * tx.cols]
                        .copy_from_slice(&g[r * out_cols + left..r * out_cols + left + tx.cols]);
                }
                self.accum_owned(grads, *x, dx);
            }
            Op::PadReflectCols { x, pad } => {
                let tx = &self.nodes[x.0].out;
                let out_cols = node.out.cols;
                let mut dx = vec![S::zero(); tx.len()];
                for r in 0..tx.rows {
                    for j in 0..out_cols {
                        let src = mirror_index(j as isize - *pad as isize, tx.cols);
                        dx[r * tx.cols + src] += g[r * out_cols + j];
                    }
                }
                self.accum_owned(grads, *x, dx);
            }
            Op::Frame { x, win, hop } => {
                let tx = &self.nodes[x.0].out;
                let n_frames = node.out.rows;
                let mut dx = vec![S::zero(); tx.len()];
                for f in 0..n_frames {
                    for k in 0..*win {
                        dx[f * hop + k] += g[f * win + k];
                    }
                }
                self.accum_owned(grads, *x, dx);
            }
            Op::MulRowBcast(x, w) => {
                let (tx, tw) = (&self.nodes[x.0].out, &self.nodes[w.0].out);
                if self.ng(*x) {
                    let mut dx = vec![S::zero(); tx.len()];
                    for r in 0..tx.rows {
                        for ((dv, &gv), &wv) in dx[r * tx.cols..(r + 1) * tx.cols]
                            .iter_mut()
                            .zip(&g[r * tx.cols..(r + 1) * tx.cols])
                            .zip(&tw.data)
                        {
                            *dv = gv * wv;
                        }
                    }
                    self.accum_owned(grads, *x, dx);
                }
                if self.ng(*w) {
                    let mut dw = vec![S::zero(); tw.len()];
                    for r in 0..tx.rows {
                        for ((dv, &gv), &xv) in dw
                            .iter_mut()
                            .zip(&g[r * tx.cols..(r + 1) * tx.cols])
                            .zip(tx.row_slice(r))
                        {
                            *dv += gv * xv;
                        }
                    }
                    self.accum_owned(grads, *w, dw);
                }
            }
            Op::RfftPower {
                x,
                spectra,
                inverse,
            } => {
                let tx = &self.nodes[x.0].out;
                let n_fft = tx.cols;
                let n_bins = n_fft / 2 + 1;
                let mut dx = vec![S::zero(); tx.len()];
                let mut buf = vec![Complex::new(S::zero(), S::zero()); n_fft];
                let two = S::of_f64(2.0);
                for r in 0..tx.rows {
                    for bv in buf.iter_mut() {
                        *bv = Complex::new(S::zero(), S::zero());
                    }
                    for k in 0..n_bins {
                        let c = spectra[r * n_bins + k];
                        let gv = g[r * n_bins + k];
                        // d(power)/d(re) = 2 re, d(power)/d(im) = 2 im
                        buf[k] = Complex::new(two * c.re * gv, two * c.im * gv);
                    }
                    // Adjoint of the real-input forward DFT restricted to the
                    // first n_bins outputs: Re of the (unnormalized) inverse
                    // transform of the zero-extended gradient spectrum.
                    inverse.process(&mut buf);
                    for (dv, c) in dx[r * n_fft..(r + 1) * n_fft].iter_mut().zip(&buf) {
                        *dv = c.re;
                    }
                }
                self.accum_owned(grads, *x, dx);
            }
            Op::CosSim {
                a,
                b,
                norm_a,
                norm_b,
            } => {
                let (ta, tb) = (&self.nodes[a.0].out, &self.nodes[b.0].out);
                let gv = g[0];
                let cos = node.out.data[0];
                if self.ng(*a) {
                    let inv = S::one() / (*norm_a * *norm_b);
                    let inv_a2 = S::one() / (*norm_a * *norm_a);
                    let da: Vec<S> = ta
                        .data
                        .iter()
                        .zip(&tb.data)
                        .map(|(&av, &bv)| gv * (bv * inv - cos * av * inv_a2))
                        .collect();
                    self.accum_owned(grads, *a, da);
                }
                if self.ng(*b) {
                    let inv = S::one() / (*norm_a * *norm_b);
                    let inv_b2 = S::one() / (*norm_b * *norm_b);
                    let db: Vec<S> = ta
                        .data
                        .iter()
                        .zip(&tb.data)
                        .map(|(&av, &bv)| gv * (av * inv - cos * bv * inv_b2))
                        .collect();
                    self.accum_owned(grads, *b, db);
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                softmax,
            } => {
                let gv = g[0];
                let mut dx: Vec<S> = softmax.iter().map(|&p| gv * p).collect();
                dx[*label] -= gv;
                self.accum_owned(grads, *logits, dx);
            }
        }
    }
}

fn conv_t_range(len: usize, out_len: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    // smallest t with t*stride + k - pad >= 0
    let t0 = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    // largest t with t*stride + k - pad <= len - 1
    let upper = len + pad;
    if upper <= k {
        return (1, 0);
    }
    let t1 = ((upper - 1 - k) / stride).min(out_len.saturating_sub(1));
    (t0, t1)
}

fn mirror_index(j: isize, len: usize) -> usize {
    let l = len as isize;
    let m = if j < 0 {
        -j
    } else if j >= l {
        2 * l - 2 - j
    } else {
        j
    };
    debug_assert!((0..l).contains(&m), "reflection index out of range");
    m as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    type G = Graph<f64>;

    /// Central-difference gradient check for a scalar-valued graph builder.
    fn grad_check(input: Tensor<f64>, build: impl Fn(&mut G, Var) -> Var) {
        let mut g = G::new();
        let x = g.leaf(input.clone(), true);
        let y = build(&mut g, x);
        let mut grads = g.backward(y);
        let analytic = grads.take_flat(x).expect("input gradient missing");

        let h = 1e-5;
        for i in 0..input.len() {
            let mut plus = input.clone();
            plus.data[i] += h;
            let mut minus = input.clone();
            minus.data[i] -= h;
            let f = |t: Tensor<f64>| {
                let mut g = G::new();
                let x = g.leaf(t, false);
                let y = build(&mut g, x);
                g.value(y).item()
            };
            let numeric = (f(plus) - f(minus)) / (2.0 * h);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-6);
            assert!(
                (numeric - analytic[i]).abs() / denom < 1e-4,
                "grad mismatch at {i}: numeric {numeric}, analytic {}",
                analytic[i]
            );
        }
    }

    fn arb_input(n: usize) -> Tensor<f64> {
        // deterministic pseudo-random values without pulling in an RNG
        let data = (0..n)
            .map(|i| ((i * 2654435761 % 1000) as f64 / 500.0) - 1.0 + 0.01)
            .collect();
        Tensor::new(1, n, data)
    }

    #[test]
    fn elementwise_grads() {
        let x = arb_input(12);
        grad_check(x.clone(), |g, v| {
            let a = g.mul_scalar(v, 1.7);
            let b = g.add_scalar(a, 0.3);
            let c = g.tanh(b);
            let d = g.mul(c, v);
            g.mean(d)
        });
        grad_check(x.clone(), |g, v| {
            let a = g.abs(v);
            let b = g.add_scalar(a, 1.0);
            let c = g.ln(b);
            g.sum(c)
        });
        grad_check(x, |g, v| {
            let a = g.leaky_relu(v, 0.2);
            let b = g.sub(a, v);
            let c = g.mul(b, b);
            g.mean(c)
        });
    }

    #[test]
    fn conv_grads() {
        let x = arb_input(20);
        for (stride, pad) in [(1, 2), (2, 1), (3, 0)] {
            grad_check(x.clone(), move |g, v| {
                let x2 = g.reshape(v, 2, 10);
                let w = g.leaf(
                    Tensor::new(3, 2 * 3, (0..18).map(|i| (i as f64 - 9.0) / 7.0).collect()),
                    true,
                );
                let y = g.conv1d(x2, w, 2, 3, stride, pad);
                let b = g.leaf(Tensor::col(vec![0.1, -0.2, 0.3]), true);
                let y = g.add_bias(y, b);
                let y = g.leaky_relu(y, 0.2);
                g.mean(y)
            });
        }
    }

    #[test]
    fn conv_weight_grad() {
        let w0 = Tensor::new(2, 6, (0..12).map(|i| (i as f64) / 10.0 - 0.5).collect());
        let mut g = G::new();
        let x = g.leaf(arb_input(14), false);
        let x2 = g.reshape(x, 2, 7);
        let w = g.leaf(w0.clone(), true);
        let y = g.conv1d(x2, w, 2, 3, 2, 1);
        let loss = g.mean(y);
        let mut grads = g.backward(loss);
        let analytic = grads.take_flat(w).unwrap();

        let h = 1e-6;
        for i in 0..w0.len() {
            let f = |wt: Tensor<f64>| {
                let mut g = G::new();
                let x = g.leaf(arb_input(14), false);
                let x2 = g.reshape(x, 2, 7);
                let w = g.leaf(wt, false);
                let y = g.conv1d(x2, w, 2, 3, 2, 1);
                let m = g.mean(y);
                g.value(m).item()
            };
            let mut plus = w0.clone();
            plus.data[i] += h;
            let mut minus = w0.clone();
            minus.data[i] -= h;
            let numeric = (f(plus) - f(minus)) / (2.0 * h);
            assert!(
                (numeric - analytic[i]).abs() < 1e-6,
                "dw mismatch at {i}: {numeric} vs {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn structural_grads() {
        let x = arb_input(16);
        grad_check(x.clone(), |g, v| {
            let a = g.reshape(v, 2, 8);
            let d = g.decimate2(a);
            let r = g.repeat2(d);
            let s = g.slice_cols(r, 1, 5);
            let c = g.concat_rows(s, s);
            let m = g.mean_cols(c);
            g.sum(m)
        });
        grad_check(x.clone(), |g, v| {
            let p = g.pad_reflect_cols(v, 5);
            let f = g.frame(p, 8, 4, 5);
            let w = g.leaf(Tensor::row((0..8).map(|i| 0.1 * i as f64).collect()), false);
            let y = g.mul_row_bcast(f, w);
            g.mean(y)
        });
        grad_check(x, |g, v| {
            let p = g.pad_zero_cols(v, 3, 2);
            g.sum(p)
        });
    }

    #[test]
    fn sqrt_and_transpose_grads() {
        let x = arb_input(12);
        grad_check(x, |g, v| {
            let a = g.reshape(v, 3, 4);
            let t = g.transpose(a);
            let sq = g.mul(t, t);
            let p = g.add_scalar(sq, 0.5);
            let r = g.sqrt(p);
            g.mean(r)
        });
    }

    #[test]
    fn fft_power_grad() {
        let x = arb_input(16);
        grad_check(x, |g, v| {
            let f = g.frame(v, 8, 4, 3);
            let p = g.rfft_power(f);
            let p = g.add_scalar(p, 1e-3);
            let l = g.ln(p);
            g.mean(l)
        });
    }

    #[test]
    fn matmul_and_matvec_grads() {
        let x = arb_input(12);
        grad_check(x.clone(), |g, v| {
            let a = g.reshape(v, 3, 4);
            let b = g.leaf(
                Tensor::new(4, 2, (0..8).map(|i| (i as f64 - 4.0) / 3.0).collect()),
                true,
            );
            let y = g.matmul(a, b);
            g.mean(y)
        });
        grad_check(x, |g, v| {
            let a = g.reshape(v, 12, 1);
            let w = g.leaf(
                Tensor::new(3, 12, (0..36).map(|i| (i as f64 - 18.0) / 20.0).collect()),
                true,
            );
            let y = g.matvec(w, a);
            g.sum(y)
        });
    }

    #[test]
    fn cosine_and_cross_entropy_grads() {
        let x = arb_input(6);
        grad_check(x.clone(), |g, v| {
            let b = g.leaf(Tensor::row(vec![0.3, -0.2, 0.5, 0.9, -1.1, 0.4]), false);
            g.cos_sim(v, b).unwrap()
        });
        grad_check(x, |g, v| g.cross_entropy(v, 2));
    }

    #[test]
    fn cosine_zero_norm_errors() {
        let mut g = G::new();
        let a = g.leaf(Tensor::row(vec![0.0, 0.0]), false);
        let b = g.leaf(Tensor::row(vec![1.0, 2.0]), false);
        assert!(g.cos_sim(a, b).is_err());
    }

    #[test]
    fn needs_grad_prunes_constant_branches() {
        let mut g = G::new();
        let x = g.leaf(Tensor::row(vec![1.0, 2.0]), true);
        let c = g.leaf(Tensor::row(vec![3.0, 4.0]), false);
        let y = g.mul(x, c);
        let s = g.sum(y);
        let mut grads = g.backward(s);
        assert!(grads.take_flat(c).is_none());
        assert_eq!(grads.take_flat(x).unwrap(), vec![3.0, 4.0]);
    }
}
