//! Parameter storage, layers, initialization, and the Adam optimizer.
//!
//! Networks own their weights in a [`ParamSet`]. Each forward pass binds the
//! weights into a fresh [`Graph`] as leaves ([`ParamSet::bind`]); after
//! `backward`, [`Adam::step`] pulls the leaf gradients out and updates the
//! stored tensors in place. Binding clones the tensors, which is cheap at the
//! model sizes used here and keeps graph lifetimes trivial.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Grads, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named collection of weight tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSet<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<S>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }

    /// Bind every parameter into the graph as a leaf.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| g.leaf(t.clone(), trainable))
                .collect(),
        }
    }
}

/// Graph leaves for one binding of a [`ParamSet`].
pub struct Bound {
    pub(crate) vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Uniform Kaiming-style init for leaky-ReLU fan-in.
pub fn kaiming_uniform<S: Scalar>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
    leak: f64,
) -> Tensor<S> {
    let gain = (2.0 / (1.0 + leak * leak)).sqrt();
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::of_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(rows, cols, data)
}

/// 1-D convolution layer with bias.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = kaiming_uniform(rng, out_ch, in_ch * kernel, in_ch * kernel, 0.2);
        let w = ps.add(format!("{name}.w"), w);
        let b = ps.add(format!("{name}.b"), Tensor::zeros(out_ch, 1));
        Conv1d {
            w,
            b,
            in_ch,
            kernel,
            stride,
            pad,
        }
    }

    /// Same layer with all-zero weights, so it initially outputs zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new_zeroed<S: Scalar>(
        ps: &mut ParamSet<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), Tensor::zeros(out_ch, in_ch * kernel));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(out_ch, 1));
        Conv1d {
            w,
            b,
            in_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bound: &Bound, x: Var) -> Var {
        let y = g.conv1d(x, bound.var(self.w), self.in_ch, self.kernel, self.stride, self.pad);
        g.add_bias(y, bound.var(self.b))
    }
}

/// Fully connected layer mapping a column vector to a column vector.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = kaiming_uniform(rng, out_dim, in_dim, in_dim, 0.2);
        let w = ps.add(format!("{name}.w"), w);
        let b = ps.add(format!("{name}.b"), Tensor::zeros(out_dim, 1));
        Linear { w, b }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bound: &Bound, x: Var) -> Var {
        let y = g.matvec(bound.var(self.w), x);
        let b = bound.var(self.b);
        g.add(y, b)
    }
}

/// Adam optimizer with optional global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    pub clip: Option<S>,
    t: u32,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: S) -> Self {
        Adam {
            lr,
            beta1: S::of_f64(0.9),
            beta2: S::of_f64(0.999),
            eps: S::of_f64(1e-8),
            clip: None,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one update from the gradients of `bound`'s leaves.
    /// Parameters without a gradient (pruned branches) are left untouched.
    pub fn step(&mut self, params: &mut ParamSet<S>, bound: &Bound, grads: &mut Grads<S>) {
        let gs: Vec<Option<Vec<S>>> = bound
            .vars
            .iter()
            .map(|&v| grads.take_flat(v))
            .collect();
        self.step_flat(params, gs);
    }

    /// Apply one update from pre-collected per-parameter gradients (used for
    /// gradient accumulation across a batch).
    pub fn step_flat(&mut self, params: &mut ParamSet<S>, mut gs: Vec<Option<Vec<S>>>) {
        if self.m.is_empty() {
            self.m = params.tensors.iter().map(|t| vec![S::zero(); t.len()]).collect();
            self.v = self.m.clone();
        }
        if let Some(max_norm) = self.clip {
            let sq: S = gs
                .iter()
                .flatten()
                .flat_map(|g| g.iter())
                .fold(S::zero(), |a, &x| a + x * x);
            let norm = sq.sqrt();
            if norm > max_norm {
                let scale = max_norm / norm;
                for g in gs.iter_mut().flatten() {
                    for x in g.iter_mut() {
                        *x *= scale;
                    }
                }
            }
        }
        self.t += 1;
        let b1t = S::one() - self.beta1.powi(self.t as i32);
        let b2t = S::one() - self.beta2.powi(self.t as i32);
        for (i, g) in gs.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let w = &mut params.tensors[i].data;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..w.len() {
                m[j] = self.beta1 * m[j] + (S::one() - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (S::one() - self.beta2) * g[j] * g[j];
                let mhat = m[j] / b1t;
                let vhat = v[j] / b2t;
                w[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
