//! Stack of independent masked one-hidden-layer networks.
//!
//! Module `i` of a [`ModelStack`] models `p(X_i | X, M_i)`. Its input is the
//! one-hot encoding of the whole sample (`n * k` units) with the `k`-blocks
//! of masked-out variables zeroed, followed by a LeakyReLU hidden layer and a
//! linear output of size `k` normalized with log-softmax.
//!
//! Because the input is one-hot, the first layer is a sum of one weight row
//! per admitted variable; the forward and backward passes only touch those
//! rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::graph::BinaryMatrix;
use crate::par::{self, Exec};
use crate::seed;

pub const HIDDEN: usize = 64;
pub const LEAKY_SLOPE: f64 = 0.1;

#[inline]
fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
fn leaky_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// In-place log-softmax with max subtraction.
pub fn log_softmax(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    for x in v.iter_mut() {
        *x -= lse;
    }
}

/// Per-call working buffers.
#[derive(Debug, Clone)]
pub struct Scratch {
    pre: Vec<f64>,
    act: Vec<f64>,
    out: Vec<f64>,
    d_pre: Vec<f64>,
}

impl Scratch {
    pub fn new(hidden: usize, k: usize) -> Self {
        Self {
            pre: vec![0.0; hidden],
            act: vec![0.0; hidden],
            out: vec![0.0; k],
            d_pre: vec![0.0; hidden],
        }
    }

    pub fn for_mlp(mlp: &MaskedMlp) -> Self {
        Self::new(mlp.hidden, mlp.k)
    }
}

/// Gradient buffer laid out like [`MaskedMlp`] parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub data: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(mlp: &MaskedMlp) -> Self {
        Self {
            data: vec![0.0; mlp.params.len()],
        }
    }

    /// L2 norm over all parameter gradients.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|g| *g *= c);
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|g| g.is_finite())
    }
}

pub fn grad_norm(grads: &Gradients) -> f64 {
    grads.norm()
}

/// One masked network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedMlp {
    n: usize,
    k: usize,
    hidden: usize,
    mask: Vec<bool>,
    /// `[w1 (n*k x hidden) | b1 (hidden) | w2 (hidden x k) | b2 (k)]`
    params: Vec<f64>,
}

impl MaskedMlp {
    pub fn zeros(n: usize, k: usize, hidden: usize) -> Self {
        let len = n * k * hidden + hidden + hidden * k + k;
        Self {
            n,
            k,
            hidden,
            mask: vec![false; n],
            params: vec![0.0; len],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng + ?Sized>(n: usize, k: usize, hidden: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(n, k, hidden);
        let l1 = (6.0 / (n * k + hidden) as f64).sqrt();
        for w in m.w1_mut() {
            *w = rng.gen_range(-l1..l1);
        }
        let l2 = (6.0 / (hidden + k) as f64).sqrt();
        for w in m.w2_mut() {
            *w = rng.gen_range(-l2..l2);
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn set_mask(&mut self, mask: &[bool]) {
        assert_eq!(mask.len(), self.n, "mask length");
        self.mask.copy_from_slice(mask);
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn w1_len(&self) -> usize {
        self.n * self.k * self.hidden
    }

    fn b1_off(&self) -> usize {
        self.w1_len()
    }

    fn w2_off(&self) -> usize {
        self.b1_off() + self.hidden
    }

    fn b2_off(&self) -> usize {
        self.w2_off() + self.hidden * self.k
    }

    pub fn w1_mut(&mut self) -> &mut [f64] {
        let end = self.w1_len();
        &mut self.params[..end]
    }

    pub fn b1_mut(&mut self) -> &mut [f64] {
        let (a, b) = (self.b1_off(), self.w2_off());
        &mut self.params[a..b]
    }

    pub fn w2_mut(&mut self) -> &mut [f64] {
        let (a, b) = (self.w2_off(), self.b2_off());
        &mut self.params[a..b]
    }

    pub fn b2_mut(&mut self) -> &mut [f64] {
        let a = self.b2_off();
        &mut self.params[a..]
    }

    /// Offset of the first-layer row for variable `var` taking category `cat`.
    #[inline]
    pub fn w1_row(&self, var: usize, cat: usize) -> usize {
        (var * self.k + cat) * self.hidden
    }

    fn check_sample(&self, x: &[usize]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::Structural(format!(
                "sample has {} entries, model expects {}",
                x.len(),
                self.n
            )));
        }
        if let Some(v) = x.iter().find(|&&v| v >= self.k) {
            return Err(Error::Structural(format!(
                "category {v} out of range for k={}",
                self.k
            )));
        }
        Ok(())
    }

    /// First-layer pre-activation under `mask`.
    #[inline]
    pub(crate) fn preactivation(&self, x: &[usize], mask: &[bool], pre: &mut [f64]) {
        let h = self.hidden;
        pre.copy_from_slice(&self.params[self.b1_off()..self.w2_off()]);
        for (j, (&xj, &on)) in x.iter().zip(mask).enumerate() {
            if on {
                let r = self.w1_row(j, xj);
                for (p, w) in pre.iter_mut().zip(&self.params[r..r + h]) {
                    *p += w;
                }
            }
        }
    }

    /// Add (`sign = 1`) or remove (`sign = -1`) variable `j`'s contribution.
    #[inline]
    pub(crate) fn shift_preactivation(&self, pre: &mut [f64], j: usize, xj: usize, sign: f64) {
        let r = self.w1_row(j, xj);
        for (p, w) in pre.iter_mut().zip(&self.params[r..r + self.hidden]) {
            *p += sign * w;
        }
    }

    /// Log-probabilities from a first-layer pre-activation; result in `s.out`.
    #[inline]
    pub(crate) fn head(&self, pre: &[f64], s: &mut Scratch) {
        let k = self.k;
        let w2 = &self.params[self.w2_off()..self.b2_off()];
        s.out.copy_from_slice(&self.params[self.b2_off()..]);
        for (hi, (&p, a)) in pre.iter().zip(s.act.iter_mut()).enumerate() {
            *a = leaky(p);
            let row = &w2[hi * k..(hi + 1) * k];
            for (o, w) in s.out.iter_mut().zip(row) {
                *o += *a * w;
            }
        }
        log_softmax(&mut s.out);
    }

    /// NLL of `value` given a first-layer pre-activation.
    #[inline]
    pub(crate) fn nll_from_pre(&self, pre: &[f64], value: usize, s: &mut Scratch) -> f64 {
        self.head(pre, s);
        -s.out[value]
    }

    fn forward_scratch(&self, x: &[usize], mask: &[bool], s: &mut Scratch) {
        let mut pre = std::mem::take(&mut s.pre);
        self.preactivation(x, mask, &mut pre);
        self.head(&pre, s);
        s.pre = pre;
    }

    /// Log-probability vector over the `k` categories.
    pub fn forward(&self, x: &[usize]) -> Result<Vec<f64>> {
        self.check_sample(x)?;
        let mut s = Scratch::for_mlp(self);
        self.forward_scratch(x, &self.mask, &mut s);
        Ok(s.out)
    }

    /// Forward pass under an explicit mask instead of the stored one.
    pub fn forward_masked<'s>(&self, x: &[usize], mask: &[bool], s: &'s mut Scratch) -> &'s [f64] {
        debug_assert_eq!(mask.len(), self.n);
        self.forward_scratch(x, mask, s);
        &s.out
    }

    /// `-log p(x[target] | x)`.
    pub fn nll(&self, x: &[usize], target: usize) -> Result<f64> {
        if target >= self.n {
            return param(format!("target {target} out of range for n={}", self.n));
        }
        Ok(-self.forward(x)?[x[target]])
    }

    pub(crate) fn nll_masked(&self, x: &[usize], target: usize, mask: &[bool], s: &mut Scratch) -> f64 {
        self.forward_scratch(x, mask, s);
        -s.out[x[target]]
    }

    /// Accumulate the gradient of the batch-mean NLL into `grads` (which is
    /// overwritten) and return the batch-mean NLL.
    pub(crate) fn backward_masked(
        &self,
        batch: &[&[usize]],
        target: usize,
        mask: &[bool],
        grads: &mut Gradients,
        s: &mut Scratch,
    ) -> f64 {
        let (n, k, h) = (self.n, self.k, self.hidden);
        grads.data.iter_mut().for_each(|g| *g = 0.0);
        let b1_off = self.b1_off();
        let w2_off = self.w2_off();
        let b2_off = self.b2_off();
        let w2 = &self.params[w2_off..b2_off];
        let mut total = 0.0;
        for x in batch {
            self.forward_scratch(x, mask, s);
            let y = x[target];
            total -= s.out[y];
            // d logits = softmax - onehot
            for (c, o) in s.out.iter_mut().enumerate() {
                *o = o.exp() - if c == y { 1.0 } else { 0.0 };
            }
            let d_out = &s.out;
            {
                let (gw2, gb2) = grads.data[w2_off..].split_at_mut(h * k);
                for (g, d) in gb2.iter_mut().zip(d_out) {
                    *g += d;
                }
                for hi in 0..h {
                    let a = s.act[hi];
                    let wrow = &w2[hi * k..(hi + 1) * k];
                    let grow = &mut gw2[hi * k..(hi + 1) * k];
                    let mut dh = 0.0;
                    for c in 0..k {
                        grow[c] += a * d_out[c];
                        dh += wrow[c] * d_out[c];
                    }
                    s.d_pre[hi] = dh * leaky_grad(s.pre[hi]);
                }
            }
            for (g, d) in grads.data[b1_off..w2_off].iter_mut().zip(&s.d_pre) {
                *g += d;
            }
            for j in 0..n {
                if mask[j] {
                    let r = self.w1_row(j, x[j]);
                    for (g, d) in grads.data[r..r + h].iter_mut().zip(&s.d_pre) {
                        *g += d;
                    }
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        grads.scale(inv);
        total * inv
    }

    /// Gradient of the batch-mean NLL of variable `target` and the mean NLL.
    pub fn backward(&self, batch: &[&[usize]], target: usize) -> Result<(Gradients, f64)> {
        if batch.is_empty() {
            return param("backward needs a nonempty batch");
        }
        if target >= self.n {
            return param(format!("target {target} out of range for n={}", self.n));
        }
        for x in batch {
            self.check_sample(x)?;
        }
        let mut g = Gradients::zeros_like(self);
        let mut s = Scratch::for_mlp(self);
        let loss = self.backward_masked(batch, target, &self.mask, &mut g, &mut s);
        Ok((g, loss))
    }
}

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn sgd(lr: f64) -> Self {
        OptimizerKind::Sgd { lr }
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, num_params: usize) -> Self {
        let buf = match kind {
            OptimizerKind::Sgd { .. } => 0,
            OptimizerKind::Adam { .. } => num_params,
        };
        Self {
            kind,
            m: vec![0.0; buf],
            v: vec![0.0; buf],
            t: 0,
        }
    }

    pub fn for_mlp(kind: OptimizerKind, mlp: &MaskedMlp) -> Self {
        Self::new(kind, mlp.num_params())
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Update `params` in place; `scale` multiplies the effective step.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64], scale: f64) {
        assert_eq!(params.len(), grads.len(), "gradient shape");
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd { lr } => {
                let step = scale * lr;
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= step * g;
                }
            }
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                assert_eq!(self.m.len(), params.len(), "optimizer state shape");
                let t = self.t as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let step = scale * lr;
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mhat = self.m[i] / c1;
                    let vhat = self.v[i] / c2;
                    let mut upd = mhat / (vhat.sqrt() + eps);
                    if weight_decay != 0.0 {
                        upd += weight_decay * params[i];
                    }
                    params[i] -= step * upd;
                }
            }
        }
    }
}

/// Apply one optimizer step to `mlp`.
pub fn step(mlp: &mut MaskedMlp, grads: &Gradients, opt: &mut OptimizerState, scale: f64) {
    opt.apply(&mut mlp.params, &grads.data, scale);
}

/// `n` masked networks, module `i` modelling variable `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStack {
    n: usize,
    k: usize,
    pub mlps: Vec<MaskedMlp>,
}

impl ModelStack {
    /// Glorot-initialized stack with an all-zero mask. Module `i` draws from
    /// its own stream so initialization does not depend on `n`'s iteration
    /// order.
    pub fn new(n: usize, k: usize, hidden: usize, seed_value: u64) -> Result<Self> {
        if n == 0 || k < 2 || hidden == 0 {
            return param(format!("invalid stack shape n={n} k={k} hidden={hidden}"));
        }
        let mlps = (0..n)
            .map(|i| {
                let mut rng = seed::stream(seed_value, &[seed::label("init"), i as u64]);
                MaskedMlp::glorot(n, k, hidden, &mut rng)
            })
            .collect();
        Ok(Self { n, k, mlps })
    }

    pub fn from_modules(mlps: Vec<MaskedMlp>) -> Result<Self> {
        let first = mlps
            .first()
            .ok_or_else(|| Error::Param("stack needs at least one module".into()))?;
        let (n, k) = (first.n, first.k);
        if mlps.len() != n || mlps.iter().any(|m| m.n != n || m.k != k) {
            return Err(Error::Structural("inconsistent module shapes".into()));
        }
        Ok(Self { n, k, mlps })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn set_mask(&mut self, mask: &BinaryMatrix) -> Result<()> {
        if mask.n() != self.n {
            return param(format!(
                "mask is {}x{}, stack has {} modules",
                mask.n(),
                mask.n(),
                self.n
            ));
        }
        for (i, m) in self.mlps.iter_mut().enumerate() {
            m.set_mask(mask.row(i));
        }
        Ok(())
    }

    pub fn mask_matrix(&self) -> BinaryMatrix {
        let mut m = BinaryMatrix::zeros(self.n);
        for (i, mlp) in self.mlps.iter().enumerate() {
            for (j, &b) in mlp.mask.iter().enumerate() {
                m.set(i, j, b);
            }
        }
        m
    }

    /// Per-variable NLL of one sample.
    pub fn nll_vector(&self, x: &[usize], s: &mut Scratch, out: &mut [f64]) {
        for (i, (m, o)) in self.mlps.iter().zip(out.iter_mut()).enumerate() {
            *o = m.nll_masked(x, i, &m.mask, s);
        }
    }

    /// Per-module gradients of the batch-mean NLL and the per-module losses.
    pub fn gradients(&self, batch: &[&[usize]], exec: Exec) -> Result<Vec<(Gradients, f64)>> {
        if batch.is_empty() {
            return param("gradient evaluation needs a nonempty batch");
        }
        let out = par::map_range(exec, self.n, |i| {
            let m = &self.mlps[i];
            let mut g = Gradients::zeros_like(m);
            let mut s = Scratch::for_mlp(m);
            let loss = m.backward_masked(batch, i, &m.mask, &mut g, &mut s);
            (g, loss)
        });
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.mlps
            .iter()
            .all(|m| m.params.iter().all(|p| p.is_finite()))
    }
}

/// Versioned on-disk form of a stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackCheckpoint {
    pub version: u32,
    pub n: usize,
    pub k: usize,
    pub mask: BinaryMatrix,
    pub optimizer: Option<OptimizerKind>,
    pub stack: ModelStack,
}

impl StackCheckpoint {
    pub const VERSION: u32 = 1;

    pub fn new(stack: &ModelStack, optimizer: Option<OptimizerKind>) -> Self {
        Self {
            version: Self::VERSION,
            n: stack.n,
            k: stack.k,
            mask: stack.mask_matrix(),
            optimizer,
            stack: stack.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        if c.version != Self::VERSION {
            return param(format!("unsupported checkpoint version {}", c.version));
        }
        if c.stack.n != c.n || c.stack.k != c.k || c.stack.mask_matrix() != c.mask {
            return Err(Error::Structural("checkpoint header disagrees with stack".into()));
        }
        Ok(c)
    }
}
