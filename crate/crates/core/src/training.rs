//! Training objectives on a shared [`ModelStack`].
//!
//! Pseudo-likelihood, the three expert-mask variants and distribution fitting
//! all run through one per-module loop ([`fit_module`]), so any two objectives
//! that resolve to the same mask sequence produce bit-identical parameters.
//! Every module draws batches, tasks and masks from its own seeded stream.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::graph::{shd_dag, BinaryMatrix, Dag};
use crate::nn::{step, Gradients, MaskedMlp, ModelStack, OptimizerKind, OptimizerState, Scratch};
use crate::par::{self, Exec};
use crate::scm::Dataset;
use crate::seed::{self, Rng};

/// Datasets up to this size are used as a single full batch by default.
pub const FULL_BATCH_LIMIT: usize = 2000;
pub const DEFAULT_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    /// `None`: full batch up to [`FULL_BATCH_LIMIT`] samples, else
    /// [`DEFAULT_BATCH`].
    pub batch_size: Option<usize>,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub tasks_per_iteration: usize,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.0,
            iterations: 1000,
            batch_size: None,
            inner_lr: 0.1,
            inner_steps: 1,
            tasks_per_iteration: 20,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.inner_lr >= 0.0) {
            return param(format!(
                "invalid rates lr={} weight_decay={} inner_lr={}",
                self.lr, self.weight_decay, self.inner_lr
            ));
        }
        if self.batch_size == Some(0) || self.inner_steps == 0 || self.tasks_per_iteration == 0 {
            return param("batch_size, inner_steps and tasks_per_iteration must be positive");
        }
        Ok(())
    }

    pub fn optimizer(&self) -> OptimizerKind {
        OptimizerKind::adam(self.lr, self.weight_decay)
    }

    pub fn batch_for(&self, len: usize) -> usize {
        match self.batch_size {
            Some(b) => b.min(len),
            None if len <= FULL_BATCH_LIMIT => len,
            None => DEFAULT_BATCH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphFitConfig {
    pub lr_u: f64,
    pub lr_v: f64,
    /// Graph-fitting iterations per round.
    pub iterations: usize,
    pub graphs_per_update: usize,
    /// `None`: `0.004 * ln k`.
    pub lambda_sparse: Option<f64>,
    pub rounds: usize,
    /// Distribution-fitting iterations per round.
    pub fit_iterations: usize,
    /// Samples per graph-fitting iteration.
    pub batch_size: usize,
    pub threshold: f64,
}

impl Default for GraphFitConfig {
    fn default() -> Self {
        Self {
            lr_u: 0.005,
            lr_v: 0.02,
            iterations: 100,
            graphs_per_update: 100,
            lambda_sparse: None,
            rounds: 30,
            fit_iterations: 100,
            batch_size: 64,
            threshold: 0.5,
        }
    }
}

impl GraphFitConfig {
    pub fn lambda(&self, k: usize) -> f64 {
        self.lambda_sparse.unwrap_or(0.004 * (k as f64).ln())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_u > 0.0) || !(self.lr_v > 0.0) || self.lambda_sparse.is_some_and(|l| !(l >= 0.0)) {
            return param("graph fitting rates must be positive and lambda nonnegative");
        }
        if self.graphs_per_update == 0 || self.batch_size == 0 {
            return param("graphs_per_update and batch_size must be positive");
        }
        Ok(())
    }
}

/// Per-module losses of one training call; `losses[module][iteration]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTrace {
    pub round: usize,
    pub losses: Vec<Vec<f64>>,
}

impl LossTrace {
    pub fn iterations(&self) -> usize {
        self.losses.first().map_or(0, Vec::len)
    }

    /// Mean over modules, per iteration.
    pub fn mean_per_iteration(&self) -> Vec<f64> {
        let m = self.losses.len() as f64;
        (0..self.iterations())
            .map(|t| self.losses.iter().map(|l| l[t]).sum::<f64>() / m)
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.losses.iter().flatten().all(|l| l.is_finite())
    }
}

/// CSV `round,iteration,module,loss`.
pub fn write_loss_traces<W: Write>(traces: &[LossTrace], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["round", "iteration", "module", "loss"])?;
    for tr in traces {
        for (m, ls) in tr.losses.iter().enumerate() {
            for (it, l) in ls.iter().enumerate() {
                wtr.write_record(&[tr.round.to_string(), it.to_string(), m.to_string(), l.to_string()])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

/// All-ones with a zero diagonal.
pub fn pseudo_ll_mask(n: usize) -> Result<BinaryMatrix> {
    if n < 2 {
        return param(format!("pseudo-likelihood mask needs n >= 2, got {n}"));
    }
    let mut m = BinaryMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            m.set(i, j, i != j);
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertMode {
    Causal,
    Anticausal,
    Skeleton,
}

impl ExpertMode {
    pub fn mask(self, dag: &Dag) -> BinaryMatrix {
        match self {
            ExpertMode::Causal => dag.adjacency().clone(),
            ExpertMode::Anticausal => dag.anticausal_mask(),
            ExpertMode::Skeleton => dag.skeleton_mask(),
        }
    }
}

/// Cycles through shuffled epochs, or returns everything in order when the
/// batch covers the dataset.
struct Batcher {
    idx: Vec<usize>,
    size: usize,
    pos: usize,
    rng: Rng,
}

impl Batcher {
    fn new(len: usize, size: usize, rng: Rng) -> Self {
        Self {
            idx: (0..len).collect(),
            size,
            pos: 0,
            rng,
        }
    }

    fn next(&mut self) -> &[usize] {
        let len = self.idx.len();
        if self.size >= len {
            return &self.idx;
        }
        if self.pos == 0 {
            self.idx.shuffle(&mut self.rng);
        }
        let start = self.pos;
        let end = (start + self.size).min(len);
        self.pos = if end == len { 0 } else { end };
        &self.idx[start..end]
    }
}

fn check_data(stack: &ModelStack, d: &Dataset) -> Result<()> {
    if d.n() != stack.n() || d.k() != stack.k() {
        return Err(Error::Structural(format!(
            "data is n={} k={}, stack is n={} k={}",
            d.n(),
            d.k(),
            stack.n(),
            stack.k()
        )));
    }
    Ok(())
}

enum MaskSource<'a> {
    Stored,
    Sampled { gamma: &'a SoftAdjacency, rng: Rng },
}

/// Adam on module `module`'s batch-mean NLL. Returns the loss per iteration.
fn fit_module(
    mlp: &mut MaskedMlp,
    module: usize,
    rows: &[&[usize]],
    cfg: &TrainConfig,
    mut masks: MaskSource<'_>,
) -> Vec<f64> {
    let bs = cfg.batch_for(rows.len());
    let mut batcher = Batcher::new(
        rows.len(),
        bs,
        seed::stream(cfg.seed, &[seed::label("batch"), module as u64]),
    );
    let mut opt = OptimizerState::for_mlp(cfg.optimizer(), mlp);
    let mut grads = Gradients::zeros_like(mlp);
    let mut s = Scratch::for_mlp(mlp);
    let mut mask = mlp.mask().to_vec();
    let mut batch: Vec<&[usize]> = Vec::with_capacity(bs);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        batch.clear();
        batch.extend(batcher.next().iter().map(|&r| rows[r]));
        if let MaskSource::Sampled { gamma, rng } = &mut masks {
            gamma.sample_row(module, rng, &mut mask);
        }
        let loss = mlp.backward_masked(&batch, module, &mask, &mut grads, &mut s);
        step(mlp, &grads, &mut opt, 1.0);
        trace.push(loss);
    }
    trace
}

/// Train one module under its stored mask, exactly as the stack-level
/// maximum-likelihood objectives do.
pub fn train_module(mlp: &mut MaskedMlp, module: usize, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return param("training data is empty");
    }
    if module >= mlp.n() || data.n() != mlp.n() || data.k() != mlp.k() {
        return Err(Error::Structural("module and data shapes disagree".into()));
    }
    Ok(fit_module(mlp, module, &data.row_refs(), cfg, MaskSource::Stored))
}

/// Maximum likelihood of every module under the stack's current mask.
pub fn train_masked(stack: &mut ModelStack, data: &Dataset, cfg: &TrainConfig) -> Result<LossTrace> {
    cfg.validate()?;
    check_data(stack, data)?;
    if data.is_empty() {
        return param("training data is empty");
    }
    let rows = data.row_refs();
    let losses = par::map_mut(cfg.exec, &mut stack.mlps, |i, m| {
        fit_module(m, i, &rows, cfg, MaskSource::Stored)
    });
    Ok(LossTrace { round: 0, losses })
}

/// Every variable from all others.
pub fn train_pseudo_ll(stack: &mut ModelStack, d_obs: &Dataset, cfg: &TrainConfig) -> Result<LossTrace> {
    stack.set_mask(&pseudo_ll_mask(stack.n())?)?;
    train_masked(stack, d_obs, cfg)
}

/// Maximum likelihood under a mask derived from a known graph.
pub fn train_expert(
    stack: &mut ModelStack,
    d_obs: &Dataset,
    dag: &Dag,
    mode: ExpertMode,
    cfg: &TrainConfig,
) -> Result<LossTrace> {
    if dag.n() != stack.n() {
        return param(format!("graph has {} nodes, stack has {}", dag.n(), stack.n()));
    }
    stack.set_mask(&mode.mask(dag))?;
    train_masked(stack, d_obs, cfg)
}

/// Per-module meta-training. With `inner_lr = None` tasks are sampled and
/// split identically but no inner step is taken.
fn maml_module(
    mlp: &mut MaskedMlp,
    module: usize,
    tasks: &[Vec<&[usize]>],
    cfg: &TrainConfig,
    inner_lr: Option<f64>,
) -> Vec<f64> {
    let mut rng = seed::stream(cfg.seed, &[seed::label("tasks"), module as u64]);
    let mut order: Vec<Vec<usize>> = tasks.iter().map(|t| (0..t.len()).collect()).collect();
    let mut opt = OptimizerState::for_mlp(cfg.optimizer(), mlp);
    let mut acc = Gradients::zeros_like(mlp);
    let mut g = Gradients::zeros_like(mlp);
    let mut s = Scratch::for_mlp(mlp);
    let mut adapted = mlp.clone();
    let mut inner: Vec<&[usize]> = Vec::new();
    let mut outer: Vec<&[usize]> = Vec::new();
    let inv_tasks = 1.0 / cfg.tasks_per_iteration as f64;
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        acc.data.iter_mut().for_each(|a| *a = 0.0);
        let mut loss = 0.0;
        for _ in 0..cfg.tasks_per_iteration {
            let t = rng.gen_range(0..tasks.len());
            let idx = &mut order[t];
            idx.shuffle(&mut rng);
            let half = idx.len() / 2;
            let (a, b) = if half == 0 {
                (&idx[..], &idx[..])
            } else {
                idx.split_at(half)
            };
            outer.clear();
            outer.extend(b.iter().map(|&r| tasks[t][r]));
            let point = match inner_lr {
                Some(alpha) => {
                    inner.clear();
                    inner.extend(a.iter().map(|&r| tasks[t][r]));
                    adapted.params_mut().copy_from_slice(mlp.params());
                    for _ in 0..cfg.inner_steps {
                        adapted.backward_masked(&inner, module, mlp.mask(), &mut g, &mut s);
                        for (p, d) in adapted.params_mut().iter_mut().zip(&g.data) {
                            *p -= alpha * d;
                        }
                    }
                    &adapted
                }
                None => &*mlp,
            };
            loss += point.backward_masked(&outer, module, mlp.mask(), &mut g, &mut s);
            acc.add_assign(&g);
        }
        acc.scale(inv_tasks);
        step(mlp, &acc, &mut opt, 1.0);
        trace.push(loss * inv_tasks);
    }
    trace
}

fn task_rows<'a>(stack: &ModelStack, tasks: &'a [Dataset]) -> Result<Vec<Vec<&'a [usize]>>> {
    if tasks.is_empty() {
        return param("meta-training needs at least one interventional dataset");
    }
    tasks
        .iter()
        .map(|t| {
            check_data(stack, t)?;
            if t.is_empty() {
                return param("empty task dataset");
            }
            Ok(t.row_refs())
        })
        .collect()
}

fn run_tasks(stack: &mut ModelStack, tasks: &[Dataset], cfg: &TrainConfig, inner_lr: Option<f64>) -> Result<LossTrace> {
    cfg.validate()?;
    stack.set_mask(&pseudo_ll_mask(stack.n())?)?;
    let rows = task_rows(stack, tasks)?;
    let losses = par::map_mut(cfg.exec, &mut stack.mlps, |i, m| {
        maml_module(m, i, &rows, cfg, inner_lr)
    });
    Ok(LossTrace { round: 0, losses })
}

/// First-order meta-learning over interventional tasks: inner SGD at
/// `inner_lr` on half of each sampled task, outer Adam on the gradient at the
/// adapted parameters evaluated on the other half.
pub fn train_maml(stack: &mut ModelStack, tasks: &[Dataset], cfg: &TrainConfig) -> Result<LossTrace> {
    run_tasks(stack, tasks, cfg, Some(cfg.inner_lr))
}

/// Pseudo-likelihood on the same task halves [`train_maml`] would draw,
/// without the inner step.
pub fn train_on_task_mixture(stack: &mut ModelStack, tasks: &[Dataset], cfg: &TrainConfig) -> Result<LossTrace> {
    run_tasks(stack, tasks, cfg, None)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Edge probabilities `sigmoid(u) * sigmoid(v)`, row `i` holding the
/// candidate parents of `i`. `u` scores existence; `v` scores orientation and
/// is kept antisymmetric (`v[i][j] == -v[j][i]`), so at most one direction of
/// a pair can exceed probability 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftAdjacency {
    n: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl SoftAdjacency {
    /// Every off-diagonal edge at probability `p < 0.5`, orientation neutral.
    pub fn uniform(n: usize, p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 0.5) {
            return param(format!("edge probability must be in (0, 0.5), got {p}"));
        }
        let mut z = logit(2.0 * p);
        // keep the computed probability from rounding above `p`
        while sigmoid(z) * 0.5 > p {
            z -= z.abs().max(1.0) * f64::EPSILON;
        }
        Ok(Self {
            n,
            u: vec![z; n * n],
            v: vec![0.0; n * n],
        })
    }

    /// Logits set to `±level` according to `adj`; unconnected pairs get
    /// neutral orientation.
    pub fn saturated(adj: &BinaryMatrix, level: f64) -> Self {
        let n = adj.n();
        let mut u = vec![-level; n * n];
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if adj.get(i, j) {
                    u[i * n + j] = level;
                    u[j * n + i] = level;
                    v[i * n + j] = level;
                    v[j * n + i] = -level;
                }
            }
        }
        Self { n, u, v }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn prob(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let e = i * self.n + j;
        sigmoid(self.u[e]) * sigmoid(self.v[e])
    }

    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.prob(i, j)).collect())
            .collect()
    }

    /// Draw row `i` of a mask into `out`.
    pub fn sample_row<R: rand::Rng + ?Sized>(&self, i: usize, rng: &mut R, out: &mut [bool]) {
        for (j, o) in out.iter_mut().enumerate() {
            let p = self.prob(i, j);
            *o = i != j && rng.gen::<f64>() < p;
        }
    }

    /// Probabilities as nested JSON rows.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.probabilities())?)
    }
}

/// Independent Bernoulli draw per off-diagonal entry.
pub fn sample_masks<R: rand::Rng + ?Sized>(gamma: &SoftAdjacency, rng: &mut R) -> BinaryMatrix {
    let n = gamma.n();
    let mut m = BinaryMatrix::zeros(n);
    let mut row = vec![false; n];
    for i in 0..n {
        gamma.sample_row(i, rng, &mut row);
        for (j, &b) in row.iter().enumerate() {
            m.set(i, j, b);
        }
    }
    m
}

/// Module parameters under masks sampled from `gamma` (one row per batch);
/// `gamma` itself is untouched.
pub fn distribution_fitting_phase(
    stack: &mut ModelStack,
    gamma: &SoftAdjacency,
    d_obs: &Dataset,
    cfg: &TrainConfig,
) -> Result<LossTrace> {
    cfg.validate()?;
    check_data(stack, d_obs)?;
    if gamma.n() != stack.n() {
        return param("gamma and stack sizes differ");
    }
    if d_obs.is_empty() {
        return param("training data is empty");
    }
    let rows = d_obs.row_refs();
    let losses = par::map_mut(cfg.exec, &mut stack.mlps, |i, m| {
        let rng = seed::stream(cfg.seed, &[seed::label("mask"), i as u64]);
        fit_module(m, i, &rows, cfg, MaskSource::Sampled { gamma, rng })
    });
    Ok(LossTrace { round: 0, losses })
}

/// Paired-contrast estimate of the gradient of expected NLL with respect to
/// every edge probability, plus `lambda`. For each mask and edge `j -> i`
/// module `i`'s NLL is evaluated with bit `j` forced on and off, other bits
/// as sampled. The module of `exclude` contributes no contrast.
pub fn contrast_gradient(
    stack: &ModelStack,
    masks: &[BinaryMatrix],
    batch: &[&[usize]],
    exclude: Option<usize>,
    lambda: f64,
    exec: Exec,
) -> Vec<f64> {
    let n = stack.n();
    let per_mask = par::map_range(exec, masks.len(), |g| {
        let mask = &masks[g];
        let mut out = vec![0.0; n * n];
        for (i, m) in stack.mlps.iter().enumerate() {
            if Some(i) == exclude {
                continue;
            }
            let row = mask.row(i);
            let mut s = Scratch::for_mlp(m);
            let mut pre = vec![0.0; m.hidden()];
            let mut flip = vec![0.0; m.hidden()];
            for x in batch {
                m.preactivation(x, row, &mut pre);
                let base = m.nll_from_pre(&pre, x[i], &mut s);
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    flip.copy_from_slice(&pre);
                    let sign = if row[j] { -1.0 } else { 1.0 };
                    m.shift_preactivation(&mut flip, j, x[j], sign);
                    let other = m.nll_from_pre(&flip, x[i], &mut s);
                    out[i * n + j] += if row[j] { base - other } else { other - base };
                }
            }
        }
        out
    });
    let scale = 1.0 / (masks.len() * batch.len()) as f64;
    let mut grad = vec![0.0; n * n];
    for pm in &per_mask {
        for (g, c) in grad.iter_mut().zip(pm) {
            *g += c;
        }
    }
    for i in 0..n {
        for j in 0..n {
            grad[i * n + j] = if i == j {
                0.0
            } else {
                grad[i * n + j] * scale + lambda
            };
        }
    }
    grad
}

/// Optimize `gamma` against the frozen stack on interventional data.
pub fn graph_fitting_phase(
    gamma: &mut SoftAdjacency,
    stack: &ModelStack,
    tasks: &[Dataset],
    gf: &GraphFitConfig,
    seed_value: u64,
    exec: Exec,
) -> Result<()> {
    gf.validate()?;
    if gamma.n() != stack.n() {
        return param("gamma and stack sizes differ");
    }
    let rows = task_rows(stack, tasks)?;
    let n = stack.n();
    let lambda = gf.lambda(stack.k());
    let mut rng = seed::rng(seed_value);
    let mut opt_u = OptimizerState::new(OptimizerKind::adam(gf.lr_u, 0.0), n * n);
    let mut opt_v = OptimizerState::new(OptimizerKind::adam(gf.lr_v, 0.0), n * n);
    let mut gu = vec![0.0; n * n];
    let mut gv = vec![0.0; n * n];
    let mut batch: Vec<&[usize]> = Vec::with_capacity(gf.batch_size);
    for _ in 0..gf.iterations {
        let t = rng.gen_range(0..tasks.len());
        let data = &rows[t];
        batch.clear();
        let take = gf.batch_size.min(data.len());
        for r in rand::seq::index::sample(&mut rng, data.len(), take).iter() {
            batch.push(data[r]);
        }
        let masks: Vec<BinaryMatrix> = (0..gf.graphs_per_update)
            .map(|_| sample_masks(gamma, &mut rng))
            .collect();
        let target = tasks[t].regime.target();
        let g = contrast_gradient(stack, &masks, &batch, target, 0.0, exec);
        for i in 0..n {
            for j in 0..n {
                let e = i * n + j;
                gu[e] = if i == j {
                    0.0
                } else {
                    let su = sigmoid(gamma.u[e]);
                    (g[e] + lambda) * su * (1.0 - su) * sigmoid(gamma.v[e])
                };
            }
            // orientation of j -> i learns only from interventions on i or j;
            // the mirrored entry gets the exact negation
            for j in i + 1..n {
                let (e, r) = (i * n + j, j * n + i);
                let dv = if target == Some(j) {
                    sigmoid(gamma.u[e]) * g[e]
                } else if target == Some(i) {
                    -sigmoid(gamma.u[r]) * g[r]
                } else {
                    0.0
                };
                let sv = sigmoid(gamma.v[e]);
                gv[e] = dv * sv * (1.0 - sv);
                gv[r] = -gv[e];
            }
        }
        opt_u.apply(&mut gamma.u, &gu, 1.0);
        opt_v.apply(&mut gamma.v, &gv, 1.0);
    }
    Ok(())
}

/// Graph read off a soft adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedGraph {
    pub dag: Dag,
    /// Whether edges had to be dropped to break cycles.
    pub repaired: bool,
}

/// Edges with probability strictly above `threshold`; cycles are broken by
/// repeatedly dropping the least probable edge on a found cycle.
pub fn extract_graph(gamma: &SoftAdjacency, threshold: f64) -> ExtractedGraph {
    let n = gamma.n();
    let mut adj = BinaryMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            if gamma.prob(i, j) > threshold {
                adj.set(i, j, true);
            }
        }
    }
    let mut repaired = false;
    while let Some(cycle) = adj.find_cycle() {
        repaired = true;
        // consecutive nodes: cycle[a] is a parent of cycle[a + 1]
        let (child, parent) = (0..cycle.len())
            .map(|a| (cycle[(a + 1) % cycle.len()], cycle[a]))
            .min_by(|&(c1, p1), &(c2, p2)| gamma.prob(c1, p1).total_cmp(&gamma.prob(c2, p2)))
            .expect("cycle is nonempty");
        adj.set(child, parent, false);
    }
    let dag = Dag::from_adjacency(adj).expect("repaired graph is acyclic");
    ExtractedGraph { dag, repaired }
}

/// Result of alternating structure learning.
#[derive(Debug, Clone)]
pub struct LCausalOutcome {
    pub gamma: SoftAdjacency,
    pub graph: ExtractedGraph,
    pub traces: Vec<LossTrace>,
    /// Edge probabilities after each round.
    pub gamma_history: Vec<Vec<Vec<f64>>>,
    /// SHD of the extracted graph after each round, when a reference is given.
    pub shd_history: Vec<usize>,
}

/// Alternate distribution fitting (`cfg`, with `gf.fit_iterations` per
/// round) and graph fitting for `gf.rounds` rounds, then install the
/// extracted graph as the stack mask.
pub fn train_l_causal(
    stack: &mut ModelStack,
    d_obs: &Dataset,
    d_int: &[Dataset],
    cfg: &TrainConfig,
    gf: &GraphFitConfig,
    truth: Option<&Dag>,
) -> Result<LCausalOutcome> {
    cfg.validate()?;
    gf.validate()?;
    if d_obs.is_empty() || d_int.is_empty() {
        return param("structure learning needs observational and interventional data");
    }
    let n = stack.n();
    let mut gamma = SoftAdjacency::uniform(n, 0.25)?;
    let mut traces = Vec::with_capacity(gf.rounds);
    let mut gamma_history = Vec::with_capacity(gf.rounds);
    let mut shd_history = Vec::new();
    let warmup = TrainConfig {
        seed: seed::derive(cfg.seed, &[seed::label("warmup")]),
        ..cfg.clone()
    };
    traces.push(distribution_fitting_phase(stack, &gamma, d_obs, &warmup)?);
    for round in 0..gf.rounds {
        let fit_cfg = TrainConfig {
            iterations: gf.fit_iterations,
            seed: seed::derive(cfg.seed, &[seed::label("fit"), round as u64]),
            ..cfg.clone()
        };
        let mut tr = distribution_fitting_phase(stack, &gamma, d_obs, &fit_cfg)?;
        tr.round = round + 1;
        traces.push(tr);
        let gseed = seed::derive(cfg.seed, &[seed::label("graph"), round as u64]);
        graph_fitting_phase(&mut gamma, stack, d_int, gf, gseed, cfg.exec)?;
        gamma_history.push(gamma.probabilities());
        if let Some(t) = truth {
            shd_history.push(shd_dag(&extract_graph(&gamma, gf.threshold).dag, t)?);
        }
    }
    let graph = extract_graph(&gamma, gf.threshold);
    stack.set_mask(graph.dag.adjacency())?;
    Ok(LCausalOutcome {
        gamma,
        graph,
        traces,
        gamma_history,
        shd_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_preset, Preset};
    use crate::nn::HIDDEN;
    use crate::scm::{GroundTruthScm, Regime};

    #[test]
    fn pseudo_mask() {
        assert_eq!(pseudo_ll_mask(2).unwrap().to_rows(), vec![vec![0, 1], vec![1, 0]]);
        let m = pseudo_ll_mask(5).unwrap();
        assert!((0..5).all(|i| m.row(i).iter().filter(|&&b| b).count() == 4));
        let full = generate_preset(Preset::Full, 5).unwrap();
        assert_eq!(full.skeleton_mask(), m);
        assert!(pseudo_ll_mask(1).is_err());
    }

    #[test]
    fn batcher_covers_epochs() {
        let mut b = Batcher::new(10, 4, seed::rng(0));
        let mut seen: Vec<usize> = Vec::new();
        for _ in 0..3 {
            seen.extend_from_slice(b.next());
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let mut full = Batcher::new(5, 5, seed::rng(0));
        assert_eq!(full.next(), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn batch_size_resolution() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_for(2000), 2000);
        assert_eq!(c.batch_for(2001), 256);
        let c = TrainConfig {
            batch_size: Some(64),
            ..c
        };
        assert_eq!(c.batch_for(10), 10);
    }

    #[test]
    fn zero_iterations_leave_stack_unchanged() {
        let dag = generate_preset(Preset::Chain, 3).unwrap();
        let scm = GroundTruthScm::init(dag, 3, &mut seed::rng(1)).unwrap();
        let d = scm.sample_observational(20, &mut seed::rng(2)).unwrap();
        let mut stack = ModelStack::new(3, 3, HIDDEN, 3).unwrap();
        stack.set_mask(&pseudo_ll_mask(3).unwrap()).unwrap();
        let before = stack.clone();
        let cfg = TrainConfig {
            iterations: 0,
            ..Default::default()
        };
        let tr = train_pseudo_ll(&mut stack, &d, &cfg).unwrap();
        assert_eq!(stack, before);
        assert_eq!(tr.iterations(), 0);
        let empty = Dataset::new(3, 3, Regime::Observational);
        assert!(train_pseudo_ll(&mut stack, &empty, &cfg).is_err());
    }

    #[test]
    fn sampled_masks_respect_saturation() {
        let n = 4;
        let hi = SoftAdjacency {
            n,
            u: vec![20.0; n * n],
            v: vec![20.0; n * n],
        };
        let m = sample_masks(&hi, &mut seed::rng(0));
        assert_eq!(m, pseudo_ll_mask(n).unwrap());
        let lo = SoftAdjacency {
            n,
            u: vec![-20.0; n * n],
            v: vec![-20.0; n * n],
        };
        assert_eq!(sample_masks(&lo, &mut seed::rng(0)).count_ones(), 0);
    }

    #[test]
    fn extraction_threshold_and_repair() {
        let quarter = SoftAdjacency::uniform(3, 0.25).unwrap();
        assert!((quarter.prob(0, 1) - 0.25).abs() < 1e-12);
        assert_eq!(extract_graph(&quarter, 0.2).dag.edge_count(), 3);
        let e = extract_graph(&quarter, 0.25);
        assert_eq!(e.dag.edge_count(), 0);
        assert!(!e.repaired);
        assert!(SoftAdjacency::uniform(3, 0.5).is_err());

        // cycle 0 -> 1 -> 2 -> 0 with 1 -> 2 the weakest link
        let mut cyc = SoftAdjacency::uniform(3, 0.1).unwrap();
        for (child, parent, u) in [(1, 0, 6.0), (2, 1, 4.0), (0, 2, 5.0)] {
            cyc.u[child * 3 + parent] = u;
            cyc.v[child * 3 + parent] = 5.0;
            cyc.v[parent * 3 + child] = -5.0;
        }
        let e = extract_graph(&cyc, 0.5);
        assert!(e.repaired);
        let mut edges = e.dag.edges();
        edges.sort();
        assert_eq!(edges, vec![(0, 1), (2, 0)]);
    }
}
