//! Held-out evaluation and NLL dissection by node role.

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::graph::{Dag, NodeSet};
use crate::nn::{ModelStack, Scratch};
use crate::par::{self, Exec};
use crate::scm::{Dataset, GroundTruthScm};

/// Node roles relative to an intervention. `parents` overlaps `remainder`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeCategory {
    pub intervention: usize,
    /// Roots other than the intervened node.
    pub roots: NodeSet,
    /// Non-root parents of the intervened node.
    pub parents: NodeSet,
    /// Everything except roots and the intervened node.
    pub remainder: NodeSet,
}

pub fn categorize(dag: &Dag, target: usize) -> Result<NodeCategory> {
    let pa = dag.parents(target)?;
    let roots: NodeSet = dag.roots().into_iter().filter(|&r| r != target).collect();
    let parents = pa.into_iter().filter(|p| !dag.is_root(*p)).collect();
    let remainder = (0..dag.n())
        .filter(|&i| i != target && !roots.contains(&i))
        .collect();
    Ok(NodeCategory {
        intervention: target,
        roots,
        parents,
        remainder,
    })
}

/// Aggregated evaluation in nats. Category means are `None` when the
/// category was empty for every dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalRecord {
    pub nll_mean: f64,
    pub nll_intervention: f64,
    pub nll_root: Option<f64>,
    pub nll_parents: Option<f64>,
    pub nll_remainder: Option<f64>,
    pub shd: Option<usize>,
    pub grad_norm_intervened: Option<f64>,
    pub grad_norm_others: Option<f64>,
    /// Per-variable NLL averaged over datasets.
    pub per_node: Vec<f64>,
    /// Per-dataset mean over all variables.
    pub per_dataset: Vec<f64>,
}

impl EvalRecord {
    /// Standard error of `nll_mean` across datasets.
    pub fn std_error(&self) -> f64 {
        let m = self.per_dataset.len() as f64;
        if m < 2.0 {
            return 0.0;
        }
        let var = self
            .per_dataset
            .iter()
            .map(|x| (x - self.nll_mean).powi(2))
            .sum::<f64>()
            / (m - 1.0);
        (var / m).sqrt()
    }
}

fn set_mean(v: &[f64], set: &NodeSet) -> Option<f64> {
    (!set.is_empty()).then(|| set.iter().map(|&i| v[i]).sum::<f64>() / set.len() as f64)
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, c) = xs.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    (c > 0).then(|| s / c as f64)
}

/// Combine per-dataset per-variable NLL vectors: average within each dataset,
/// then with equal weight across datasets.
pub fn aggregate(dag: &Dag, tests: &[Dataset], node_nll: &[Vec<f64>]) -> Result<EvalRecord> {
    if tests.is_empty() || tests.len() != node_nll.len() {
        return param("need one NLL vector per test dataset");
    }
    let n = dag.n();
    let cats = tests
        .iter()
        .map(|d| {
            let t = d
                .regime
                .target()
                .ok_or_else(|| Error::Param("test datasets must be interventional".into()))?;
            categorize(dag, t)
        })
        .collect::<Result<Vec<_>>>()?;
    let per_dataset: Vec<f64> = node_nll
        .iter()
        .map(|v| v.iter().sum::<f64>() / n as f64)
        .collect();
    let m = tests.len() as f64;
    let per_node = (0..n)
        .map(|i| node_nll.iter().map(|v| v[i]).sum::<f64>() / m)
        .collect();
    Ok(EvalRecord {
        nll_mean: per_dataset.iter().sum::<f64>() / m,
        nll_intervention: node_nll
            .iter()
            .zip(&cats)
            .map(|(v, c)| v[c.intervention])
            .sum::<f64>()
            / m,
        nll_root: mean_of(node_nll.iter().zip(&cats).filter_map(|(v, c)| set_mean(v, &c.roots))),
        nll_parents: mean_of(node_nll.iter().zip(&cats).filter_map(|(v, c)| set_mean(v, &c.parents))),
        nll_remainder: mean_of(
            node_nll
                .iter()
                .zip(&cats)
                .filter_map(|(v, c)| set_mean(v, &c.remainder)),
        ),
        per_node,
        per_dataset,
        ..Default::default()
    })
}

/// Per-variable mean NLL of `d` under each module's stored mask.
pub fn node_nll(stack: &ModelStack, d: &Dataset) -> Result<Vec<f64>> {
    if d.n() != stack.n() || d.k() != stack.k() {
        return Err(Error::Structural("test data shape differs from stack".into()));
    }
    if d.is_empty() {
        return param("empty test dataset");
    }
    let n = stack.n();
    let mut acc = vec![0.0; n];
    let mut row = vec![0.0; n];
    let mut s = Scratch::for_mlp(&stack.mlps[0]);
    for x in d.rows() {
        stack.nll_vector(x, &mut s, &mut row);
        for (a, r) in acc.iter_mut().zip(&row) {
            *a += r;
        }
    }
    let inv = 1.0 / d.len() as f64;
    Ok(acc.into_iter().map(|a| a * inv).collect())
}

/// Zero-shot evaluation on interventional test sets, dissected with the true
/// graph.
pub fn evaluate(stack: &ModelStack, dag_true: &Dag, tests: &[Dataset], exec: Exec) -> Result<EvalRecord> {
    if dag_true.n() != stack.n() {
        return param("graph and stack sizes differ");
    }
    let per = par::map_range(exec, tests.len(), |t| node_nll(stack, &tests[t]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    aggregate(dag_true, tests, &per)
}

/// Oracle records: unmodified mechanisms, and with the intervened mechanism
/// replaced by the true intervention distribution.
pub fn evaluate_bounds(scm: &GroundTruthScm, tests: &[Dataset]) -> Result<(EvalRecord, EvalRecord)> {
    let zs = tests
        .iter()
        .map(|d| scm.bound_zero_shot(d))
        .collect::<Result<Vec<_>>>()?;
    let ad = tests
        .iter()
        .map(|d| scm.bound_adaptation(d))
        .collect::<Result<Vec<_>>>()?;
    Ok((aggregate(&scm.dag, tests, &zs)?, aggregate(&scm.dag, tests, &ad)?))
}
