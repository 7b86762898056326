//! Few-shot adaptation of a trained stack to an intervened distribution.
//!
//! Each method reduces to a per-module step scale applied to plain SGD:
//! unconstrained uses 1 everywhere, sparse uses 1 on the target and 0
//! elsewhere, regularized uses `w_i / max_j w_j` for temperature-softmax
//! weights `w`. Modules with scale 0 are skipped, so their parameters stay
//! bit-identical.

use std::io::Write;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{param, Error, Result};
use crate::graph::Dag;
use crate::metrics::{evaluate, EvalRecord};
use crate::nn::{step, Gradients, ModelStack, OptimizerKind, OptimizerState, Scratch};
use crate::par::{self, Exec};
use crate::scm::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMethod {
    Unconstrained,
    SparseKnown,
    SparsePredicted,
    Regularized,
}

impl AdaptMethod {
    pub fn name(self) -> &'static str {
        match self {
            AdaptMethod::Unconstrained => "unconstrained",
            AdaptMethod::SparseKnown => "sparse_known",
            AdaptMethod::SparsePredicted => "sparse_predicted",
            AdaptMethod::Regularized => "regularized",
        }
    }
}

impl std::str::FromStr for AdaptMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            AdaptMethod::Unconstrained,
            AdaptMethod::SparseKnown,
            AdaptMethod::SparsePredicted,
            AdaptMethod::Regularized,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::Parse(format!("unknown adaptation method `{s}`")))
    }
}

/// Infinite temperatures are written as the string `"inf"`.
mod temperature {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(t: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if t.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*t)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) if matches!(t.as_str(), "inf" | "infinity") => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad temperature `{t}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub method: AdaptMethod,
    pub steps: usize,
    pub lr: f64,
    #[serde(with = "temperature")]
    pub temperature: f64,
    pub exec: Exec,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            method: AdaptMethod::Unconstrained,
            steps: 10,
            lr: 0.1,
            temperature: 1.0,
            exec: Exec::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.steps == 0 || !(self.temperature >= 0.0) {
            return param(format!(
                "invalid adaptation config lr={} steps={} t={}",
                self.lr, self.steps, self.temperature
            ));
        }
        Ok(())
    }
}

/// Per-module mean NLL on adaptation data.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(pub Vec<f64>);

pub fn module_scores(stack: &ModelStack, d_adapt: &Dataset, exec: Exec) -> Result<ScoreVector> {
    if d_adapt.is_empty() {
        return param("adaptation data is empty");
    }
    if d_adapt.n() != stack.n() || d_adapt.k() != stack.k() {
        return Err(Error::Structural("adaptation data shape differs from stack".into()));
    }
    let rows = d_adapt.row_refs();
    let s = par::map_range(exec, stack.n(), |i| {
        let m = &stack.mlps[i];
        let mut s = Scratch::for_mlp(m);
        rows.iter().map(|x| m.nll_masked(x, i, m.mask(), &mut s)).sum::<f64>() / rows.len() as f64
    });
    Ok(ScoreVector(s))
}

/// Argmax with ties going to the lowest index.
pub fn predict_intervention_target(scores: &ScoreVector) -> usize {
    let mut best = 0;
    for (i, &s) in scores.0.iter().enumerate() {
        if s > scores.0[best] {
            best = i;
        }
    }
    best
}

/// `softmax(s / t)`; one-hot at the argmax for `t = 0`, uniform for `t = inf`.
pub fn adaptation_weights(scores: &ScoreVector, t: f64) -> Vec<f64> {
    let n = scores.0.len();
    if t == 0.0 {
        let mut w = vec![0.0; n];
        w[predict_intervention_target(scores)] = 1.0;
        return w;
    }
    if t.is_infinite() {
        return vec![1.0 / n as f64; n];
    }
    let max = scores.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.0.iter().map(|s| ((s - max) / t).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Per-module step scales for `method`.
pub fn step_scales(
    method: AdaptMethod,
    scores: &ScoreVector,
    temperature: f64,
    known_target: Option<usize>,
) -> Result<(Vec<f64>, Option<usize>)> {
    let n = scores.0.len();
    let one_hot = |t: usize| {
        let mut v = vec![0.0; n];
        v[t] = 1.0;
        v
    };
    Ok(match method {
        AdaptMethod::Unconstrained => (vec![1.0; n], None),
        AdaptMethod::SparseKnown => {
            let t = known_target.ok_or_else(|| Error::Param("sparse_known needs the intervention target".into()))?;
            if t >= n {
                return param(format!("target {t} out of range for n={n}"));
            }
            (one_hot(t), Some(t))
        }
        AdaptMethod::SparsePredicted => {
            let t = predict_intervention_target(scores);
            (one_hot(t), Some(t))
        }
        AdaptMethod::Regularized => {
            let w = adaptation_weights(scores, temperature);
            let max = w.iter().copied().fold(0.0, f64::max);
            (w.iter().map(|x| x / max).collect(), None)
        }
    })
}

/// What [`adapt`] did, step by step. Index 0 is the state before adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    pub scores: ScoreVector,
    pub scales: Vec<f64>,
    /// Target used by the sparse methods.
    pub target: Option<usize>,
    /// `grad_norms[s][i]`: norm of the update applied to module `i` at step
    /// `s` (scale times gradient norm); all zero at step 0.
    pub grad_norms: Vec<Vec<f64>>,
    /// `nll_adapt[s][i]`: module `i`'s adaptation-set NLL after step `s`.
    pub nll_adapt: Vec<Vec<f64>>,
    /// Test evaluation after each step, when requested.
    pub records: Vec<EvalRecord>,
}

/// Held-out data used to evaluate each adaptation step.
#[derive(Debug, Clone, Copy)]
pub struct StepEval<'a> {
    pub dag: &'a Dag,
    pub tests: &'a [Dataset],
}

/// Full-batch SGD on `d_adapt` for `cfg.steps` steps.
pub fn adapt(
    stack: &mut ModelStack,
    d_adapt: &Dataset,
    cfg: &AdaptConfig,
    known_target: Option<usize>,
    eval: Option<StepEval<'_>>,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let scores = module_scores(stack, d_adapt, cfg.exec)?;
    let (scales, target) = step_scales(cfg.method, &scores, cfg.temperature, known_target)?;
    let rows = d_adapt.row_refs();
    let n = stack.n();
    let mut opts: Vec<OptimizerState> = stack
        .mlps
        .iter()
        .map(|m| OptimizerState::for_mlp(OptimizerKind::sgd(cfg.lr), m))
        .collect();
    let mut records = Vec::new();
    let mut record = |stack: &ModelStack| -> Result<()> {
        if let Some(e) = eval {
            records.push(evaluate(stack, e.dag, e.tests, cfg.exec)?);
        }
        Ok(())
    };
    record(stack)?;
    let mut grad_norms = vec![vec![0.0; n]];
    let mut nll_adapt = vec![scores.0.clone()];
    for _ in 0..cfg.steps {
        let norms = par::map_mut2(cfg.exec, &mut stack.mlps, &mut opts, |i, m, opt| {
            let scale = scales[i];
            if scale == 0.0 {
                return 0.0;
            }
            let mut g = Gradients::zeros_like(m);
            let mut s = Scratch::for_mlp(m);
            m.backward_masked(&rows, i, &m.mask().to_vec(), &mut g, &mut s);
            let norm = g.norm();
            step(m, &g, opt, scale);
            scale * norm
        });
        grad_norms.push(norms);
        nll_adapt.push(module_scores(stack, d_adapt, cfg.exec)?.0);
        record(stack)?;
    }
    Ok(AdaptOutcome {
        scores,
        scales,
        target,
        grad_norms,
        nll_adapt,
        records,
    })
}

/// CSV `step,module,grad_norm,nll_adapt,nll_test_mean`; the last column is
/// the module's test NLL and is empty without step evaluations.
pub fn write_adaptation_trace<W: Write>(out: &AdaptOutcome, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["step", "module", "grad_norm", "nll_adapt", "nll_test_mean"])?;
    for (s, (norms, nlls)) in out.grad_norms.iter().zip(&out.nll_adapt).enumerate() {
        for (i, (g, l)) in norms.iter().zip(nlls).enumerate() {
            let test = out
                .records
                .get(s)
                .map(|r| r.per_node[i].to_string())
                .unwrap_or_default();
            wtr.write_record(&[s.to_string(), i.to_string(), g.to_string(), l.to_string(), test])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Gradient magnitudes of one unconstrained step, without applying it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub grad_norm_intervened: f64,
    pub grad_norm_others_mean: f64,
    pub per_module: Vec<f64>,
}

pub fn parameter_space_probe(
    stack: &ModelStack,
    d_adapt: &Dataset,
    target: usize,
    exec: Exec,
) -> Result<ProbeResult> {
    let n = stack.n();
    if target >= n {
        return param(format!("target {target} out of range for n={n}"));
    }
    if d_adapt.n() != n || d_adapt.k() != stack.k() {
        return Err(Error::Structural("adaptation data shape differs from stack".into()));
    }
    let per_module: Vec<f64> = stack
        .gradients(&d_adapt.row_refs(), exec)?
        .into_iter()
        .map(|(g, _)| g.norm())
        .collect();
    let others = if n > 1 {
        (per_module.iter().sum::<f64>() - per_module[target]) / (n - 1) as f64
    } else {
        0.0
    };
    Ok(ProbeResult {
        grad_norm_intervened: per_module[target],
        grad_norm_others_mean: others,
        per_module,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_and_shift() {
        assert_eq!(predict_intervention_target(&ScoreVector(vec![0.1, 5.0, 0.2])), 1);
        assert_eq!(predict_intervention_target(&ScoreVector(vec![2.0; 4])), 0);
        assert_eq!(predict_intervention_target(&ScoreVector(vec![10.1, 15.0, 10.2])), 1);
    }

    #[test]
    fn weights() {
        let s = ScoreVector(vec![1.0, 3.0, 2.0]);
        assert_eq!(adaptation_weights(&s, 0.0), vec![0.0, 1.0, 0.0]);
        for w in adaptation_weights(&s, 1e9) {
            assert!((w - 1.0 / 3.0).abs() < 1e-6);
        }
        let w = adaptation_weights(&ScoreVector(vec![0.0, 2f64.ln()]), 1.0);
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-15 && (w[1] - 2.0 / 3.0).abs() < 1e-15);
        for t in [0.0, 0.1, 1.0, 10.0, f64::INFINITY] {
            let sum: f64 = adaptation_weights(&s, t).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn limit_scales() {
        let s = ScoreVector(vec![0.3, 2.0, 1.0]);
        let (zero, _) = step_scales(AdaptMethod::Regularized, &s, 0.0, None).unwrap();
        let (sp, t) = step_scales(AdaptMethod::SparsePredicted, &s, 0.0, None).unwrap();
        assert_eq!(zero, sp);
        assert_eq!(t, Some(1));
        let (inf, _) = step_scales(AdaptMethod::Regularized, &s, f64::INFINITY, None).unwrap();
        assert_eq!(inf, vec![1.0; 3]);
        assert!(step_scales(AdaptMethod::SparseKnown, &s, 0.0, None).is_err());
    }

    #[test]
    fn config_temperature_round_trip() {
        let cfg = AdaptConfig {
            temperature: f64::INFINITY,
            ..Default::default()
        };
        let j = serde_json::to_string(&cfg).unwrap();
        assert!(j.contains("\"inf\""));
        let back: AdaptConfig = serde_json::from_str(&j).unwrap();
        assert_eq!(back, cfg);
        assert!(AdaptConfig {
            steps: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
