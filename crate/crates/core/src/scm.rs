//! Ground-truth categorical structural causal models.
//!
//! Each node's mechanism is a randomly initialized masked network of the same
//! form as the learned modules (hidden width 48) whose mask admits exactly the
//! node's parents. Noise is implicit in categorical sampling from the
//! mechanism's output distribution.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::graph::Dag;
use crate::nn::{MaskedMlp, Scratch};

pub const SCM_HIDDEN: usize = 48;
pub const WEIGHT_GAIN: f64 = 2.5;
pub const BIAS_RANGE: f64 = 1.1;

/// Regime a dataset was drawn under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum Regime {
    Observational,
    /// `value: None` means the target was redrawn uniformly for every sample.
    Interventional { target: usize, value: Option<usize> },
}

impl Regime {
    pub fn target(&self) -> Option<usize> {
        match *self {
            Regime::Observational => None,
            Regime::Interventional { target, .. } => Some(target),
        }
    }
}

/// Hard point intervention `do(X_target = value)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intervention {
    pub target: usize,
    pub value: usize,
}

/// How an interventional sampler sets the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterventionSpec {
    Fixed(Intervention),
    /// Fresh uniform draw per sample.
    Uniform { target: usize },
}

impl InterventionSpec {
    pub fn target(&self) -> usize {
        match *self {
            InterventionSpec::Fixed(iv) => iv.target,
            InterventionSpec::Uniform { target } => target,
        }
    }
}

/// Whether test interventions pin one value per dataset or redraw per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    #[default]
    Fixed,
    Uniform,
}

/// Samples sharing one regime, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    n: usize,
    k: usize,
    pub regime: Regime,
    values: Vec<usize>,
}

impl Dataset {
    pub fn new(n: usize, k: usize, regime: Regime) -> Self {
        Self {
            n,
            k,
            regime,
            values: Vec::new(),
        }
    }

    pub fn from_rows(n: usize, k: usize, regime: Regime, rows: &[Vec<usize>]) -> Result<Self> {
        let mut d = Self::new(n, k, regime);
        for r in rows {
            d.push(r)?;
        }
        Ok(d)
    }

    pub fn push(&mut self, row: &[usize]) -> Result<()> {
        if row.len() != self.n {
            return Err(Error::Structural(format!(
                "row has {} values, expected {}",
                row.len(),
                self.n
            )));
        }
        if let Some(v) = row.iter().find(|&&v| v >= self.k) {
            return param(format!("category {v} out of range for k={}", self.k));
        }
        if let Regime::Interventional {
            target,
            value: Some(v),
        } = self.regime
        {
            if row[target] != v {
                return Err(Error::Structural(format!(
                    "row has X_{target}={} but dataset is do(X_{target}={v})",
                    row[target]
                )));
            }
        }
        self.values.extend_from_slice(row);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[usize] {
        &self.values[s * self.n..(s + 1) * self.n]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[usize]> + '_ {
        self.values.chunks_exact(self.n)
    }

    pub fn row_refs(&self) -> Vec<&[usize]> {
        self.rows().collect()
    }

    /// Subset by sample indices.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let mut d = Dataset::new(self.n, self.k, self.regime);
        for &i in idx {
            d.values.extend_from_slice(self.row(i));
        }
        d
    }

    /// Concatenation of datasets; the regime of the result is `regime`.
    pub fn concat(parts: &[Dataset], regime: Regime) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Param("nothing to concatenate".into()))?;
        let mut d = Dataset::new(first.n, first.k, regime);
        for p in parts {
            if p.n != d.n || p.k != d.k {
                return Err(Error::Structural("datasets disagree on n/k".into()));
            }
            d.values.extend_from_slice(&p.values);
        }
        Ok(d)
    }
}

/// Rows × columns matrix with orthonormal columns (or rows, when there are
/// more columns than rows) scaled by `gain`, via modified Gram-Schmidt on a
/// Gaussian draw. Returned row-major.
pub fn orthogonal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (vecs, len) = if rows >= cols { (cols, rows) } else { (rows, cols) };
    // basis[v] is a vector of length `len`
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vecs);
    while basis.len() < vecs {
        let mut v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-10 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = gain
                * if rows >= cols {
                    basis[c][r]
                } else {
                    basis[r][c]
                };
        }
    }
    out
}

/// Data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthScm {
    pub dag: Dag,
    pub k: usize,
    pub mechanisms: Vec<MaskedMlp>,
}

impl GroundTruthScm {
    /// Random mechanisms: orthogonal weights scaled by 2.5, biases uniform on
    /// `[-1.1, 1.1]`, non-parent inputs masked.
    pub fn init<R: Rng + ?Sized>(dag: Dag, k: usize, rng: &mut R) -> Result<Self> {
        if k < 2 {
            return param(format!("need at least 2 categories, got {k}"));
        }
        let n = dag.n();
        let mut mechanisms = Vec::with_capacity(n);
        for i in 0..n {
            let mut m = MaskedMlp::zeros(n, k, SCM_HIDDEN);
            let w1 = orthogonal_matrix(n * k, SCM_HIDDEN, WEIGHT_GAIN, rng);
            m.w1_mut().copy_from_slice(&w1);
            for b in m.b1_mut() {
                *b = rng.gen_range(-BIAS_RANGE..=BIAS_RANGE);
            }
            let w2 = orthogonal_matrix(SCM_HIDDEN, k, WEIGHT_GAIN, rng);
            m.w2_mut().copy_from_slice(&w2);
            for b in m.b2_mut() {
                *b = rng.gen_range(-BIAS_RANGE..=BIAS_RANGE);
            }
            m.set_mask(dag.adjacency().row(i));
            mechanisms.push(m);
        }
        Ok(Self { dag, k, mechanisms })
    }

    pub fn n(&self) -> usize {
        self.dag.n()
    }

    /// `P(X_i | parents)` evaluated at `assignment`.
    pub fn cpd(&self, i: usize, assignment: &[usize]) -> Result<Vec<f64>> {
        if i >= self.n() {
            return param(format!("node {i} out of range for n={}", self.n()));
        }
        Ok(self.mechanisms[i]
            .forward(assignment)?
            .into_iter()
            .map(f64::exp)
            .collect())
    }

    /// `-log P(x_i | parents)` without validation.
    #[inline]
    pub(crate) fn node_nll(&self, i: usize, x: &[usize], s: &mut Scratch) -> f64 {
        let m = &self.mechanisms[i];
        m.nll_masked(x, i, m.mask(), s)
    }

    fn draw_into<R: Rng + ?Sized>(
        &self,
        order: &[usize],
        spec: Option<InterventionSpec>,
        row: &mut [usize],
        s: &mut Scratch,
        rng: &mut R,
    ) {
        for &i in order {
            if let Some(sp) = spec {
                if sp.target() == i {
                    row[i] = match sp {
                        InterventionSpec::Fixed(iv) => iv.value,
                        InterventionSpec::Uniform { .. } => rng.gen_range(0..self.k),
                    };
                    continue;
                }
            }
            let m = &self.mechanisms[i];
            let logp = m.forward_masked(row, m.mask(), s);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = self.k - 1;
            for (c, lp) in logp.iter().enumerate() {
                acc += lp.exp();
                if u < acc {
                    pick = c;
                    break;
                }
            }
            row[i] = pick;
        }
    }

    fn sample<R: Rng + ?Sized>(
        &self,
        spec: Option<InterventionSpec>,
        count: usize,
        rng: &mut R,
    ) -> Result<Dataset> {
        let regime = match spec {
            None => Regime::Observational,
            Some(InterventionSpec::Fixed(iv)) => Regime::Interventional {
                target: iv.target,
                value: Some(iv.value),
            },
            Some(InterventionSpec::Uniform { target }) => Regime::Interventional {
                target,
                value: None,
            },
        };
        let order = self.dag.topological_order()?;
        let n = self.n();
        let mut ds = Dataset::new(n, self.k, regime);
        ds.values.reserve(count * n);
        let mut row = vec![0usize; n];
        let mut s = Scratch::new(SCM_HIDDEN, self.k);
        for _ in 0..count {
            row.iter_mut().for_each(|v| *v = 0);
            self.draw_into(&order, spec, &mut row, &mut s, rng);
            ds.values.extend_from_slice(&row);
        }
        Ok(ds)
    }

    /// Ancestral sampling from the unmodified model.
    pub fn sample_observational<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Dataset> {
        if count == 0 {
            return param("sample count must be positive");
        }
        self.sample(None, count, rng)
    }

    /// Ancestral sampling with the target's mechanism replaced.
    pub fn sample_interventional<R: Rng + ?Sized>(
        &self,
        spec: InterventionSpec,
        count: usize,
        rng: &mut R,
    ) -> Result<Dataset> {
        let t = spec.target();
        if t >= self.n() {
            return param(format!("intervention target {t} out of range for n={}", self.n()));
        }
        if let InterventionSpec::Fixed(iv) = spec {
            if iv.value >= self.k {
                return param(format!("intervention value {} out of range for k={}", iv.value, self.k));
            }
        }
        self.sample(Some(spec), count, rng)
    }

    /// Observational set of `n_obs` samples plus `n_int` interventional
    /// samples split as evenly as possible over `min(n, n_int)` datasets.
    /// Dataset `l` intervenes on node `l` with one uniformly drawn value.
    pub fn make_training_data<R: Rng + ?Sized>(
        &self,
        n_obs: usize,
        n_int: usize,
        rng: &mut R,
    ) -> Result<(Dataset, Vec<Dataset>)> {
        let obs = self.sample(None, n_obs, rng)?;
        let n = self.n();
        let sets = n.min(n_int);
        let mut ints = Vec::with_capacity(sets);
        for l in 0..sets {
            let size = n_int / sets + usize::from(l < n_int % sets);
            let iv = Intervention {
                target: l % n,
                value: rng.gen_range(0..self.k),
            };
            ints.push(self.sample(Some(InterventionSpec::Fixed(iv)), size, rng)?);
        }
        Ok((obs, ints))
    }

    /// Held-out interventional test sets with uniformly drawn targets.
    pub fn make_test_suite<R: Rng + ?Sized>(
        &self,
        datasets: usize,
        samples: usize,
        mode: InterventionMode,
        rng: &mut R,
    ) -> Result<Vec<Dataset>> {
        (0..datasets)
            .map(|_| {
                let target = rng.gen_range(0..self.n());
                let spec = match mode {
                    InterventionMode::Fixed => InterventionSpec::Fixed(Intervention {
                        target,
                        value: rng.gen_range(0..self.k),
                    }),
                    InterventionMode::Uniform => InterventionSpec::Uniform { target },
                };
                self.sample_interventional(spec, samples, rng)
            })
            .collect()
    }

    /// Per-variable mean NLL of `test` under the unmodified mechanisms.
    pub fn bound_zero_shot(&self, test: &Dataset) -> Result<Vec<f64>> {
        self.check_dataset(test)?;
        let n = self.n();
        let mut acc = vec![0.0; n];
        let mut s = Scratch::new(SCM_HIDDEN, self.k);
        for x in test.rows() {
            for (i, a) in acc.iter_mut().enumerate() {
                *a += self.node_nll(i, x, &mut s);
            }
        }
        let inv = 1.0 / test.len() as f64;
        Ok(acc.into_iter().map(|a| a * inv).collect())
    }

    /// Like [`bound_zero_shot`](Self::bound_zero_shot) with the intervened
    /// mechanism replaced by the true intervention distribution.
    pub fn bound_adaptation(&self, test: &Dataset) -> Result<Vec<f64>> {
        let mut out = self.bound_zero_shot(test)?;
        match test.regime {
            Regime::Observational => {
                return param("adaptation bound needs an interventional dataset")
            }
            Regime::Interventional { target, value } => {
                out[target] = match value {
                    Some(_) => 0.0,
                    None => (self.k as f64).ln(),
                };
            }
        }
        Ok(out)
    }

    fn check_dataset(&self, d: &Dataset) -> Result<()> {
        if d.n != self.n() || d.k != self.k {
            return Err(Error::Structural(format!(
                "dataset is n={} k={}, model is n={} k={}",
                d.n,
                d.k,
                self.n(),
                self.k
            )));
        }
        if d.is_empty() {
            return param("empty dataset");
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let scm: Self = serde_json::from_str(s)?;
        let n = scm.dag.n();
        if scm.mechanisms.len() != n
            || scm
                .mechanisms
                .iter()
                .enumerate()
                .any(|(i, m)| m.n() != n || m.k() != scm.k || m.mask() != scm.dag.adjacency().row(i))
        {
            return Err(Error::Structural("checkpoint mechanisms disagree with graph".into()));
        }
        Ok(scm)
    }
}

/// Write datasets as CSV with header `regime,target,value,x0,...`.
pub fn write_csv<W: Write>(datasets: &[Dataset], w: W) -> Result<()> {
    let n = datasets
        .first()
        .map(|d| d.n)
        .ok_or_else(|| Error::Param("no datasets to write".into()))?;
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["regime".to_string(), "target".into(), "value".into()];
    header.extend((0..n).map(|i| format!("x{i}")));
    wtr.write_record(&header)?;
    for d in datasets {
        if d.n != n {
            return Err(Error::Structural("datasets disagree on n".into()));
        }
        let (regime, target, value) = match d.regime {
            Regime::Observational => ("observational", String::new(), String::new()),
            Regime::Interventional { target, value } => (
                "interventional",
                target.to_string(),
                value.map(|v| v.to_string()).unwrap_or_default(),
            ),
        };
        for row in d.rows() {
            let mut rec = vec![regime.to_string(), target.clone(), value.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Read CSV written by [`write_csv`]. Consecutive rows with the same
/// regime/target/value form one dataset.
pub fn read_csv<R: Read>(r: R, k: usize) -> Result<Vec<Dataset>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    let n = header.len().saturating_sub(3);
    if n == 0 || &header[0] != "regime" || &header[1] != "target" || &header[2] != "value" {
        return Err(Error::Parse("dataset CSV header must be regime,target,value,x0,...".into()));
    }
    let parse = |s: &str, what: &str| -> Result<usize> {
        s.trim()
            .parse()
            .map_err(|e| Error::Parse(format!("{what} `{s}`: {e}")))
    };
    let mut out: Vec<Dataset> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let regime = match &rec[0] {
            "observational" => Regime::Observational,
            "interventional" => Regime::Interventional {
                target: parse(&rec[1], "target")?,
                value: if rec[2].trim().is_empty() {
                    None
                } else {
                    Some(parse(&rec[2], "value")?)
                },
            },
            other => return Err(Error::Parse(format!("unknown regime `{other}`"))),
        };
        if let Regime::Interventional { target, .. } = regime {
            if target >= n {
                return param(format!("target {target} out of range for n={n}"));
            }
        }
        let row = (3..rec.len())
            .map(|c| parse(&rec[c], "value"))
            .collect::<Result<Vec<_>>>()?;
        match out.last_mut() {
            Some(d) if d.regime == regime => d.push(&row)?,
            _ => {
                let mut d = Dataset::new(n, k, regime);
                d.push(&row)?;
                out.push(d);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_preset, Preset};
    use crate::seed;

    fn chain2(k: usize, s: u64) -> GroundTruthScm {
        let dag = generate_preset(Preset::Chain, 2).unwrap();
        GroundTruthScm::init(dag, k, &mut seed::rng(s)).unwrap()
    }

    fn tv(a: &[f64], b: &[f64]) -> f64 {
        0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
    }

    fn marginal(d: &Dataset, i: usize) -> Vec<f64> {
        let mut f = vec![0.0; d.k()];
        for r in d.rows() {
            f[r[i]] += 1.0;
        }
        f.iter().map(|c| c / d.len() as f64).collect()
    }

    #[test]
    fn orthogonal_columns() {
        let m = orthogonal_matrix(20, 6, 2.5, &mut seed::rng(1));
        for a in 0..6 {
            for b in 0..6 {
                let d: f64 = (0..20).map(|r| m[r * 6 + a] * m[r * 6 + b]).sum();
                let want = if a == b { 6.25 } else { 0.0 };
                assert!((d - want).abs() < 1e-9);
            }
        }
        assert!(m.iter().all(|v| v.abs() <= 2.5));
        // wide case: rows orthonormal
        let w = orthogonal_matrix(3, 8, 1.0, &mut seed::rng(2));
        let d: f64 = (0..8).map(|c| w[c] * w[8 + c]).sum();
        assert!(d.abs() < 1e-9);
    }

    #[test]
    fn biases_in_range_and_cpds_normalized() {
        let dag = generate_preset(Preset::Jungle, 6).unwrap();
        let mut scm = GroundTruthScm::init(dag, 5, &mut seed::rng(4)).unwrap();
        for m in &mut scm.mechanisms {
            assert!(m.b1_mut().iter().all(|b| b.abs() <= BIAS_RANGE));
            assert!(m.b2_mut().iter().all(|b| b.abs() <= BIAS_RANGE));
        }
        let mut rng = seed::rng(5);
        for _ in 0..50 {
            let x: Vec<usize> = (0..6).map(|_| rng.gen_range(0..5)).collect();
            for i in 0..6 {
                let p = scm.cpd(i, &x).unwrap();
                assert!(p.iter().all(|&v| v >= 0.0));
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        assert!(scm.cpd(6, &[0; 6]).is_err());
        assert!(GroundTruthScm::init(Dag::empty(2), 1, &mut seed::rng(0)).is_err());
    }

    #[test]
    fn cpd_depends_only_on_parents() {
        let dag = Dag::from_edges(3, &[(0, 2)]).unwrap();
        let scm = GroundTruthScm::init(dag, 4, &mut seed::rng(6)).unwrap();
        let a = scm.cpd(2, &[1, 0, 0]).unwrap();
        let b = scm.cpd(2, &[1, 3, 2]).unwrap();
        assert_eq!(a, b);
        // roots are constant
        let r1 = scm.cpd(1, &[0, 0, 0]).unwrap();
        let r2 = scm.cpd(1, &[3, 2, 1]).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn empty_dag_cpds_are_constant() {
        let scm = GroundTruthScm::init(Dag::empty(3), 4, &mut seed::rng(7)).unwrap();
        for i in 0..3 {
            assert_eq!(scm.cpd(i, &[0, 1, 2]).unwrap(), scm.cpd(i, &[3, 3, 3]).unwrap());
        }
    }

    #[test]
    fn child_cpd_varies_with_parent() {
        // evaluate the child's CPD at every parent value
        let mut varies = 0;
        for s in 0..20 {
            let scm = chain2(10, 100 + s);
            let base = scm.cpd(1, &[0, 0]).unwrap();
            if (1..10).any(|v| scm.cpd(1, &[v, 0]).unwrap() != base) {
                varies += 1;
            }
        }
        assert_eq!(varies, 20);
    }

    #[test]
    fn observational_conditionals_match_cpd() {
        // frequency-count oracle vs exact CPD
        let scm = chain2(3, 8);
        let d = scm.sample_observational(100_000, &mut seed::rng(9)).unwrap();
        let root = scm.cpd(0, &[0, 0]).unwrap();
        assert!(tv(&marginal(&d, 0), &root) < 0.01);
        for parent in 0..3 {
            let rows: Vec<&[usize]> = d.rows().filter(|r| r[0] == parent).collect();
            let mut f = [0.0; 3];
            for r in &rows {
                f[r[1]] += 1.0 / rows.len() as f64;
            }
            let exact = scm.cpd(1, &[parent, 0]).unwrap();
            assert!(tv(&f, &exact) < 0.02, "parent={parent}");
        }
        let one = scm.sample_observational(1, &mut seed::rng(1)).unwrap();
        assert_eq!(one.len(), 1);
        assert!(scm.sample_observational(0, &mut seed::rng(1)).is_err());
    }

    #[test]
    fn interventions() {
        let scm = chain2(4, 10);
        let mut rng = seed::rng(11);
        let d = scm
            .sample_interventional(
                InterventionSpec::Fixed(Intervention { target: 0, value: 2 }),
                500,
                &mut rng,
            )
            .unwrap();
        assert!(d.rows().all(|r| r[0] == 2));

        // intervening on the child leaves the parent's marginal alone
        let obs = scm.sample_observational(100_000, &mut rng).unwrap();
        let int = scm
            .sample_interventional(
                InterventionSpec::Fixed(Intervention { target: 1, value: 3 }),
                100_000,
                &mut rng,
            )
            .unwrap();
        assert!(tv(&marginal(&obs, 0), &marginal(&int, 0)) < 0.02);

        let scm10 = chain2(10, 12);
        let uni = scm10
            .sample_interventional(InterventionSpec::Uniform { target: 1 }, 100_000, &mut rng)
            .unwrap();
        assert!(tv(&marginal(&uni, 1), &[0.1; 10]) < 0.02);

        assert!(scm
            .sample_interventional(InterventionSpec::Uniform { target: 2 }, 1, &mut rng)
            .is_err());
        assert!(scm
            .sample_interventional(
                InterventionSpec::Fixed(Intervention { target: 0, value: 4 }),
                1,
                &mut rng
            )
            .is_err());
    }

    #[test]
    fn training_data_partition() {
        let dag = generate_preset(Preset::Chain, 10).unwrap();
        let scm = GroundTruthScm::init(dag, 3, &mut seed::rng(13)).unwrap();
        let (obs, ints) = scm.make_training_data(100, 100, &mut seed::rng(14)).unwrap();
        assert_eq!(obs.len(), 100);
        assert_eq!(ints.len(), 10);
        assert!(ints.iter().all(|d| d.len() == 10));
        let targets: std::collections::BTreeSet<_> =
            ints.iter().map(|d| d.regime.target().unwrap()).collect();
        assert_eq!(targets.len(), 10);
        let (_, none) = scm.make_training_data(10, 0, &mut seed::rng(14)).unwrap();
        assert!(none.is_empty());
        let (_, uneven) = scm.make_training_data(10, 25, &mut seed::rng(14)).unwrap();
        let sizes: Vec<usize> = uneven.iter().map(Dataset::len).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 25);
        assert!(sizes.iter().all(|&s| s == 2 || s == 3));
    }

    #[test]
    fn bounds_on_two_nodes() {
        // closed form: the intervened entry of the zero-shot bound is the
        // average of -log P(X_0 = v) over the dataset, i.e. -log P(X_0 = v).
        let scm = chain2(5, 15);
        let mut rng = seed::rng(16);
        let iv = Intervention { target: 0, value: 3 };
        let d = scm
            .sample_interventional(InterventionSpec::Fixed(iv), 200, &mut rng)
            .unwrap();
        let zs = scm.bound_zero_shot(&d).unwrap();
        let p0 = scm.cpd(0, &[0, 0]).unwrap();
        assert!((zs[0] + p0[3].ln()).abs() < 1e-12);
        let ad = scm.bound_adaptation(&d).unwrap();
        assert_eq!(ad[0], 0.0);
        assert_eq!(ad[1], zs[1]);

        let u = scm
            .sample_interventional(InterventionSpec::Uniform { target: 1 }, 200, &mut rng)
            .unwrap();
        let ad = scm.bound_adaptation(&u).unwrap();
        assert_eq!(ad[1], 5f64.ln());

        let obs = scm.sample_observational(10, &mut rng).unwrap();
        assert!(scm.bound_adaptation(&obs).is_err());
        assert!(scm.bound_zero_shot(&obs).is_ok());
    }

    #[test]
    fn determinism_and_csv_round_trip() {
        let dag = generate_preset(Preset::Tree, 5).unwrap();
        let scm = GroundTruthScm::init(dag, 4, &mut seed::rng(17)).unwrap();
        let a = scm.make_training_data(30, 20, &mut seed::rng(18)).unwrap();
        let b = scm.make_training_data(30, 20, &mut seed::rng(18)).unwrap();
        assert_eq!(a, b);
        let mut sets = vec![a.0];
        sets.extend(a.1);
        sets.push(
            scm.sample_interventional(InterventionSpec::Uniform { target: 4 }, 5, &mut seed::rng(1))
                .unwrap(),
        );
        let mut buf = Vec::new();
        write_csv(&sets, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("regime,target,value,x0,x1,x2,x3,x4\n"));
        assert!(text.contains("\nobservational,,,"));
        let back = read_csv(buf.as_slice(), 4).unwrap();
        assert_eq!(back, sets);
        assert!(read_csv("a,b\n1,2\n".as_bytes(), 4).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let scm = chain2(3, 19);
        let back = GroundTruthScm::from_json(&scm.to_json().unwrap()).unwrap();
        assert_eq!(back, scm);
    }
}
