//! Seeded sweeps over graphs, sizes, models and adaptation settings.
//!
//! A sweep is flattened into independent jobs. Every random stream a job
//! uses is derived from the master seed and the job's key, so results do not
//! depend on job order or on how many workers run them. Each job runs under
//! `catch_unwind`; a failure becomes an `error` row and the sweep continues.
//!
//! Seed derivation, all via [`seed::derive`]:
//! - problem key: `(master, [label(graph), n, k, seed])`
//! - graph, SCM and test suite: `(problem, [label("graph" | "scm" | "test")])`
//! - training data: `(problem, [label("train"), train_samples])`
//! - model init and batches: `(problem, [label("init"), train_samples])`
//! - adaptation data: `(problem, [label("adapt"), intervention, adapt_samples])`

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adaptation::{adapt, parameter_space_probe, AdaptConfig, AdaptMethod, StepEval};
use crate::error::{param, Error, Result};
use crate::graph::{generate_er, generate_preset, shd_dag, Dag, Preset};
use crate::metrics::{evaluate, evaluate_bounds, EvalRecord};
use crate::nn::{ModelStack, HIDDEN};
use crate::par::{self, Exec};
use crate::scm::{Dataset, GroundTruthScm, Intervention, InterventionMode, InterventionSpec, Regime};
use crate::seed;
use crate::training::{
    train_expert, train_l_causal, train_maml, train_pseudo_ll, write_loss_traces, ExpertMode, GraphFitConfig,
    LossTrace, TrainConfig,
};

pub const RESULTS_HEADER: &str = "graph_type,n,k,seed,model,train_samples,adapt_samples,adapt_method,step,metric,value";
pub const RESULTS_FILE: &str = "results.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Graph family: Erdős–Rényi with expected `d` edges per node, or a preset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum GraphSpec {
    Er(f64),
    Preset(Preset),
}

impl GraphSpec {
    pub fn generate<R: rand::Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Dag> {
        match *self {
            GraphSpec::Er(d) => generate_er(n, d, rng),
            GraphSpec::Preset(p) => generate_preset(p, n),
        }
    }
}

impl fmt::Display for GraphSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphSpec::Er(d) => write!(f, "er{d}"),
            GraphSpec::Preset(p) => write!(f, "{p}"),
        }
    }
}

impl FromStr for GraphSpec {
    type Err = Error;

    /// `er1`, `er-2`, `ER1.5` or a preset name.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if let Some(rest) = lower.strip_prefix("er") {
            let d: f64 = rest
                .trim_start_matches(['-', '_', ':'])
                .parse()
                .map_err(|_| Error::Parse(format!("bad ER density in `{s}`")))?;
            if !(d > 0.0) {
                return Err(Error::Parse(format!("ER density must be positive in `{s}`")));
            }
            return Ok(GraphSpec::Er(d));
        }
        Ok(GraphSpec::Preset(lower.parse()?))
    }
}

impl TryFrom<String> for GraphSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GraphSpec> for String {
    fn from(g: GraphSpec) -> String {
        g.to_string()
    }
}

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub enum $name { $($var),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$var => $s),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($name::$var),)+
                    _ => Err(Error::Parse(format!(concat!("unknown ", stringify!($name), " `{}`"), s))),
                }
            }
        }

        impl TryFrom<String> for $name {
            type Error = Error;

            fn try_from(s: String) -> Result<Self> {
                s.parse()
            }
        }

        impl From<$name> for String {
            fn from(v: $name) -> String {
                v.name().to_string()
            }
        }
    };
}

named_enum!(
    /// Trained models and the two oracle references.
    ModelKind {
        PseudoLl => "pseudo_ll",
        Maml => "maml",
        ExpCausal => "exp_causal",
        ExpAnticausal => "exp_anticausal",
        ExpSkeleton => "exp_skeleton",
        LCausal => "l_causal",
        BoundZeroShot => "bound_zero_shot",
        BoundAdaptation => "bound_adaptation",
    }
);

impl ModelKind {
    pub fn is_bound(self) -> bool {
        matches!(self, ModelKind::BoundZeroShot | ModelKind::BoundAdaptation)
    }
}

named_enum!(
    /// Metric names allowed in result files.
    Metric {
        NllMean => "nll_mean",
        NllIntervention => "nll_intervention",
        NllRoot => "nll_root",
        NllParents => "nll_parents",
        NllRemainder => "nll_remainder",
        Shd => "shd",
        GradNormIntervened => "grad_norm_intervened",
        GradNormOthers => "grad_norm_others",
        Error => "error",
    }
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub lrs: Vec<f64>,
    pub weight_decays: Vec<f64>,
    /// Held-out validation interventions used to rank settings.
    pub validation_interventions: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            lrs: vec![0.1, 0.01, 0.001, 0.0001],
            weight_decays: vec![0.0],
            validation_interventions: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub graphs: Vec<GraphSpec>,
    pub n: Vec<usize>,
    pub k: Vec<usize>,
    pub train_sizes: Vec<usize>,
    /// Training-set size used by the adaptation sweep.
    pub adapt_train_size: usize,
    pub adapt_sizes: Vec<usize>,
    /// Step counts of interest; every step up to the largest is recorded.
    pub adapt_steps: Vec<usize>,
    pub adapt_methods: Vec<AdaptMethod>,
    pub models: Vec<ModelKind>,
    pub seeds: Vec<u64>,
    pub master_seed: u64,
    pub test_interventions: usize,
    pub test_samples: usize,
    pub test_mode: InterventionMode,
    pub train: TrainConfig,
    pub graph_fit: GraphFitConfig,
    pub adapt: AdaptConfig,
    pub grid: GridConfig,
    pub output_dir: PathBuf,
    /// Worker threads for sweep jobs; 0 uses every core.
    pub jobs: usize,
    /// Write per-job loss traces and structure-learning snapshots.
    pub write_traces: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            graphs: vec![GraphSpec::Er(1.0)],
            n: vec![10],
            k: vec![10],
            train_sizes: vec![100, 200, 400, 1000, 2000],
            adapt_train_size: 1000,
            adapt_sizes: vec![1, 2, 5, 10, 20, 50, 100],
            adapt_steps: vec![1, 3],
            adapt_methods: vec![AdaptMethod::Unconstrained],
            models: vec![
                ModelKind::PseudoLl,
                ModelKind::Maml,
                ModelKind::ExpCausal,
                ModelKind::ExpAnticausal,
                ModelKind::ExpSkeleton,
                ModelKind::LCausal,
                ModelKind::BoundZeroShot,
                ModelKind::BoundAdaptation,
            ],
            seeds: (0..10).collect(),
            master_seed: 0,
            test_interventions: 20,
            test_samples: 500,
            test_mode: InterventionMode::Fixed,
            train: TrainConfig::default(),
            graph_fit: GraphFitConfig::default(),
            adapt: AdaptConfig::default(),
            grid: GridConfig::default(),
            output_dir: PathBuf::from("results"),
            jobs: 1,
            write_traces: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.models.is_empty() || self.graphs.is_empty() {
            return param("seeds, models and graphs must be nonempty");
        }
        if self.n.iter().any(|&n| n < 2) || self.k.iter().any(|&k| k < 2) || self.n.is_empty() || self.k.is_empty() {
            return param("need n >= 2 and k >= 2");
        }
        if self.train_sizes.contains(&0)
            || self.adapt_sizes.contains(&0)
            || self.adapt_steps.contains(&0)
            || self.adapt_train_size == 0
            || self.test_interventions == 0
            || self.test_samples == 0
        {
            return param("sizes and step counts must be positive");
        }
        self.train.validate()?;
        self.graph_fit.validate()?;
        self.adapt.validate()
    }

    pub fn max_steps(&self) -> usize {
        self.adapt_steps.iter().copied().max().unwrap_or(self.adapt.steps)
    }
}

/// One row of the long-format results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub graph_type: String,
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    pub model: ModelKind,
    pub train_samples: usize,
    pub adapt_samples: Option<usize>,
    pub adapt_method: Option<AdaptMethod>,
    pub step: Option<usize>,
    pub metric: Metric,
    pub value: f64,
}

/// Identifies the cell a row belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMeta {
    pub graph_type: String,
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    pub model: ModelKind,
    pub train_samples: usize,
    pub adapt_samples: Option<usize>,
    pub adapt_method: Option<AdaptMethod>,
    pub step: Option<usize>,
}

impl RowMeta {
    fn row(&self, metric: Metric, value: f64) -> ResultRow {
        ResultRow {
            graph_type: self.graph_type.clone(),
            n: self.n,
            k: self.k,
            seed: self.seed,
            model: self.model,
            train_samples: self.train_samples,
            adapt_samples: self.adapt_samples,
            adapt_method: self.adapt_method,
            step: self.step,
            metric,
            value,
        }
    }

    /// One row per metric present in `rec`.
    pub fn rows(&self, rec: &EvalRecord) -> Vec<ResultRow> {
        let mut out = vec![
            self.row(Metric::NllMean, rec.nll_mean),
            self.row(Metric::NllIntervention, rec.nll_intervention),
        ];
        let optional = [
            (Metric::NllRoot, rec.nll_root),
            (Metric::NllParents, rec.nll_parents),
            (Metric::NllRemainder, rec.nll_remainder),
            (Metric::Shd, rec.shd.map(|s| s as f64)),
            (Metric::GradNormIntervened, rec.grad_norm_intervened),
            (Metric::GradNormOthers, rec.grad_norm_others),
        ];
        out.extend(optional.into_iter().filter_map(|(m, v)| v.map(|v| self.row(m, v))));
        out
    }

    pub fn error_row(&self) -> ResultRow {
        self.row(Metric::Error, f64::NAN)
    }
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

/// Long-format CSV with [`RESULTS_HEADER`].
pub fn write_results<W: Write>(rows: &[ResultRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(RESULTS_HEADER.split(','))?;
    for r in rows {
        wtr.write_record(&[
            r.graph_type.clone(),
            r.n.to_string(),
            r.k.to_string(),
            r.seed.to_string(),
            r.model.to_string(),
            r.train_samples.to_string(),
            opt(&r.adapt_samples),
            opt(&r.adapt_method.map(AdaptMethod::name)),
            opt(&r.step),
            r.metric.to_string(),
            r.value.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Parse a results CSV, rejecting unknown models, methods and metrics.
pub fn read_results<R: Read>(r: R) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != RESULTS_HEADER {
        return Err(Error::Parse(format!("unexpected results header `{}`", header.join(","))));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::Parse(format!("bad {what} `{s}`")))
    };
    let maybe = |s: &str, what: &str| -> Result<Option<usize>> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s, what).map(Some)
        }
    };
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            Ok(ResultRow {
                graph_type: rec[0].to_string(),
                n: num(&rec[1], "n")?,
                k: num(&rec[2], "k")?,
                seed: rec[3].parse().map_err(|_| Error::Parse(format!("bad seed `{}`", &rec[3])))?,
                model: rec[4].parse()?,
                train_samples: num(&rec[5], "train_samples")?,
                adapt_samples: maybe(&rec[6], "adapt_samples")?,
                adapt_method: if rec[7].is_empty() { None } else { Some(rec[7].parse()?) },
                step: maybe(&rec[8], "step")?,
                metric: rec[9].parse()?,
                value: rec[10].parse().map_err(|_| Error::Parse(format!("bad value `{}`", &rec[10])))?,
            })
        })
        .collect()
}

/// Everything needed to reproduce a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub code_version: String,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    pub config: ExperimentConfig,
    pub rows: usize,
    pub errors: Vec<String>,
}

/// Write `results.csv` and `manifest.json` into `dir`.
pub fn emit_results(rows: &[ResultRow], manifest: &Manifest, dir: &Path) -> Result<()> {
    if rows.is_empty() {
        return param("no result rows to write");
    }
    fs::create_dir_all(dir)?;
    write_results(rows, fs::File::create(dir.join(RESULTS_FILE))?)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

fn manifest(command: &str, cfg: &ExperimentConfig, rows: usize, errors: Vec<String>) -> Manifest {
    Manifest {
        command: command.to_string(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        master_seed: cfg.master_seed,
        seeds: cfg.seeds.clone(),
        config: cfg.clone(),
        rows,
        errors,
    }
}

/// Training data: observational plus interventional sets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub obs: Dataset,
    pub ints: Vec<Dataset>,
}

impl TrainData {
    /// Split datasets read from disk: the observational ones are merged,
    /// the rest kept in order.
    pub fn from_datasets(sets: Vec<Dataset>) -> Result<Self> {
        let (obs, ints): (Vec<Dataset>, Vec<Dataset>) =
            sets.into_iter().partition(|d| d.regime == Regime::Observational);
        if obs.is_empty() {
            return param("training data has no observational rows");
        }
        Ok(Self {
            obs: Dataset::concat(&obs, Regime::Observational)?,
            ints,
        })
    }

    pub fn datasets(&self) -> Vec<Dataset> {
        std::iter::once(self.obs.clone()).chain(self.ints.iter().cloned()).collect()
    }
}

/// Fresh samples from the interventional regime of an existing dataset.
pub fn sample_regime<R: rand::Rng + ?Sized>(
    scm: &GroundTruthScm,
    regime: &Regime,
    size: usize,
    rng: &mut R,
) -> Result<Dataset> {
    let spec = match *regime {
        Regime::Interventional { target, value: Some(value) } => InterventionSpec::Fixed(Intervention { target, value }),
        Regime::Interventional { target, value: None } => InterventionSpec::Uniform { target },
        Regime::Observational => return param("adaptation needs an interventional regime"),
    };
    scm.sample_interventional(spec, size, rng)
}

/// One seeded ground truth with its fixed held-out test suite.
#[derive(Debug, Clone)]
pub struct Problem {
    pub graph: GraphSpec,
    pub seed: u64,
    pub key: u64,
    pub scm: GroundTruthScm,
    pub tests: Vec<Dataset>,
}

impl Problem {
    pub fn new(cfg: &ExperimentConfig, graph: GraphSpec, n: usize, k: usize, seed_value: u64) -> Result<Self> {
        let key = seed::derive(
            cfg.master_seed,
            &[seed::label(&graph.to_string()), n as u64, k as u64, seed_value],
        );
        let dag = graph.generate(n, &mut seed::stream(key, &[seed::label("graph")]))?;
        let scm = GroundTruthScm::init(dag, k, &mut seed::stream(key, &[seed::label("scm")]))?;
        let tests = scm.make_test_suite(
            cfg.test_interventions,
            cfg.test_samples,
            cfg.test_mode,
            &mut seed::stream(key, &[seed::label("test")]),
        )?;
        Ok(Self {
            graph,
            seed: seed_value,
            key,
            scm,
            tests,
        })
    }

    pub fn dag(&self) -> &Dag {
        &self.scm.dag
    }

    /// `total / 2` observational samples and the rest interventional.
    pub fn training_data(&self, total: usize) -> Result<TrainData> {
        let mut rng = seed::stream(self.key, &[seed::label("train"), total as u64]);
        let (obs, ints) = self.scm.make_training_data(total / 2, total - total / 2, &mut rng)?;
        Ok(TrainData { obs, ints })
    }

    /// Extra interventional sets, disjoint in stream from the test suite.
    pub fn validation_suite(&self, count: usize, samples: usize, mode: InterventionMode) -> Result<Vec<Dataset>> {
        self.scm
            .make_test_suite(count, samples, mode, &mut seed::stream(self.key, &[seed::label("valid")]))
    }

    /// Samples from the same intervention as test set `t`.
    pub fn adaptation_data(&self, t: usize, size: usize) -> Result<Dataset> {
        let mut rng = seed::stream(self.key, &[seed::label("adapt"), t as u64, size as u64]);
        sample_regime(&self.scm, &self.tests[t].regime, size, &mut rng)
    }

    pub fn init_seed(&self, total: usize) -> u64 {
        seed::derive(self.key, &[seed::label("init"), total as u64])
    }
}

/// A trained stack and what training reported.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub stack: ModelStack,
    pub shd: Option<usize>,
    pub traces: Vec<LossTrace>,
    pub gamma_history: Vec<Vec<Vec<f64>>>,
}

/// Train `kind` (not a bound) on `data` from an initialization drawn with
/// `init_seed`. `dag` is the true graph; experts read their masks from it
/// and L-Causal reports its SHD against it.
pub fn train_model(
    kind: ModelKind,
    dag: &Dag,
    data: &TrainData,
    init_seed: u64,
    train: &TrainConfig,
    gf: &GraphFitConfig,
) -> Result<TrainedModel> {
    let mut stack = ModelStack::new(data.obs.n(), data.obs.k(), HIDDEN, init_seed)?;
    let cfg = TrainConfig {
        seed: init_seed,
        ..train.clone()
    };
    let mut shd = None;
    let mut gamma_history = Vec::new();
    let traces = match kind {
        ModelKind::PseudoLl => vec![train_pseudo_ll(&mut stack, &data.obs, &cfg)?],
        ModelKind::Maml => vec![train_maml(&mut stack, &data.ints, &cfg)?],
        ModelKind::ExpCausal => vec![train_expert(&mut stack, &data.obs, dag, ExpertMode::Causal, &cfg)?],
        ModelKind::ExpAnticausal => vec![train_expert(&mut stack, &data.obs, dag, ExpertMode::Anticausal, &cfg)?],
        ModelKind::ExpSkeleton => vec![train_expert(&mut stack, &data.obs, dag, ExpertMode::Skeleton, &cfg)?],
        ModelKind::LCausal => {
            let out = train_l_causal(&mut stack, &data.obs, &data.ints, &cfg, gf, Some(dag))?;
            shd = Some(shd_dag(&out.graph.dag, dag)?);
            gamma_history = out.gamma_history;
            out.traces
        }
        ModelKind::BoundZeroShot | ModelKind::BoundAdaptation => {
            return param(format!("{kind} is an oracle, not a trainable model"))
        }
    };
    if !stack.all_finite() {
        return Err(Error::Structural(format!("{kind} produced non-finite parameters")));
    }
    Ok(TrainedModel {
        stack,
        shd,
        traces,
        gamma_history,
    })
}

/// Average records field by field; optional fields over records that have them.
pub fn mean_records(recs: &[EvalRecord]) -> EvalRecord {
    let m = recs.len() as f64;
    let avg_opt = |f: &dyn Fn(&EvalRecord) -> Option<f64>| {
        let v: Vec<f64> = recs.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let n = recs.first().map_or(0, |r| r.per_node.len());
    EvalRecord {
        nll_mean: recs.iter().map(|r| r.nll_mean).sum::<f64>() / m,
        nll_intervention: recs.iter().map(|r| r.nll_intervention).sum::<f64>() / m,
        nll_root: avg_opt(&|r| r.nll_root),
        nll_parents: avg_opt(&|r| r.nll_parents),
        nll_remainder: avg_opt(&|r| r.nll_remainder),
        shd: recs.first().and_then(|r| r.shd),
        grad_norm_intervened: avg_opt(&|r| r.grad_norm_intervened),
        grad_norm_others: avg_opt(&|r| r.grad_norm_others),
        per_node: (0..n).map(|i| recs.iter().map(|r| r.per_node[i]).sum::<f64>() / m).collect(),
        per_dataset: recs.iter().flat_map(|r| r.per_dataset.iter().copied()).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SweepKind {
    Generalization,
    Adaptation,
}

#[derive(Debug, Clone)]
struct Job {
    graph: GraphSpec,
    n: usize,
    k: usize,
    seed: u64,
    model: ModelKind,
    train_samples: usize,
}

impl Job {
    fn meta(&self) -> RowMeta {
        RowMeta {
            graph_type: self.graph.to_string(),
            n: self.n,
            k: self.k,
            seed: self.seed,
            model: self.model,
            train_samples: self.train_samples,
            adapt_samples: None,
            adapt_method: None,
            step: None,
        }
    }

    fn tag(&self) -> String {
        format!(
            "{}_n{}_k{}_s{}_t{}_{}",
            self.graph, self.n, self.k, self.seed, self.train_samples, self.model
        )
    }
}

fn jobs(cfg: &ExperimentConfig, kind: SweepKind) -> Vec<Job> {
    let sizes = match kind {
        SweepKind::Generalization => cfg.train_sizes.clone(),
        SweepKind::Adaptation => vec![cfg.adapt_train_size],
    };
    let mut out = Vec::new();
    for &graph in &cfg.graphs {
        for &n in &cfg.n {
            for &k in &cfg.k {
                for &seed in &cfg.seeds {
                    for &train_samples in &sizes {
                        for &model in &cfg.models {
                            out.push(Job {
                                graph,
                                n,
                                k,
                                seed,
                                model,
                                train_samples,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

fn save_traces(cfg: &ExperimentConfig, job: &Job, model: &TrainedModel) -> Result<()> {
    if !cfg.write_traces {
        return Ok(());
    }
    let dir = cfg.output_dir.join("traces");
    fs::create_dir_all(&dir)?;
    write_loss_traces(&model.traces, fs::File::create(dir.join(format!("{}_loss.csv", job.tag())))?)?;
    if !model.gamma_history.is_empty() {
        fs::write(
            dir.join(format!("{}_gamma.json", job.tag())),
            serde_json::to_string(&model.gamma_history)?,
        )?;
    }
    Ok(())
}

fn generalization_job(cfg: &ExperimentConfig, job: &Job) -> Result<Vec<ResultRow>> {
    let problem = Problem::new(cfg, job.graph, job.n, job.k, job.seed)?;
    let meta = job.meta();
    let rec = match job.model {
        ModelKind::BoundZeroShot => evaluate_bounds(&problem.scm, &problem.tests)?.0,
        ModelKind::BoundAdaptation => evaluate_bounds(&problem.scm, &problem.tests)?.1,
        kind => {
            let data = problem.training_data(job.train_samples)?;
            let model = train_model(kind, problem.dag(), &data, problem.init_seed(job.train_samples), &cfg.train, &cfg.graph_fit)?;
            save_traces(cfg, job, &model)?;
            let mut rec = evaluate(&model.stack, problem.dag(), &problem.tests, cfg.train.exec)?;
            rec.shd = model.shd;
            rec
        }
    };
    Ok(meta.rows(&rec))
}

fn adaptation_job(cfg: &ExperimentConfig, job: &Job) -> Result<Vec<ResultRow>> {
    let problem = Problem::new(cfg, job.graph, job.n, job.k, job.seed)?;
    let steps = cfg.max_steps();
    let mut rows = Vec::new();
    if job.model.is_bound() {
        let (zs, ad) = evaluate_bounds(&problem.scm, &problem.tests)?;
        let rec = if job.model == ModelKind::BoundZeroShot { zs } else { ad };
        for &size in &cfg.adapt_sizes {
            for step in 0..=steps {
                let meta = RowMeta {
                    adapt_samples: Some(size),
                    step: Some(step),
                    ..job.meta()
                };
                rows.extend(meta.rows(&rec));
            }
        }
        return Ok(rows);
    }
    let data = problem.training_data(job.train_samples)?;
    let model = train_model(
        job.model,
        problem.dag(),
        &data,
        problem.init_seed(job.train_samples),
        &cfg.train,
        &cfg.graph_fit,
    )?;
    save_traces(cfg, job, &model)?;
    let exec = cfg.adapt.exec;
    for &size in &cfg.adapt_sizes {
        let adapt_sets = (0..problem.tests.len())
            .map(|t| problem.adaptation_data(t, size))
            .collect::<Result<Vec<_>>>()?;
        for &method in &cfg.adapt_methods {
            let acfg = AdaptConfig {
                method,
                steps,
                ..cfg.adapt.clone()
            };
            // per_step[s][t]
            let mut per_step: Vec<Vec<EvalRecord>> = vec![Vec::new(); steps + 1];
            for (t, d_adapt) in adapt_sets.iter().enumerate() {
                let target = problem.tests[t].regime.target().expect("interventional test set");
                let probe = parameter_space_probe(&model.stack, d_adapt, target, exec)?;
                let mut stack = model.stack.clone();
                let out = adapt(
                    &mut stack,
                    d_adapt,
                    &acfg,
                    Some(target),
                    Some(StepEval {
                        dag: problem.dag(),
                        tests: &problem.tests[t..t + 1],
                    }),
                )?;
                for (s, mut rec) in out.records.into_iter().enumerate() {
                    let (gi, go) = if s == 0 {
                        (probe.grad_norm_intervened, probe.grad_norm_others_mean)
                    } else {
                        let norms = &out.grad_norms[s];
                        let others = norms.iter().sum::<f64>() - norms[target];
                        (norms[target], others / (norms.len().max(2) - 1) as f64)
                    };
                    rec.grad_norm_intervened = Some(gi);
                    rec.grad_norm_others = Some(go);
                    rec.shd = model.shd;
                    per_step[s].push(rec);
                }
            }
            for (s, recs) in per_step.iter().enumerate() {
                let meta = RowMeta {
                    adapt_samples: Some(size),
                    adapt_method: Some(method),
                    step: Some(s),
                    ..job.meta()
                };
                rows.extend(meta.rows(&mean_records(recs)));
            }
        }
    }
    Ok(rows)
}

fn panic_message(e: Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| e.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

/// Run `f`, converting errors and panics into one error row.
fn isolated<F>(job: &Job, f: F) -> (Vec<ResultRow>, Option<String>)
where
    F: FnOnce() -> Result<Vec<ResultRow>>,
{
    let outcome = catch_unwind(AssertUnwindSafe(f));
    let msg = match outcome {
        Ok(Ok(rows)) => return (rows, None),
        Ok(Err(e)) => e.to_string(),
        Err(p) => panic_message(p),
    };
    (vec![job.meta().error_row()], Some(format!("{}: {msg}", job.tag())))
}

/// Rows of a sweep plus a message for each failed job.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub rows: Vec<ResultRow>,
    pub errors: Vec<String>,
}

fn run(cfg: &ExperimentConfig, kind: SweepKind) -> Result<SweepOutput> {
    cfg.validate()?;
    let jobs = jobs(cfg, kind);
    let exec = if cfg.jobs == 1 { Exec::Sequential } else { Exec::Parallel };
    let results = par::with_threads(cfg.jobs, || {
        par::map_range(exec, jobs.len(), |j| {
            let job = &jobs[j];
            isolated(job, || match kind {
                SweepKind::Generalization => generalization_job(cfg, job),
                SweepKind::Adaptation => adaptation_job(cfg, job),
            })
        })
    });
    let mut out = SweepOutput {
        rows: Vec::new(),
        errors: Vec::new(),
    };
    for (rows, err) in results {
        out.rows.extend(rows);
        out.errors.extend(err);
    }
    Ok(out)
}

/// Zero-shot evaluation on the fixed test suite for every
/// (graph, n, k, seed, train size, model); writes results into
/// `cfg.output_dir`.
pub fn run_generalization_sweep(cfg: &ExperimentConfig) -> Result<SweepOutput> {
    let out = run(cfg, SweepKind::Generalization)?;
    emit_results(&out.rows, &manifest("sweep-generalization", cfg, out.rows.len(), out.errors.clone()), &cfg.output_dir)?;
    Ok(out)
}

/// Train once at `adapt_train_size`, then adapt to each test intervention
/// from fresh samples of it, per adaptation size and method, recording every
/// step.
pub fn run_adaptation_sweep(cfg: &ExperimentConfig) -> Result<SweepOutput> {
    let out = run(cfg, SweepKind::Adaptation)?;
    emit_results(&out.rows, &manifest("sweep-adaptation", cfg, out.rows.len(), out.errors.clone()), &cfg.output_dir)?;
    Ok(out)
}

/// Validation score of one hyperparameter setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub model: ModelKind,
    pub train_samples: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Mean validation `nll_mean` over seeds and graphs; NaN if any run failed.
    pub nll_mean: f64,
}

/// Search `cfg.grid` per trainable model and training size, ranking by
/// `nll_mean` on validation interventions that are disjoint from the test
/// suite. Writes `grid.csv` and `best.json` into `cfg.output_dir`.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<Vec<GridEntry>> {
    cfg.validate()?;
    let mut settings = Vec::new();
    for &model in cfg.models.iter().filter(|m| !m.is_bound()) {
        for &train_samples in &cfg.train_sizes {
            for &lr in &cfg.grid.lrs {
                for &weight_decay in &cfg.grid.weight_decays {
                    settings.push((model, train_samples, lr, weight_decay));
                }
            }
        }
    }
    let exec = if cfg.jobs == 1 { Exec::Sequential } else { Exec::Parallel };
    let entries = par::with_threads(cfg.jobs, || {
        par::map_range(exec, settings.len(), |i| {
            let (model, train_samples, lr, weight_decay) = settings[i];
            let train = TrainConfig {
                lr,
                weight_decay,
                ..cfg.train.clone()
            };
            let mut scores = Vec::new();
            for &graph in &cfg.graphs {
                for &n in &cfg.n {
                    for &k in &cfg.k {
                        for &seed_value in &cfg.seeds {
                            let score = catch_unwind(AssertUnwindSafe(|| -> Result<f64> {
                                let problem = Problem::new(cfg, graph, n, k, seed_value)?;
                                let valid = problem.validation_suite(
                                    cfg.grid.validation_interventions,
                                    cfg.test_samples,
                                    cfg.test_mode,
                                )?;
                                let data = problem.training_data(train_samples)?;
                                let m = train_model(
                                    model,
                                    problem.dag(),
                                    &data,
                                    problem.init_seed(train_samples),
                                    &train,
                                    &cfg.graph_fit,
                                )?;
                                Ok(evaluate(&m.stack, problem.dag(), &valid, cfg.train.exec)?.nll_mean)
                            }));
                            scores.push(score.ok().and_then(|r| r.ok()).unwrap_or(f64::NAN));
                        }
                    }
                }
            }
            GridEntry {
                model,
                train_samples,
                lr,
                weight_decay,
                nll_mean: scores.iter().sum::<f64>() / scores.len() as f64,
            }
        })
    });
    fs::create_dir_all(&cfg.output_dir)?;
    let mut wtr = csv::Writer::from_path(cfg.output_dir.join("grid.csv"))?;
    for e in &entries {
        wtr.serialize(e)?;
    }
    wtr.flush()?;
    let best = best_settings(&entries);
    fs::write(cfg.output_dir.join("best.json"), serde_json::to_string_pretty(&best)?)?;
    fs::write(
        cfg.output_dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest("grid", cfg, entries.len(), Vec::new()))?,
    )?;
    Ok(entries)
}

/// Lowest finite validation NLL per (model, training size); earlier grid
/// entries win ties.
pub fn best_settings(entries: &[GridEntry]) -> Vec<GridEntry> {
    let mut best: Vec<GridEntry> = Vec::new();
    for e in entries.iter().filter(|e| e.nll_mean.is_finite()) {
        match best
            .iter_mut()
            .find(|b| b.model == e.model && b.train_samples == e.train_samples)
        {
            Some(b) if e.nll_mean < b.nll_mean => *b = e.clone(),
            Some(_) => {}
            None => best.push(e.clone()),
        }
    }
    best
}
