use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use modcausal::adaptation::{adapt, write_adaptation_trace, AdaptConfig, AdaptMethod, StepEval};
use modcausal::experiment::{
    best_settings, run_adaptation_sweep, run_generalization_sweep, run_grid, sample_regime, train_model,
    ExperimentConfig, GraphSpec, ModelKind, Problem, TrainData,
};
use modcausal::graph::Dag;
use modcausal::metrics::evaluate;
use modcausal::nn::StackCheckpoint;
use modcausal::scm::{read_csv, write_csv, GroundTruthScm, InterventionMode};
use modcausal::seed;

type CliResult<T = ()> = Result<T, Box<dyn std::error::Error>>;

/// Modular causal models under interventional shift: data generation,
/// training, evaluation, adaptation and seeded sweeps.
#[derive(Parser, Debug)]
#[command(name = "modcausal", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Overrides applied on top of the defaults and `--config`, in that order.
#[derive(Args, Debug, Default)]
struct Common {
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, value_delimiter = ',')]
    graphs: Option<Vec<GraphSpec>>,
    #[arg(long, global = true, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long, global = true, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long, global = true, value_delimiter = ',')]
    train_sizes: Option<Vec<usize>>,
    #[arg(long, global = true)]
    adapt_train_size: Option<usize>,
    #[arg(long, global = true, value_delimiter = ',')]
    adapt_sizes: Option<Vec<usize>>,
    #[arg(long, global = true, value_delimiter = ',')]
    adapt_steps: Option<Vec<usize>>,
    #[arg(long, global = true, value_delimiter = ',')]
    adapt_methods: Option<Vec<AdaptMethod>>,
    #[arg(long, global = true, value_delimiter = ',')]
    models: Option<Vec<ModelKind>>,
    /// Per-run seeds, e.g. `0,1,2`.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    test_interventions: Option<usize>,
    #[arg(long, global = true)]
    test_samples: Option<usize>,
    /// `fixed` or `uniform`.
    #[arg(long, global = true, value_parser = parse_mode)]
    test_mode: Option<InterventionMode>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    weight_decay: Option<f64>,
    #[arg(long, global = true)]
    iterations: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    adapt_lr: Option<f64>,
    /// Regularized-adaptation temperature; accepts `inf`.
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// Structure-learning rounds for l_causal.
    #[arg(long, global = true)]
    rounds: Option<usize>,
    #[arg(long, global = true)]
    write_traces: bool,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a graph (edge list, or adjacency JSON for a `.json` path).
    GenGraph,
    /// Generate a ground-truth SCM, training data and the test suite into a directory.
    GenData,
    /// Train one model on a `gen-data` directory and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: ModelKind,
    },
    /// Zero-shot evaluation of a checkpoint on the directory's test suite.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Adapt a checkpoint to fresh samples of one test intervention and write the per-step trace.
    Adapt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        test_index: usize,
        #[arg(long)]
        method: Option<AdaptMethod>,
    },
    /// Zero-shot evaluation over the config grid; writes results.csv and manifest.json to `--out`.
    SweepGeneralization,
    /// Per-step adaptation results over the config grid.
    SweepAdaptation,
    /// Hyperparameter search on validation interventions; reports the best setting per model.
    Grid,
}

fn parse_mode(s: &str) -> Result<InterventionMode, String> {
    match s {
        "fixed" => Ok(InterventionMode::Fixed),
        "uniform" => Ok(InterventionMode::Uniform),
        _ => Err(format!("unknown intervention mode `{s}`")),
    }
}

fn resolve(c: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    macro_rules! set {
        ($($src:ident => $($dst:ident).+),+ $(,)?) => {
            $(if let Some(v) = &c.$src { cfg.$($dst).+ = v.clone(); })+
        };
    }
    set!(
        seed => master_seed,
        jobs => jobs,
        graphs => graphs,
        n => n,
        k => k,
        train_sizes => train_sizes,
        adapt_train_size => adapt_train_size,
        adapt_sizes => adapt_sizes,
        adapt_steps => adapt_steps,
        adapt_methods => adapt_methods,
        models => models,
        seeds => seeds,
        test_interventions => test_interventions,
        test_samples => test_samples,
        test_mode => test_mode,
        lr => train.lr,
        weight_decay => train.weight_decay,
        iterations => train.iterations,
        adapt_lr => adapt.lr,
        temperature => adapt.temperature,
        rounds => graph_fit.rounds,
    );
    if let Some(b) = c.batch_size {
        cfg.train.batch_size = Some(b);
    }
    cfg.write_traces |= c.write_traces;
    cfg.validate()?;
    Ok(cfg)
}

fn first_problem(cfg: &ExperimentConfig) -> CliResult<Problem> {
    Ok(Problem::new(cfg, cfg.graphs[0], cfg.n[0], cfg.k[0], cfg.seeds[0])?)
}

/// Write to `path`, or stdout when absent.
fn emit(path: Option<&Path>, text: &str) -> CliResult {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
        }
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Contents of a `gen-data` directory.
struct DataDir {
    scm: GroundTruthScm,
    train: TrainData,
    tests: Vec<modcausal::scm::Dataset>,
    init_seed: u64,
}

impl DataDir {
    fn load(dir: &Path) -> CliResult<Self> {
        let scm = GroundTruthScm::from_json(&fs::read_to_string(dir.join("scm.json"))?)?;
        let train = TrainData::from_datasets(read_csv(fs::File::open(dir.join("train.csv"))?, scm.k)?)?;
        let tests = read_csv(fs::File::open(dir.join("test.csv"))?, scm.k)?;
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("problem.json"))?)?;
        let init_seed = meta["init_seed"]
            .as_u64()
            .ok_or("problem.json lacks init_seed")?;
        Ok(Self {
            scm,
            train,
            tests,
            init_seed,
        })
    }

    fn dag(&self) -> &Dag {
        &self.scm.dag
    }
}

fn load_checkpoint(path: &Path) -> CliResult<StackCheckpoint> {
    Ok(StackCheckpoint::from_json(&fs::read_to_string(path)?)?)
}

fn run(cli: Cli) -> CliResult {
    let cfg = resolve(&cli.common)?;
    let out = cli.common.out.as_deref();
    match cli.cmd {
        Cmd::GenGraph => {
            let problem = first_problem(&cfg)?;
            let text = if out.is_some_and(|p| p.extension().is_some_and(|e| e == "json")) {
                serde_json::to_string(problem.dag())?
            } else {
                problem.dag().to_edge_list()
            };
            emit(out, &text)?;
        }
        Cmd::GenData => {
            let problem = first_problem(&cfg)?;
            let total = cfg.train_sizes[0];
            let data = problem.training_data(total)?;
            let dir = out.unwrap_or(Path::new("data"));
            fs::create_dir_all(dir)?;
            fs::write(dir.join("graph.txt"), problem.dag().to_edge_list())?;
            fs::write(dir.join("scm.json"), problem.scm.to_json()?)?;
            write_csv(&data.datasets(), fs::File::create(dir.join("train.csv"))?)?;
            write_csv(&problem.tests, fs::File::create(dir.join("test.csv"))?)?;
            let meta = serde_json::json!({
                "graph": problem.graph.to_string(),
                "n": cfg.n[0],
                "k": cfg.k[0],
                "seed": problem.seed,
                "master_seed": cfg.master_seed,
                "train_samples": total,
                "init_seed": problem.init_seed(total),
            });
            fs::write(dir.join("problem.json"), serde_json::to_string_pretty(&meta)?)?;
            eprintln!(
                "wrote {} training and {} test datasets to {}",
                data.ints.len() + 1,
                problem.tests.len(),
                dir.display()
            );
        }
        Cmd::Train { data, model } => {
            let d = DataDir::load(&data)?;
            let trained = train_model(model, d.dag(), &d.train, d.init_seed, &cfg.train, &cfg.graph_fit)?;
            let ckpt = StackCheckpoint::new(&trained.stack, Some(cfg.train.optimizer()));
            let path = out.map(Path::to_path_buf).unwrap_or_else(|| data.join(format!("{model}.json")));
            emit(Some(&path), &ckpt.to_json()?)?;
            if let Some(shd) = trained.shd {
                eprintln!("shd {shd}");
            }
            eprintln!("wrote {}", path.display());
        }
        Cmd::Eval { data, checkpoint } => {
            let d = DataDir::load(&data)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let rec = evaluate(&ckpt.stack, d.dag(), &d.tests, cfg.train.exec)?;
            emit(out, &format!("{}\n", serde_json::to_string_pretty(&rec)?))?;
        }
        Cmd::Adapt {
            data,
            checkpoint,
            test_index,
            method,
        } => {
            let d = DataDir::load(&data)?;
            let test = d
                .tests
                .get(test_index)
                .ok_or_else(|| format!("test index {test_index} out of range"))?;
            let size = cfg.adapt_sizes[0];
            let mut rng = seed::stream(
                cfg.master_seed,
                &[seed::label("adapt"), test_index as u64, size as u64],
            );
            let d_adapt = sample_regime(&d.scm, &test.regime, size, &mut rng)?;
            let mut stack = load_checkpoint(&checkpoint)?.stack;
            let acfg = AdaptConfig {
                method: method.unwrap_or(cfg.adapt.method),
                steps: cfg.max_steps(),
                ..cfg.adapt.clone()
            };
            let result = adapt(
                &mut stack,
                &d_adapt,
                &acfg,
                test.regime.target(),
                Some(StepEval {
                    dag: d.dag(),
                    tests: std::slice::from_ref(test),
                }),
            )?;
            let mut buf = Vec::new();
            write_adaptation_trace(&result, &mut buf)?;
            emit(out, std::str::from_utf8(&buf)?)?;
        }
        Cmd::SweepGeneralization | Cmd::SweepAdaptation => {
            let mut cfg = cfg;
            if let Some(o) = out {
                cfg.output_dir = o.to_path_buf();
            }
            let result = if matches!(cli.cmd, Cmd::SweepGeneralization) {
                run_generalization_sweep(&cfg)?
            } else {
                run_adaptation_sweep(&cfg)?
            };
            for e in &result.errors {
                eprintln!("job failed: {e}");
            }
            eprintln!("wrote {} rows to {}", result.rows.len(), cfg.output_dir.display());
        }
        Cmd::Grid => {
            let mut cfg = cfg;
            if let Some(o) = out {
                cfg.output_dir = o.to_path_buf();
            }
            let entries = run_grid(&cfg)?;
            for b in best_settings(&entries) {
                println!(
                    "{} train={} lr={} wd={} nll_mean={:.4}",
                    b.model, b.train_samples, b.lr, b.weight_decay, b.nll_mean
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
