//! The `train`, `eval`, `bound` and `report` commands behind the CLI.
//!
//! Exit codes: 0 success, 2 configuration or input errors, 3 numerical
//! divergence, 1 anything else (I/O failures while writing outputs).

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::bounds::{BoundError, MetaBound, MetaInputs, SingleBound, TaskTerms};
use crate::config::{ConfigError, RunConfig};
use crate::envs::{EnvError, Environment, EnvironmentSpec};
use crate::evalreport::{
    emit_reports, evaluate_test_tasks, layer_variance_profile, test_table_csv, test_tasks_csv, trace_csv, write_csv,
    ConvergenceSeries, EvalError, LayerProfile, ReportSet, TaskCountPoint, TestTableRow, TrainTableRow, TEST_TABLE,
    TEST_TASKS,
};
use crate::metatrain::{arch_for, meta_train, meta_train_ddprior, TrainConfig, TrainError, TrainOutcome};
use crate::stochnet::{read_checkpoint, write_checkpoint, NetError, StochasticNet};

pub const SEED_ENV: &str = "PACMETA_SEED";
pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const CHECKPOINT: &str = "theta.pmck";
pub const TRACE: &str = "trace.csv";

#[derive(Debug, Error)]
pub enum CmdError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("cannot load checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: NetError },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn is_divergence(e: &TrainError) -> bool {
    matches!(e, TrainError::Diverged { .. })
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Usage(_) | Self::Checkpoint { .. } | Self::Bound(_) | Self::Env(_) => 2,
            Self::Train(e) | Self::Eval(EvalError::Train(e)) if is_divergence(e) => 3,
            Self::Train(TrainError::Config(_) | TrainError::Env(_)) => 2,
            Self::Eval(EvalError::Invalid(_)) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CmdError + '_ {
    move |source| CmdError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Splits `--key=value` arguments into pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, CmdError> {
    args.iter()
        .map(|a| {
            a.strip_prefix("--")
                .and_then(|kv| kv.split_once('='))
                .filter(|(k, _)| !k.is_empty())
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| CmdError::Usage(format!("expected an override of the form --key=value, got {a:?}")))
        })
        .collect()
}

/// Loads the config file and applies, in order, `PACMETA_SEED` (if set) and
/// the command-line overrides.
pub fn load_run_config(path: &Path, overrides: &[(String, String)], env_seed: Option<&str>) -> Result<RunConfig, CmdError> {
    let mut all = Vec::with_capacity(overrides.len() + 1);
    if let Some(seed) = env_seed {
        all.push(("seed".to_string(), seed.trim().to_string()));
    }
    all.extend(overrides.iter().cloned());
    Ok(RunConfig::load(path, &all)?)
}

fn create_dir(dir: &Path) -> Result<(), CmdError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, body: &str) -> Result<(), CmdError> {
    fs::write(path, body).map_err(io_err(path))
}

pub fn save_checkpoint(net: &StochasticNet, path: &Path) -> Result<(), CmdError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    write_checkpoint(net, &mut out).map_err(|e| match e {
        NetError::Io(source) => CmdError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => CmdError::Usage(other.to_string()),
    })?;
    out.flush().map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<StochasticNet, CmdError> {
    let file = File::open(path).map_err(|e| CmdError::Checkpoint {
        path: path.to_path_buf(),
        source: NetError::Io(e),
    })?;
    read_checkpoint(BufReader::new(file)).map_err(|source| CmdError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}

/// Paths written by `train`.
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub outcome: TrainOutcome,
}

fn run_training(spec: &EnvironmentSpec, cfg: &TrainConfig) -> Result<TrainOutcome, CmdError> {
    let env = Environment::build(spec)?;
    Ok(if spec.prior_fraction > 0.0 {
        meta_train_ddprior(&env.train_tasks, cfg)?
    } else {
        meta_train(&env.train_tasks, cfg)?
    })
}

/// Dumps the resolved config, trains (data-dependent when the prior fraction
/// is positive) and writes the checkpoint and trace.
pub fn cmd_train(cfg: &RunConfig, log: &mut dyn Write) -> Result<TrainArtifacts, CmdError> {
    let dir = cfg.run_dir();
    create_dir(&dir)?;
    let config = dir.join(RESOLVED_CONFIG);
    let dump = cfg.dump();
    write_text(&config, &dump)?;
    let _ = write!(log, "{dump}");
    let outcome = run_training(&cfg.env, &cfg.train)?;
    let checkpoint = dir.join(CHECKPOINT);
    save_checkpoint(&outcome.theta, &checkpoint)?;
    let trace = dir.join(TRACE);
    write_text(&trace, &trace_csv(&outcome.trace))?;
    let r = &outcome.final_eval.report;
    let _ = writeln!(
        log,
        "final bound={} empirical_term={} task_complexity={} meta_complexity={} error={}",
        r.bound, r.empirical_term, r.task_complexity, r.meta_complexity, outcome.final_eval.error
    );
    let _ = writeln!(log, "wrote {}", dir.display());
    Ok(TrainArtifacts {
        dir,
        config,
        checkpoint,
        trace,
        outcome,
    })
}

/// Adapts the checkpointed center to every test task and writes
/// `test_table.csv` and `test_tasks.csv` into the run directory.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, log: &mut dyn Write) -> Result<Vec<PathBuf>, CmdError> {
    if cfg.env.n_test_tasks < 2 {
        return Err(CmdError::Usage(format!(
            "env.n_test_tasks must be >= 2 for a confidence interval, got {}",
            cfg.env.n_test_tasks
        )));
    }
    let theta = load_checkpoint(checkpoint)?;
    let env = Environment::build(&cfg.env)?;
    let want = arch_for(&env.test_tasks, &cfg.train)?;
    if theta.arch() != &want {
        return Err(CmdError::Usage(format!(
            "checkpoint architecture {:?} does not match the configured {:?}",
            theta.arch().widths(),
            want.widths()
        )));
    }
    let result = evaluate_test_tasks(&theta, &env.test_tasks, &cfg.eval_train_config())?;
    let dir = cfg.run_dir();
    create_dir(&dir)?;
    let row = TestTableRow {
        objective: cfg.train.objective.name().to_string(),
        environment: cfg.env.kind.to_string(),
        prior_mode: cfg.prior_mode().to_string(),
        result,
    };
    let table = dir.join(TEST_TABLE);
    let tasks = dir.join(TEST_TASKS);
    write_csv(&table, &test_table_csv(std::slice::from_ref(&row)))?;
    write_csv(&tasks, &test_tasks_csv(&row.result))?;
    let r = &row.result;
    let _ = writeln!(
        log,
        "test bound={} ±{} loss={} ±{} error={} ±{}",
        r.bound.mean, r.bound.halfwidth, r.loss.mean, r.loss.halfwidth, r.error.mean, r.error.halfwidth
    );
    Ok(vec![table, tasks])
}

/// Inputs of the `bound` command. Per-task lists of length 1 are broadcast.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundArgs {
    pub which: String,
    pub single: bool,
    pub emp: Vec<f64>,
    pub kl_task: Vec<f64>,
    pub m: Vec<usize>,
    pub kl_hyper: f64,
    pub n: Option<usize>,
    pub delta: f64,
    pub lambda: f64,
    pub proof_form: bool,
}

fn broadcast<T: Clone>(name: &str, v: &[T], k: usize) -> Result<Vec<T>, CmdError> {
    match v.len() {
        0 => Err(CmdError::Usage(format!("--{name} needs at least one value"))),
        1 => Ok(vec![v[0].clone(); k]),
        len if len == k => Ok(v.to_vec()),
        len => Err(CmdError::Usage(format!("--{name} has {len} values, expected 1 or {k}"))),
    }
}

/// Evaluates one catalog bound and renders it as `key=value` lines.
pub fn cmd_bound(args: &BoundArgs) -> Result<String, CmdError> {
    let mut out = String::new();
    if args.single {
        let which = SingleBound::parse(&args.which, args.lambda)?;
        if args.emp.len() != 1 || args.kl_task.len() != 1 || args.m.len() != 1 {
            return Err(CmdError::Usage("single-task bounds take one --emp, --kl-task and --m".into()));
        }
        let bound = which.evaluate(args.emp[0], args.kl_task[0], args.m[0], args.delta)?;
        let _ = writeln!(out, "which={}", args.which);
        let _ = writeln!(out, "bound={bound}");
        let _ = writeln!(out, "empirical_term={}", args.emp[0]);
        let _ = writeln!(out, "complexity={}", bound - args.emp[0]);
        return Ok(out);
    }
    let which = match MetaBound::parse(&args.which, args.lambda)? {
        MetaBound::Lambda { lambda, .. } => MetaBound::Lambda {
            lambda,
            proof_form: args.proof_form,
        },
        other => other,
    };
    let listed = args.emp.len().max(args.kl_task.len()).max(args.m.len());
    let k = match args.n {
        Some(n) if listed == 1 => n,
        _ => listed,
    };
    let n = args.n.unwrap_or(k);
    if n != k {
        return Err(CmdError::Usage(format!("--n is {n} but {k} tasks were listed")));
    }
    let emp = broadcast("emp", &args.emp, k)?;
    let kl = broadcast("kl-task", &args.kl_task, k)?;
    let m = broadcast("m", &args.m, k)?;
    let tasks = (0..k)
        .map(|i| TaskTerms {
            emp_error: emp[i],
            kl_task: kl[i],
            m: m[i],
        })
        .collect();
    let inputs = MetaInputs {
        tasks,
        n,
        kl_hyper: args.kl_hyper,
        delta: args.delta,
    };
    let r = which.evaluate(&inputs)?;
    let _ = writeln!(out, "which={}", which.name());
    let _ = writeln!(out, "bound={}", r.bound);
    let _ = writeln!(out, "empirical_term={}", r.empirical_term);
    let _ = writeln!(out, "task_complexity={}", r.task_complexity);
    let _ = writeln!(out, "meta_complexity={}", r.meta_complexity);
    for (i, v) in r.per_task.iter().enumerate() {
        let _ = writeln!(out, "task.{i}={v}");
    }
    Ok(out)
}

/// Runs the experiment sweep and writes every report file.
///
/// Each objective is trained with a random prior and, when the prior
/// fraction is positive, with the data-dependent prior. Random-prior runs
/// then get `epochs + prior_epochs` meta epochs so both modes share one epoch
/// budget. The task-count sweep uses the first objective with a random prior
/// over `report.seeds` seeds.
pub fn cmd_report(cfg: &RunConfig, log: &mut dyn Write) -> Result<Vec<PathBuf>, CmdError> {
    let dir = cfg.run_dir();
    create_dir(&dir)?;
    write_text(&dir.join(RESOLVED_CONFIG), &cfg.dump())?;
    let with_dd = cfg.env.prior_fraction > 0.0;
    let random_spec = EnvironmentSpec {
        prior_fraction: 0.0,
        ..cfg.env.clone()
    };
    let mut modes: Vec<(&str, EnvironmentSpec, usize)> = vec![(
        "random",
        random_spec.clone(),
        cfg.train.epochs + if with_dd { cfg.train.prior_epochs } else { 0 },
    )];
    if with_dd {
        modes.push(("data_dependent", cfg.env.clone(), cfg.train.epochs));
    }
    let environment = cfg.env.kind.to_string();
    let mut set = ReportSet::default();
    for (oi, objective) in cfg.report.objectives.iter().enumerate() {
        for (mode, spec, epochs) in &modes {
            let train_cfg = TrainConfig {
                objective: *objective,
                epochs: *epochs,
                ..cfg.train.clone()
            };
            let _ = writeln!(log, "training {} / {mode}", objective.name());
            let out = run_training(spec, &train_cfg)?;
            let env = Environment::build(spec)?;
            let eval_cfg = TrainConfig {
                objective: *objective,
                ..cfg.eval_train_config()
            };
            let result = evaluate_test_tasks(&out.theta, &env.test_tasks, &eval_cfg)?;
            set.train.push(TrainTableRow {
                objective: objective.name().to_string(),
                environment: environment.clone(),
                prior_mode: mode.to_string(),
                report: out.final_eval.report.clone(),
                error: out.final_eval.error,
            });
            set.test.push(TestTableRow {
                objective: objective.name().to_string(),
                environment: environment.clone(),
                prior_mode: mode.to_string(),
                result,
            });
            set.layer_profiles.push(LayerProfile {
                run: format!("{}-{mode}", objective.name()),
                mean_log_var: layer_variance_profile(&out.theta),
            });
            if oi == 0 {
                set.convergence.push(ConvergenceSeries {
                    prior_mode: mode.to_string(),
                    trace: out.trace,
                });
            }
        }
    }
    let first = cfg.report.objectives[0];
    for &n_tasks in &cfg.report.task_counts {
        let mut bounds = Vec::with_capacity(cfg.report.seeds);
        for s in 0..cfg.report.seeds as u64 {
            let seed = cfg.env.seed.wrapping_add(s);
            let spec = EnvironmentSpec {
                n_train_tasks: n_tasks,
                seed,
                ..random_spec.clone()
            };
            let train_cfg = TrainConfig {
                objective: first,
                seed,
                ..cfg.train.clone()
            };
            let _ = writeln!(log, "task-count sweep n={n_tasks} seed={seed}");
            bounds.push(run_training(&spec, &train_cfg)?.final_eval.report.bound);
        }
        set.task_count.push(TaskCountPoint { n_tasks, bounds });
    }
    let paths = emit_reports(&set, &dir)?;
    let _ = writeln!(log, "wrote {}", dir.display());
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_args() -> BoundArgs {
        BoundArgs {
            which: "quad".into(),
            single: false,
            emp: vec![0.0],
            kl_task: vec![0.0],
            m: vec![4],
            kl_hyper: 0.0,
            n: Some(2),
            delta: 1.0,
            lambda: 1.0,
            proof_form: false,
        }
    }

    #[test]
    fn bound_output_is_key_value_and_matches_catalog() {
        let text = cmd_bound(&quad_args()).unwrap();
        let inputs = MetaInputs::new(
            vec![
                TaskTerms {
                    emp_error: 0.0,
                    kl_task: 0.0,
                    m: 4
                };
                2
            ],
            0.0,
            1.0,
        );
        let want = MetaBound::Quad.evaluate(&inputs).unwrap().bound;
        let mut bound = None;
        for line in text.lines() {
            let (k, v) = line.split_once('=').unwrap();
            assert!(!k.is_empty() && !k.contains(' '));
            if k == "bound" {
                bound = Some(v.parse::<f64>().unwrap());
            }
        }
        assert_eq!(bound, Some(want));
    }

    #[test]
    fn bound_errors_exit_2() {
        let unknown = cmd_bound(&BoundArgs {
            which: "tightest".into(),
            ..quad_args()
        })
        .unwrap_err();
        assert_eq!(unknown.exit_code(), 2);
        assert!(unknown.to_string().contains("varia"), "{unknown}");
        let bad_emp = cmd_bound(&BoundArgs {
            emp: vec![1.5],
            ..quad_args()
        })
        .unwrap_err();
        assert_eq!(bad_emp.exit_code(), 2);
        let ragged = cmd_bound(&BoundArgs {
            emp: vec![0.1, 0.2, 0.3],
            n: None,
            m: vec![10, 10],
            ..quad_args()
        })
        .unwrap_err();
        assert_eq!(ragged.exit_code(), 2);
    }

    #[test]
    fn single_task_bound_command() {
        let text = cmd_bound(&BoundArgs {
            which: "mcallester".into(),
            single: true,
            emp: vec![0.1],
            kl_task: vec![2.0],
            m: vec![100],
            n: None,
            ..quad_args()
        })
        .unwrap();
        let want = SingleBound::McAllester.evaluate(0.1, 2.0, 100, 1.0).unwrap();
        assert!(text.contains(&format!("bound={want}\n")));
    }

    #[test]
    fn overrides_parse() {
        let ok = parse_overrides(&["--objective=varia".into(), "--train.hidden=8,8".into()]).unwrap();
        assert_eq!(ok[1], ("train.hidden".to_string(), "8,8".to_string()));
        assert_eq!(parse_overrides(&["objective=varia".into()]).unwrap_err().exit_code(), 2);
        assert_eq!(parse_overrides(&["--objective".into()]).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn divergence_maps_to_exit_3() {
        let e = CmdError::Train(TrainError::Diverged {
            term: "hyper KL".into(),
            epoch: 1,
        });
        assert_eq!(e.exit_code(), 3);
        assert_eq!(CmdError::Train(TrainError::Config("x".into())).exit_code(), 2);
    }
}
