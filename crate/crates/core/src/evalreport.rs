//! Test-phase adaptation to new tasks, bound certification and the report
//! CSV files.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use thiserror::Error;

use crate::bounds::{BoundError, BoundReport, SingleBound};
use crate::envs::TaskDataset;
use crate::metatrain::{
    adam_step, bounded_ce_loss, bounded_ce_loss_var, single_term_var, zero_one_error, AdamState, TraceRow, TrainConfig,
    TrainError, TRACE_HEADER,
};
use crate::ndcore::{NdError, Tape, Tensor};
use crate::rng::{stream, tag, Rng};
use crate::stochnet::{draw_noise, forward, kl_factorized_gaussian, predict, sample_weights, NetError, StochasticNet};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Invalid(String),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Bound(#[from] BoundError),
}

/// Certified bound and held-out performance of one adapted test task.
#[derive(Debug, Clone, PartialEq)]
pub struct TestRow {
    pub task_index: usize,
    pub test_bound: f64,
    /// Zero-one empirical error on the bound split, as used in the bound.
    pub emp_error: f64,
    pub kl: f64,
    pub m: usize,
    pub test_loss: f64,
    pub test_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub mean: f64,
    pub halfwidth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    pub rows: Vec<TestRow>,
    pub bound: Interval,
    pub loss: Interval,
    pub error: Interval,
}

/// Mean and 95% normal-approximation half-width `1.96 s / √n`, with the
/// `n - 1` sample standard deviation. Values are summed in sorted order so the
/// result does not depend on input order.
pub fn confidence_interval(values: &[f64]) -> Result<Interval, EvalError> {
    if values.len() < 2 {
        return Err(EvalError::Invalid(format!(
            "a confidence interval needs >= 2 values, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::Invalid("confidence interval over non-finite values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = sorted.iter().map(|v| (v - mean) * (v - mean)).collect();
    dev.sort_by(f64::total_cmp);
    let var = dev.iter().sum::<f64>() / (n - 1.0);
    Ok(Interval {
        mean,
        halfwidth: 1.96 * (var / n).sqrt(),
    })
}

/// Mean log-variance of every layer.
pub fn layer_variance_profile(net: &StochasticNet) -> Vec<f64> {
    net.layers().iter().map(|l| l.log_var.mean()).collect()
}

fn minibatches(idx: &[usize], size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order = idx.to_vec();
    order.shuffle(rng);
    order.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

fn diverged(term: &str, epoch: usize) -> EvalError {
    EvalError::Train(TrainError::Diverged {
        term: term.to_string(),
        epoch: epoch.max(1),
    })
}

/// ERM refinement of a test-task prior on its prior split.
fn refine_prior(start: &StochasticNet, task: &TaskDataset, cfg: &TrainConfig, rng: &mut Rng) -> Result<StochasticNet, EvalError> {
    let mut prior = start.clone();
    let mut adam = AdamState::new(&prior.params());
    for epoch in 1..=cfg.prior_epochs {
        for rows in minibatches(&task.prior_idx, cfg.data_batch, rng) {
            let noise = draw_noise(prior.arch(), rng);
            let tape = Tape::new();
            let tp = prior.track(&tape);
            let (x, y) = task.rows(&rows);
            let loss = bounded_ce_loss_var(forward(&tp.sample_weights(&noise)?, tape.constant(x))?, &y, cfg.p_min)?;
            if !loss.item().is_finite() {
                return Err(diverged("test-task prior loss", epoch));
            }
            let mut grads = loss.backward()?;
            let g: Vec<Tensor> = tp
                .layers
                .iter()
                .flat_map(|l| [l.mu, l.log_var])
                .map(|v| grads.take(&v).unwrap_or_else(|| v.value().zeros_like()))
                .collect();
            adam_step(&mut prior.params_mut(), &g, &mut adam, cfg.lr)?;
        }
    }
    Ok(prior)
}

/// Adapts a posterior to a new task starting from the learned center and
/// certifies it.
///
/// The prior is `theta` itself, refined by ERM on the task's prior split
/// when it has one. The posterior minimizes the single-task bound matching
/// `cfg.objective` on the bound split for `cfg.epochs` epochs. The reported
/// bound uses the zero-one error on the bound split with `cfg.mc_eval_samples`
/// weight draws; loss and error come from the held-out split.
pub fn adapt_new_task(
    theta: &StochasticNet,
    task: &TaskDataset,
    cfg: &TrainConfig,
) -> Result<(StochasticNet, TestRow), EvalError> {
    if task.test_idx.is_empty() {
        return Err(EvalError::Invalid(format!("task {} has an empty test split", task.task_index)));
    }
    let m = task.bound_idx.len();
    if m < 2 {
        return Err(EvalError::Invalid(format!("task {} has fewer than 2 bound samples", task.task_index)));
    }
    let family = SingleBound::matching(cfg.objective);
    let mut rng = stream(cfg.seed, tag::ADAPT, task.task_index as u64);
    let prior = if task.prior_idx.is_empty() {
        theta.clone()
    } else {
        refine_prior(theta, task, cfg, &mut rng)?
    };

    let mut phi = prior.clone();
    let mut adam = AdamState::new(&phi.params());
    for epoch in 1..=cfg.epochs {
        for rows in minibatches(&task.bound_idx, cfg.data_batch, &mut rng) {
            let tape = Tape::new();
            let tp = phi.track(&tape);
            let kl = tp.kl_to(&prior.constant(&tape))?;
            let (x, y) = task.rows(&rows);
            let xv = tape.constant(x);
            let mut emp = None;
            for _ in 0..cfg.mc_train_samples {
                let noise = draw_noise(phi.arch(), &mut rng);
                let l = bounded_ce_loss_var(forward(&tp.sample_weights(&noise)?, xv)?, &y, cfg.p_min)?;
                emp = Some(match emp {
                    Some(acc) => l.add(acc)?,
                    None => l,
                });
            }
            let emp = emp.expect("mc_train_samples >= 1").scale(1.0 / cfg.mc_train_samples as f64);
            let objective = single_term_var(family, emp, kl, m, cfg.delta)?;
            if !objective.item().is_finite() {
                return Err(diverged("test-task objective", epoch));
            }
            let mut grads = objective.backward()?;
            let g: Vec<Tensor> = tp
                .layers
                .iter()
                .flat_map(|l| [l.mu, l.log_var])
                .map(|v| grads.take(&v).unwrap_or_else(|| v.value().zeros_like()))
                .collect();
            if !g.iter().all(Tensor::all_finite) {
                return Err(diverged("test-task gradient", epoch));
            }
            adam_step(&mut phi.params_mut(), &g, &mut adam, cfg.lr)?;
        }
    }

    let mut eval_rng = stream(cfg.seed, tag::ADAPT, (1 << 32) | task.task_index as u64);
    let (xb, yb) = task.rows(&task.bound_idx);
    let (xt, yt) = task.rows(&task.test_idx);
    let (mut emp, mut loss, mut err) = (0.0, 0.0, 0.0);
    let draws = cfg.mc_eval_samples;
    for _ in 0..draws {
        let w = sample_weights(&phi, &mut eval_rng);
        emp += zero_one_error(&predict(&w, &xb)?, &yb)?;
        let lp = predict(&w, &xt)?;
        loss += bounded_ce_loss(&lp, &yt, cfg.p_min)?;
        err += zero_one_error(&lp, &yt)?;
    }
    let emp = emp / draws as f64;
    let kl = kl_factorized_gaussian(&phi, &prior)?.max(0.0);
    let test_bound = family.evaluate(emp, kl, m, cfg.delta)?;
    let row = TestRow {
        task_index: task.task_index,
        test_bound,
        emp_error: emp,
        kl,
        m,
        test_loss: loss / draws as f64,
        test_error: err / draws as f64,
    };
    Ok((phi, row))
}

/// Adapts and certifies every test task; rows come back in task order.
pub fn evaluate_test_tasks(theta: &StochasticNet, tasks: &[TaskDataset], cfg: &TrainConfig) -> Result<TestResult, EvalError> {
    if tasks.len() < 2 {
        return Err(EvalError::Invalid(format!(
            "need >= 2 test tasks for a confidence interval, got {}",
            tasks.len()
        )));
    }
    let rows = tasks
        .par_iter()
        .map(|t| adapt_new_task(theta, t, cfg).map(|(_, row)| row))
        .collect::<Result<Vec<_>, _>>()?;
    let col = |f: fn(&TestRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    Ok(TestResult {
        bound: confidence_interval(&col(|r| r.test_bound))?,
        loss: confidence_interval(&col(|r| r.test_loss))?,
        error: confidence_interval(&col(|r| r.test_error))?,
        rows,
    })
}

/// Formats with 6 significant digits, trailing zeros removed.
pub fn fmt_sig(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-5..6).contains(&exp) {
        trim(&format!("{:.*}", (5 - exp).max(0) as usize, x))
    } else {
        format!("{}e{exp}", trim(mantissa))
    }
}

/// Final training-time bound of one run (one train-table row).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTableRow {
    pub objective: String,
    pub environment: String,
    pub prior_mode: String,
    pub report: BoundReport,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestTableRow {
    pub objective: String,
    pub environment: String,
    pub prior_mode: String,
    pub result: TestResult,
}

/// Final bounds of the seeded runs at one training-task count.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskCountPoint {
    pub n_tasks: usize,
    pub bounds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceSeries {
    pub prior_mode: String,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerProfile {
    pub run: String,
    pub mean_log_var: Vec<f64>,
}

/// Everything `emit_reports` writes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportSet {
    pub train: Vec<TrainTableRow>,
    pub test: Vec<TestTableRow>,
    pub task_count: Vec<TaskCountPoint>,
    pub convergence: Vec<ConvergenceSeries>,
    pub layer_profiles: Vec<LayerProfile>,
}

pub const TRAIN_TABLE: &str = "train_table.csv";
pub const TEST_TABLE: &str = "test_table.csv";
pub const TASK_COUNT_TREND: &str = "task_count_trend.csv";
pub const CONVERGENCE: &str = "convergence.csv";
pub const LAYER_PROFILE: &str = "layer_profile.csv";
pub const TEST_TASKS: &str = "test_tasks.csv";

pub const TRAIN_TABLE_HEADER: &str =
    "objective,environment,prior_mode,bound,task_complexity,meta_complexity,empirical_loss,error_pct";
pub const TEST_TABLE_HEADER: &str = "objective,environment,prior_mode,n_tasks,test_bound,test_bound_hw,test_loss,test_loss_hw,test_error_pct,test_error_pct_hw";
pub const TEST_TASKS_HEADER: &str = "task_index,m,test_bound,emp_error,kl,test_loss,test_error";

fn write_file(path: &Path, body: &str) -> Result<(), EvalError> {
    fs::write(path, body).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn key3<'a>(o: &'a str, e: &'a str, p: &'a str) -> (&'a str, &'a str, &'a str) {
    (o, e, p)
}

pub fn train_table_csv(rows: &[TrainTableRow]) -> String {
    let mut rows: Vec<&TrainTableRow> = rows.iter().collect();
    rows.sort_by(|a, b| {
        key3(&a.objective, &a.environment, &a.prior_mode).cmp(&key3(&b.objective, &b.environment, &b.prior_mode))
    });
    let mut out = format!("{TRAIN_TABLE_HEADER}\n");
    for r in rows {
        let p = &r.report;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.objective,
            r.environment,
            r.prior_mode,
            fmt_sig(p.bound),
            fmt_sig(p.task_complexity),
            fmt_sig(p.meta_complexity),
            fmt_sig(p.empirical_term),
            fmt_sig(100.0 * r.error)
        );
    }
    out
}

pub fn test_table_csv(rows: &[TestTableRow]) -> String {
    let mut rows: Vec<&TestTableRow> = rows.iter().collect();
    rows.sort_by(|a, b| {
        key3(&a.objective, &a.environment, &a.prior_mode).cmp(&key3(&b.objective, &b.environment, &b.prior_mode))
    });
    let mut out = format!("{TEST_TABLE_HEADER}\n");
    for r in rows {
        let t = &r.result;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.objective,
            r.environment,
            r.prior_mode,
            t.rows.len(),
            fmt_sig(t.bound.mean),
            fmt_sig(t.bound.halfwidth),
            fmt_sig(t.loss.mean),
            fmt_sig(t.loss.halfwidth),
            fmt_sig(100.0 * t.error.mean),
            fmt_sig(100.0 * t.error.halfwidth)
        );
    }
    out
}

pub fn test_tasks_csv(result: &TestResult) -> String {
    let mut out = format!("{TEST_TASKS_HEADER}\n");
    for r in &result.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.task_index,
            r.m,
            fmt_sig(r.test_bound),
            fmt_sig(r.emp_error),
            fmt_sig(r.kl),
            fmt_sig(r.test_loss),
            fmt_sig(r.test_error)
        );
    }
    out
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for r in trace {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            fmt_sig(r.objective),
            fmt_sig(r.bound),
            fmt_sig(r.empirical_term),
            fmt_sig(r.task_complexity),
            fmt_sig(r.meta_complexity),
            fmt_sig(r.train_error),
            r.phase
        );
    }
    out
}

fn task_count_csv(points: &[TaskCountPoint]) -> Result<String, EvalError> {
    let mut points: Vec<&TaskCountPoint> = points.iter().collect();
    points.sort_by_key(|p| p.n_tasks);
    let mut out = String::from("n_tasks,runs,bound_mean,bound_hw\n");
    for p in points {
        let ci = confidence_interval(&p.bounds)?;
        let _ = writeln!(
            out,
            "{},{},{},{}",
            p.n_tasks,
            p.bounds.len(),
            fmt_sig(ci.mean),
            fmt_sig(ci.halfwidth)
        );
    }
    Ok(out)
}

fn convergence_csv(series: &[ConvergenceSeries]) -> String {
    let mut series: Vec<&ConvergenceSeries> = series.iter().collect();
    series.sort_by(|a, b| a.prior_mode.cmp(&b.prior_mode));
    let mut out = format!("prior_mode,{TRACE_HEADER}\n");
    for s in series {
        for line in trace_csv(&s.trace).lines().skip(1) {
            let _ = writeln!(out, "{},{line}", s.prior_mode);
        }
    }
    out
}

fn layer_profile_csv(profiles: &[LayerProfile]) -> String {
    let mut profiles: Vec<&LayerProfile> = profiles.iter().collect();
    profiles.sort_by(|a, b| a.run.cmp(&b.run));
    let mut out = String::from("run,layer,mean_log_var\n");
    for p in profiles {
        for (j, v) in p.mean_log_var.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", p.run, j + 1, fmt_sig(*v));
        }
    }
    out
}

/// Writes the five report files into `out_dir` (created if missing) and
/// returns their paths. Rows are sorted by their key columns.
pub fn emit_reports(set: &ReportSet, out_dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(out_dir).map_err(|source| EvalError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let files = [
        (TRAIN_TABLE, train_table_csv(&set.train)),
        (TEST_TABLE, test_table_csv(&set.test)),
        (TASK_COUNT_TREND, task_count_csv(&set.task_count)?),
        (CONVERGENCE, convergence_csv(&set.convergence)),
        (LAYER_PROFILE, layer_profile_csv(&set.layer_profiles)),
    ];
    let mut paths = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = out_dir.join(name);
        write_file(&path, &body)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Writes a single CSV body to `path`.
pub fn write_csv(path: &Path, body: &str) -> Result<(), EvalError> {
    write_file(path, body)
}
