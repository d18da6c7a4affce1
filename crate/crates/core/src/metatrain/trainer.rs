//! The training loops.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::loss::{bounded_ce_loss, bounded_ce_loss_var, zero_one_error};
use super::objective::{env_term_var, task_term_var};
use super::{adam_step, AdamState, Phase, TraceRow, TrainConfig, TrainError};
use crate::bounds::{BoundReport, MetaInputs, TaskTerms};
use crate::envs::TaskDataset;
use crate::ndcore::{Gradients, Tape, Tensor};
use crate::rng::{stream, tag, Rng};
use crate::stochnet::{
    draw_center_noise, draw_noise, expected_kl_under_center_noise, forward, kl_hyper, predict, sample_weights, Arch,
    HyperConfig, StochasticNet, TrackedNet,
};

/// Loss used for the empirical term of an evaluated bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmpLoss {
    BoundedCe,
    ZeroOne,
}

/// A bound evaluated on every task's bound split.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundEval {
    pub report: BoundReport,
    pub inputs: MetaInputs,
    /// Mean bounded cross-entropy and zero-one error over tasks.
    pub ce_loss: f64,
    pub error: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub theta: StochasticNet,
    pub posteriors: Vec<StochasticNet>,
    pub trace: Vec<TraceRow>,
    pub final_eval: BoundEval,
}

/// Result of one meta-iteration: the objective and the realized terms it was
/// assembled from (KLs against the perturbed center actually drawn).
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub objective: f64,
    pub inputs: MetaInputs,
}

struct Posterior {
    net: StochasticNet,
    adam: AdamState,
}

struct TaskGrad {
    term: f64,
    emp: f64,
    kl: f64,
    grad_theta: Vec<Tensor>,
    grad_phi: Vec<Tensor>,
}

fn new_adam(net: &StochasticNet) -> AdamState {
    AdamState::new(&net.params())
}

fn collect_grads(grads: &mut Gradients, net: &TrackedNet<'_>) -> Vec<Tensor> {
    net.layers
        .iter()
        .flat_map(|l| [l.mu, l.log_var])
        .map(|v| {
            grads
                .take(&v)
                .unwrap_or_else(|| Tensor::zeros(&v.shape()))
        })
        .collect()
}

fn all_finite(ts: &[Tensor]) -> bool {
    ts.iter().all(Tensor::all_finite)
}

pub struct MetaTrainer<'a> {
    cfg: &'a TrainConfig,
    tasks: &'a [TaskDataset],
    hyper: HyperConfig,
    theta: StochasticNet,
    theta_adam: AdamState,
    posteriors: Vec<Option<Posterior>>,
    rng: Rng,
    epoch: usize,
    trace: Vec<TraceRow>,
}

impl<'a> MetaTrainer<'a> {
    pub fn new(cfg: &'a TrainConfig, tasks: &'a [TaskDataset], theta: StochasticNet) -> Result<Self, TrainError> {
        cfg.validate()?;
        if tasks.len() < 2 {
            return Err(TrainError::Config(format!("need >= 2 training tasks, got {}", tasks.len())));
        }
        for t in tasks {
            if t.x.cols() != theta.arch().input() || t.n_classes != theta.arch().output() {
                return Err(TrainError::Config(format!(
                    "task {} has {} features / {} classes but the network is {:?}",
                    t.task_index,
                    t.x.cols(),
                    t.n_classes,
                    theta.arch().widths()
                )));
            }
            if t.bound_idx.len() < 2 {
                return Err(TrainError::Config(format!("task {} has fewer than 2 bound samples", t.task_index)));
            }
        }
        let hyper = HyperConfig::new(cfg.kappa_p, cfg.kappa_q, theta.n_params())?;
        Ok(Self {
            cfg,
            tasks,
            hyper,
            theta_adam: new_adam(&theta),
            theta,
            posteriors: tasks.iter().map(|_| None).collect(),
            rng: stream(cfg.seed, tag::TRAIN, 0),
            epoch: 0,
            trace: Vec::new(),
        })
    }

    pub fn theta(&self) -> &StochasticNet {
        &self.theta
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// Posterior of task `i`, or the current center if it has not been
    /// visited yet.
    pub fn posterior(&self, i: usize) -> &StochasticNet {
        self.posteriors[i].as_ref().map_or(&self.theta, |p| &p.net)
    }

    fn diverged(&self, term: impl Into<String>) -> TrainError {
        TrainError::Diverged {
            term: term.into(),
            epoch: self.epoch.max(1),
        }
    }

    /// One meta-iteration on the given tasks and per-task row indices.
    pub fn step(&mut self, meta_batch: &[usize], batches: &[Vec<usize>]) -> Result<StepOutput, TrainError> {
        if meta_batch.is_empty() || meta_batch.len() != batches.len() {
            return Err(TrainError::Config("meta-batch and data batches must be non-empty and aligned".into()));
        }
        for &i in meta_batch {
            if self.posteriors[i].is_none() {
                let net = self.theta.clone();
                self.posteriors[i] = Some(Posterior {
                    adam: new_adam(&net),
                    net,
                });
            }
        }
        let arch = self.theta.arch().clone();
        let shift = draw_center_noise(&arch, self.cfg.kappa_q, &mut self.rng)?;
        let noises: Vec<Vec<Vec<Tensor>>> = meta_batch
            .iter()
            .map(|_| {
                (0..self.cfg.mc_train_samples)
                    .map(|_| draw_noise(&arch, &mut self.rng))
                    .collect()
            })
            .collect();

        let n = self.tasks.len();
        let cfg = self.cfg;
        let theta = &self.theta;
        let hyper = &self.hyper;
        let posteriors = &self.posteriors;
        let tasks = self.tasks;
        let shift_ref = &shift;
        let results: Vec<Result<TaskGrad, TrainError>> = meta_batch
            .par_iter()
            .zip(batches.par_iter())
            .zip(noises.par_iter())
            .map(|((&i, rows), noise)| {
                let phi = &posteriors[i].as_ref().expect("initialized above").net;
                let (x, y) = tasks[i].rows(rows);
                task_gradient(cfg, hyper, theta, phi, shift_ref, &x, &y, noise, tasks[i].bound_idx.len(), n)
            })
            .collect();

        let k = meta_batch.len() as f64;
        let mut grad_theta: Vec<Tensor> = self.theta.params().iter().map(|t| t.zeros_like()).collect();
        let mut task_terms = Vec::with_capacity(meta_batch.len());
        let mut phi_grads = Vec::with_capacity(meta_batch.len());
        let mut term_sum = 0.0;
        for (&i, r) in meta_batch.iter().zip(results) {
            let g = r?;
            if !g.emp.is_finite() {
                return Err(self.diverged(format!("empirical loss of task {i}")));
            }
            if !g.kl.is_finite() {
                return Err(self.diverged(format!("KL divergence of task {i}")));
            }
            if !g.term.is_finite() {
                return Err(self.diverged(format!("task complexity of task {i}")));
            }
            if !all_finite(&g.grad_theta) || !all_finite(&g.grad_phi) {
                return Err(self.diverged(format!("gradient of task {i}")));
            }
            term_sum += g.term;
            for (acc, gt) in grad_theta.iter_mut().zip(&g.grad_theta) {
                acc.add_in_place(gt)?;
            }
            task_terms.push(TaskTerms {
                emp_error: g.emp,
                kl_task: g.kl,
                m: self.tasks[i].bound_idx.len(),
            });
            phi_grads.push(g.grad_phi.into_iter().map(|t| t.scale(1.0 / k)).collect::<Vec<_>>());
        }

        let tape = Tape::new();
        let tt = self.theta.track(&tape);
        let kl_h = tt.kl_hyper(&self.hyper, cfg.hyper_kl)?;
        if !kl_h.item().is_finite() {
            return Err(self.diverged("hyper KL"));
        }
        let env = env_term_var(kl_h, n, cfg.delta);
        if !env.item().is_finite() {
            return Err(self.diverged("environment complexity"));
        }
        let objective = term_sum / k + env.item();
        let mut env_grads = env.backward()?;
        let env_grad = collect_grads(&mut env_grads, &tt);
        for (acc, ge) in grad_theta.iter_mut().zip(&env_grad) {
            *acc = acc.scale(1.0 / k);
            acc.add_in_place(ge)?;
        }
        if !all_finite(&grad_theta) {
            return Err(self.diverged("gradient of the hyper-posterior center"));
        }

        adam_step(&mut self.theta.params_mut(), &grad_theta, &mut self.theta_adam, cfg.lr)?;
        for (&i, g) in meta_batch.iter().zip(&phi_grads) {
            let p = self.posteriors[i].as_mut().expect("initialized above");
            adam_step(&mut p.net.params_mut(), g, &mut p.adam, cfg.lr)?;
        }

        Ok(StepOutput {
            objective,
            inputs: MetaInputs {
                tasks: task_terms,
                n,
                kl_hyper: kl_h.item(),
                delta: cfg.delta,
            },
        })
    }

    /// Meta-training epochs on the bound splits.
    pub fn run_meta_epochs(&mut self, epochs: usize) -> Result<(), TrainError> {
        let n = self.tasks.len();
        let mb = self.cfg.meta_batch_tasks.min(n);
        let chunks = n.div_ceil(mb);
        let max_m = self.tasks.iter().map(|t| t.bound_idx.len()).max().unwrap_or(0);
        let per_task_iters = max_m.div_ceil(self.cfg.data_batch).max(1);
        for _ in 0..epochs {
            self.epoch += 1;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut self.rng);
            let mut perms: Vec<Vec<usize>> = self.tasks.iter().map(|t| t.bound_idx.clone()).collect();
            for p in &mut perms {
                p.shuffle(&mut self.rng);
            }
            let mut cursors = vec![0usize; n];
            let mut obj_sum = 0.0;
            let mut iters = 0usize;
            for _ in 0..per_task_iters {
                for c in 0..chunks {
                    let batch_tasks = &order[c * mb..((c + 1) * mb).min(n)];
                    let batches: Vec<Vec<usize>> = batch_tasks
                        .iter()
                        .map(|&t| take_wrapping(&perms[t], &mut cursors[t], self.cfg.data_batch))
                        .collect();
                    obj_sum += self.step(batch_tasks, &batches)?.objective;
                    iters += 1;
                }
            }
            self.record_epoch(Phase::Meta, obj_sum / iters as f64)?;
        }
        Ok(())
    }

    /// ERM epochs for the center on the pooled prior splits.
    pub fn run_prior_epochs(&mut self, epochs: usize) -> Result<(), TrainError> {
        if let Some(t) = self.tasks.iter().find(|t| t.prior_idx.is_empty()) {
            return Err(TrainError::Config(format!(
                "task {} has an empty prior split; set a positive prior fraction",
                t.task_index
            )));
        }
        let n = self.tasks.len();
        let max_r = self.tasks.iter().map(|t| t.prior_idx.len()).max().unwrap_or(0);
        let iters = max_r.div_ceil(self.cfg.data_batch).max(1);
        for _ in 0..epochs {
            self.epoch += 1;
            let mut perms: Vec<Vec<usize>> = self.tasks.iter().map(|t| t.prior_idx.clone()).collect();
            for p in &mut perms {
                p.shuffle(&mut self.rng);
            }
            let mut cursors = vec![0usize; n];
            let mut loss_sum = 0.0;
            for _ in 0..iters {
                let noise = draw_noise(self.theta.arch(), &mut self.rng);
                let tape = Tape::new();
                let tt = self.theta.track(&tape);
                let w = tt.sample_weights(&noise)?;
                let mut total = None;
                for (t, task) in self.tasks.iter().enumerate() {
                    let rows = take_wrapping(&perms[t], &mut cursors[t], self.cfg.data_batch);
                    let (x, y) = task.rows(&rows);
                    let lp = forward(&w, tape.constant(x))?;
                    let l = bounded_ce_loss_var(lp, &y, self.cfg.p_min)?;
                    total = Some(match total {
                        Some(acc) => l.add(acc)?,
                        None => l,
                    });
                }
                let loss = total.expect("at least two tasks").scale(1.0 / n as f64);
                if !loss.item().is_finite() {
                    return Err(self.diverged("ERM prior loss"));
                }
                loss_sum += loss.item();
                let mut grads = loss.backward()?;
                let g = collect_grads(&mut grads, &tt);
                if !all_finite(&g) {
                    return Err(self.diverged("ERM prior gradient"));
                }
                adam_step(&mut self.theta.params_mut(), &g, &mut self.theta_adam, self.cfg.lr)?;
            }
            self.record_epoch(Phase::Prior, loss_sum / iters as f64)?;
        }
        // the meta phase starts from fresh optimizer state
        self.theta_adam = new_adam(&self.theta);
        Ok(())
    }

    fn record_epoch(&mut self, phase: Phase, objective: f64) -> Result<(), TrainError> {
        let eval = self.evaluate(phase, self.cfg.trace_mc_samples, self.epoch as u64, EmpLoss::BoundedCe)?;
        self.trace.push(TraceRow {
            epoch: self.epoch,
            phase,
            objective,
            bound: eval.report.bound,
            empirical_term: eval.report.empirical_term,
            task_complexity: eval.report.task_complexity,
            meta_complexity: eval.report.meta_complexity,
            train_error: eval.error,
        });
        Ok(())
    }

    /// Bound of the current state. In the prior phase every task's posterior
    /// is the center itself.
    pub fn evaluate(&self, phase: Phase, samples: usize, key: u64, loss: EmpLoss) -> Result<BoundEval, TrainError> {
        let posteriors: Vec<&StochasticNet> = (0..self.tasks.len())
            .map(|i| match phase {
                Phase::Prior => &self.theta,
                Phase::Meta => self.posterior(i),
            })
            .collect();
        evaluate_bound(&self.theta, &posteriors, self.tasks, self.cfg, loss, samples, key)
    }

    pub fn finish(self) -> Result<TrainOutcome, TrainError> {
        let phase = if self.posteriors.iter().any(Option::is_some) {
            Phase::Meta
        } else {
            Phase::Prior
        };
        let final_eval = self.evaluate(phase, self.cfg.mc_eval_samples, u64::from(u32::MAX), EmpLoss::BoundedCe)?;
        let posteriors = (0..self.tasks.len()).map(|i| self.posterior(i).clone()).collect();
        Ok(TrainOutcome {
            theta: self.theta,
            posteriors,
            trace: self.trace,
            final_eval,
        })
    }
}

fn take_wrapping(perm: &[usize], cursor: &mut usize, size: usize) -> Vec<usize> {
    let size = size.min(perm.len());
    let out = (0..size).map(|k| perm[(*cursor + k) % perm.len()]).collect();
    *cursor = (*cursor + size) % perm.len();
    out
}

#[allow(clippy::too_many_arguments)]
fn task_gradient(
    cfg: &TrainConfig,
    hyper: &HyperConfig,
    theta: &StochasticNet,
    phi: &StochasticNet,
    shift: &[Tensor],
    x: &Tensor,
    y: &[usize],
    noise: &[Vec<Tensor>],
    m: usize,
    n: usize,
) -> Result<TaskGrad, TrainError> {
    let tape = Tape::new();
    let tt = theta.track(&tape);
    let tp = phi.track(&tape);
    let prior = tt.shifted(shift)?;
    let kl = tp.kl_to(&prior)?;
    let kl_h = tt.kl_hyper(hyper, cfg.hyper_kl)?;
    let xv = tape.constant(x.clone());
    let mut emp = None;
    for eps in noise {
        let w = tp.sample_weights(eps)?;
        let l = bounded_ce_loss_var(forward(&w, xv)?, y, cfg.p_min)?;
        emp = Some(match emp {
            Some(acc) => l.add(acc)?,
            None => l,
        });
    }
    let emp = emp.expect("mc_train_samples >= 1").scale(1.0 / noise.len() as f64);
    let term = task_term_var(cfg.objective, emp, kl, kl_h, m, n, cfg.delta)?;
    let mut grads = term.backward()?;
    Ok(TaskGrad {
        term: term.item(),
        emp: emp.item(),
        kl: kl.item(),
        grad_theta: collect_grads(&mut grads, &tt),
        grad_phi: collect_grads(&mut grads, &tp),
    })
}

/// Evaluates the configured bound family on every task's bound split, with
/// `samples` weight draws per task and the expected task KL in closed form.
/// `key` selects the evaluation random stream.
pub fn evaluate_bound(
    theta: &StochasticNet,
    posteriors: &[&StochasticNet],
    tasks: &[TaskDataset],
    cfg: &TrainConfig,
    loss: EmpLoss,
    samples: usize,
    key: u64,
) -> Result<BoundEval, TrainError> {
    let per_task: Vec<Result<(f64, f64, f64), TrainError>> = tasks
        .par_iter()
        .zip(posteriors.par_iter())
        .enumerate()
        .map(|(i, (task, phi))| {
            let mut rng = stream(cfg.seed, tag::EVAL, (key << 16) | i as u64);
            let (x, y) = task.rows(&task.bound_idx);
            let (mut ce, mut err) = (0.0, 0.0);
            for _ in 0..samples {
                let w = sample_weights(phi, &mut rng);
                let lp = predict(&w, &x)?;
                ce += bounded_ce_loss(&lp, &y, cfg.p_min)?;
                err += zero_one_error(&lp, &y)?;
            }
            let kl = expected_kl_under_center_noise(phi, theta, cfg.kappa_q)?;
            Ok((ce / samples as f64, err / samples as f64, kl))
        })
        .collect();
    let mut terms = Vec::with_capacity(tasks.len());
    let (mut ce_sum, mut err_sum) = (0.0, 0.0);
    for (task, r) in tasks.iter().zip(per_task) {
        let (ce, err, kl) = r?;
        ce_sum += ce;
        err_sum += err;
        terms.push(TaskTerms {
            emp_error: match loss {
                EmpLoss::BoundedCe => ce,
                EmpLoss::ZeroOne => err,
            },
            kl_task: kl.max(0.0),
            m: task.bound_idx.len(),
        });
    }
    let hyper = HyperConfig::new(cfg.kappa_p, cfg.kappa_q, theta.n_params())?;
    let inputs = MetaInputs::new(terms, kl_hyper(theta, &hyper, cfg.hyper_kl), cfg.delta);
    let report = cfg.objective.evaluate(&inputs)?;
    let k = tasks.len() as f64;
    Ok(BoundEval {
        report,
        inputs,
        ce_loss: ce_sum / k,
        error: err_sum / k,
    })
}

/// Network shape implied by the tasks and the configured hidden widths.
pub fn arch_for(tasks: &[TaskDataset], cfg: &TrainConfig) -> Result<Arch, TrainError> {
    let first = tasks
        .first()
        .ok_or_else(|| TrainError::Config("no training tasks".into()))?;
    Ok(Arch::mlp(first.x.cols(), &cfg.hidden, first.n_classes)?)
}

fn init_theta(tasks: &[TaskDataset], cfg: &TrainConfig) -> Result<StochasticNet, TrainError> {
    Ok(StochasticNet::init(arch_for(tasks, cfg)?, &mut stream(cfg.seed, tag::INIT, 0)))
}

/// Meta-training from a random initial center.
pub fn meta_train(tasks: &[TaskDataset], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    meta_train_from(init_theta(tasks, cfg)?, tasks, cfg)
}

/// Meta-training from a given initial center.
pub fn meta_train_from(theta: StochasticNet, tasks: &[TaskDataset], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let mut trainer = MetaTrainer::new(cfg, tasks, theta)?;
    trainer.run_meta_epochs(cfg.epochs)?;
    trainer.finish()
}

/// ERM prior on the pooled prior splits, trained for `cfg.prior_epochs`.
pub fn erm_prior(tasks: &[TaskDataset], cfg: &TrainConfig) -> Result<StochasticNet, TrainError> {
    let mut trainer = MetaTrainer::new(cfg, tasks, init_theta(tasks, cfg)?)?;
    trainer.run_prior_epochs(cfg.prior_epochs)?;
    Ok(trainer.theta)
}

/// ERM prior phase followed by meta-training on the bound splits.
pub fn meta_train_ddprior(tasks: &[TaskDataset], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    if tasks.iter().any(|t| t.prior_idx.is_empty()) {
        return Err(TrainError::Config(
            "data-dependent prior needs a positive prior fraction; use meta_train instead".into(),
        ));
    }
    let mut trainer = MetaTrainer::new(cfg, tasks, init_theta(tasks, cfg)?)?;
    trainer.run_prior_epochs(cfg.prior_epochs)?;
    trainer.run_meta_epochs(cfg.epochs)?;
    trainer.finish()
}
