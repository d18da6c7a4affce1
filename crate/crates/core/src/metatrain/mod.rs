//! Meta-training with a random hyper-prior, and with an ERM data-dependent
//! prior learned on a held-out part of every task.

mod adam;
mod loss;
mod objective;
mod trainer;

pub use adam::{adam_step, AdamState};
pub use loss::{bounded_ce_loss, bounded_ce_loss_var, clip_level, zero_one_error};
pub use objective::{env_term_var, kl_inv_var, single_term_var, task_term_var};
pub use trainer::{
    arch_for, erm_prior, evaluate_bound, meta_train, meta_train_ddprior, meta_train_from, BoundEval, EmpLoss, MetaTrainer,
    StepOutput, TrainOutcome,
};

use std::fmt;

use thiserror::Error;

use crate::bounds::{BoundError, MetaBound};
use crate::envs::EnvError;
use crate::ndcore::NdError;
use crate::stochnet::{HyperKlMode, NetError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: non-finite {term}")]
    Diverged { term: String, epoch: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Meta-bound family minimized during meta-training.
    pub objective: MetaBound,
    pub delta: f64,
    pub kappa_p: f64,
    pub kappa_q: f64,
    pub hyper_kl: HyperKlMode,
    pub lr: f64,
    pub meta_batch_tasks: usize,
    pub data_batch: usize,
    /// Meta-training epochs (phase 2 for data-dependent runs).
    pub epochs: usize,
    /// ERM epochs for the data-dependent prior.
    pub prior_epochs: usize,
    pub mc_train_samples: usize,
    /// Weight draws for final bound evaluation.
    pub mc_eval_samples: usize,
    /// Weight draws for the per-epoch trace bound.
    pub trace_mc_samples: usize,
    pub p_min: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: MetaBound::Varia,
            delta: 0.1,
            kappa_p: 2000.0,
            kappa_q: 0.001,
            hyper_kl: HyperKlMode::Scalar,
            lr: 1e-3,
            meta_batch_tasks: 16,
            data_batch: 128,
            epochs: 20,
            prior_epochs: 5,
            mc_train_samples: 1,
            mc_eval_samples: 30,
            trace_mc_samples: 3,
            p_min: 1e-4,
            hidden: vec![64, 64],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if let MetaBound::Lambda { lambda, .. } = self.objective {
            if !(lambda > 0.0 && lambda < 2.0) {
                return bad("lambda must be in (0, 2)");
            }
        }
        if self.objective == MetaBound::DdPrior {
            return bad("objective must be one of classic, seeger, lambda, quad, varia");
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad("delta must be in (0, 1]");
        }
        if !(self.kappa_p > 0.0 && self.kappa_q > 0.0) {
            return bad("kappa_p and kappa_q must be > 0");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and >= 0");
        }
        if self.meta_batch_tasks == 0 || self.data_batch == 0 {
            return bad("batch sizes must be >= 1");
        }
        if self.mc_train_samples == 0 || self.mc_eval_samples == 0 || self.trace_mc_samples == 0 {
            return bad("Monte-Carlo sample counts must be >= 1");
        }
        if !(self.p_min > 0.0 && self.p_min < 1.0) {
            return bad("p_min must be in (0, 1)");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Prior,
    Meta,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Prior => "prior",
            Self::Meta => "meta",
        })
    }
}

/// One per-epoch trace entry. Epochs are numbered globally from 1 across
/// both phases.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub phase: Phase,
    pub objective: f64,
    pub bound: f64,
    pub empirical_term: f64,
    pub task_complexity: f64,
    pub meta_complexity: f64,
    pub train_error: f64,
}

pub const TRACE_HEADER: &str =
    "epoch,objective,bound,empirical_term,task_complexity,meta_complexity,train_error,phase";
