//! Single-task and meta-level PAC-Bayes bounds.
//!
//! Everything here is a pure `f64` function. Training assembles the same
//! expressions on the autodiff tape; the two are checked against each other in
//! the metatrain tests.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BoundError {
    #[error("{name} must be {requirement}, got {value}")]
    Invalid {
        name: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error("meta bound needs at least one task")]
    NoTasks,
    #[error("unknown bound {name:?}; valid names: {valid}")]
    UnknownName { name: String, valid: &'static str },
}

fn invalid(name: &'static str, requirement: &'static str, value: f64) -> BoundError {
    BoundError::Invalid {
        name,
        requirement,
        value,
    }
}

/// `kl(q || q')` between Bernoulli distributions, with `0 ln 0 = 0`.
pub fn binary_kl(q: f64, q_prime: f64) -> Result<f64, BoundError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(invalid("q", "in [0, 1]", q));
    }
    if !(0.0..=1.0).contains(&q_prime) {
        return Err(invalid("q_prime", "in [0, 1]", q_prime));
    }
    if q_prime == 0.0 || q_prime == 1.0 {
        return if q == q_prime {
            Ok(0.0)
        } else {
            Err(invalid("q_prime", "in (0, 1) unless equal to q", q_prime))
        };
    }
    Ok(binary_kl_unchecked(q, q_prime))
}

fn binary_kl_unchecked(q: f64, p: f64) -> f64 {
    let a = if q > 0.0 { q * (q / p).ln() } else { 0.0 };
    let b = if q < 1.0 {
        (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln()
    } else {
        0.0
    };
    a + b
}

/// `∂kl(q || p) / ∂q` for `0 < p < 1`.
pub(crate) fn binary_kl_dq(q: f64, p: f64) -> f64 {
    let a = if q > 0.0 { (q / p).ln() } else { f64::NEG_INFINITY };
    let b = if q < 1.0 {
        ((1.0 - q) / (1.0 - p)).ln()
    } else {
        f64::NEG_INFINITY
    };
    a - b
}

/// Largest `p` in `[q_hat, 1]` with `kl(q_hat || p) <= c`, found by bisection
/// down to adjacent floats. Returns 1 when even the largest float below 1
/// stays within the budget.
pub fn kl_inv_upper(q_hat: f64, c: f64) -> Result<f64, BoundError> {
    if !(0.0..=1.0).contains(&q_hat) {
        return Err(invalid("q_hat", "in [0, 1]", q_hat));
    }
    if !(c >= 0.0) {
        return Err(invalid("c", ">= 0", c));
    }
    if q_hat == 1.0 {
        return Ok(1.0);
    }
    if c == 0.0 {
        return Ok(q_hat);
    }
    let top = 1.0 - f64::EPSILON / 2.0;
    if binary_kl_unchecked(q_hat, top) <= c {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (q_hat, top);
    loop {
        let mid = lo + (hi - lo) / 2.0;
        if mid <= lo || mid >= hi {
            return Ok(lo);
        }
        if binary_kl_unchecked(q_hat, mid) <= c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

/// Which normalisation `task_eps` uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpsVariant {
    /// `1 / (2m)`, quadratic bound.
    Half,
    /// `1 / m`, variational bound.
    Full,
}

fn log_term_sqrt_m(n: f64, m: usize, delta: f64) -> f64 {
    (4.0 * n * (m as f64).sqrt() / delta).ln()
}

/// `(kl_hyper + kl_task + ln(4n√m/δ)) / (2m)` or `/ m`.
pub fn task_eps(kl_task: f64, kl_hyper: f64, m: usize, n: usize, delta: f64, variant: EpsVariant) -> f64 {
    let full = (kl_hyper + kl_task + log_term_sqrt_m(n as f64, m, delta)) / m as f64;
    match variant {
        EpsVariant::Half => full / 2.0,
        EpsVariant::Full => full,
    }
}

/// Environment-level complexity `sqrt((kl_hyper + ln(2n/δ)) / (2(n-1)))`.
pub fn env_term(kl_hyper: f64, n: usize, delta: f64) -> Result<f64, BoundError> {
    if n < 2 {
        return Err(invalid("n", ">= 2", n as f64));
    }
    check_delta(delta)?;
    check_kl("kl_hyper", kl_hyper)?;
    let n = n as f64;
    Ok(((kl_hyper + (2.0 * n / delta).ln()) / (2.0 * (n - 1.0))).sqrt())
}

fn check_delta(delta: f64) -> Result<(), BoundError> {
    if delta > 0.0 && delta <= 1.0 {
        Ok(())
    } else {
        Err(invalid("delta", "in (0, 1]", delta))
    }
}

fn check_kl(name: &'static str, kl: f64) -> Result<(), BoundError> {
    if kl >= 0.0 && kl.is_finite() {
        Ok(())
    } else {
        Err(invalid(name, "finite and >= 0", kl))
    }
}

fn check_emp(emp: f64) -> Result<(), BoundError> {
    if (0.0..=1.0).contains(&emp) {
        Ok(())
    } else {
        Err(invalid("emp_error", "in [0, 1]", emp))
    }
}

fn check_lambda(lambda: f64) -> Result<(), BoundError> {
    if lambda > 0.0 && lambda < 2.0 {
        Ok(())
    } else {
        Err(invalid("lambda", "in (0, 2)", lambda))
    }
}

/// Per-task quantities entering a meta bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskTerms {
    /// Monte-Carlo estimate of the expected empirical loss, in `[0, 1]`.
    pub emp_error: f64,
    /// Expected `D(Q_i || P)` over priors drawn from the hyper-posterior.
    pub kl_task: f64,
    /// Samples the empirical term was computed on.
    pub m: usize,
}

/// Inputs to a meta bound. `n` is the number of tasks in the environment
/// sample; `tasks` may be a subset of them (a meta-batch), in which case the
/// per-task averages run over the subset.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaInputs {
    pub tasks: Vec<TaskTerms>,
    pub n: usize,
    pub kl_hyper: f64,
    pub delta: f64,
}

impl MetaInputs {
    /// All `n` tasks present.
    pub fn new(tasks: Vec<TaskTerms>, kl_hyper: f64, delta: f64) -> Self {
        let n = tasks.len();
        Self {
            tasks,
            n,
            kl_hyper,
            delta,
        }
    }

    pub fn validate(&self) -> Result<(), BoundError> {
        if self.tasks.is_empty() {
            return Err(BoundError::NoTasks);
        }
        if self.n < 2 {
            return Err(invalid("n", ">= 2", self.n as f64));
        }
        check_delta(self.delta)?;
        check_kl("kl_hyper", self.kl_hyper)?;
        for t in &self.tasks {
            check_emp(t.emp_error)?;
            check_kl("kl_task", t.kl_task)?;
            if t.m < 2 {
                return Err(invalid("m", ">= 2", t.m as f64));
            }
        }
        Ok(())
    }
}

/// A bound value with its decomposition. `per_task` holds each task's
/// contribution before averaging (its empirical and task-complexity parts).
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub bound: f64,
    pub empirical_term: f64,
    pub task_complexity: f64,
    pub meta_complexity: f64,
    pub per_task: Vec<f64>,
}

/// Meta-level bound families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetaBound {
    Classic,
    Seeger,
    /// `proof_form` selects first-power `(1 - λ/2)` denominators instead of
    /// the squared ones used by the training objective.
    Lambda { lambda: f64, proof_form: bool },
    Quad,
    Varia,
    /// Classic form evaluated on the bound split of a data-dependent prior run.
    DdPrior,
}

pub const META_BOUND_NAMES: &str = "classic, seeger, lambda, quad, varia, ddprior";

impl MetaBound {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Classic => "classic",
            Self::Seeger => "seeger",
            Self::Lambda { .. } => "lambda",
            Self::Quad => "quad",
            Self::Varia => "varia",
            Self::DdPrior => "ddprior",
        }
    }

    /// Parses a family name; `lambda` uses the given λ in squared form.
    pub fn parse(name: &str, lambda: f64) -> Result<Self, BoundError> {
        Ok(match name {
            "classic" => Self::Classic,
            "seeger" => Self::Seeger,
            "lambda" => Self::Lambda {
                lambda,
                proof_form: false,
            },
            "quad" => Self::Quad,
            "varia" => Self::Varia,
            "ddprior" => Self::DdPrior,
            other => {
                return Err(BoundError::UnknownName {
                    name: other.to_string(),
                    valid: META_BOUND_NAMES,
                })
            }
        })
    }

    pub fn evaluate(&self, inputs: &MetaInputs) -> Result<BoundReport, BoundError> {
        match *self {
            Self::Classic | Self::DdPrior => meta_bound_classic(inputs),
            Self::Seeger => meta_bound_seeger(inputs),
            Self::Lambda { lambda, proof_form } => meta_bound_lambda(inputs, lambda, proof_form),
            Self::Quad => meta_bound_quad(inputs),
            Self::Varia => meta_bound_varia(inputs),
        }
    }
}

impl fmt::Display for MetaBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Averages `(empirical, complexity)` pairs and adds the environment term.
fn assemble(inputs: &MetaInputs, parts: impl Iterator<Item = (f64, f64)>) -> Result<BoundReport, BoundError> {
    let meta_complexity = env_term(inputs.kl_hyper, inputs.n, inputs.delta)?;
    let k = inputs.tasks.len() as f64;
    let (mut emp_sum, mut cx_sum) = (0.0, 0.0);
    let mut per_task = Vec::with_capacity(inputs.tasks.len());
    for (e, c) in parts {
        emp_sum += e;
        cx_sum += c;
        per_task.push(e + c);
    }
    let empirical_term = emp_sum / k;
    let task_complexity = cx_sum / k;
    Ok(BoundReport {
        bound: empirical_term + task_complexity + meta_complexity,
        empirical_term,
        task_complexity,
        meta_complexity,
        per_task,
    })
}

/// Mean empirical error, plus `(1/n) Σ sqrt((kl_hyper + kl_i + ln(2 n m_i / δ)) / (2(m_i - 1)))`,
/// plus the environment term.
pub fn meta_bound_classic(inputs: &MetaInputs) -> Result<BoundReport, BoundError> {
    inputs.validate()?;
    let n = inputs.n as f64;
    assemble(
        inputs,
        inputs.tasks.iter().map(|t| {
            let m = t.m as f64;
            let cx = ((inputs.kl_hyper + t.kl_task + (2.0 * n * m / inputs.delta).ln()) / (2.0 * (m - 1.0))).sqrt();
            (t.emp_error, cx)
        }),
    )
}

/// Data-dependent-prior bound: the classic form with `m_i = |S_i \ R_i|`.
pub fn meta_bound_ddprior(inputs: &MetaInputs) -> Result<BoundReport, BoundError> {
    meta_bound_classic(inputs)
}

/// `(1/n) Σ emp_i / a + (1/n) Σ (kl_hyper + kl_i + ln(4n√m_i/δ)) / (m_i λ a) + env`,
/// with `a = (1 - λ/2)²`, or `a = 1 - λ/2` when `proof_form` is set. The
/// empirical term of the report is the scaled `emp_i / a`.
pub fn meta_bound_lambda(inputs: &MetaInputs, lambda: f64, proof_form: bool) -> Result<BoundReport, BoundError> {
    check_lambda(lambda)?;
    inputs.validate()?;
    let a = lambda_denominator(lambda, proof_form);
    let n = inputs.n as f64;
    assemble(
        inputs,
        inputs.tasks.iter().map(|t| {
            let numer = inputs.kl_hyper + t.kl_task + log_term_sqrt_m(n, t.m, inputs.delta);
            (t.emp_error / a, numer / (t.m as f64 * lambda * a))
        }),
    )
}

pub(crate) fn lambda_denominator(lambda: f64, proof_form: bool) -> f64 {
    let base = 1.0 - lambda / 2.0;
    if proof_form {
        base
    } else {
        base * base
    }
}

/// `(1/n) Σ (sqrt(emp_i + ε_i) + sqrt(ε_i))² + env` with `ε_i` from
/// [`task_eps`] (half). Task complexity is the per-task term minus `emp_i`.
pub fn meta_bound_quad(inputs: &MetaInputs) -> Result<BoundReport, BoundError> {
    inputs.validate()?;
    assemble(
        inputs,
        inputs.tasks.iter().map(|t| {
            let eps = task_eps(t.kl_task, inputs.kl_hyper, t.m, inputs.n, inputs.delta, EpsVariant::Half);
            (t.emp_error, quad_complexity(t.emp_error, eps))
        }),
    )
}

/// `(sqrt(emp + eps) + sqrt(eps))²`, expanded so that `eps = 0` returns
/// `emp` exactly.
fn quad_term(emp: f64, eps: f64) -> f64 {
    emp + quad_complexity(emp, eps)
}

fn quad_complexity(emp: f64, eps: f64) -> f64 {
    2.0 * eps + 2.0 * (eps * (emp + eps)).sqrt()
}

/// Both branches of the variational complexity term.
pub fn varia_branches(emp: f64, eps: f64) -> (f64, f64) {
    (eps + (eps * (eps + 2.0 * emp)).sqrt(), (eps / 2.0).sqrt())
}

/// Mean empirical error plus `(1/n) Σ min(ε + sqrt(ε(ε + 2 emp_i)), sqrt(ε/2))`
/// with `ε_i` from [`task_eps`] (full), plus the environment term.
pub fn meta_bound_varia(inputs: &MetaInputs) -> Result<BoundReport, BoundError> {
    inputs.validate()?;
    assemble(
        inputs,
        inputs.tasks.iter().map(|t| {
            let eps = task_eps(t.kl_task, inputs.kl_hyper, t.m, inputs.n, inputs.delta, EpsVariant::Full);
            let (a, b) = varia_branches(t.emp_error, eps);
            (t.emp_error, a.min(b))
        }),
    )
}

/// Budget `(kl_hyper + kl_i + ln(4n√m_i/δ)) / m_i` for the relative-entropy form.
pub fn seeger_budget(kl_task: f64, kl_hyper: f64, m: usize, n: usize, delta: f64) -> f64 {
    task_eps(kl_task, kl_hyper, m, n, delta, EpsVariant::Full)
}

/// `(1/n) Σ kl_inv_upper(emp_i, budget_i) + env`.
pub fn meta_bound_seeger(inputs: &MetaInputs) -> Result<BoundReport, BoundError> {
    inputs.validate()?;
    let parts = inputs
        .tasks
        .iter()
        .map(|t| {
            let c = seeger_budget(t.kl_task, inputs.kl_hyper, t.m, inputs.n, inputs.delta);
            let p = kl_inv_upper(t.emp_error, c)?;
            Ok((t.emp_error, p - t.emp_error))
        })
        .collect::<Result<Vec<_>, BoundError>>()?;
    assemble(inputs, parts.into_iter())
}

/// Single-task bound families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SingleBound {
    McAllester,
    Seeger,
    Lambda { lambda: f64 },
    Quad,
    Varia,
}

pub const SINGLE_BOUND_NAMES: &str = "mcallester, seeger, lambda, quad, varia";

impl SingleBound {
    pub fn parse(name: &str, lambda: f64) -> Result<Self, BoundError> {
        Ok(match name {
            "mcallester" | "classic" => Self::McAllester,
            "seeger" => Self::Seeger,
            "lambda" => Self::Lambda { lambda },
            "quad" => Self::Quad,
            "varia" => Self::Varia,
            other => {
                return Err(BoundError::UnknownName {
                    name: other.to_string(),
                    valid: SINGLE_BOUND_NAMES,
                })
            }
        })
    }

    /// The single-task family matching a meta-level family.
    pub fn matching(meta: MetaBound) -> Self {
        match meta {
            MetaBound::Classic | MetaBound::DdPrior => Self::McAllester,
            MetaBound::Seeger => Self::Seeger,
            MetaBound::Lambda { lambda, .. } => Self::Lambda { lambda },
            MetaBound::Quad => Self::Quad,
            MetaBound::Varia => Self::Varia,
        }
    }

    pub fn evaluate(&self, emp: f64, kl: f64, m: usize, delta: f64) -> Result<f64, BoundError> {
        single_task_bound(*self, emp, kl, m, delta)
    }
}

/// `ln(2√m/δ)`, shared by the Seeger, λ, quadratic and variational forms.
pub(crate) fn single_log_term(m: usize, delta: f64) -> f64 {
    (2.0 * (m as f64).sqrt() / delta).ln()
}

pub fn single_task_bound(which: SingleBound, emp: f64, kl: f64, m: usize, delta: f64) -> Result<f64, BoundError> {
    check_emp(emp)?;
    check_kl("kl", kl)?;
    check_delta(delta)?;
    if m < 1 {
        return Err(invalid("m", ">= 1", 0.0));
    }
    let mf = m as f64;
    Ok(match which {
        SingleBound::McAllester => {
            if m < 2 {
                return Err(invalid("m", ">= 2", mf));
            }
            emp + ((kl + (mf / delta).ln()) / (2.0 * (mf - 1.0))).sqrt()
        }
        SingleBound::Seeger => kl_inv_upper(emp, (kl + single_log_term(m, delta)) / mf)?,
        SingleBound::Lambda { lambda } => {
            check_lambda(lambda)?;
            let a = 1.0 - lambda / 2.0;
            emp / a + (kl + single_log_term(m, delta)) / (mf * lambda * a)
        }
        SingleBound::Quad => quad_term(emp, (kl + single_log_term(m, delta)) / (2.0 * mf)),
        SingleBound::Varia => {
            let eps = (kl + single_log_term(m, delta)) / mf;
            let (a, b) = varia_branches(emp, eps);
            emp + a.min(b)
        }
    })
}

impl FromStr for EpsVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "half" => Ok(Self::Half),
            "full" => Ok(Self::Full),
            other => Err(format!("unknown eps variant {other:?}")),
        }
    }
}
