//! Meta-bound objectives on the autodiff tape.
//!
//! The objective splits into per-task terms plus the environment term, so each
//! task's gradient can be taken on its own tape.

use crate::bounds::{binary_kl_dq, kl_inv_upper, lambda_denominator, single_log_term, varia_branches, MetaBound, SingleBound};
use crate::ndcore::{NdError, Var};

/// Per-task contribution `emp_i + task complexity_i` of a meta bound.
pub fn task_term_var<'t>(
    bound: MetaBound,
    emp: Var<'t>,
    kl_task: Var<'t>,
    kl_hyper: Var<'t>,
    m: usize,
    n: usize,
    delta: f64,
) -> Result<Var<'t>, NdError> {
    let mf = m as f64;
    let nf = n as f64;
    let kl = kl_hyper.add(kl_task)?;
    let log_sqrt_m = (4.0 * nf * mf.sqrt() / delta).ln();
    match bound {
        MetaBound::Classic | MetaBound::DdPrior => {
            let cx = kl
                .add_scalar((2.0 * nf * mf / delta).ln())
                .scale(1.0 / (2.0 * (mf - 1.0)))
                .sqrt();
            emp.add(cx)
        }
        MetaBound::Lambda { lambda, proof_form } => {
            let a = lambda_denominator(lambda, proof_form);
            let cx = kl.add_scalar(log_sqrt_m).scale(1.0 / (mf * lambda * a));
            emp.scale(1.0 / a).add(cx)
        }
        MetaBound::Quad => {
            let eps = kl.add_scalar(log_sqrt_m).scale(1.0 / (2.0 * mf));
            let cross = eps.mul(emp.add(eps)?)?.sqrt().scale(2.0);
            emp.add(eps.scale(2.0).add(cross)?)
        }
        MetaBound::Varia => {
            let eps = kl.add_scalar(log_sqrt_m).scale(1.0 / mf);
            emp.add(varia_var(emp, eps)?)
        }
        MetaBound::Seeger => {
            let c = kl.add_scalar(log_sqrt_m).scale(1.0 / mf);
            kl_inv_var(emp, c)
        }
    }
}

/// Single-task bound of the given family with posterior-to-prior KL `kl`.
pub fn single_term_var<'t>(bound: SingleBound, emp: Var<'t>, kl: Var<'t>, m: usize, delta: f64) -> Result<Var<'t>, NdError> {
    let mf = m as f64;
    let log_term = single_log_term(m, delta);
    match bound {
        SingleBound::McAllester => {
            let cx = kl
                .add_scalar((mf / delta).ln())
                .scale(1.0 / (2.0 * (mf - 1.0)))
                .sqrt();
            emp.add(cx)
        }
        SingleBound::Seeger => kl_inv_var(emp, kl.add_scalar(log_term).scale(1.0 / mf)),
        SingleBound::Lambda { lambda } => {
            let a = lambda_denominator(lambda, true);
            emp.scale(1.0 / a).add(kl.add_scalar(log_term).scale(1.0 / (mf * lambda * a)))
        }
        SingleBound::Quad => {
            let eps = kl.add_scalar(log_term).scale(1.0 / (2.0 * mf));
            let cross = eps.mul(emp.add(eps)?)?.sqrt().scale(2.0);
            emp.add(eps.scale(2.0).add(cross)?)
        }
        SingleBound::Varia => {
            let eps = kl.add_scalar(log_term).scale(1.0 / mf);
            emp.add(varia_var(emp, eps)?)
        }
    }
}

/// The smaller branch of the variational complexity, chosen by value.
fn varia_var<'t>(emp: Var<'t>, eps: Var<'t>) -> Result<Var<'t>, NdError> {
    let (a, b) = varia_branches(emp.item(), eps.item());
    if a <= b {
        eps.add(eps.mul(eps.add(emp.scale(2.0))?)?.sqrt())
    } else {
        Ok(eps.scale(0.5).sqrt())
    }
}

/// `kl_inv_upper(q, c)` with derivatives from the implicit relation
/// `kl(q || p) = c`.
pub fn kl_inv_var<'t>(q: Var<'t>, c: Var<'t>) -> Result<Var<'t>, NdError> {
    let (qv, cv) = (q.item(), c.item());
    let p = kl_inv_upper(qv, cv).map_err(|e| NdError::Invalid {
        op: "kl_inv",
        msg: e.to_string(),
    })?;
    let partials = if p >= 1.0 {
        vec![0.0, 0.0]
    } else {
        let slope = ((p - qv) / (p * (1.0 - p))).max(1e-12);
        let dq = binary_kl_dq(qv.max(1e-12), p);
        vec![-dq / slope, 1.0 / slope]
    };
    q.tape().scalar_fn(&[q, c], p, partials)
}

/// `sqrt((kl_hyper + ln(2n/δ)) / (2(n-1)))`.
pub fn env_term_var<'t>(kl_hyper: Var<'t>, n: usize, delta: f64) -> Var<'t> {
    let nf = n as f64;
    kl_hyper
        .add_scalar((2.0 * nf / delta).ln())
        .scale(1.0 / (2.0 * (nf - 1.0)))
        .sqrt()
}
