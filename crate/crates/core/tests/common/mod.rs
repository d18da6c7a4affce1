//! Finite-difference gradient checks shared by the integration tests.

use pacmeta::bounds::MetaBound;
use pacmeta::metatrain::{bounded_ce_loss_var, kl_inv_var, task_term_var};
use pacmeta::ndcore::{NdError, Tape, Tensor, Var};
use pacmeta::rng::{standard_normal, stream, Rng};
use pacmeta::stochnet::{forward, HyperConfig, HyperKlMode, TrackedLayer, TrackedNet};
use rand::Rng as _;

/// Central-difference step.
const H: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
const FLOOR: f64 = 1e-3;

type Build = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, NdError>;

/// Fixed non-uniform weights used to reduce a tensor output to a scalar.
fn reduce<'t>(tape: &'t Tape, out: Var<'t>) -> Result<Var<'t>, NdError> {
    let shape = out.shape();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|k| 0.5 + 0.3 * (k as f64 * 1.7).sin()).collect();
    Ok(out.mul(tape.constant(Tensor::new(shape, w)?))?.sum())
}

fn eval(inputs: &[Tensor], build: &Build) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&tape, &vars).expect("forward");
    reduce(&tape, out).expect("reduce").item()
}

/// Largest relative error between tape gradients and central differences.
pub fn gradcheck(inputs: &[Tensor], build: &Build) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&tape, &vars).expect("forward");
    let grads = reduce(&tape, out).expect("reduce").backward().expect("backward");
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| inputs[i].zeros_like());
        for k in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= H;
            let numeric = (eval(&plus, build) - eval(&minus, build)) / (2.0 * H);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    standard_normal(rng, shape)
}

/// Moves entries at least `margin` away from every kink.
fn away_from(t: Tensor, kinks: &[f64], margin: f64) -> Tensor {
    t.map(|x| {
        let mut x = x;
        for &k in kinks {
            if (x - k).abs() < margin {
                x = k + if x >= k { margin } else { -margin } * 2.0;
            }
        }
        x
    })
}

fn dims(rng: &mut Rng) -> (usize, usize, usize) {
    (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4))
}

fn tracked<'t>(vars: &[Var<'t>]) -> TrackedNet<'t> {
    TrackedNet {
        layers: vars
            .chunks(2)
            .map(|p| TrackedLayer {
                mu: p[0],
                log_var: p[1],
            })
            .collect(),
    }
}

/// Random small net parameters `[mu_1, log_var_1, mu_2, log_var_2, ...]` for
/// widths `widths`, with biases as an extra input row.
fn net_params(rng: &mut Rng, widths: &[usize], lv_lo: f64, lv_hi: f64) -> Vec<Tensor> {
    widths
        .windows(2)
        .flat_map(|w| {
            let shape = [w[0] + 1, w[1]];
            [normal(rng, &shape).scale(0.5), uniform(rng, &shape, lv_lo, lv_hi)]
        })
        .collect()
}

/// One named check: builds inputs and a function for case `c`.
type Case = Box<dyn Fn(&mut Rng) -> (Vec<Tensor>, Box<Build>)>;

fn cases() -> Vec<(&'static str, Case)> {
    let mut v: Vec<(&'static str, Case)> = Vec::new();
    v.push((
        "matmul",
        Box::new(|r| {
            let (m, k, n) = dims(r);
            (vec![normal(r, &[m, k]), normal(r, &[k, n])], Box::new(|_, x| x[0].matmul(x[1])))
        }),
    ));
    v.push((
        "add_bias",
        Box::new(|r| {
            let (m, _, n) = dims(r);
            (vec![normal(r, &[m, n]), normal(r, &[n])], Box::new(|_, x| x[0].add_bias(x[1])))
        }),
    ));
    v.push((
        "slice_rows",
        Box::new(|r| {
            let m = r.random_range(2..6);
            let n = r.random_range(1..4);
            let a = r.random_range(0..m - 1);
            let b = r.random_range(a + 1..=m);
            (vec![normal(r, &[m, n])], Box::new(move |_, x| x[0].slice_rows(a, b)))
        }),
    ));
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
        v.push((
            name,
            Box::new(move |r| {
                let (m, _, n) = dims(r);
                (
                    vec![normal(r, &[m, n]), normal(r, &[m, n])],
                    Box::new(move |_, x| match op {
                        0 => x[0].add(x[1]),
                        1 => x[0].sub(x[1]),
                        _ => x[0].mul(x[1]),
                    }),
                )
            }),
        ));
    }
    v.push((
        "exp",
        Box::new(|r| {
            let (m, _, n) = dims(r);
            (vec![uniform(r, &[m, n], -2.0, 2.0)], Box::new(|_, x| Ok(x[0].exp())))
        }),
    ));
    v.push((
        "log",
        Box::new(|r| {
            let (m, _, n) = dims(r);
            (vec![uniform(r, &[m, n], 0.2, 3.0)], Box::new(|_, x| Ok(x[0].log())))
        }),
    ));
    v.push((
        "sqrt",
        Box::new(|r| {
            let (m, _, n) = dims(r);
            (vec![uniform(r, &[m, n], 0.2, 3.0)], Box::new(|_, x| Ok(x[0].sqrt())))
        }),
    ));
    v.push((
        "square",
        Box::new(|r| {
            let (m, _, n) = dims(r);
            (vec![normal(r, &[m, n])], Box::new(|_, x| Ok(x[0].square())))
        }),
    ));
    v.push((
        "relu",
        Box::new(|r| {
            let (m, _, n) = dims(r);
            (vec![away_from(normal(r, &[m, n]), &[0.0], 0.01)], Box::new(|_, x| Ok(x[0].relu())))
        }),
    ));
    v.push((
        "clamp",
        Box::new(|r| {
            let (m, _, n) = dims(r);
            (
                vec![away_from(normal(r, &[m, n]), &[-0.5, 0.7], 0.01)],
                Box::new(|_, x| Ok(x[0].clamp(-0.5, 0.7))),
            )
        }),
    ));
    v.push((
        "log_softmax",
        Box::new(|r| {
            let (m, _, n) = dims(r);
            (vec![normal(r, &[m, n + 1]).scale(2.0)], Box::new(|_, x| x[0].log_softmax()))
        }),
    ));
    v.push((
        "pick",
        Box::new(|r| {
            let (m, _, n) = dims(r);
            let labels: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
            (vec![normal(r, &[m, n])], Box::new(move |_, x| x[0].pick(&labels)))
        }),
    ));
    v.push((
        "sum",
        Box::new(|r| {
            let (m, _, n) = dims(r);
            (vec![normal(r, &[m, n])], Box::new(|_, x| Ok(x[0].square().sum())))
        }),
    ));
    v.push((
        "mean",
        Box::new(|r| {
            let (m, _, n) = dims(r);
            (vec![normal(r, &[m, n])], Box::new(|_, x| Ok(x[0].square().mean())))
        }),
    ));
    v.push((
        "scale",
        Box::new(|r| {
            let (m, _, n) = dims(r);
            let k = r.random_range(-3.0..3.0);
            (vec![normal(r, &[m, n])], Box::new(move |_, x| Ok(x[0].scale(k))))
        }),
    ));
    v.push((
        "add_scalar",
        Box::new(|r| {
            let (m, _, n) = dims(r);
            let c = r.random_range(-3.0..3.0);
            (vec![normal(r, &[m, n])], Box::new(move |_, x| Ok(x[0].add_scalar(c).square())))
        }),
    ));
    v.push((
        "scalar_fn (kl inverse)",
        Box::new(|r| {
            let q = r.random_range(0.05..0.6);
            let c = r.random_range(0.01..0.5);
            (
                vec![Tensor::scalar(q), Tensor::scalar(c)],
                Box::new(|_, x| kl_inv_var(x[0], x[1])),
            )
        }),
    ));
    v.push((
        "stochnet kl",
        Box::new(|r| {
            let widths = [r.random_range(1..4), r.random_range(1..4), r.random_range(2..4)];
            let mut inputs = net_params(r, &widths, -2.0, 1.0);
            inputs.extend(net_params(r, &widths, -2.0, 1.0));
            (
                inputs,
                Box::new(|_, x| {
                    let half = x.len() / 2;
                    tracked(&x[..half])
                        .kl_to(&tracked(&x[half..]))
                        .map_err(|e| NdError::Invalid {
                            op: "kl",
                            msg: e.to_string(),
                        })
                }),
            )
        }),
    ));
    v.push((
        "stochnet hyper kl",
        Box::new(|r| {
            let widths = [r.random_range(1..4), r.random_range(2..4)];
            let inputs = net_params(r, &widths, -2.0, 1.0);
            let mode = if r.random_bool(0.5) {
                HyperKlMode::Scalar
            } else {
                HyperKlMode::Dimensional
            };
            let n_params = (widths[0] + 1) * widths[1];
            let cfg = HyperConfig::new(0.7, 0.05, n_params).unwrap();
            (
                inputs,
                Box::new(move |_, x| {
                    tracked(x).kl_hyper(&cfg, mode).map_err(|e| NdError::Invalid {
                        op: "kl_hyper",
                        msg: e.to_string(),
                    })
                }),
            )
        }),
    ));
    v.push((
        "stochnet forward",
        Box::new(|r| {
            let widths = [r.random_range(1..5), r.random_range(2..5), r.random_range(2..4)];
            let inputs = net_params(r, &widths, -3.0, -1.0);
            let noise: Vec<Tensor> = widths.windows(2).map(|w| normal(r, &[w[0] + 1, w[1]])).collect();
            let rows = r.random_range(1..4);
            let x = normal(r, &[rows, widths[0]]);
            let y: Vec<usize> = (0..rows).map(|_| r.random_range(0..widths[2])).collect();
            (
                inputs,
                Box::new(move |tape, p| {
                    let net = tracked(p);
                    let wrap = |e: pacmeta::stochnet::NetError| NdError::Invalid {
                        op: "forward",
                        msg: e.to_string(),
                    };
                    let w = net.sample_weights(&noise).map_err(wrap)?;
                    let lp = forward(&w, tape.constant(x.clone())).map_err(wrap)?;
                    bounded_ce_loss_var(lp, &y, 1e-12).map_err(|e| NdError::Invalid {
                        op: "loss",
                        msg: e.to_string(),
                    })
                }),
            )
        }),
    ));
    v.push((
        "meta objective (varia)",
        Box::new(|r| {
            let emp = r.random_range(0.05..0.8);
            let kl = r.random_range(0.0..20.0);
            let kh = r.random_range(0.0..10.0);
            (
                vec![Tensor::scalar(emp), Tensor::scalar(kl), Tensor::scalar(kh)],
                Box::new(|_, x| task_term_var(MetaBound::Varia, x[0], x[1], x[2], 300, 5, 0.1)),
            )
        }),
    ));
    v
}

/// Runs every check on `n_cases` seeded cases; returns `(name, worst error)`.
pub fn gradient_suite(n_cases: usize) -> Vec<(&'static str, f64)> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, case))| {
            let mut worst = 0.0f64;
            for c in 0..n_cases {
                let mut rng = stream(7, 100 + i as u64, c as u64);
                let (inputs, build) = case(&mut rng);
                worst = worst.max(gradcheck(&inputs, build.as_ref()));
            }
            (name, worst)
        })
        .collect()
}

pub const GRAD_TOL: f64 = 1e-5;
