//! Factorized-Gaussian stochastic MLPs.
//!
//! Each layer stores weight means and log-variances in a `[fan_in + 1, fan_out]`
//! matrix whose last row is the bias, so bias weights are stochastic as well.
//! Hidden layers use ReLU, the output layer is linear followed by log-softmax.
//!
//! Every quantity that training differentiates has two entry points: a plain
//! `f64` version used for evaluation and reporting, and a tape version over
//! [`TrackedNet`].

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::ndcore::{NdError, Tape, Tensor, Var};
use crate::rng::{standard_normal, Rng};

/// Mean and standard deviation of the initial log-variances.
pub const LOG_VAR_INIT_MEAN: f64 = -10.0;
pub const LOG_VAR_INIT_STD: f64 = 0.1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("architecture mismatch: {left:?} vs {right:?}")]
    Mismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("{name} must be {requirement}, got {value}")]
    Param {
        name: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Nd(#[from] NdError),
}

/// Layer widths `[input, hidden..., output]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arch {
    widths: Vec<usize>,
}

impl Arch {
    pub fn new(widths: Vec<usize>) -> Result<Self, NetError> {
        if widths.len() < 2 {
            return Err(NetError::Arch(format!(
                "need at least input and output widths, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(NetError::Arch(format!("zero width in {widths:?}")));
        }
        Ok(Self { widths })
    }

    /// Input, hidden widths, then output.
    pub fn mlp(input: usize, hidden: &[usize], output: usize) -> Result<Self, NetError> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        Self::new(widths)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn output(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// `[fan_in + 1, fan_out]` for layer `j`.
    pub fn layer_shape(&self, j: usize) -> [usize; 2] {
        [self.widths[j] + 1, self.widths[j + 1]]
    }

    pub fn n_params(&self) -> usize {
        (0..self.n_layers())
            .map(|j| {
                let [r, c] = self.layer_shape(j);
                r * c
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLayerParams {
    pub mu: Tensor,
    pub log_var: Tensor,
}

/// Ordered stack of Gaussian layers. Serves as prior, posterior, or
/// hyper-posterior center.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticNet {
    arch: Arch,
    layers: Vec<GaussianLayerParams>,
}

impl StochasticNet {
    pub fn new(arch: Arch, layers: Vec<GaussianLayerParams>) -> Result<Self, NetError> {
        if layers.len() != arch.n_layers() {
            return Err(NetError::Arch(format!(
                "{} layers for widths {:?}",
                layers.len(),
                arch.widths()
            )));
        }
        for (j, layer) in layers.iter().enumerate() {
            let shape = arch.layer_shape(j);
            if layer.mu.shape() != shape || layer.log_var.shape() != shape {
                return Err(NetError::Arch(format!(
                    "layer {j}: expected {shape:?}, got mu {:?} / log_var {:?}",
                    layer.mu.shape(),
                    layer.log_var.shape()
                )));
            }
            if !layer.log_var.all_finite() {
                return Err(NetError::Arch(format!("layer {j}: non-finite log_var")));
            }
        }
        Ok(Self { arch, layers })
    }

    /// Uniform means in `±sqrt(6 / (fan_in + fan_out))`, log-variances from
    /// `N(-10, 0.1²)`.
    pub fn init(arch: Arch, rng: &mut Rng) -> Self {
        let log_var_dist = Normal::new(LOG_VAR_INIT_MEAN, LOG_VAR_INIT_STD).expect("valid normal");
        let layers = (0..arch.n_layers())
            .map(|j| {
                let shape = arch.layer_shape(j);
                let limit = (6.0 / (arch.widths[j] + arch.widths[j + 1]) as f64).sqrt();
                let mut mu = Tensor::zeros(&shape);
                for v in mu.data_mut() {
                    *v = rng.random_range(-limit..limit);
                }
                let mut log_var = Tensor::zeros(&shape);
                for v in log_var.data_mut() {
                    *v = log_var_dist.sample(rng);
                }
                GaussianLayerParams { mu, log_var }
            })
            .collect();
        Self { arch, layers }
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn layers(&self) -> &[GaussianLayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [GaussianLayerParams] {
        &mut self.layers
    }

    /// Number of weights, N_P.
    pub fn n_params(&self) -> usize {
        self.arch.n_params()
    }

    pub fn check_same_arch(&self, other: &StochasticNet) -> Result<(), NetError> {
        if self.arch != other.arch {
            return Err(NetError::Mismatch {
                left: self.arch.widths.clone(),
                right: other.arch.widths.clone(),
            });
        }
        Ok(())
    }

    /// Flat parameter list `[mu_0, log_var_0, mu_1, ...]`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.mu, &l.log_var]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.mu, &mut l.log_var])
            .collect()
    }

    /// Records all means and log-variances as trainable leaves.
    pub fn track<'t>(&self, tape: &'t Tape) -> TrackedNet<'t> {
        self.record(tape, true)
    }

    /// Records the parameters as constants.
    pub fn constant<'t>(&self, tape: &'t Tape) -> TrackedNet<'t> {
        self.record(tape, false)
    }

    fn record<'t>(&self, tape: &'t Tape, trainable: bool) -> TrackedNet<'t> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        TrackedNet {
            layers: self
                .layers
                .iter()
                .map(|l| TrackedLayer {
                    mu: leaf(&l.mu),
                    log_var: leaf(&l.log_var),
                })
                .collect(),
        }
    }

    /// Sum of squared means across all layers.
    pub fn mean_norm_sq(&self) -> f64 {
        self.layers.iter().map(|l| l.mu.sum_squares()).sum()
    }
}

/// Standard-normal draws shaped like the weight matrices.
pub fn draw_noise(arch: &Arch, rng: &mut Rng) -> Vec<Tensor> {
    (0..arch.n_layers())
        .map(|j| standard_normal(rng, &arch.layer_shape(j)))
        .collect()
}

/// Reparameterized weights `mu + exp(log_var / 2) * eps` for given noise.
pub fn weights_from_noise(net: &StochasticNet, noise: &[Tensor]) -> Result<Vec<Tensor>, NetError> {
    if noise.len() != net.layers.len() {
        return Err(NetError::Arch(format!(
            "{} noise tensors for {} layers",
            noise.len(),
            net.layers.len()
        )));
    }
    net.layers
        .iter()
        .zip(noise)
        .map(|(l, eps)| {
            let scaled = l.log_var.zip_map(eps, "sample_weights", |lv, e| (0.5 * lv).exp() * e)?;
            Ok(l.mu.add(&scaled)?)
        })
        .collect()
}

/// One weight realization drawn from `net`.
pub fn sample_weights(net: &StochasticNet, rng: &mut Rng) -> Vec<Tensor> {
    let noise = draw_noise(net.arch(), rng);
    weights_from_noise(net, &noise).expect("noise matches architecture")
}

/// Gaussian noise `N(0, kappa_q² I)` for the hyper-posterior center.
pub fn draw_center_noise(arch: &Arch, kappa_q: f64, rng: &mut Rng) -> Result<Vec<Tensor>, NetError> {
    if !(kappa_q >= 0.0) || !kappa_q.is_finite() {
        return Err(NetError::Param {
            name: "kappa_q",
            requirement: "finite and >= 0",
            value: kappa_q,
        });
    }
    Ok(draw_noise(arch, rng)
        .into_iter()
        .map(|t| t.scale(kappa_q))
        .collect())
}

/// Prior drawn from the hyper-posterior: means shifted by `N(0, kappa_q² I)`,
/// log-variances copied.
pub fn perturb_center(theta: &StochasticNet, kappa_q: f64, rng: &mut Rng) -> Result<StochasticNet, NetError> {
    let noise = draw_center_noise(theta.arch(), kappa_q, rng)?;
    shift_means(theta, &noise)
}

pub fn shift_means(theta: &StochasticNet, shift: &[Tensor]) -> Result<StochasticNet, NetError> {
    let layers = theta
        .layers
        .iter()
        .zip(shift)
        .map(|(l, s)| {
            Ok(GaussianLayerParams {
                mu: l.mu.add(s)?,
                log_var: l.log_var.clone(),
            })
        })
        .collect::<Result<Vec<_>, NetError>>()?;
    StochasticNet::new(theta.arch.clone(), layers)
}

/// `D(q || p)` between factorized Gaussians.
pub fn kl_factorized_gaussian(q: &StochasticNet, p: &StochasticNet) -> Result<f64, NetError> {
    q.check_same_arch(p)?;
    let mut total = 0.0;
    for (lq, lp) in q.layers.iter().zip(&p.layers) {
        for k in 0..lq.mu.len() {
            let (mq, vq) = (lq.mu.data()[k], lq.log_var.data()[k]);
            let (mp, vp) = (lp.mu.data()[k], lp.log_var.data()[k]);
            let d = mq - mp;
            total += (vp - vq) + (vq - vp).exp() + d * d * (-vp).exp() - 1.0;
        }
    }
    Ok(0.5 * total)
}

/// `E_{eps} D(q || p + eps)` with `eps ~ N(0, kappa_q² I)` added to the prior
/// means; the squared mean gap gains `kappa_q²` in expectation.
pub fn expected_kl_under_center_noise(
    q: &StochasticNet,
    p: &StochasticNet,
    kappa_q: f64,
) -> Result<f64, NetError> {
    let base = kl_factorized_gaussian(q, p)?;
    let extra: f64 = p
        .layers
        .iter()
        .map(|l| l.log_var.data().iter().map(|vp| (-vp).exp()).sum::<f64>())
        .sum();
    Ok(base + 0.5 * kappa_q * kappa_q * extra)
}

/// Which hyper-KL formula to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperKlMode {
    /// One-dimensional form applied to the whole mean vector:
    /// `(|θ|² + κ_Q²) / (2κ_P²) + ln(κ_P/κ_Q) − 1/2`.
    Scalar,
    /// The N_P-dimensional isotropic Gaussian KL.
    Dimensional,
}

impl std::str::FromStr for HyperKlMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scalar" => Ok(Self::Scalar),
            "dimensional" => Ok(Self::Dimensional),
            other => Err(format!("unknown hyper-KL mode {other:?} (expected scalar|dimensional)")),
        }
    }
}

impl std::fmt::Display for HyperKlMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Scalar => "scalar",
            Self::Dimensional => "dimensional",
        })
    }
}

/// Hyper-prior `N(0, kappa_p² I)` and hyper-posterior `N(θ, kappa_q² I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperConfig {
    pub kappa_p: f64,
    pub kappa_q: f64,
    pub n_params: usize,
}

impl HyperConfig {
    pub fn new(kappa_p: f64, kappa_q: f64, n_params: usize) -> Result<Self, NetError> {
        if !(kappa_p > 0.0 && kappa_p.is_finite()) {
            return Err(NetError::Param {
                name: "kappa_p",
                requirement: "> 0",
                value: kappa_p,
            });
        }
        if !(kappa_q > 0.0 && kappa_q.is_finite()) {
            return Err(NetError::Param {
                name: "kappa_q",
                requirement: "> 0",
                value: kappa_q,
            });
        }
        if n_params == 0 {
            return Err(NetError::Arch("n_params must be >= 1".into()));
        }
        Ok(Self {
            kappa_p,
            kappa_q,
            n_params,
        })
    }

    fn coefficients(&self, mode: HyperKlMode) -> (f64, f64) {
        let n = match mode {
            HyperKlMode::Scalar => 1.0,
            HyperKlMode::Dimensional => self.n_params as f64,
        };
        let offset = n * self.kappa_q * self.kappa_q / (2.0 * self.kappa_p * self.kappa_p)
            + n * (self.kappa_p / self.kappa_q).ln()
            - 0.5 * n;
        (1.0 / (2.0 * self.kappa_p * self.kappa_p), offset)
    }
}

/// `D(Q_θ || P)` for the hyper-distributions; `θ` is the net's means.
pub fn kl_hyper(theta: &StochasticNet, cfg: &HyperConfig, mode: HyperKlMode) -> f64 {
    kl_hyper_from_norm(theta.mean_norm_sq(), cfg, mode)
}

pub fn kl_hyper_from_norm(norm_sq: f64, cfg: &HyperConfig, mode: HyperKlMode) -> f64 {
    let (slope, offset) = cfg.coefficients(mode);
    slope * norm_sq + offset
}

/// Class log-probabilities for concrete weights; `inputs` is `[batch, fan_in]`.
pub fn predict(weights: &[Tensor], inputs: &Tensor) -> Result<Tensor, NetError> {
    let mut h = inputs.clone();
    for (j, w) in weights.iter().enumerate() {
        let fan_in = w.rows() - 1;
        let z = h.matmul(&w.slice_rows(0, fan_in)?)?.add_bias(&w.slice_rows(fan_in, fan_in + 1)?)?;
        h = if j + 1 < weights.len() {
            z.map(|v| if v > 0.0 { v } else { 0.0 })
        } else {
            z
        };
    }
    Ok(h.log_softmax_rows()?)
}

#[derive(Debug, Clone)]
pub struct TrackedLayer<'t> {
    pub mu: Var<'t>,
    pub log_var: Var<'t>,
}

/// A [`StochasticNet`] recorded on a tape.
#[derive(Debug, Clone)]
pub struct TrackedNet<'t> {
    pub layers: Vec<TrackedLayer<'t>>,
}

impl<'t> TrackedNet<'t> {
    /// Reparameterized weights, differentiable in `mu` and `log_var`.
    pub fn sample_weights(&self, noise: &[Tensor]) -> Result<Vec<Var<'t>>, NetError> {
        self.layers
            .iter()
            .zip(noise)
            .map(|(l, eps)| {
                let tape = l.mu.tape();
                let eps = tape.constant(eps.clone());
                let std = l.log_var.scale(0.5).exp();
                Ok(l.mu.add(std.mul(eps)?)?)
            })
            .collect()
    }

    /// Means shifted by a constant; gradients still flow to the original means.
    pub fn shifted(&self, shift: &[Tensor]) -> Result<TrackedNet<'t>, NetError> {
        let layers = self
            .layers
            .iter()
            .zip(shift)
            .map(|(l, s)| {
                let s = l.mu.tape().constant(s.clone());
                Ok(TrackedLayer {
                    mu: l.mu.add(s)?,
                    log_var: l.log_var,
                })
            })
            .collect::<Result<Vec<_>, NetError>>()?;
        Ok(TrackedNet { layers })
    }

    /// Tape version of [`kl_factorized_gaussian`]; `self` is q.
    pub fn kl_to(&self, prior: &TrackedNet<'t>) -> Result<Var<'t>, NetError> {
        let mut total: Option<Var<'t>> = None;
        for (q, p) in self.layers.iter().zip(&prior.layers) {
            let log_ratio = p.log_var.sub(q.log_var)?;
            let gap = q.mu.sub(p.mu)?.square();
            let var_ratio = q.log_var.sub(p.log_var)?.exp();
            let gap_term = gap.mul(p.log_var.scale(-1.0).exp())?;
            let term = log_ratio.add(var_ratio)?.add(gap_term)?.add_scalar(-1.0).sum();
            total = Some(match total {
                Some(acc) => acc.add(term)?,
                None => term,
            });
        }
        Ok(total.expect("at least one layer").scale(0.5))
    }

    /// Tape version of [`kl_hyper`].
    pub fn kl_hyper(&self, cfg: &HyperConfig, mode: HyperKlMode) -> Result<Var<'t>, NetError> {
        let mut norm: Option<Var<'t>> = None;
        for l in &self.layers {
            let s = l.mu.square().sum();
            norm = Some(match norm {
                Some(acc) => acc.add(s)?,
                None => s,
            });
        }
        let (slope, offset) = cfg.coefficients(mode);
        Ok(norm.expect("at least one layer").scale(slope).add_scalar(offset))
    }
}

/// Tape forward pass for concrete weights.
pub fn forward<'t>(weights: &[Var<'t>], inputs: Var<'t>) -> Result<Var<'t>, NetError> {
    let mut h = inputs;
    for (j, w) in weights.iter().enumerate() {
        let fan_in = w.value().rows() - 1;
        let z = h
            .matmul(w.slice_rows(0, fan_in)?)?
            .add_bias(w.slice_rows(fan_in, fan_in + 1)?)?;
        h = if j + 1 < weights.len() { z.relu() } else { z };
    }
    Ok(h.log_softmax()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, tag};

    fn small_arch() -> Arch {
        Arch::mlp(3, &[4], 2).unwrap()
    }

    #[test]
    fn degenerate_variance_returns_means() {
        let mut rng = stream(1, tag::INIT, 0);
        let mut net = StochasticNet::init(small_arch(), &mut rng);
        for l in net.layers_mut() {
            l.log_var = Tensor::full(l.log_var.shape(), -100.0);
        }
        let w = sample_weights(&net, &mut rng);
        for (wj, l) in w.iter().zip(net.layers()) {
            for (a, b) in wj.data().iter().zip(l.mu.data()) {
                assert!((a - b).abs() <= 1e-20);
            }
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let net = StochasticNet::init(small_arch(), &mut stream(1, tag::INIT, 0));
        let a = sample_weights(&net, &mut stream(9, tag::TRAIN, 0));
        let b = sample_weights(&net, &mut stream(9, tag::TRAIN, 0));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_kappa_keeps_center() {
        let net = StochasticNet::init(small_arch(), &mut stream(1, tag::INIT, 0));
        let out = perturb_center(&net, 0.0, &mut stream(2, tag::TRAIN, 0)).unwrap();
        assert_eq!(out, net);
        assert!(perturb_center(&net, -1.0, &mut stream(2, tag::TRAIN, 0)).is_err());
    }

    #[test]
    fn perturbation_copies_log_var() {
        let net = StochasticNet::init(small_arch(), &mut stream(1, tag::INIT, 0));
        let out = perturb_center(&net, 0.5, &mut stream(2, tag::TRAIN, 0)).unwrap();
        for (a, b) in out.layers().iter().zip(net.layers()) {
            assert_eq!(a.log_var, b.log_var);
            assert_ne!(a.mu, b.mu);
        }
    }

    #[test]
    fn kl_of_identical_nets_is_zero() {
        let net = StochasticNet::init(small_arch(), &mut stream(1, tag::INIT, 0));
        assert_eq!(kl_factorized_gaussian(&net, &net).unwrap(), 0.0);
    }

    #[test]
    fn kl_single_weight_unit_shift() {
        let arch = Arch::new(vec![1, 1]).unwrap();
        // two weights (weight + bias); put the shift on one, match the other
        let q = StochasticNet::new(
            arch.clone(),
            vec![GaussianLayerParams {
                mu: Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap(),
                log_var: Tensor::zeros(&[2, 1]),
            }],
        )
        .unwrap();
        let p = StochasticNet::new(
            arch,
            vec![GaussianLayerParams {
                mu: Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap(),
                log_var: Tensor::zeros(&[2, 1]),
            }],
        )
        .unwrap();
        assert!((kl_factorized_gaussian(&q, &p).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_rejects_arch_mismatch() {
        let a = StochasticNet::init(small_arch(), &mut stream(1, tag::INIT, 0));
        let b = StochasticNet::init(Arch::mlp(3, &[5], 2).unwrap(), &mut stream(1, tag::INIT, 0));
        assert!(matches!(kl_factorized_gaussian(&a, &b), Err(NetError::Mismatch { .. })));
    }

    #[test]
    fn hyper_kl_matched_isotropic_is_zero() {
        let arch = small_arch();
        let mut net = StochasticNet::init(arch.clone(), &mut stream(1, tag::INIT, 0));
        for l in net.layers_mut() {
            l.mu = l.mu.zeros_like();
        }
        let cfg = HyperConfig::new(0.3, 0.3, arch.n_params()).unwrap();
        assert!(kl_hyper(&net, &cfg, HyperKlMode::Scalar).abs() < 1e-15);
        assert!(kl_hyper(&net, &cfg, HyperKlMode::Dimensional).abs() < 1e-12);
    }

    #[test]
    fn hyper_kl_scalar_constants() {
        let cfg = HyperConfig::new(2000.0, 0.001, 10).unwrap();
        let got = kl_hyper_from_norm(0.0, &cfg, HyperKlMode::Scalar);
        // (1e-6)/(8e6) + ln(2e6) - 0.5, evaluated with mpmath
        let expected = 14.008657738524316;
        assert!((got - expected).abs() < 1e-12, "{got}");
    }

    #[test]
    fn hyper_kl_modes_agree_in_one_dimension() {
        let cfg = HyperConfig::new(1.7, 0.4, 1).unwrap();
        for norm in [0.0, 0.3, 2.5] {
            let a = kl_hyper_from_norm(norm, &cfg, HyperKlMode::Scalar);
            let b = kl_hyper_from_norm(norm, &cfg, HyperKlMode::Dimensional);
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weights_predict_uniform() {
        let arch = Arch::mlp(3, &[4], 5).unwrap();
        let weights: Vec<Tensor> = (0..arch.n_layers()).map(|j| Tensor::zeros(&arch.layer_shape(j))).collect();
        let x = Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 1.0, 1.0, 1.0]).unwrap();
        let out = predict(&weights, &x).unwrap();
        for v in out.data() {
            assert!((v + (5f64).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn hand_computed_two_class_softmax() {
        // identity weights, zero bias, one-hot input [1, 0] -> logits [1, 0]
        let w = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let x = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let out = predict(&[w], &x).unwrap();
        // log(e / (e + 1)) and log(1 / (e + 1))
        let e = std::f64::consts::E;
        assert!((out.data()[0] - (e / (e + 1.0)).ln()).abs() < 1e-15);
        assert!((out.data()[1] - (1.0 / (e + 1.0)).ln()).abs() < 1e-15);
    }

    #[test]
    fn predict_rows_normalize() {
        let net = StochasticNet::init(Arch::mlp(4, &[6, 5], 3).unwrap(), &mut stream(3, tag::INIT, 0));
        let w = sample_weights(&net, &mut stream(3, tag::TRAIN, 0));
        let x = standard_normal(&mut stream(3, tag::TASK, 0), &[7, 4]);
        let out = predict(&w, &x).unwrap();
        for row in out.data().chunks(3) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-10);
        }
        assert!(predict(&w, &standard_normal(&mut stream(3, tag::TASK, 1), &[7, 5])).is_err());
    }

    #[test]
    fn tracked_and_plain_paths_agree() {
        let arch = Arch::mlp(3, &[4], 2).unwrap();
        let q = StochasticNet::init(arch.clone(), &mut stream(4, tag::INIT, 0));
        let mut p = StochasticNet::init(arch.clone(), &mut stream(5, tag::INIT, 0));
        for l in p.layers_mut() {
            l.log_var = l.log_var.map(|v| v + 9.0);
        }
        let tape = Tape::new();
        let tq = q.track(&tape);
        let tp = p.track(&tape);
        let kl = tq.kl_to(&tp).unwrap().item();
        let plain = kl_factorized_gaussian(&q, &p).unwrap();
        assert!((kl - plain).abs() < 1e-9 * plain.abs().max(1.0));

        let noise = draw_noise(&arch, &mut stream(6, tag::TRAIN, 0));
        let x = standard_normal(&mut stream(6, tag::TASK, 0), &[5, 3]);
        let w_plain = weights_from_noise(&q, &noise).unwrap();
        let w_var = tq.sample_weights(&noise).unwrap();
        let out_var = forward(&w_var, tape.constant(x.clone())).unwrap();
        assert_eq!(*out_var.value(), predict(&w_plain, &x).unwrap());

        let cfg = HyperConfig::new(2.0, 0.1, arch.n_params()).unwrap();
        let h_var = tq.kl_hyper(&cfg, HyperKlMode::Dimensional).unwrap().item();
        assert!((h_var - kl_hyper(&q, &cfg, HyperKlMode::Dimensional)).abs() < 1e-9);
    }

    #[test]
    fn expected_center_noise_kl_adds_variance_term() {
        let arch = Arch::new(vec![1, 1]).unwrap();
        let q = StochasticNet::new(
            arch.clone(),
            vec![GaussianLayerParams {
                mu: Tensor::zeros(&[2, 1]),
                log_var: Tensor::zeros(&[2, 1]),
            }],
        )
        .unwrap();
        // two weights, prior variance 1: 0.5 * 2 * kappa²
        let got = expected_kl_under_center_noise(&q, &q, 0.5).unwrap();
        assert!((got - 0.25).abs() < 1e-15);
    }
}
