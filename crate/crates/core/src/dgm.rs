//! Deep Galerkin training: uniform sampling of the space-time box, the
//! interior-residual plus terminal-misfit loss, and Adam (or plain SGD) with a
//! staircase exponential learning-rate schedule.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CoefficientSet, Market, StateDomain};
use crate::net::{JetAdjoint, NetJet, Network};
use crate::pde::{self, U_GUARD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_hidden: usize,
    pub n_interior: usize,
    pub n_terminal: usize,
    /// Outer steps between fresh batch draws.
    pub resample_every: usize,
    /// Gradient updates per outer step.
    pub inner_steps: usize,
    pub lr_init: f64,
    pub lr_decay: f64,
    /// Outer steps per learning-rate stage.
    pub lr_decay_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_outer_steps: usize,
    /// Optional early stop on `||theta_{n+1} - theta_n||`.
    pub param_delta_tol: Option<f64>,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_hidden: 50,
            n_interior: 1000,
            n_terminal: 100,
            resample_every: 100,
            inner_steps: 10,
            lr_init: 1e-3,
            lr_decay: 0.96,
            lr_decay_every: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_outer_steps: 5000,
            param_delta_tol: None,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_hidden", self.n_hidden),
            ("n_interior", self.n_interior),
            ("n_terminal", self.n_terminal),
            ("resample_every", self.resample_every),
            ("inner_steps", self.inner_steps),
            ("lr_decay_every", self.lr_decay_every),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidParameter(format!("{name} must be at least 1")));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(Error::InvalidParameter("lr_decay must lie in (0, 1)".into()));
        }
        if !(self.lr_init >= 0.0) {
            return Err(Error::InvalidParameter("lr_init must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::InvalidParameter("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::InvalidParameter("adam_eps must be positive".into()));
        }
        Ok(())
    }

    /// `lr_init * lr_decay^floor(outer_step / lr_decay_every)`.
    pub fn learning_rate(&self, outer_step: usize) -> f64 {
        let stage = (outer_step / self.lr_decay_every) as i32;
        self.lr_init * self.lr_decay.powi(stage)
    }
}

/// Interior points `(t, y1, y2)` and terminal points `(T, y1, y2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub interior: Vec<[f64; 3]>,
    pub terminal: Vec<[f64; 3]>,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn sample_interior(domain: &StateDomain, n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            let t = uniform(rng, 0.0, domain.horizon);
            let y1 = uniform(rng, domain.y1_lo, domain.y1_hi);
            let y2 = uniform(rng, domain.y2_lo, domain.y2_hi);
            [t, y1, y2]
        })
        .collect()
}

pub fn sample_terminal(domain: &StateDomain, n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            let y1 = uniform(rng, domain.y1_lo, domain.y1_hi);
            let y2 = uniform(rng, domain.y2_lo, domain.y2_hi);
            [domain.horizon, y1, y2]
        })
        .collect()
}

impl SampleBatch {
    pub fn draw(domain: &StateDomain, n_interior: usize, n_terminal: usize, rng: &mut ChaCha8Rng) -> Self {
        let interior = sample_interior(domain, n_interior, rng);
        let terminal = sample_terminal(domain, n_terminal, rng);
        Self { interior, terminal }
    }
}

/// A batch together with the PDE coefficients at its interior points, which
/// stay fixed until the next draw.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub batch: SampleBatch,
    pub coeffs: Vec<CoefficientSet>,
}

impl PreparedBatch {
    pub fn new(batch: SampleBatch, model: &dyn Market) -> Result<Self> {
        if batch.interior.is_empty() || batch.terminal.is_empty() {
            return Err(Error::InvalidParameter("batch must have interior and terminal points".into()));
        }
        let coeffs = batch
            .interior
            .iter()
            .map(|p| model.coefficients(&p[1..]))
            .collect::<Result<_>>()?;
        Ok(Self { batch, coeffs })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub j: f64,
    pub j1: f64,
    pub j2: f64,
}

/// Anything that can produce a value/derivative jet at `(t, y)`.
pub trait JetSource {
    fn jet_at(&self, t: f64, y: &[f64]) -> NetJet;
}

impl JetSource for Network {
    fn jet_at(&self, t: f64, y: &[f64]) -> NetJet {
        self.jet(t, y)
    }
}

/// `J1 = mean residual^2` over interior points, `J2 = mean (f(T, y) - 1)^2`.
pub fn loss<S: JetSource + ?Sized>(source: &S, batch: &SampleBatch, model: &dyn Market) -> Result<LossParts> {
    if batch.interior.is_empty() || batch.terminal.is_empty() {
        return Err(Error::InvalidParameter("batch must have interior and terminal points".into()));
    }
    let mut j1 = 0.0;
    for p in &batch.interior {
        let jet = source.jet_at(p[0], &p[1..]);
        let coeffs = model.coefficients(&p[1..])?;
        let r = pde::residual_parts(jet.value, jet.dt, &jet.grad, &jet.hess, &coeffs)?;
        j1 += r * r;
    }
    j1 /= batch.interior.len() as f64;
    let mut j2 = 0.0;
    for p in &batch.terminal {
        let e = source.jet_at(p[0], &p[1..]).value - pde::terminal_value(&p[1..]);
        j2 += e * e;
    }
    j2 /= batch.terminal.len() as f64;
    Ok(LossParts { j: j1 + j2, j1, j2 })
}

/// Loss and its exact parameter gradient. With `tolerant`, interior points
/// where `|u| < U_GUARD` are dropped from `J1` and counted instead of failing.
pub fn loss_and_gradient(
    net: &Network,
    prepared: &PreparedBatch,
    tolerant: bool,
) -> Result<(LossParts, Vec<f64>, usize)> {
    let d = net.dim();
    let n_int = prepared.batch.interior.len() as f64;
    let n_ter = prepared.batch.terminal.len() as f64;
    let skipped = AtomicUsize::new(0);

    let (j1, g1) = net.loss_param_gradient(&prepared.batch.interior, |k, jet| {
        let coeffs = &prepared.coeffs[k];
        let sens = match pde::residual_with_sensitivity(jet.value, jet.dt, &jet.grad, &jet.hess, coeffs) {
            Ok(s) => s,
            Err(Error::DivisionHazard { .. }) if tolerant => {
                skipped.fetch_add(1, Ordering::Relaxed);
                return Ok((0.0, JetAdjoint::value_only(d, 0.0)));
            }
            Err(e) => return Err(e),
        };
        let w = 2.0 * sens.value / n_int;
        Ok((
            sens.value * sens.value / n_int,
            JetAdjoint {
                value: w * sens.d_u,
                dt: w,
                grad: sens.d_grad * w,
                hess: &coeffs.second_order * w,
            },
        ))
    })?;
    let (j2, g2) = net.loss_param_gradient(&prepared.batch.terminal, |_, jet| {
        let e = jet.value - 1.0;
        Ok((e * e / n_ter, JetAdjoint::value_only(d, 2.0 * e / n_ter)))
    })?;
    let grad = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
    Ok((LossParts { j: j1 + j2, j1, j2 }, grad, skipped.into_inner()))
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// Applies one update and returns `||delta theta||_2`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> f64 {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut norm2 = 0.0;
        for k in 0..params.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grad[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
            let delta = lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + self.eps);
            params[k] -= delta;
            norm2 += delta * delta;
        }
        norm2.sqrt()
    }
}

#[derive(Debug, Clone)]
enum Optimizer {
    Adam(Adam),
    Sgd,
}

impl Optimizer {
    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> f64 {
        match self {
            Optimizer::Adam(a) => a.step(params, grad, lr),
            Optimizer::Sgd => {
                let mut norm2 = 0.0;
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                    norm2 += (lr * g) * (lr * g);
                }
                norm2.sqrt()
            }
        }
    }
}

/// One gradient update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRecord {
    pub step: usize,
    pub j: f64,
    pub j1: f64,
    pub j2: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    pub history: Vec<HistoryRecord>,
}

pub fn train(
    mut net: Network,
    cfg: &TrainConfig,
    model: &dyn Market,
    domain: &StateDomain,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = match cfg.optimizer {
        OptimizerKind::Adam => Optimizer::Adam(Adam::new(
            net.params().len(),
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_eps,
        )),
        OptimizerKind::Sgd => Optimizer::Sgd,
    };
    let mut history = Vec::with_capacity(cfg.max_outer_steps * cfg.inner_steps);
    let mut prepared: Option<PreparedBatch> = None;
    let mut update = 0usize;

    'outer: for outer in 0..cfg.max_outer_steps {
        if outer % cfg.resample_every == 0 {
            let batch = SampleBatch::draw(domain, cfg.n_interior, cfg.n_terminal, &mut rng);
            prepared = Some(PreparedBatch::new(batch, model)?);
        }
        let batch = prepared.as_ref().expect("batch drawn at outer step 0");
        let lr = cfg.learning_rate(outer);
        for _ in 0..cfg.inner_steps {
            let (parts, grad, skipped) = loss_and_gradient(&net, batch, true).map_err(|e| match e {
                Error::NonFiniteGradient => Error::TrainingAborted {
                    step: update,
                    reason: "non-finite loss or gradient".into(),
                },
                other => other,
            })?;
            if 2 * skipped > batch.batch.interior.len() {
                return Err(Error::TrainingAborted {
                    step: update,
                    reason: format!(
                        "network output collapsed below {U_GUARD:e} on {skipped} of {} interior points",
                        batch.batch.interior.len()
                    ),
                });
            }
            if !parts.j.is_finite() {
                return Err(Error::TrainingAborted {
                    step: update,
                    reason: format!("loss is {}", parts.j),
                });
            }
            history.push(HistoryRecord {
                step: update,
                j: parts.j,
                j1: parts.j1,
                j2: parts.j2,
                lr,
            });
            let delta = optimizer.step(net.params_mut(), &grad, lr);
            update += 1;
            if cfg.param_delta_tol.is_some_and(|tol| delta < tol) {
                break 'outer;
            }
        }
    }
    Ok(TrainOutcome { net, history })
}

pub fn write_history_csv<W: Write>(history: &[HistoryRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "step,J,J1,J2,lr")?;
    for h in history {
        writeln!(out, "{},{:.16e},{:.16e},{:.16e},{:.16e}", h.step, h.j, h.j1, h.j2, h.lr)?;
    }
    Ok(())
}

/// Jet of an explicit function, for checking the loss without a network.
pub struct AnalyticJet<F>(pub F);

impl<F> JetSource for AnalyticJet<F>
where
    F: Fn(f64, &[f64]) -> (f64, f64, DVector<f64>, DMatrix<f64>),
{
    fn jet_at(&self, t: f64, y: &[f64]) -> NetJet {
        let (value, dt, grad, hess) = (self.0)(t, y);
        NetJet {
            value,
            dt,
            grad,
            hess,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConstantModel, HestonModel, ModelConfig};
    use crate::pde::constant_oracle;

    fn domain() -> StateDomain {
        ModelConfig::reference().domain
    }

    fn constant_net(value: f64) -> Network {
        let (lo, hi) = domain().input_bounds();
        let mut net = Network::init(5, &lo, &hi, 1).unwrap();
        net.output_weights_mut().fill(0.0);
        *net.output_bias_mut() = value;
        net
    }

    #[test]
    fn interior_samples_stay_in_box() {
        let dom = domain();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = sample_interior(&dom, 1000, &mut rng);
        assert_eq!(pts.len(), 1000);
        assert!(pts.iter().all(|p| dom.contains(p[0], &p[1..])));
    }

    #[test]
    fn degenerate_box_pins_coordinate() {
        let mut dom = domain();
        dom.y1_lo = 2.5;
        dom.y1_hi = 2.5;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(sample_interior(&dom, 50, &mut rng).iter().all(|p| p[1] == 2.5));
    }

    #[test]
    fn terminal_samples_sit_at_horizon() {
        let dom = domain();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = sample_terminal(&dom, 100, &mut rng);
        assert!(pts.iter().all(|p| p[0] == dom.horizon));
        let one = sample_terminal(&dom, 1, &mut rng);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0][0], dom.horizon);
    }

    #[test]
    fn sampling_is_reproducible() {
        let dom = domain();
        let a = SampleBatch::draw(&dom, 20, 5, &mut ChaCha8Rng::seed_from_u64(9));
        let b = SampleBatch::draw(&dom, 20, 5, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn constant_one_network_losses() {
        let model = HestonModel::from_config(&ModelConfig::reference()).unwrap();
        let net = constant_net(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut batch = SampleBatch::draw(&domain(), 50, 10, &mut rng);
        for p in &mut batch.interior {
            p[1] = 0.0;
        }
        let parts = loss(&net, &batch, &model).unwrap();
        assert_eq!(parts.j2, 0.0);
        let pr = model.p() * model.r();
        assert!((parts.j1 - pr * pr).abs() <= 1e-24);
        assert_eq!(parts.j, parts.j1 + parts.j2);
    }

    #[test]
    fn analytic_solution_has_zero_loss() {
        let model = ConstantModel::new(0.5, 0.01, 0.0, 0.04, 1.0).unwrap();
        let c = model.decay_rate();
        let oracle = AnalyticJet(|t: f64, _y: &[f64]| {
            let u = constant_oracle(t, c, 1.0);
            (u, -c * u, DVector::zeros(2), DMatrix::zeros(2, 2))
        });
        let batch = SampleBatch::draw(&domain(), 200, 20, &mut ChaCha8Rng::seed_from_u64(5));
        let parts = loss(&oracle, &batch, &model).unwrap();
        assert!(parts.j <= 1e-20, "{parts:?}");
    }

    #[test]
    fn gradient_loss_agrees_with_plain_loss() {
        let model = HestonModel::from_config(&ModelConfig::reference()).unwrap();
        let (lo, hi) = domain().input_bounds();
        let mut net = Network::init(8, &lo, &hi, 3).unwrap();
        *net.output_bias_mut() = 1.5;
        let batch = SampleBatch::draw(&domain(), 64, 16, &mut ChaCha8Rng::seed_from_u64(6));
        let plain = loss(&net, &batch, &model).unwrap();
        let prepared = PreparedBatch::new(batch, &model).unwrap();
        let (parts, _, skipped) = loss_and_gradient(&net, &prepared, false).unwrap();
        assert_eq!(skipped, 0);
        assert!((plain.j1 - parts.j1).abs() <= 1e-12 * plain.j1.abs().max(1.0));
        assert!((plain.j2 - parts.j2).abs() <= 1e-14);
    }

    #[test]
    fn learning_rate_staircase() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate(0), 1e-3);
        assert_eq!(cfg.learning_rate(99), 1e-3);
        assert_eq!(cfg.learning_rate(100), 1e-3 * 0.96);
        assert_eq!(cfg.learning_rate(199), 1e-3 * 0.96);
        assert_eq!(cfg.learning_rate(200), 1e-3 * 0.96f64.powi(2));
        assert_eq!(cfg.learning_rate(4999), 1e-3 * 0.96f64.powi(49));
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut adam = Adam::new(4, 0.9, 0.999, 1e-8);
        let mut p = vec![0.1, -0.2, 0.3, 0.4];
        let before = p.clone();
        let d = adam.step(&mut p, &[0.0; 4], 1e-3);
        assert_eq!(p, before);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn step_size_scales_with_learning_rate() {
        let g = [0.3, -1.2, 4.0, 1e-3];
        let mut a1 = Adam::new(4, 0.9, 0.999, 1e-8);
        let mut a2 = a1.clone();
        let mut p1 = vec![0.0; 4];
        let mut p2 = vec![0.0; 4];
        let d1 = a1.step(&mut p1, &g, 1e-3);
        let d2 = a2.step(&mut p2, &g, 2e-3);
        assert!(d2 > d1);
        assert!((d2 - 2.0 * d1).abs() <= 1e-15);
    }

    #[test]
    fn zero_outer_steps_returns_initial_network() {
        let model = HestonModel::from_config(&ModelConfig::reference()).unwrap();
        let (lo, hi) = domain().input_bounds();
        let net = Network::init(6, &lo, &hi, 2).unwrap();
        let cfg = TrainConfig {
            max_outer_steps: 0,
            ..TrainConfig::default()
        };
        let out = train(net.clone(), &cfg, &model, &domain()).unwrap();
        assert_eq!(out.net, net);
        assert!(out.history.is_empty());
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let model = HestonModel::from_config(&ModelConfig::reference()).unwrap();
        let (lo, hi) = domain().input_bounds();
        let net = Network::init(6, &lo, &hi, 2).unwrap();
        let cfg = TrainConfig {
            max_outer_steps: 3,
            n_interior: 50,
            n_terminal: 10,
            lr_init: 0.0,
            ..TrainConfig::default()
        };
        let out = train(net.clone(), &cfg, &model, &domain()).unwrap();
        assert_eq!(out.net.params(), net.params());
        assert_eq!(out.history.len(), 30);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let model = HestonModel::from_config(&ModelConfig::reference()).unwrap();
        let (lo, hi) = domain().input_bounds();
        let cfg = TrainConfig {
            max_outer_steps: 5,
            resample_every: 2,
            n_interior: 100,
            n_terminal: 20,
            seed: 17,
            ..TrainConfig::default()
        };
        let run = || train(Network::init(10, &lo, &hi, 4).unwrap(), &cfg, &model, &domain()).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(a.net, b.net);
        assert!(a.history.last().unwrap().j < a.history[0].j);
    }

    #[test]
    fn collapsed_network_aborts() {
        let model = HestonModel::from_config(&ModelConfig::reference()).unwrap();
        let net = constant_net(0.0);
        let cfg = TrainConfig {
            max_outer_steps: 1,
            n_interior: 20,
            n_terminal: 5,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(net, &cfg, &model, &domain()),
            Err(Error::TrainingAborted { step: 0, .. })
        ));
    }

    #[test]
    fn history_csv_header() {
        let mut buf = Vec::new();
        write_history_csv(&[HistoryRecord { step: 0, j: 1.0, j1: 0.5, j2: 0.5, lr: 1e-3 }], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,J,J1,J2,lr\n0,1.0000000000000000e0,"));
    }
}
