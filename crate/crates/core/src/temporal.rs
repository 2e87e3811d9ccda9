//! Time policies: fixed horizon, randomly sampled horizon, and learned horizon.
//!
//! A training iteration first updates the weights with the horizon held fixed
//! ([`step_weights`]), then, for the learned policy, computes `∂L/∂T` at the
//! new weights ([`temporal_gradient`]) and moves `T` with its own Adam state
//! ([`step_time`]). After every move `T` is clipped into
//! `[t₀ + ε, 2T₀ − t₀ − ε]`, an interval centred on the initial horizon `T₀`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::cnf::{FlowModel, FlowRhs};
use crate::error::{Error, Result};
use crate::odeint;
use crate::optim::{self, AdamConfig, AdamState, ClipReport};
use crate::tensor::Tensor;

/// `sign(x)` with `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Temporal regularization `α·|T|`.
pub fn temporal_regularization(alpha: f64, t_end: f64) -> f64 {
    alpha * t_end.abs()
}

/// Subgradient of [`temporal_regularization`].
pub fn temporal_regularization_grad(alpha: f64, t_end: f64) -> f64 {
    alpha * sign(t_end)
}

/// `[t₀ + ε, 2T₀ − t₀ − ε]`.
pub fn clip_interval(t0: f64, t_end0: f64, epsilon: f64) -> (f64, f64) {
    (t0 + epsilon, 2.0 * t_end0 - t0 - epsilon)
}

pub fn clip(t_end: f64, t0: f64, t_end0: f64, epsilon: f64) -> f64 {
    let (lo, hi) = clip_interval(t0, t_end0, epsilon);
    t_end.max(lo).min(hi)
}

/// Which expression is used for `∂L/∂t₀`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum T0Gradient {
    /// `E[∇ₓ log p(x) · f(x, t₀)] + E[Tr J(x, t₀)]`, the total derivative.
    #[default]
    Exact,
    /// `−E[∇ₓ log N(z(T)) · f(x, t₀)] + E[Tr J(x, t₀)]`.
    Endpoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalOpt {
    pub alpha: f64,
    pub epsilon: f64,
    pub optimize_t0: bool,
    pub t0_gradient: T0Gradient,
    /// Initial horizon `T₀`, the centre of the clip interval.
    pub t_end0: f64,
    pub t0_init: f64,
    /// Adam over `[T]`, or `[T, t₀]` when `t₀` is learned.
    pub adam: AdamState,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PolicyKind {
    Fixed,
    Steer { t_end0: f64, half_width: f64 },
    TemporalOpt(TemporalOpt),
}

/// Current integration interval plus the rule that moves it.
#[derive(Clone, Debug, PartialEq)]
pub struct TimePolicy {
    pub t0: f64,
    pub t_end: f64,
    pub kind: PolicyKind,
}

impl TimePolicy {
    pub fn fixed(t0: f64, t_end: f64) -> Result<Self> {
        let p = Self { t0, t_end, kind: PolicyKind::Fixed };
        p.validate()?;
        Ok(p)
    }

    /// Uniform horizon on `[T₀ − b, T₀ + b]`.
    pub fn steer(t0: f64, t_end0: f64, half_width: f64) -> Result<Self> {
        let p = Self { t0, t_end: t_end0, kind: PolicyKind::Steer { t_end0, half_width } };
        p.validate()?;
        Ok(p)
    }

    pub fn temporal(
        t0: f64,
        t_end0: f64,
        alpha: f64,
        epsilon: f64,
        optimize_t0: bool,
        adam: AdamConfig,
    ) -> Result<Self> {
        let n = if optimize_t0 { 2 } else { 1 };
        let p = Self {
            t0,
            t_end: t_end0,
            kind: PolicyKind::TemporalOpt(TemporalOpt {
                alpha,
                epsilon,
                optimize_t0,
                t0_gradient: T0Gradient::Exact,
                t_end0,
                t0_init: t0,
                adam: AdamState::scalars(adam, n),
            }),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn tag(&self) -> &'static str {
        match self.kind {
            PolicyKind::Fixed => "fixed",
            PolicyKind::Steer { .. } => "steer",
            PolicyKind::TemporalOpt(_) => "temporal",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |path: &str, v: f64| {
            if v.is_finite() { Ok(()) } else { Err(Error::config(path, "must be finite")) }
        };
        finite("policy.t0", self.t0)?;
        finite("policy.T0", self.t_end)?;
        if self.t_end <= self.t0 {
            return Err(Error::config("policy.T0", format!("must exceed t0 = {}", self.t0)));
        }
        match &self.kind {
            PolicyKind::Fixed => Ok(()),
            PolicyKind::Steer { t_end0, half_width } => {
                if !(*half_width >= 0.0 && *half_width < t_end0 - self.t0) {
                    return Err(Error::config(
                        "policy.half_width",
                        format!("must lie in [0, T0 − t0) = [0, {})", t_end0 - self.t0),
                    ));
                }
                Ok(())
            }
            PolicyKind::TemporalOpt(opt) => {
                if !(opt.alpha >= 0.0 && opt.alpha.is_finite()) {
                    return Err(Error::config("policy.alpha", "must be non-negative"));
                }
                if !(opt.epsilon > 0.0 && opt.epsilon <= opt.t_end0 - opt.t0_init) {
                    return Err(Error::config(
                        "policy.epsilon",
                        format!("must lie in (0, T0 − t0] = (0, {}]", opt.t_end0 - opt.t0_init),
                    ));
                }
                opt.adam.config.validate("policy")
            }
        }
    }

    /// Clip interval for `T` at the current `t₀`, if the policy has one.
    pub fn bounds(&self) -> Option<(f64, f64)> {
        match &self.kind {
            PolicyKind::TemporalOpt(opt) => Some(clip_interval(self.t0, opt.t_end0, opt.epsilon)),
            _ => None,
        }
    }

    /// Horizon used for held-out evaluation.
    pub fn eval_t_end(&self) -> f64 {
        match self.kind {
            PolicyKind::Steer { t_end0, .. } => t_end0,
            _ => self.t_end,
        }
    }
}

/// Draws a fresh horizon for a randomly sampled policy and records it as current.
pub fn sample_steer<R: Rng + ?Sized>(policy: &mut TimePolicy, rng: &mut R) -> Result<f64> {
    let PolicyKind::Steer { t_end0, half_width } = policy.kind else {
        return Err(Error::config("policy.tag", format!("sampling requires steer, found {}", policy.tag())));
    };
    let t = if half_width == 0.0 { t_end0 } else { t_end0 - half_width + 2.0 * half_width * rng.random::<f64>() };
    policy.t_end = t;
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemporalGrad {
    pub dl_dt_end: f64,
    pub dl_dt0: Option<f64>,
    /// `mean(∇ log N(z(T)) · f(z(T), T))`.
    pub endpoint_term: f64,
    /// `mean Tr J(z(T), T)`.
    pub trace_term: f64,
}

impl TemporalGrad {
    pub fn assemble(endpoint_term: f64, trace_term: f64, dl_dt0: Option<f64>) -> Self {
        Self { dl_dt_end: -endpoint_term - trace_term, dl_dt0, endpoint_term, trace_term }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightStep {
    pub loss: f64,
    pub clip: ClipReport,
    pub nfe: usize,
}

/// Gradient of the negative log-likelihood of `batch` with respect to the
/// network parameters, in [`DynamicsNet::params`](crate::dynamics::DynamicsNet::params) order.
pub fn weight_gradients(model: &FlowModel, batch: &Tensor) -> Result<(f64, Vec<Tensor>, usize)> {
    let mut tape = Tape::new();
    let vars = model.net.register(&mut tape)?;
    let taped = model.taped_loss(&mut tape, &vars, batch)?;
    let wrt = vars.all();
    let grads = tape.backward(taped.loss, &wrt)?;
    let grads = wrt
        .iter()
        .map(|v| grads.get(*v).cloned().ok_or(Error::NotOnTape(v.id())))
        .collect::<Result<Vec<_>>>()?;
    Ok((tape.value(taped.loss).item(), grads, taped.solve.solution.nfe))
}

/// One optimizer step on the weights with the horizon held at `model.t_end`.
/// On error the weights and optimizer state are untouched.
pub fn step_weights(model: &mut FlowModel, batch: &Tensor, opt: &mut AdamState, clip: f64) -> Result<WeightStep> {
    let (loss, mut grads, nfe) = weight_gradients(model, batch)?;
    let report = optim::clip_global_norm(&mut grads, clip)?;
    opt.step(model.net.params_mut(), &grads)?;
    Ok(WeightStep { loss, clip: report, nfe })
}

/// `∂L/∂T` at the current weights from a fresh forward solve of `batch`, and
/// `∂L/∂t₀` when `t0_gradient` is given.
pub fn temporal_gradient(model: &FlowModel, batch: &Tensor, t0_gradient: Option<T0Gradient>) -> Result<TemporalGrad> {
    let b = batch.rows();
    let mut tape = Tape::new();
    let vars = model.net.register_frozen(&mut tape)?;
    let rhs = FlowRhs::new(&mut tape, &model.net, &vars, &model.trace, b)?;
    let mark = tape.len();

    let sol = odeint::integrate(&rhs, &mut tape, batch, &Tensor::zeros(b, 1), model.t0, model.t_end, &model.solver)
        .map_err(|e| Error::Batch { batch: b, source: Box::new(e) })?;
    let z_end = tape.constant(sol.z_end.clone())?;
    let (f, div) = rhs.velocity_and_divergence(&mut tape, model.t_end, z_end)?;
    let endpoint_term = -sol.z_end.mul(tape.value(f)).sum() / b as f64;
    let trace_term = tape.value(div).mean();
    tape.truncate(mark);

    let dl_dt0 = match t0_gradient {
        None => None,
        Some(form) => {
            let x = tape.leaf(batch.clone())?;
            let l0 = tape.constant(Tensor::zeros(b, 1))?;
            let solve = odeint::integrate_with_tape(&rhs, &mut tape, x, l0, model.t0, model.t_end, &model.solver)
                .map_err(|e| Error::Batch { batch: b, source: Box::new(e) })?;
            let base = crate::cnf::standard_normal_logp_taped(&mut tape, solve.z_end)?;
            let root = match form {
                T0Gradient::Exact => tape.sub(base, solve.delta_logp)?,
                T0Gradient::Endpoint => base,
            };
            let grads = tape.gradients(root, &Tensor::full(b, 1, 1.0), &[x])?;
            let gx = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(b, batch.cols()));
            let (f0, div0) = rhs.velocity_and_divergence(&mut tape, model.t0, x)?;
            let flux = gx.mul(tape.value(f0)).sum() / b as f64;
            let trace0 = tape.value(div0).mean();
            Some(match form {
                T0Gradient::Exact => flux + trace0,
                T0Gradient::Endpoint => -flux + trace0,
            })
        }
    };
    Ok(TemporalGrad::assemble(endpoint_term, trace_term, dl_dt0))
}

/// Moves the horizon (and `t₀` when learned) by one Adam step on the
/// regularized gradient, then clips.
pub fn step_time(policy: &mut TimePolicy, grad: &TemporalGrad) -> Result<()> {
    let t0_old = policy.t0;
    let PolicyKind::TemporalOpt(opt) = &mut policy.kind else {
        return Err(Error::config("policy.tag", format!("time step requires temporal, found {}", policy.tag())));
    };
    let g_end = grad.dl_dt_end + temporal_regularization_grad(opt.alpha, policy.t_end);
    if opt.optimize_t0 {
        let Some(dl_dt0) = grad.dl_dt0 else {
            return Err(Error::config("policy.optimize_t0", "gradient for t0 was not computed"));
        };
        let g0 = dl_dt0 + temporal_regularization_grad(opt.alpha, policy.t0);
        let mut p = [policy.t_end, policy.t0];
        opt.adam.step_scalars(&mut p, &[g_end, g0])?;
        let t_end = clip(p[0], t0_old, opt.t_end0, opt.epsilon);
        let reach = opt.t_end0 - opt.epsilon;
        let t0 = p[1].max(2.0 * opt.t0_init - reach).min(reach);
        policy.t0 = t0;
        policy.t_end = clip(t_end, t0, opt.t_end0, opt.epsilon);
    } else {
        let mut p = [policy.t_end];
        opt.adam.step_scalars(&mut p, &[g_end])?;
        policy.t_end = clip(p[0], policy.t0, opt.t_end0, opt.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnf::TraceMode;
    use crate::dynamics::DynamicsNet;
    use crate::odeint::SolverConfig;
    use crate::rng::seeded;

    #[test]
    fn clip_examples() {
        assert_eq!(clip(2.5, 0.0, 1.0, 0.1), 1.9);
        assert_eq!(clip(0.05, 0.0, 1.0, 0.1), 0.1);
        assert_eq!(clip(0.7, 0.0, 1.0, 0.1), 0.7);
    }

    #[test]
    fn regularization_values() {
        assert_eq!(temporal_regularization(0.1, 1.0), 0.1);
        assert_eq!(temporal_regularization_grad(0.1, 1.0), 0.1);
        assert_eq!(temporal_regularization_grad(0.1, 0.0), 0.0);
        assert_eq!(temporal_regularization_grad(0.1, -2.0), -0.1);
    }

    #[test]
    fn zero_gradient_fixed_point() {
        let mut p = TimePolicy::temporal(0.0, 0.5, 0.0, 0.1, false, AdamConfig::with_lr(1e-2)).unwrap();
        step_time(&mut p, &TemporalGrad::assemble(0.0, 0.0, None)).unwrap();
        assert_eq!(p.t_end, 0.5);
    }

    #[test]
    fn steer_degenerate_and_bounded() {
        let mut p = TimePolicy::steer(0.0, 1.0, 0.0).unwrap();
        let mut rng = seeded(1);
        assert_eq!(sample_steer(&mut p, &mut rng).unwrap(), 1.0);
        let mut p = TimePolicy::steer(0.0, 1.0, 0.25).unwrap();
        for _ in 0..1000 {
            let t = sample_steer(&mut p, &mut rng).unwrap();
            assert!((0.75..=1.25).contains(&t));
        }
        assert!(TimePolicy::steer(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn policy_validation() {
        assert!(TimePolicy::temporal(0.0, 0.5, 0.1, 0.6, false, AdamConfig::default()).is_err());
        assert!(TimePolicy::temporal(0.0, 0.5, -1.0, 0.1, false, AdamConfig::default()).is_err());
        assert!(TimePolicy::fixed(1.0, 0.5).is_err());
        let mut f = TimePolicy::fixed(0.0, 0.5).unwrap();
        assert!(step_time(&mut f, &TemporalGrad::assemble(1.0, 0.0, None)).is_err());
        assert!(sample_steer(&mut f, &mut seeded(0)).is_err());
    }

    #[test]
    fn zero_net_has_zero_time_gradient() {
        let model = FlowModel::new(
            DynamicsNet::zeros(2, &[8]),
            0.0,
            0.5,
            SolverConfig::default(),
            TraceMode::exact(),
        )
        .unwrap();
        let x = Tensor::new(3, 2, vec![0.1, 0.2, -1.0, 0.4, 2.0, -0.3]).unwrap();
        let g = temporal_gradient(&model, &x, Some(T0Gradient::Exact)).unwrap();
        assert_eq!(g.dl_dt_end, 0.0);
        assert_eq!(g.dl_dt0, Some(0.0));
    }

    #[test]
    fn step_weights_on_stationary_point_keeps_weights() {
        let net = DynamicsNet::init(2, &[4], &mut seeded(3));
        let mut model = FlowModel::new(net.clone(), 0.0, 0.5, SolverConfig::default(), TraceMode::exact()).unwrap();
        let mut opt = AdamState::for_params(AdamConfig::default(), &net.params());
        // Non-finite data aborts before any update.
        let bad = Tensor::new(1, 2, vec![f64::NAN, 0.0]).unwrap();
        assert!(step_weights(&mut model, &bad, &mut opt, 10.0).is_err());
        assert_eq!(model.net, net);
        assert_eq!(opt.step_count, 0);
    }
}
