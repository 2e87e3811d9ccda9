//! The continuous normalizing flow built on [`DynamicsNet`].
//!
//! Data `x = z(t₀)` is pushed forward to `z(T)`, where the base density is an
//! isotropic standard normal. Along the way `Δ = −∫ Tr(∂f/∂z) dt` is
//! co-integrated, so that `log p(x) = log N(z(T)) − Δ`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dynamics::{DynamicsNet, NetVars};
use crate::error::{Error, Result};
use crate::odeint::{self, AugmentedRhs, OdeSolution, SolverConfig, TapedSolve};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Largest dimension for which the exact trace is allowed by default.
pub const EXACT_TRACE_DIM_CAP: usize = 8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceKind {
    Exact,
    Hutchinson,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Noise {
    Rademacher,
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceMode {
    pub kind: TraceKind,
    pub noise: Noise,
    pub n_probes: usize,
    pub probe_seed: u64,
    pub exact_dim_cap: usize,
}

impl Default for TraceMode {
    fn default() -> Self {
        Self::hutchinson(1, 0)
    }
}

impl TraceMode {
    pub fn exact() -> Self {
        Self { kind: TraceKind::Exact, ..Self::hutchinson(1, 0) }
    }

    pub fn hutchinson(n_probes: usize, probe_seed: u64) -> Self {
        Self {
            kind: TraceKind::Hutchinson,
            noise: Noise::Rademacher,
            n_probes,
            probe_seed,
            exact_dim_cap: EXACT_TRACE_DIM_CAP,
        }
    }

    /// Trace used for reported test losses: exact when `d` is within the cap,
    /// otherwise Hutchinson with 16 probes.
    pub fn for_evaluation(d: usize, probe_seed: u64) -> Self {
        if d <= EXACT_TRACE_DIM_CAP {
            Self::exact()
        } else {
            Self::hutchinson(16, probe_seed)
        }
    }

    pub fn with_seed(&self, probe_seed: u64) -> Self {
        Self { probe_seed, ..self.clone() }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self.kind {
            TraceKind::Exact if dim > self.exact_dim_cap => {
                Err(Error::DimensionCap { dim, cap: self.exact_dim_cap })
            }
            TraceKind::Hutchinson if self.n_probes == 0 => Err(Error::config("trace.n_probes", "must be at least 1")),
            _ => Ok(()),
        }
    }

    /// Probe matrices (`batch × dim` each) for one solve.
    pub fn draw_probes(&self, batch: usize, dim: usize) -> Vec<Tensor> {
        let mut rng = rng::seeded(self.probe_seed);
        (0..self.n_probes)
            .map(|_| {
                let data = (0..batch * dim)
                    .map(|_| match self.noise {
                        Noise::Rademacher => {
                            if rng.random::<bool>() {
                                1.0
                            } else {
                                -1.0
                            }
                        }
                        Noise::Gaussian => rng.sample(StandardNormal),
                    })
                    .collect();
                Tensor::new(batch, dim, data).expect("probe shape")
            })
            .collect()
    }
}

/// Per-row `log N(z; 0, I)` as a `B × 1` column.
pub fn standard_normal_logp(z: &Tensor) -> Tensor {
    let d = z.cols() as f64;
    z.map(|v| v * v).sum_rows().map(|s| -0.5 * s - 0.5 * d * LN_2PI)
}

/// Taped version of [`standard_normal_logp`].
pub fn standard_normal_logp_taped(tape: &mut Tape, z: Var) -> Result<Var> {
    let d = tape.value(z).cols() as f64;
    let sq = tape.square(z)?;
    let s = tape.sum_rows(sq)?;
    let s = tape.scale(s, -0.5)?;
    let c = tape.constant(Tensor::scalar(-0.5 * d * LN_2PI))?;
    tape.add(s, c)
}

enum Divergence {
    Exact(Vec<Var>),
    Hutchinson(Vec<Var>),
}

/// Augmented right-hand side `(f, −Tr ∂f/∂z)` bound to registered parameters.
///
/// Basis or probe vectors are placed on the tape once when the right-hand
/// side is built and stay fixed for the whole solve.
pub struct FlowRhs<'a> {
    net: &'a DynamicsNet,
    vars: &'a NetVars,
    div: Divergence,
}

impl<'a> FlowRhs<'a> {
    pub fn new(tape: &mut Tape, net: &'a DynamicsNet, vars: &'a NetVars, trace: &TraceMode, batch: usize) -> Result<Self> {
        let d = net.dim();
        trace.validate(d)?;
        let div = match trace.kind {
            TraceKind::Exact => {
                let basis = (0..d)
                    .map(|i| {
                        let mut e = Tensor::zeros(batch, d);
                        for r in 0..batch {
                            e.set(r, i, 1.0);
                        }
                        tape.constant(e)
                    })
                    .collect::<Result<_>>()?;
                Divergence::Exact(basis)
            }
            TraceKind::Hutchinson => Divergence::Hutchinson(
                trace.draw_probes(batch, d).into_iter().map(|p| tape.constant(p)).collect::<Result<_>>()?,
            ),
        };
        Ok(Self { net, vars, div })
    }

    /// `f(z, t)` and the divergence estimate (`B × 1`) from one forward pass.
    pub fn velocity_and_divergence(&self, tape: &mut Tape, t: f64, z: Var) -> Result<(Var, Var)> {
        let fwd = self.net.forward(tape, self.vars, z, t)?;
        let div = match &self.div {
            Divergence::Exact(basis) => {
                let mut acc: Option<Var> = None;
                for (i, &e) in basis.iter().enumerate() {
                    let g = self.net.vjp_from(tape, self.vars, &fwd, e)?;
                    let col = tape.slice_cols(g, i, 1)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, col)?,
                        None => col,
                    });
                }
                acc.expect("dimension is at least 1")
            }
            Divergence::Hutchinson(probes) => {
                let mut terms = Vec::with_capacity(probes.len());
                for &v in probes {
                    let g = self.net.vjp_from(tape, self.vars, &fwd, v)?;
                    let vg = tape.mul(v, g)?;
                    terms.push((tape.sum_rows(vg)?, 1.0 / probes.len() as f64));
                }
                if terms.len() == 1 {
                    terms[0].0
                } else {
                    tape.lincomb(&terms)?
                }
            }
        };
        Ok((fwd.out, div))
    }
}

impl AugmentedRhs for FlowRhs<'_> {
    fn eval(&self, tape: &mut Tape, t: f64, z: Var) -> Result<(Var, Var)> {
        let (f, div) = self.velocity_and_divergence(tape, t, z)?;
        let neg = tape.scale(div, -1.0)?;
        Ok((f, neg))
    }
}

/// Velocity only; used for sampling where the density is not needed.
struct VelocityRhs<'a> {
    net: &'a DynamicsNet,
    vars: &'a NetVars,
}

impl AugmentedRhs for VelocityRhs<'_> {
    fn eval(&self, tape: &mut Tape, t: f64, z: Var) -> Result<(Var, Var)> {
        let f = self.net.eval(tape, self.vars, z, t)?;
        let rows = tape.value(z).rows();
        let zero = tape.constant(Tensor::zeros(rows, 1))?;
        Ok((f, zero))
    }
}

fn divergence_with(net: &DynamicsNet, z: &Tensor, t: f64, trace: &TraceMode) -> Result<Tensor> {
    if z.cols() != net.dim() {
        return Err(Error::Dimension { expected: net.dim(), got: z.cols() });
    }
    let mut tape = Tape::new();
    let vars = net.register_frozen(&mut tape)?;
    let rhs = FlowRhs::new(&mut tape, net, &vars, trace, z.rows())?;
    let zv = tape.constant(z.clone())?;
    let (_, div) = rhs.velocity_and_divergence(&mut tape, t, zv)?;
    Ok(tape.value(div).clone())
}

/// `Σᵢ ∂fᵢ/∂zᵢ` per row via `D` vector–Jacobian products with basis vectors.
pub fn divergence_exact(net: &DynamicsNet, z: &Tensor, t: f64) -> Result<Tensor> {
    divergence_with(net, z, t, &TraceMode::exact())
}

/// `(1/K) Σₖ vₖᵀ (∂f/∂z) vₖ` per row with probes drawn from `mode`.
pub fn divergence_hutchinson(net: &DynamicsNet, z: &Tensor, t: f64, mode: &TraceMode) -> Result<Tensor> {
    let mode = TraceMode { kind: TraceKind::Hutchinson, ..mode.clone() };
    divergence_with(net, z, t, &mode)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    pub net: DynamicsNet,
    pub t0: f64,
    pub t_end: f64,
    pub solver: SolverConfig,
    pub trace: TraceMode,
}

#[derive(Clone, Debug)]
pub struct LogLikelihood {
    /// `−mean log p(x)`, nats.
    pub loss: f64,
    /// `log p(x)` per sample, `B × 1`.
    pub per_sample: Tensor,
    pub nfe: usize,
    pub solution: OdeSolution,
}

/// Loss recorded on a tape for gradient computation.
pub struct TapedLoss {
    pub loss: Var,
    pub log_px: Var,
    pub solve: TapedSolve,
}

impl FlowModel {
    pub fn new(net: DynamicsNet, t0: f64, t_end: f64, solver: SolverConfig, trace: TraceMode) -> Result<Self> {
        let m = Self { net, t0, t_end, solver, trace };
        m.validate()?;
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.net.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.t0 == self.t_end || !self.t0.is_finite() || !self.t_end.is_finite() {
            return Err(Error::config("policy.t_end", format!("T = {} must differ from t0 = {}", self.t_end, self.t0)));
        }
        self.solver.validate()?;
        self.trace.validate(self.net.dim())
    }

    fn check_data(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: x.cols() });
        }
        x.check_finite("data")
    }

    /// `log p(x)` by integrating `x` from `t₀` to `T` with the model's trace mode.
    pub fn log_likelihood(&self, x: &Tensor) -> Result<LogLikelihood> {
        self.log_likelihood_with(x, &self.trace)
    }

    pub fn log_likelihood_with(&self, x: &Tensor, trace: &TraceMode) -> Result<LogLikelihood> {
        self.check_data(x)?;
        let batch = x.rows();
        let ctx = |e: Error| Error::Batch { batch, source: Box::new(e) };
        let mut tape = Tape::new();
        let vars = self.net.register_frozen(&mut tape)?;
        let rhs = FlowRhs::new(&mut tape, &self.net, &vars, trace, batch)?;
        let sol = odeint::integrate(&rhs, &mut tape, x, &Tensor::zeros(batch, 1), self.t0, self.t_end, &self.solver)
            .map_err(ctx)?;
        let per_sample = standard_normal_logp(&sol.z_end).sub(&sol.delta_logp);
        Ok(LogLikelihood { loss: -per_sample.mean(), per_sample, nfe: sol.nfe, solution: sol })
    }

    /// Mean negative log-likelihood over `x`, evaluated in shards of at most
    /// `shard` rows. Each shard gets its own probe stream.
    pub fn evaluate(&self, x: &Tensor, trace: &TraceMode, shard: usize) -> Result<(f64, usize)> {
        let shard = shard.max(1);
        let mut total = 0.0;
        let mut nfe = 0;
        let mut start = 0;
        let mut index = 0u64;
        while start < x.rows() {
            let len = shard.min(x.rows() - start);
            let part = x.slice_rows(start, len);
            let tr = trace.with_seed(rng::derive_seed(trace.probe_seed, Stream::Shard, index));
            let ll = self.log_likelihood_with(&part, &tr)?;
            total += ll.per_sample.sum();
            nfe += ll.nfe;
            start += len;
            index += 1;
        }
        Ok((-total / x.rows() as f64, nfe))
    }

    /// Records the negative log-likelihood of `x` on `tape` using the
    /// parameters registered as `vars`.
    pub fn taped_loss(&self, tape: &mut Tape, vars: &NetVars, x: &Tensor) -> Result<TapedLoss> {
        self.check_data(x)?;
        let batch = x.rows();
        let rhs = FlowRhs::new(tape, &self.net, vars, &self.trace, batch)?;
        let xv = tape.constant(x.clone())?;
        let l0 = tape.constant(Tensor::zeros(batch, 1))?;
        let solve = odeint::integrate_with_tape(&rhs, tape, xv, l0, self.t0, self.t_end, &self.solver)
            .map_err(|e| Error::Batch { batch, source: Box::new(e) })?;
        let base = standard_normal_logp_taped(tape, solve.z_end)?;
        let log_px = tape.sub(base, solve.delta_logp)?;
        let mean = tape.mean(log_px)?;
        let loss = tape.scale(mean, -1.0)?;
        Ok(TapedLoss { loss, log_px, solve })
    }

    /// Maps base points `z(T)` back to data space by integrating from `T` to `t₀`.
    pub fn invert(&self, z_end: &Tensor) -> Result<Tensor> {
        self.check_data(z_end)?;
        let mut tape = Tape::new();
        let vars = self.net.register_frozen(&mut tape)?;
        let rhs = VelocityRhs { net: &self.net, vars: &vars };
        let rows = z_end.rows();
        let sol = odeint::integrate(&rhs, &mut tape, z_end, &Tensor::zeros(rows, 1), self.t_end, self.t0, &self.solver)?;
        Ok(sol.z_end)
    }

    /// Pushes data points forward to `z(T)` without tracking the density.
    pub fn push_forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_data(x)?;
        let mut tape = Tape::new();
        let vars = self.net.register_frozen(&mut tape)?;
        let rhs = VelocityRhs { net: &self.net, vars: &vars };
        let rows = x.rows();
        let sol = odeint::integrate(&rhs, &mut tape, x, &Tensor::zeros(rows, 1), self.t0, self.t_end, &self.solver)?;
        Ok(sol.z_end)
    }

    /// Draws `n` base samples from `N(0, I)` and maps them to data space.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::config("n", "sample count must be at least 1"));
        }
        let draws = gaussian(n, self.dim(), seed);
        self.invert(&draws)
    }
}

/// `n × d` standard normal draws from the sampling stream of `seed`.
pub fn gaussian(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = rng::stream(seed, Stream::Sample, 0);
    let data = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(n, d, data).expect("gaussian shape")
}
