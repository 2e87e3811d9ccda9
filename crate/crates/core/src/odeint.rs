//! Integration of the augmented state `(z, Δlog p)`.
//!
//! The right-hand side only depends on `z`; the log-density change is carried
//! along as a co-integrated column. All stage arithmetic runs through tape
//! operations, so the same code serves two purposes:
//!
//! * [`integrate`]: a primal solve that rewinds the tape after every step and
//!   keeps only values.
//! * [`integrate_with_tape`]: records the accepted steps so a reverse sweep
//!   gives gradients of the discrete solution. The arithmetic is identical to
//!   the primal solve, so both reach the same endpoint bit for bit.
//!
//! `nfe` counts every right-hand-side evaluation, rejected attempts included.
//! Dormand–Prince costs one initial evaluation plus six per attempted step
//! (the seventh stage is reused as the next step's first).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, PartialSolve, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
    Dopri5,
}

impl Method {
    pub fn is_adaptive(self) -> bool {
        matches!(self, Method::Dopri5)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    /// Initial (adaptive) or fixed step. Defaults to `|T − t₀| / 20`.
    pub h_init: Option<f64>,
    /// Defaults to `1e-10·|T − t₀|`.
    pub h_min: Option<f64>,
    /// Defaults to `|T − t₀|`.
    pub h_max: Option<f64>,
    pub max_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Dopri5,
            rtol: 1e-5,
            atol: 1e-5,
            h_init: None,
            h_min: None,
            h_max: None,
            max_steps: 100_000,
        }
    }
}

impl SolverConfig {
    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self { rtol, atol, ..Self::default() }
    }

    pub fn fixed(method: Method, h: f64) -> Self {
        Self { method, h_init: Some(h), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("solver.{name}"), format!("must be positive, got {v}")))
            }
        };
        pos("rtol", self.rtol)?;
        pos("atol", self.atol)?;
        if let Some(h) = self.h_init {
            pos("h_init", h)?;
        }
        if let Some(h) = self.h_min {
            pos("h_min", h)?;
        }
        if let Some(h) = self.h_max {
            pos("h_max", h)?;
        }
        if let (Some(lo), Some(hi)) = (self.h_min, self.h_max) {
            if lo > hi {
                return Err(Error::config("solver.h_min", format!("{lo} exceeds h_max {hi}")));
            }
        }
        if self.max_steps == 0 {
            return Err(Error::config("solver.max_steps", "must be positive"));
        }
        Ok(())
    }

    fn bounds(&self, span: f64) -> (f64, f64, f64) {
        let h_max = self.h_max.unwrap_or(span).min(span);
        let h_min = self.h_min.unwrap_or(1e-10 * span).min(h_max);
        let h_init = self.h_init.unwrap_or(span / 20.0).clamp(h_min, h_max);
        (h_init, h_min, h_max)
    }
}

/// Right-hand side of the augmented system: `(dz/dt, dΔlogp/dt)`.
pub trait AugmentedRhs {
    fn eval(&self, tape: &mut Tape, t: f64, z: Var) -> Result<(Var, Var)>;
}

impl<F> AugmentedRhs for F
where
    F: Fn(&mut Tape, f64, Var) -> Result<(Var, Var)>,
{
    fn eval(&self, tape: &mut Tape, t: f64, z: Var) -> Result<(Var, Var)> {
        self(tape, t, z)
    }
}

/// One accepted step `[t, t + h]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub t: f64,
    pub h: f64,
    /// Exact end time used for the step (equals the target on the last step).
    pub t_next: f64,
}

#[derive(Clone, Debug)]
pub struct OdeSolution {
    pub z_end: Tensor,
    /// `B × 1`, nats; `log p_end = log p_0 + delta_logp`.
    pub delta_logp: Tensor,
    pub nfe: usize,
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    pub steps: Vec<Step>,
    pub trajectory: Option<Vec<(f64, Tensor)>>,
}

/// A solve recorded on a tape.
#[derive(Clone, Debug)]
pub struct TapedSolve {
    pub solution: OdeSolution,
    pub z_end: Var,
    pub delta_logp: Var,
}

struct Tableau {
    c: &'static [f64],
    a: &'static [&'static [f64]],
    b: &'static [f64],
    /// `b₅ − b₄` weights over all stages, for the embedded error estimate.
    e: Option<&'static [f64]>,
}

const EULER: Tableau = Tableau { c: &[0.0], a: &[&[]], b: &[1.0], e: None };

const RK4: Tableau = Tableau {
    c: &[0.0, 0.5, 0.5, 1.0],
    a: &[&[], &[0.5], &[0.0, 0.5], &[0.0, 0.0, 1.0]],
    b: &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
    e: None,
};

const DOPRI5: Tableau = Tableau {
    c: &[0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0],
    a: &[
        &[],
        &[1.0 / 5.0],
        &[3.0 / 40.0, 9.0 / 40.0],
        &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
        &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
        &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    ],
    b: &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    e: Some(&[
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ]),
};

fn tableau(m: Method) -> &'static Tableau {
    match m {
        Method::Euler => &EULER,
        Method::Rk4 => &RK4,
        Method::Dopri5 => &DOPRI5,
    }
}

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;

fn combine(tape: &mut Tape, base: Var, ks: &[Var], weights: &[f64], h: f64) -> Result<Var> {
    let mut terms = Vec::with_capacity(ks.len() + 1);
    terms.push((base, 1.0));
    for (&k, &w) in ks.iter().zip(weights) {
        if w != 0.0 {
            terms.push((k, h * w));
        }
    }
    if terms.len() == 1 {
        return Ok(base);
    }
    tape.lincomb(&terms)
}

struct StepOut {
    z: Var,
    l: Var,
    kz: Vec<Var>,
    kl: Vec<Var>,
}

/// Runs the stages of one explicit Runge–Kutta step on the tape.
fn rk_step<R: AugmentedRhs + ?Sized>(
    tape: &mut Tape,
    rhs: &R,
    tab: &Tableau,
    t: f64,
    h: f64,
    z: Var,
    l: Var,
    first: Option<(Var, Var)>,
    nfe: &mut usize,
) -> Result<StepOut> {
    let s = tab.b.len();
    let mut kz = Vec::with_capacity(s + 1);
    let mut kl = Vec::with_capacity(s + 1);
    for i in 0..s {
        let (a, b) = match (i, first) {
            (0, Some(k)) => k,
            _ => {
                let zi = combine(tape, z, &kz, tab.a[i], h)?;
                *nfe += 1;
                rhs.eval(tape, t + tab.c[i] * h, zi)?
            }
        };
        kz.push(a);
        kl.push(b);
    }
    let z_new = combine(tape, z, &kz, tab.b, h)?;
    let l_new = combine(tape, l, &kl, tab.b, h)?;
    Ok(StepOut { z: z_new, l: l_new, kz, kl })
}

fn blowup(t: f64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NumericalBlowup { t },
        other => other,
    }
}

fn check_inputs(z0: &Tensor, logp0: &Tensor, t0: f64, t1: f64) -> Result<()> {
    if logp0.shape() != (z0.rows(), 1) {
        return Err(Error::Shape {
            op: "integrate",
            detail: format!("z0 {:?} vs logp0 {:?}", z0.shape(), logp0.shape()),
        });
    }
    if !t0.is_finite() || !t1.is_finite() {
        return Err(Error::NonFinite { op: "integrate", index: 0, value: if t0.is_finite() { t1 } else { t0 } });
    }
    Ok(())
}

/// Fixed-step grid `t₀ = s₀ < … < s_n = T` with equal spacing.
fn fixed_grid(cfg: &SolverConfig, t0: f64, t1: f64) -> Vec<Step> {
    let span = (t1 - t0).abs();
    let (h_init, _, _) = cfg.bounds(span);
    let n = ((span / h_init) - 1e-9).ceil().max(1.0) as usize;
    let h = (t1 - t0) / n as f64;
    (0..n)
        .map(|i| {
            let t = t0 + i as f64 * h;
            let t_next = if i + 1 == n { t1 } else { t0 + (i + 1) as f64 * h };
            Step { t, h, t_next }
        })
        .collect()
}

/// Primal solve from `t0` to `t1` (either direction).
pub fn integrate<R: AugmentedRhs + ?Sized>(
    rhs: &R,
    tape: &mut Tape,
    z0: &Tensor,
    logp0: &Tensor,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<OdeSolution> {
    primal(rhs, tape, z0, logp0, t0, t1, cfg, false)
}

/// As [`integrate`], also keeping `(t, z)` after every accepted step.
pub fn integrate_dense<R: AugmentedRhs + ?Sized>(
    rhs: &R,
    tape: &mut Tape,
    z0: &Tensor,
    logp0: &Tensor,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<OdeSolution> {
    primal(rhs, tape, z0, logp0, t0, t1, cfg, true)
}

#[allow(clippy::too_many_arguments)]
fn primal<R: AugmentedRhs + ?Sized>(
    rhs: &R,
    tape: &mut Tape,
    z0: &Tensor,
    logp0: &Tensor,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
    dense: bool,
) -> Result<OdeSolution> {
    cfg.validate()?;
    check_inputs(z0, logp0, t0, t1)?;
    let entry = tape.len();
    let zv = tape.constant(z0.clone())?;
    let lv = tape.constant(logp0.clone())?;
    let out = solve(rhs, tape, zv, lv, t0, t1, cfg, false, dense);
    let result = out.map(|run| {
        let z_end = tape.value(run.z).clone();
        OdeSolution {
            delta_logp: tape.value(run.l).sub(logp0),
            z_end,
            nfe: run.nfe,
            steps_accepted: run.steps.len(),
            steps_rejected: run.rejected,
            steps: run.steps,
            trajectory: run.trajectory,
        }
    });
    tape.truncate(entry);
    result
}

/// Records a solve on `tape` starting from the tape values `z0`, `logp0`.
///
/// Every accepted step stays on the tape and rejected Dormand–Prince attempts
/// are discarded, so a reverse sweep differentiates the discrete map that
/// produced the endpoint, with step sizes held constant.
#[allow(clippy::too_many_arguments)]
pub fn integrate_with_tape<R: AugmentedRhs + ?Sized>(
    rhs: &R,
    tape: &mut Tape,
    z0: Var,
    logp0: Var,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<TapedSolve> {
    cfg.validate()?;
    let (z0_val, l0_val) = (tape.node(z0)?.value.clone(), tape.node(logp0)?.value.clone());
    check_inputs(&z0_val, &l0_val, t0, t1)?;
    let entry = tape.len();
    let run = match solve(rhs, tape, z0, logp0, t0, t1, cfg, true, false) {
        Ok(run) => run,
        Err(e) => {
            tape.truncate(entry);
            return Err(e);
        }
    };
    let delta = tape.sub(run.l, logp0)?;
    let solution = OdeSolution {
        z_end: tape.value(run.z).clone(),
        delta_logp: tape.value(delta).clone(),
        nfe: run.nfe,
        steps_accepted: run.steps.len(),
        steps_rejected: run.rejected,
        steps: run.steps,
        trajectory: None,
    };
    Ok(TapedSolve { solution, z_end: run.z, delta_logp: delta })
}

struct Run {
    z: Var,
    l: Var,
    nfe: usize,
    steps: Vec<Step>,
    rejected: usize,
    trajectory: Option<Vec<(f64, Tensor)>>,
}

/// Shared stepping loop. With `record` the accepted steps stay on the tape;
/// otherwise the tape is rewound to the starting state after every step and
/// only values are carried forward.
#[allow(clippy::too_many_arguments)]
fn solve<R: AugmentedRhs + ?Sized>(
    rhs: &R,
    tape: &mut Tape,
    z0: Var,
    l0: Var,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
    record: bool,
    dense: bool,
) -> Result<Run> {
    let base = tape.len();
    let mut traj = dense.then(|| vec![(t0, tape.value(z0).clone())]);
    let mut run = Run { z: z0, l: l0, nfe: 0, steps: Vec::new(), rejected: 0, trajectory: None };
    if t0 == t1 {
        run.trajectory = traj;
        return Ok(run);
    }
    let tab = tableau(cfg.method);

    // Rewinds to `base` and re-seeds the carried vars as constants.
    let rebase = |tape: &mut Tape, vars: &[Var]| -> Result<Vec<Var>> {
        let vals: Vec<Tensor> = vars.iter().map(|&v| tape.value(v).clone()).collect();
        tape.truncate(base);
        vals.into_iter().map(|v| tape.constant(v)).collect()
    };

    if !cfg.method.is_adaptive() {
        for st in fixed_grid(cfg, t0, t1) {
            let out = rk_step(tape, rhs, tab, st.t, st.h, run.z, run.l, None, &mut run.nfe).map_err(blowup(st.t))?;
            (run.z, run.l) = (out.z, out.l);
            if !record {
                let v = rebase(tape, &[run.z, run.l])?;
                (run.z, run.l) = (v[0], v[1]);
            }
            run.steps.push(st);
            if let Some(tr) = traj.as_mut() {
                tr.push((st.t_next, tape.value(run.z).clone()));
            }
        }
        run.trajectory = traj;
        return Ok(run);
    }

    let e = tab.e.expect("adaptive tableau has an error row");
    let span = (t1 - t0).abs();
    let dir = (t1 - t0).signum();
    let (h_init, h_min, h_max) = cfg.bounds(span);
    let mut h_abs = h_init;
    let mut t = t0;
    run.nfe += 1;
    // FSAL: f at the current state, reused as the first stage of the next attempt
    let mut k1 = rhs.eval(tape, t, run.z).map_err(blowup(t))?;

    loop {
        if run.steps.len() + run.rejected >= cfg.max_steps || h_abs < h_min {
            return Err(Error::NonConvergence(Box::new(PartialSolve {
                t,
                h: h_abs * dir,
                delta_logp: tape.value(run.l).sub(tape.value(l0)),
                z: tape.value(run.z).clone(),
                nfe: run.nfe,
            })));
        }
        let last = h_abs >= (t1 - t).abs();
        let h = if last { t1 - t } else { dir * h_abs };
        let t_next = if last { t1 } else { t + h };

        let mark = tape.len();
        let attempt = rk_step(tape, rhs, tab, t, h, run.z, run.l, Some(k1), &mut run.nfe).map_err(blowup(t))?;
        run.nfe += 1;
        let k7 = rhs.eval(tape, t_next, attempt.z).map_err(blowup(t_next))?;

        // embedded error in the weighted RMS norm over z and Δlogp
        let mut sum = 0.0;
        let mut count = 0usize;
        for (ks, last_k, y0, y1) in [(&attempt.kz, k7.0, run.z, attempt.z), (&attempt.kl, k7.1, run.l, attempt.l)] {
            let (y0, y1) = (tape.value(y0), tape.value(y1));
            let mut err = Tensor::zeros(y0.rows(), y0.cols());
            for (&k, &w) in ks.iter().chain(std::iter::once(&last_k)).zip(e) {
                if w != 0.0 {
                    err.axpy(h * w, tape.value(k));
                }
            }
            for ((&ei, &a), &b) in err.data().iter().zip(y0.data()).zip(y1.data()) {
                let sc = cfg.atol + cfg.rtol * a.abs().max(b.abs());
                sum += (ei / sc).powi(2);
                count += 1;
            }
        }
        let err_norm = (sum / count.max(1) as f64).sqrt();

        if err_norm <= 1.0 {
            (run.z, run.l, k1) = (attempt.z, attempt.l, k7);
            if !record {
                let v = rebase(tape, &[run.z, run.l, k1.0, k1.1])?;
                (run.z, run.l, k1) = (v[0], v[1], (v[2], v[3]));
            }
            run.steps.push(Step { t, h, t_next });
            t = t_next;
            if let Some(tr) = traj.as_mut() {
                tr.push((t, tape.value(run.z).clone()));
            }
            if last {
                break;
            }
            let fac = if err_norm == 0.0 { FAC_MAX } else { (SAFETY * err_norm.powf(-0.2)).clamp(FAC_MIN, FAC_MAX) };
            h_abs = (h.abs() * fac).min(h_max);
        } else {
            tape.truncate(mark);
            run.rejected += 1;
            let fac = (SAFETY * err_norm.powf(-0.2)).clamp(FAC_MIN, 1.0);
            h_abs = h.abs() * fac;
        }
    }
    run.trajectory = traj;
    Ok(run)
}
