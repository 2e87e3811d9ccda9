//! The training loop and run directory management.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use crate::cnf::{FlowModel, TraceMode};
use crate::config::RunConfig;
use crate::dynamics::DynamicsNet;
use crate::error::{Error, Result};
use crate::metrics::{self, bits_per_dim, Checkpoint, MetricsRow, MetricsWriter, NFE_WINDOW};
use crate::optim::AdamState;
use crate::rng::{self, Stream};
use crate::temporal::{self, PolicyKind, TimePolicy};
use crate::tensor::Tensor;

/// Mutable state carried from one iteration to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed iterations.
    pub iteration: u64,
    pub model: FlowModel,
    pub weight_opt: AdamState,
    pub policy: TimePolicy,
    pub nfe_window: VecDeque<u64>,
}

/// Initial weights for a run seed.
pub fn initial_net(cfg: &RunConfig) -> DynamicsNet {
    DynamicsNet::init(cfg.dataset_name().dim(), &cfg.model.hidden, &mut rng::stream(cfg.seed, Stream::Init, 0))
}

/// Probe seed for the weight step of iteration `k`.
pub fn weight_probe_seed(seed: u64, k: u64) -> u64 {
    rng::derive_seed(seed, Stream::Probe, k)
}

/// Probe seed for the time step of iteration `k`.
pub fn time_probe_seed(seed: u64, k: u64) -> u64 {
    rng::derive_seed(seed, Stream::TimeProbe, k)
}

/// Trace used for held-out evaluation.
pub fn eval_trace(cfg: &RunConfig) -> TraceMode {
    TraceMode::for_evaluation(cfg.dataset_name().dim(), rng::derive_seed(cfg.seed, Stream::Eval, 0))
}

/// Mean held-out negative log-likelihood of `model` at end time `t_end`.
pub fn evaluate(cfg: &RunConfig, model: &FlowModel, t_end: f64, test: &Tensor) -> Result<(f64, usize)> {
    let mut m = model.clone();
    m.t_end = t_end;
    m.evaluate(test, &eval_trace(cfg), cfg.schedule.eval_shard)
}

pub fn push_nfe(window: &mut VecDeque<u64>, nfe: u64) -> f64 {
    window.push_back(nfe);
    while window.len() > NFE_WINDOW {
        window.pop_front();
    }
    window.iter().sum::<u64>() as f64 / window.len() as f64
}

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let net = initial_net(cfg);
        let policy = cfg.policy.build()?;
        let weight_opt = AdamState::for_params(cfg.optimizer.adam(), &net.params());
        let model = cfg.build_model(net, &policy)?;
        Ok(Self { iteration: 0, model, weight_opt, policy, nfe_window: VecDeque::new() })
    }

    pub fn from_checkpoint(cfg: &RunConfig, ck: Checkpoint) -> Result<Self> {
        if ck.net.dim() != cfg.dataset_name().dim() {
            return Err(Error::Dimension { expected: cfg.dataset_name().dim(), got: ck.net.dim() });
        }
        let model = cfg.build_model(ck.net, &ck.policy)?;
        Ok(Self {
            iteration: ck.iteration,
            model,
            weight_opt: ck.weight_opt,
            policy: ck.policy,
            nfe_window: ck.nfe_window.into(),
        })
    }

    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration,
            net: self.model.net.clone(),
            weight_opt: self.weight_opt.clone(),
            policy: self.policy.clone(),
            nfe_window: self.nfe_window.iter().copied().collect(),
            config: cfg.to_value(),
        }
    }

    /// Runs one iteration: optional horizon draw, weight step, optional time step.
    /// The state is only modified when the whole iteration succeeds.
    pub fn step(&mut self, cfg: &RunConfig, test: &Tensor) -> Result<MetricsRow> {
        let start = Instant::now();
        let k = self.iteration;
        let mut next = self.clone();
        let batch = cfg.dataset_spec().sample_batch(k)?;

        if let PolicyKind::Steer { .. } = next.policy.kind {
            temporal::sample_steer(&mut next.policy, &mut rng::stream(cfg.seed, Stream::Steer, k))?;
        }
        next.model.t0 = next.policy.t0;
        next.model.t_end = next.policy.t_end;
        next.model.trace = cfg.trace.with_seed(weight_probe_seed(cfg.seed, k));
        let ws = temporal::step_weights(&mut next.model, &batch, &mut next.weight_opt, cfg.optimizer.clip)?;

        if let PolicyKind::TemporalOpt(opt) = &next.policy.kind {
            let form = opt.optimize_t0.then_some(opt.t0_gradient);
            next.model.trace = cfg.trace.with_seed(time_probe_seed(cfg.seed, k));
            let grad = temporal::temporal_gradient(&next.model, &batch, form)?;
            temporal::step_time(&mut next.policy, &grad)?;
            next.model.t0 = next.policy.t0;
            next.model.t_end = next.policy.t_end;
        }

        let nfe_avg = push_nfe(&mut next.nfe_window, ws.nfe as u64);
        next.iteration = k + 1;
        let eval_due = next.iteration % cfg.schedule.eval_every == 0 || next.iteration == cfg.schedule.iterations;
        let (test_loss, bpd) = if eval_due {
            let (loss, _) = evaluate(cfg, &next.model, next.policy.eval_t_end(), test)?;
            let bpd = cfg.dataset.quantized_8bit.then(|| bits_per_dim(-loss, test.cols()));
            (Some(loss), bpd)
        } else {
            (None, None)
        };
        let row = MetricsRow {
            iteration: next.iteration,
            train_loss: ws.loss,
            test_loss,
            bpd,
            nfe_forward: ws.nfe as u64,
            nfe_avg_window: nfe_avg,
            grad_norm_pre_clip: ws.clip.pre_norm,
            clipped_fraction: ws.clip.clipped_fraction,
            t_current: next.policy.t_end,
            t0_current: next.policy.t0,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        *self = next;
        Ok(row)
    }
}

/// Outcome of a run. `error` is set when the run stopped early; everything
/// up to the last completed iteration is still present.
#[derive(Debug)]
pub struct RunArtifacts {
    pub run_dir: Option<PathBuf>,
    pub rows: Vec<MetricsRow>,
    pub state: TrainState,
    pub error: Option<Error>,
}

impl RunArtifacts {
    pub fn completed(&self) -> bool {
        self.error.is_none()
    }

    pub fn final_test_loss(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.test_loss)
    }

    pub fn mean_nfe(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.nfe_forward as f64).sum::<f64>() / self.rows.len() as f64
    }

    pub fn total_wall_ms(&self) -> f64 {
        self.rows.iter().map(|r| r.wall_ms).sum()
    }
}

/// Drives a [`TrainState`] through the schedule, persisting to `run_dir` when given.
pub struct Trainer {
    pub cfg: RunConfig,
    pub state: TrainState,
    test: Tensor,
    run_dir: Option<PathBuf>,
    writer: Option<MetricsWriter>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, run_dir: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        let state = TrainState::new(cfg)?;
        let writer = run_dir.map(MetricsWriter::create).transpose()?;
        let t = Self::assemble(cfg.clone(), state, run_dir, writer);
        t.write_meta(None)?;
        Ok(t)
    }

    /// Continues from `run_dir/checkpoint.bin`. `overrides` apply on top of the
    /// stored config (typically to extend `schedule.iterations`).
    pub fn resume(run_dir: &Path, overrides: &[String]) -> Result<Self> {
        let ck = Checkpoint::load(run_dir)?;
        let cfg = RunConfig::from_value(ck.config.clone(), overrides)?;
        let last = (ck.iteration > 0).then_some(ck.iteration);
        let state = TrainState::from_checkpoint(&cfg, ck)?;
        let writer = MetricsWriter::resume(run_dir, last)?;
        let t = Self::assemble(cfg, state, Some(run_dir), Some(writer));
        t.write_meta(None)?;
        Ok(t)
    }

    /// In-memory continuation from an explicit state.
    pub fn from_state(cfg: &RunConfig, state: TrainState) -> Self {
        Self::assemble(cfg.clone(), state, None, None)
    }

    fn assemble(cfg: RunConfig, state: TrainState, run_dir: Option<&Path>, writer: Option<MetricsWriter>) -> Self {
        let test = cfg.dataset_spec().test_set(cfg.dataset.test_size);
        Self { cfg, state, test, run_dir: run_dir.map(Path::to_path_buf), writer }
    }

    pub fn test_set(&self) -> &Tensor {
        &self.test
    }

    fn write_meta(&self, summary: Option<serde_json::Value>) -> Result<()> {
        let Some(dir) = &self.run_dir else { return Ok(()) };
        let cfg = &self.cfg;
        let name = cfg.dataset_name();
        let meta = json!({
            "config": cfg.to_value(),
            "seeds": {
                "run": cfg.seed,
                "data": cfg.dataset_spec().seed,
            },
            "policy": {
                "tag": self.state.policy.tag(),
                "steer_half_width": cfg.policy.half_width(),
                "clip_interval": self.state.policy.bounds(),
            },
            "weight_grad_clip": cfg.optimizer.clip,
            "dataset_parameters": name.parameters().into_iter().map(|(k, v)| (k.to_string(), json!(v))).collect::<serde_json::Map<_, _>>(),
            "eval_trace": eval_trace(cfg),
            "build": {
                "package": env!("CARGO_PKG_NAME"),
                "version": env!("CARGO_PKG_VERSION"),
                "debug_assertions": cfg!(debug_assertions),
            },
            "summary": summary,
        });
        metrics::write_json(&dir.join(metrics::RUN_META_FILE), &meta)
    }

    fn save_checkpoint(&self) -> Result<()> {
        match &self.run_dir {
            Some(dir) => self.state.checkpoint(&self.cfg).save(dir).map(|_| ()),
            None => Ok(()),
        }
    }

    /// Runs until `schedule.iterations` iterations are complete or a step fails.
    pub fn run(self) -> Result<RunArtifacts> {
        self.run_with(|_| {})
    }

    /// As [`Trainer::run`], calling `observe` after every completed iteration.
    pub fn run_with(mut self, mut observe: impl FnMut(&MetricsRow)) -> Result<RunArtifacts> {
        let mut rows = Vec::new();
        let mut error = None;
        while self.state.iteration < self.cfg.schedule.iterations {
            match self.state.step(&self.cfg, &self.test) {
                Ok(row) => {
                    if let Some(w) = &mut self.writer {
                        w.write_row(&row)?;
                    }
                    observe(&row);
                    rows.push(row);
                    let every = self.cfg.schedule.checkpoint_every;
                    if every > 0 && self.state.iteration % every == 0 {
                        self.save_checkpoint()?;
                    }
                }
                Err(e) => {
                    error = Some(Error::Iteration { iteration: self.state.iteration + 1, source: Box::new(e) });
                    break;
                }
            }
        }
        self.save_checkpoint()?;
        let art = RunArtifacts { run_dir: self.run_dir.clone(), rows, state: self.state.clone(), error };
        self.write_meta(Some(json!({
            "completed_iterations": art.state.iteration,
            "final_test_loss": art.final_test_loss(),
            "mean_nfe_forward": art.mean_nfe(),
            "total_wall_ms": art.total_wall_ms(),
            "final_T": art.state.policy.t_end,
            "final_t0": art.state.policy.t0,
            "error": art.error.as_ref().map(|e| e.to_string()),
        })))?;
        Ok(art)
    }
}

/// Fresh run of `cfg`, persisted to `run_dir` when given.
pub fn train(cfg: &RunConfig, run_dir: Option<&Path>) -> Result<RunArtifacts> {
    Trainer::new(cfg, run_dir)?.run()
}
