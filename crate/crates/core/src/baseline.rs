//! Plain fixed-horizon training loop.
//!
//! Uses the flow model, optimizer and data modules directly and never touches
//! [`crate::temporal`] or [`crate::train`]. With the same config it reproduces
//! the metrics rows of a `fixed` policy run.

use std::collections::VecDeque;
use std::time::Instant;

use crate::autodiff::Tape;
use crate::cnf::{FlowModel, TraceMode};
use crate::config::RunConfig;
use crate::dynamics::DynamicsNet;
use crate::error::{Error, Result};
use crate::metrics::{bits_per_dim, MetricsRow, NFE_WINDOW};
use crate::optim::{self, AdamState};
use crate::rng::{self, Stream};

/// Trains for `cfg.schedule.iterations` iterations at `[policy.t0, policy.T0]`.
pub fn run(cfg: &RunConfig) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let name = cfg.dataset_name();
    let dim = name.dim();
    let data = cfg.dataset_spec();
    let test = data.test_set(cfg.dataset.test_size);
    let net = DynamicsNet::init(dim, &cfg.model.hidden, &mut rng::stream(cfg.seed, Stream::Init, 0));
    let mut opt = AdamState::for_params(cfg.optimizer.adam(), &net.params());
    let (t0, t_end) = (cfg.policy.t0, cfg.policy.t_end0);
    let mut model = FlowModel::new(net, t0, t_end, cfg.solver.clone(), cfg.trace.clone())?;
    let eval_trace = TraceMode::for_evaluation(dim, rng::derive_seed(cfg.seed, Stream::Eval, 0));

    let mut window = VecDeque::new();
    let mut rows = Vec::new();
    for k in 0..cfg.schedule.iterations {
        let start = Instant::now();
        let batch = data.sample_batch(k)?;
        model.trace = cfg.trace.with_seed(rng::derive_seed(cfg.seed, Stream::Probe, k));

        let mut tape = Tape::new();
        let vars = model.net.register(&mut tape)?;
        let taped = model.taped_loss(&mut tape, &vars, &batch)?;
        let wrt = vars.all();
        let g = tape.backward(taped.loss, &wrt)?;
        let mut grads = wrt
            .iter()
            .map(|v| g.get(*v).cloned().ok_or(Error::NotOnTape(v.id())))
            .collect::<Result<Vec<_>>>()?;
        let loss = tape.value(taped.loss).item();
        let nfe = taped.solve.solution.nfe as u64;
        drop(tape);

        let clip = optim::clip_global_norm(&mut grads, cfg.optimizer.clip)?;
        opt.step(model.net.params_mut(), &grads)?;

        window.push_back(nfe);
        while window.len() > NFE_WINDOW {
            window.pop_front();
        }
        let nfe_avg = window.iter().sum::<u64>() as f64 / window.len() as f64;

        let iteration = k + 1;
        let (test_loss, bpd) = if iteration % cfg.schedule.eval_every == 0 || iteration == cfg.schedule.iterations {
            let (l, _) = model.evaluate(&test, &eval_trace, cfg.schedule.eval_shard)?;
            (Some(l), cfg.dataset.quantized_8bit.then(|| bits_per_dim(-l, dim)))
        } else {
            (None, None)
        };
        rows.push(MetricsRow {
            iteration,
            train_loss: loss,
            test_loss,
            bpd,
            nfe_forward: nfe,
            nfe_avg_window: nfe_avg,
            grad_norm_pre_clip: clip.pre_norm,
            clipped_fraction: clip.clipped_fraction,
            t_current: t_end,
            t0_current: t0,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(rows)
}
