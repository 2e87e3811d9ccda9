//! Run configuration: TOML or JSON files plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cnf::{FlowModel, TraceMode};
use crate::dynamics::DynamicsNet;
use crate::error::{Error, Result};
use crate::odeint::SolverConfig;
use crate::optim::AdamConfig;
use crate::temporal::{PolicyKind, T0Gradient, TimePolicy};
use crate::toydata::{Dataset, DatasetSpec, TEST_SET_SIZE};

/// Environment variable consulted when `out_dir` is not set.
pub const OUT_DIR_ENV: &str = "TOFLOW_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub solver: SolverConfig,
    pub trace: TraceMode,
    pub policy: PolicyConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: None,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            solver: SolverConfig::default(),
            trace: TraceMode::default(),
            policy: PolicyConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: Schedule::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub name: Option<Dataset>,
    /// Data seed; the run seed when absent.
    pub seed: Option<u64>,
    pub test_size: usize,
    /// Report bits per dimension (meaningful for 8-bit data only).
    pub quantized_8bit: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { name: None, seed: None, test_size: TEST_SET_SIZE, quantized_8bit: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64, 64] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyTag {
    Fixed,
    Steer,
    Temporal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub tag: PolicyTag,
    /// Initial (and, for `fixed`, permanent) end time.
    #[serde(rename = "T0")]
    pub t_end0: f64,
    pub t0: f64,
    pub alpha: f64,
    pub epsilon: f64,
    /// Half-width of the sampled end-time range; `0.5·(T0 − t0)` when absent.
    pub half_width: Option<f64>,
    pub optimize_t0: bool,
    pub t0_gradient: T0Gradient,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            tag: PolicyTag::Temporal,
            t_end0: 0.5,
            t0: 0.0,
            alpha: 0.1,
            epsilon: 0.1,
            half_width: None,
            optimize_t0: false,
            t0_gradient: T0Gradient::Exact,
            lr: 1e-2,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
        }
    }
}

impl PolicyConfig {
    pub fn half_width(&self) -> f64 {
        self.half_width.unwrap_or(0.5 * (self.t_end0 - self.t0))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn build(&self) -> Result<TimePolicy> {
        match self.tag {
            PolicyTag::Fixed => TimePolicy::fixed(self.t0, self.t_end0),
            PolicyTag::Steer => TimePolicy::steer(self.t0, self.t_end0, self.half_width()),
            PolicyTag::Temporal => {
                let mut p =
                    TimePolicy::temporal(self.t0, self.t_end0, self.alpha, self.epsilon, self.optimize_t0, self.adam())?;
                if let PolicyKind::TemporalOpt(o) = &mut p.kind {
                    o.t0_gradient = self.t0_gradient;
                }
                Ok(p)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip threshold.
    pub clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps, clip: 10.0 }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub iterations: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    /// `0` disables periodic checkpoints; a final one is always written.
    pub checkpoint_every: u64,
    /// Rows per held-out evaluation solve.
    pub eval_shard: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { iterations: 10_000, batch_size: 512, eval_every: 500, checkpoint_every: 1000, eval_shard: 2500 }
    }
}

impl RunConfig {
    /// Reads a `.json` file or, for any other extension, a TOML file.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let value = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.line(),
                message: e.to_string(),
            })?
        } else {
            let t: toml::Value = toml::from_str(&text).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0),
                message: e.message().to_string(),
            })?;
            serde_json::to_value(t)?
        };
        Self::from_value(value, overrides)
    }

    /// Defaults with `overrides` applied.
    pub fn from_overrides(overrides: &[String]) -> Result<Self> {
        Self::from_value(Value::Object(Default::default()), overrides)
    }

    pub fn from_value(mut value: Value, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { String::new() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let name = self.dataset.name.ok_or_else(|| Error::config("dataset.name", "missing dataset name"))?;
        if self.dataset.test_size == 0 {
            return Err(Error::config("dataset.test_size", "must be at least 1"));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "widths must be positive"));
        }
        self.solver.validate()?;
        self.trace.validate(name.dim())?;
        self.policy.build()?;
        self.optimizer.adam().validate("optimizer")?;
        if !(self.optimizer.clip > 0.0) {
            return Err(Error::config("optimizer.clip", "must be positive"));
        }
        let s = &self.schedule;
        if s.iterations == 0 {
            return Err(Error::config("schedule.iterations", "must be at least 1"));
        }
        if s.batch_size == 0 {
            return Err(Error::config("schedule.batch_size", "must be at least 1"));
        }
        if s.eval_every == 0 {
            return Err(Error::config("schedule.eval_every", "must be at least 1"));
        }
        if s.eval_shard == 0 {
            return Err(Error::config("schedule.eval_shard", "must be at least 1"));
        }
        Ok(())
    }

    pub fn dataset_name(&self) -> Dataset {
        self.dataset.name.expect("validated config has a dataset")
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec::new(self.dataset_name(), self.dataset.seed.unwrap_or(self.seed), self.schedule.batch_size)
    }

    pub fn build_model(&self, net: DynamicsNet, policy: &TimePolicy) -> Result<FlowModel> {
        FlowModel::new(net, policy.t0, policy.t_end, self.solver.clone(), self.trace.clone())
    }

    /// `out_dir`, else `$TOFLOW_OUT_DIR/<name>`, else `runs/<name>`.
    pub fn resolved_out_dir(&self) -> PathBuf {
        if let Some(d) = &self.out_dir {
            return d.clone();
        }
        let name = format!(
            "{}-{}-seed{}",
            self.dataset.name.map(|d| d.name()).unwrap_or("data"),
            serde_json::to_value(self.policy.tag).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default(),
            self.seed
        );
        match std::env::var_os(OUT_DIR_ENV) {
            Some(base) if !base.is_empty() => PathBuf::from(base).join(name),
            _ => PathBuf::from("runs").join(name),
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Applies `a.b.c=value` to a JSON tree. The value is read as JSON when it
/// parses as such and as a plain string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must have the form key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(key, "empty key segment"));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(Error::config(parts[..i].join("."), "is not a table"));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("key has at least one segment")
}
