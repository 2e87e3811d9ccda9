//! Metrics rows, run files, and checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{ArchitectureMeta, DynamicsNet};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::temporal::{PolicyKind, T0Gradient, TemporalOpt, TimePolicy};
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CHECKPOINT_SIDECAR: &str = "checkpoint.json";
pub const RUN_META_FILE: &str = "run_meta.json";

pub const METRICS_HEADER: [&str; 11] = [
    "iteration",
    "train_loss",
    "test_loss",
    "bpd",
    "nfe_forward",
    "nfe_avg_window",
    "grad_norm_pre_clip",
    "clipped_fraction",
    "T_current",
    "t0_current",
    "wall_ms",
];

/// Window length of the running NFE average.
pub const NFE_WINDOW: usize = 500;

/// `−(log p / d − ln 256) / ln 2` for a mean log-likelihood in nats.
pub fn bits_per_dim(mean_log_likelihood: f64, d: usize) -> f64 {
    -(mean_log_likelihood / d as f64 - 256f64.ln()) / std::f64::consts::LN_2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub bpd: Option<f64>,
    pub nfe_forward: u64,
    pub nfe_avg_window: f64,
    pub grad_norm_pre_clip: f64,
    pub clipped_fraction: f64,
    #[serde(rename = "T_current")]
    pub t_current: f64,
    pub t0_current: f64,
    pub wall_ms: f64,
}

impl MetricsRow {
    /// Copy with the wall-clock field zeroed, for reproducibility comparisons.
    pub fn without_wall_time(&self) -> Self {
        Self { wall_ms: 0.0, ..self.clone() }
    }
}

/// Append-only CSV writer that flushes every row.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    /// Starts a fresh `metrics.csv` in `run_dir`.
    pub fn create(run_dir: &Path) -> Result<Self> {
        fs::create_dir_all(run_dir)?;
        let file = File::create(run_dir.join(METRICS_FILE))?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        inner.write_record(METRICS_HEADER)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    /// Continues an existing file, keeping rows up to and including `last_iteration`.
    pub fn resume(run_dir: &Path, last_iteration: Option<u64>) -> Result<Self> {
        let path = run_dir.join(METRICS_FILE);
        let keep: Vec<MetricsRow> = if path.exists() {
            read_rows(run_dir)?
                .into_iter()
                .filter(|r| last_iteration.is_some_and(|l| r.iteration <= l))
                .collect()
        } else {
            Vec::new()
        };
        let mut w = Self::create(run_dir)?;
        for r in &keep {
            w.write_row(r)?;
        }
        Ok(w)
    }

    pub fn write_row(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Appends one row to `run_dir/metrics.csv`, creating the file with its header if needed.
pub fn write_row(run_dir: &Path, row: &MetricsRow) -> Result<()> {
    let path = run_dir.join(METRICS_FILE);
    let fresh = !path.exists() || fs::metadata(&path)?.len() == 0;
    fs::create_dir_all(run_dir)?;
    let file = OpenOptions::new().create(true).append(true).open(&path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(METRICS_HEADER)?;
    }
    w.serialize(row)?;
    w.flush()?;
    Ok(())
}

/// Reads `run_dir/metrics.csv`. An empty file yields no rows.
pub fn read_rows(run_dir: &Path) -> Result<Vec<MetricsRow>> {
    read_rows_file(&run_dir.join(METRICS_FILE))
}

pub fn read_rows_file(path: &Path) -> Result<Vec<MetricsRow>> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    if fs::metadata(path)?.len() == 0 {
        return Ok(Vec::new());
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.iter().ne(METRICS_HEADER.iter().copied()) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("header {:?} does not match {:?}", header.iter().collect::<Vec<_>>(), METRICS_HEADER),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), line, message };
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        let row: MetricsRow = rec.deserialize(Some(&header)).map_err(|e| parse_err(e.to_string()))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// `Σ |x_{k+1} − x_k|`.
pub fn total_variation(values: &[f64]) -> f64 {
    values.windows(2).map(|p| (p[1] - p[0]).abs()).sum()
}

/// Column names for a point cloud of dimension `d`: `x,y` in 2-D, else `x1..xd`.
pub fn point_columns(d: usize) -> Vec<String> {
    match d {
        2 => vec!["x".into(), "y".into()],
        _ => (1..=d).map(|i| format!("x{i}")).collect(),
    }
}

/// Writes the rows of `points` as CSV with a header row. Zero rows give a header-only file.
pub fn write_points_csv<W: Write>(out: W, points: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(point_columns(points.cols()))?;
    for r in 0..points.rows() {
        w.write_record((0..points.cols()).map(|c| format!("{:?}", points.get(r, c))))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"TFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Number of completed iterations.
    pub iteration: u64,
    pub net: DynamicsNet,
    pub weight_opt: AdamState,
    pub policy: TimePolicy,
    pub nfe_window: Vec<u64>,
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointSidecar {
    pub format: String,
    pub version: u32,
    pub iteration: u64,
    pub sha256: String,
    pub architecture: ArchitectureMeta,
    pub policy: String,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub t0: f64,
    pub config: serde_json::Value,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u64(t.rows() as u64);
        self.u64(t.cols() as u64);
        for &x in t.data() {
            self.f64(x);
        }
    }
    fn adam(&mut self, a: &AdamState) {
        let AdamConfig { lr, beta1, beta2, eps } = a.config;
        for x in [lr, beta1, beta2, eps] {
            self.f64(x);
        }
        self.u64(a.step_count);
        self.u64(a.m.len() as u64);
        for (m, v) in a.m.iter().zip(&a.v) {
            self.tensor(m);
            self.tensor(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated payload")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> std::result::Result<usize, String> {
        let n = self.u64()?;
        usize::try_from(n).ok().filter(|&n| n <= self.buf.len()).ok_or_else(|| format!("length {n} out of range"))
    }
    fn bytes(&mut self) -> std::result::Result<&'a [u8], String> {
        let n = self.len()?;
        self.take(n)
    }
    fn tensor(&mut self) -> std::result::Result<Tensor, String> {
        let (r, c) = (self.len()?, self.len()?);
        let n = r.checked_mul(c).filter(|&n| n <= self.buf.len() / 8).ok_or("tensor too large")?;
        let data = (0..n).map(|_| self.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        Tensor::new(r, c, data).map_err(|e| e.to_string())
    }
    fn adam(&mut self) -> std::result::Result<AdamState, String> {
        let config = AdamConfig { lr: self.f64()?, beta1: self.f64()?, beta2: self.f64()?, eps: self.f64()? };
        let step_count = self.u64()?;
        let n = self.len()?;
        let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            m.push(self.tensor()?);
            v.push(self.tensor()?);
        }
        Ok(AdamState { config, step_count, m, v })
    }
}

impl Checkpoint {
    fn payload(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.u64(self.iteration);
        w.bytes(&self.net.to_bytes());
        w.adam(&self.weight_opt);
        w.f64(self.policy.t0);
        w.f64(self.policy.t_end);
        match &self.policy.kind {
            PolicyKind::Fixed => w.u8(0),
            PolicyKind::Steer { t_end0, half_width } => {
                w.u8(1);
                w.f64(*t_end0);
                w.f64(*half_width);
            }
            PolicyKind::TemporalOpt(o) => {
                w.u8(2);
                for x in [o.alpha, o.epsilon, o.t_end0, o.t0_init] {
                    w.f64(x);
                }
                w.u8(o.optimize_t0 as u8);
                w.u8(match o.t0_gradient {
                    T0Gradient::Exact => 0,
                    T0Gradient::Endpoint => 1,
                });
                w.adam(&o.adam);
            }
        }
        w.u64(self.nfe_window.len() as u64);
        for &n in &self.nfe_window {
            w.u64(n);
        }
        w.bytes(self.config.to_string().as_bytes());
        w.0
    }

    fn from_payload(buf: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf, pos: 0 };
        let iteration = r.u64()?;
        let net = DynamicsNet::from_bytes(r.bytes()?).map_err(|e| e.to_string())?;
        let weight_opt = r.adam()?;
        let (t0, t_end) = (r.f64()?, r.f64()?);
        let kind = match r.u8()? {
            0 => PolicyKind::Fixed,
            1 => PolicyKind::Steer { t_end0: r.f64()?, half_width: r.f64()? },
            2 => {
                let (alpha, epsilon, t_end0, t0_init) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
                let optimize_t0 = r.u8()? != 0;
                let t0_gradient = match r.u8()? {
                    0 => T0Gradient::Exact,
                    1 => T0Gradient::Endpoint,
                    other => return Err(format!("unknown t0 gradient tag {other}")),
                };
                let adam = r.adam()?;
                PolicyKind::TemporalOpt(TemporalOpt { alpha, epsilon, optimize_t0, t0_gradient, t_end0, t0_init, adam })
            }
            other => return Err(format!("unknown policy tag {other}")),
        };
        let n = r.len()?;
        let nfe_window = (0..n).map(|_| r.u64()).collect::<std::result::Result<Vec<_>, _>>()?;
        let config = serde_json::from_slice(r.bytes()?).map_err(|e| e.to_string())?;
        if r.pos != buf.len() {
            return Err("trailing bytes".into());
        }
        Ok(Self { iteration, net, weight_opt, policy: TimePolicy { t0, t_end, kind }, nfe_window, config })
    }

    /// Writes `checkpoint.bin` and `checkpoint.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let payload = self.payload();
        let digest = Sha256::digest(&payload);
        let mut bytes = Vec::with_capacity(payload.len() + 40);
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&payload);
        bytes.extend_from_slice(&digest);
        let path = dir.join(CHECKPOINT_FILE);
        let tmp = dir.join(format!("{CHECKPOINT_FILE}.tmp"));
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, &path)?;
        let sidecar = CheckpointSidecar {
            format: "toflow-checkpoint".into(),
            version: CHECKPOINT_VERSION,
            iteration: self.iteration,
            sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
            architecture: self.net.metadata(),
            policy: self.policy.tag().into(),
            t_end: self.policy.t_end,
            t0: self.policy.t0,
            config: self.config.clone(),
        };
        write_json(&dir.join(CHECKPOINT_SIDECAR), &sidecar)?;
        Ok(path)
    }

    /// Loads a checkpoint from a `checkpoint.bin` path or the directory holding it.
    pub fn load(path: &Path) -> Result<Self> {
        if path.as_os_str().is_empty() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
        if !file.is_file() {
            return Err(Error::NotFound(file));
        }
        let bytes = fs::read(&file)?;
        let corrupt = |m: &str| Error::Corrupt(file.clone(), m.to_string());
        if bytes.len() < 8 + 32 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let (payload, digest) = bytes[8..].split_at(bytes.len() - 8 - 32);
        if Sha256::digest(payload).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        Self::from_payload(payload).map_err(|m| corrupt(&m))
    }
}
