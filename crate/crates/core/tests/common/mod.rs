#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use toflow::autodiff::{Tape, Var};
use toflow::config::RunConfig;
use toflow::Tensor;

pub const ROWS: usize = 3;
pub const COLS: usize = 2;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

#[derive(Clone, Debug)]
pub enum Op {
    Tanh(usize),
    TanhDeriv(usize),
    Square(usize),
    Scale(usize, f64),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Lincomb(usize, usize, f64, f64),
    MatMul(usize, Tensor),
    MatMulNt(usize, Tensor),
    Affine(usize, Tensor, Tensor),
    ConcatSlice(usize, usize, usize),
}

#[derive(Clone, Debug)]
pub enum Reduce {
    Sum(usize),
    Mean(usize),
    Dot(usize, usize),
    SumRows(usize),
}

/// A random straight-line program over `ROWS × COLS` values ending in a scalar.
#[derive(Clone, Debug)]
pub struct Program {
    pub input: Tensor,
    pub ops: Vec<Op>,
    pub reduce: Reduce,
}

impl Program {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = uniform(&mut rng, ROWS, COLS, 1.0);
        let n_ops = rng.random_range(2..9);
        let mut ops = Vec::with_capacity(n_ops);
        for k in 0..n_ops {
            let pool = k + 1;
            let mut pick = || rng.random_range(0..pool);
            let (a, b) = (pick(), pick());
            let op = match rng.random_range(0..12) {
                0 => Op::Tanh(a),
                1 => Op::TanhDeriv(a),
                2 => Op::Square(a),
                3 => Op::Scale(a, rng.random_range(-1.5..1.5)),
                4 => Op::Add(a, b),
                5 => Op::Sub(a, b),
                6 => Op::Mul(a, b),
                7 => Op::Lincomb(a, b, rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)),
                8 => Op::MatMul(a, uniform(&mut rng, COLS, COLS, 1.0)),
                9 => Op::MatMulNt(a, uniform(&mut rng, COLS, COLS, 1.0)),
                10 => Op::Affine(a, uniform(&mut rng, COLS, COLS, 1.0), uniform(&mut rng, 1, COLS, 0.5)),
                _ => Op::ConcatSlice(a, b, rng.random_range(0..=COLS)),
            };
            ops.push(op);
        }
        let pool = n_ops + 1;
        let a = rng.random_range(0..pool);
        let reduce = match rng.random_range(0..4) {
            0 => Reduce::Sum(a),
            1 => Reduce::Mean(a),
            2 => Reduce::Dot(a, rng.random_range(0..pool)),
            _ => Reduce::SumRows(a),
        };
        Self { input, ops, reduce }
    }

    pub fn record(&self, tape: &mut Tape, x: Var) -> toflow::Result<Var> {
        let mut pool = vec![x];
        for op in &self.ops {
            let v = match op {
                Op::Tanh(a) => tape.tanh(pool[*a])?,
                Op::TanhDeriv(a) => tape.tanh_deriv(pool[*a])?,
                Op::Square(a) => tape.square(pool[*a])?,
                Op::Scale(a, c) => tape.scale(pool[*a], *c)?,
                Op::Add(a, b) => tape.add(pool[*a], pool[*b])?,
                Op::Sub(a, b) => tape.sub(pool[*a], pool[*b])?,
                Op::Mul(a, b) => tape.mul(pool[*a], pool[*b])?,
                Op::Lincomb(a, b, ca, cb) => tape.lincomb(&[(pool[*a], *ca), (pool[*b], *cb)])?,
                Op::MatMul(a, w) => {
                    let w = tape.constant(w.clone())?;
                    tape.matmul(pool[*a], w)?
                }
                Op::MatMulNt(a, w) => {
                    let w = tape.constant(w.clone())?;
                    tape.matmul_nt(pool[*a], w)?
                }
                Op::Affine(a, w, bias) => {
                    let w = tape.constant(w.clone())?;
                    let bias = tape.constant(bias.clone())?;
                    tape.affine(pool[*a], w, bias)?
                }
                Op::ConcatSlice(a, b, start) => {
                    let c = tape.concat_cols(pool[*a], pool[*b])?;
                    tape.slice_cols(c, *start, COLS)?
                }
            };
            pool.push(v);
        }
        match self.reduce {
            Reduce::Sum(a) => tape.sum(pool[a]),
            Reduce::Mean(a) => tape.mean(pool[a]),
            Reduce::Dot(a, b) => tape.dot(pool[a], pool[b]),
            Reduce::SumRows(a) => {
                let s = tape.sum_rows(pool[a])?;
                let s = tape.square(s)?;
                tape.sum(s)
            }
        }
    }

    pub fn value(&self, x: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone()).unwrap();
        let y = self.record(&mut tape, v).unwrap();
        tape.value(y).item()
    }

    pub fn reverse_gradient(&self) -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(self.input.clone()).unwrap();
        let y = self.record(&mut tape, x).unwrap();
        let g = tape.backward(y, &[x]).unwrap();
        g.get(x).cloned().unwrap_or_else(|| Tensor::zeros(ROWS, COLS)).into_data()
    }
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_difference(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between a program's reverse-mode gradient and central differences.
pub fn program_gradient_error(seed: u64) -> f64 {
    let p = Program::random(seed);
    let analytic = p.reverse_gradient();
    let numeric = central_difference(|x| p.value(x), &p.input, 1e-5);
    analytic.iter().zip(&numeric).map(|(a, n)| rel_err(*a, *n, 1e-3)).fold(0.0, f64::max)
}

/// Kolmogorov–Smirnov statistic against Uniform[lo, hi] and its asymptotic p-value.
pub fn ks_uniform(samples: &[f64], lo: f64, hi: f64) -> (f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in s.iter().enumerate() {
        let cdf = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
        d = d.max((i as f64 + 1.0) / n - cdf).max(cdf - i as f64 / n);
    }
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    (d, p.clamp(0.0, 1.0))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Closed-form loss of the 1-D flow `dz/dt = a z` on `[t0, t_end]`.
pub fn linear_flow_loss(a: f64, t0: f64, t_end: f64, x: &[f64]) -> f64 {
    let g = (a * (t_end - t0)).exp();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    -x.iter().map(|v| -0.5 * (v * g).powi(2) - 0.5 * ln2pi + a * (t_end - t0)).sum::<f64>() / x.len() as f64
}

/// Analytic `dL/dT` of [`linear_flow_loss`].
pub fn linear_flow_dl_dt(a: f64, t0: f64, t_end: f64, x: &[f64]) -> f64 {
    let g2 = (2.0 * a * (t_end - t0)).exp();
    x.iter().map(|v| a * v * v * g2).sum::<f64>() / x.len() as f64 - a
}

pub fn config(overrides: &[&str]) -> RunConfig {
    let set: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::from_overrides(&set).unwrap()
}

/// Small network and batch for quick training checks.
pub fn quick_config(dataset: &str, policy: &str, iterations: u64, extra: &[&str]) -> RunConfig {
    let mut set = vec![
        format!("dataset.name={dataset}"),
        format!("policy.tag={policy}"),
        format!("schedule.iterations={iterations}"),
        "schedule.batch_size=64".into(),
        "schedule.eval_every=10".into(),
        "schedule.checkpoint_every=5".into(),
        "dataset.test_size=256".into(),
        "model.hidden=[16,16]".into(),
    ];
    set.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::from_overrides(&set).unwrap()
}
