//! Time-conditioned MLP `f(z, t; θ)` used as the flow's velocity field.
//!
//! Every layer sees its input with the current time appended as an extra
//! column. Hidden layers use tanh, the output layer is linear. The
//! vector–Jacobian product with respect to `z` is written out explicitly in
//! terms of tape operations, so the divergence it produces can itself be
//! differentiated with respect to `θ` and `z` by an ordinary reverse sweep.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub w: Tensor,
    /// `1 × out`
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsNet {
    dim: usize,
    hidden: Vec<usize>,
    layers: Vec<Layer>,
}

/// Architecture description written next to serialized parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureMeta {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub activation: String,
    pub time_conditioning: String,
    pub param_count: usize,
}

/// Parameters of a [`DynamicsNet`] registered on a tape.
#[derive(Clone, Debug)]
pub struct NetVars {
    pub layers: Vec<(Var, Var)>,
}

impl NetVars {
    pub fn all(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Intermediate values of one forward pass, kept for the VJP.
#[derive(Clone, Debug)]
pub struct Forward {
    pub out: Var,
    /// `1 − h²` for each hidden activation `h`.
    tanh_grads: Vec<Var>,
}

const PARAM_MAGIC: &[u8; 4] = b"TFNP";
const PARAM_VERSION: u32 = 1;

impl DynamicsNet {
    fn layer_dims(dim: usize, hidden: &[usize]) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(hidden.len() + 1);
        let mut width = dim;
        for &h in hidden {
            dims.push((h, width + 1));
            width = h;
        }
        dims.push((dim, width + 1));
        dims
    }

    /// All weights and biases zero: `f ≡ 0`.
    pub fn zeros(dim: usize, hidden: &[usize]) -> Self {
        let layers = Self::layer_dims(dim, hidden)
            .into_iter()
            .map(|(o, i)| Layer { w: Tensor::zeros(o, i), b: Tensor::zeros(1, o) })
            .collect();
        Self { dim, hidden: hidden.to_vec(), layers }
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut net = Self::zeros(dim, hidden);
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.w.cols() as f64).sqrt();
            for w in layer.w.data_mut() {
                *w = rng.random_range(-bound..=bound);
            }
        }
        net
    }

    /// Single linear layer `f(z, t) = A z` (time column zero, no bias).
    pub fn linear(a: &Tensor) -> Result<Self> {
        let d = a.rows();
        if a.cols() != d {
            return Err(Error::Shape { op: "linear", detail: format!("A is {}x{}", a.rows(), a.cols()) });
        }
        let mut net = Self::zeros(d, &[]);
        net.layers[0].w = a.concat_cols(&Tensor::zeros(d, 1));
        Ok(net)
    }

    pub fn from_layers(dim: usize, hidden: &[usize], layers: Vec<Layer>) -> Result<Self> {
        let dims = Self::layer_dims(dim, hidden);
        if dims.len() != layers.len() {
            return Err(Error::Shape {
                op: "from_layers",
                detail: format!("{} layers for {} hidden widths", layers.len(), hidden.len()),
            });
        }
        for (l, (o, i)) in layers.iter().zip(dims) {
            if l.w.shape() != (o, i) || l.b.shape() != (1, o) {
                return Err(Error::Shape {
                    op: "from_layers",
                    detail: format!("layer {:?}/{:?}, expected {o}x{i}", l.w.shape(), l.b.shape()),
                });
            }
        }
        Ok(Self { dim, hidden: hidden.to_vec(), layers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Parameter tensors in `(w₀, b₀, w₁, b₁, …)` order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }

    pub fn register(&self, tape: &mut Tape) -> Result<NetVars> {
        let layers = self
            .layers
            .iter()
            .map(|l| Ok((tape.leaf(l.w.clone())?, tape.leaf(l.b.clone())?)))
            .collect::<Result<_>>()?;
        Ok(NetVars { layers })
    }

    /// Same as [`register`](Self::register) but the parameters receive no gradient.
    pub fn register_frozen(&self, tape: &mut Tape) -> Result<NetVars> {
        let layers = self
            .layers
            .iter()
            .map(|l| Ok((tape.constant(l.w.clone())?, tape.constant(l.b.clone())?)))
            .collect::<Result<_>>()?;
        Ok(NetVars { layers })
    }

    fn check_input(&self, tape: &Tape, z: Var, t: f64) -> Result<()> {
        let cols = tape.node(z)?.value.cols();
        if cols != self.dim {
            return Err(Error::Dimension { expected: self.dim, got: cols });
        }
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "time", index: 0, value: t });
        }
        Ok(())
    }

    /// Forward pass on `z` (`B × D`) at time `t`.
    pub fn forward(&self, tape: &mut Tape, vars: &NetVars, z: Var, t: f64) -> Result<Forward> {
        self.check_input(tape, z, t)?;
        let batch = tape.value(z).rows();
        let time = tape.constant(Tensor::full(batch, 1, t))?;
        let mut a = z;
        let mut tanh_grads = Vec::with_capacity(self.hidden.len());
        let last = vars.layers.len() - 1;
        for (i, &(w, b)) in vars.layers.iter().enumerate() {
            let x = tape.concat_cols(a, time)?;
            let u = tape.affine(x, w, b)?;
            if i == last {
                a = u;
            } else {
                a = tape.tanh(u)?;
                tanh_grads.push(tape.tanh_deriv(a)?);
            }
        }
        Ok(Forward { out: a, tanh_grads })
    }

    /// `f(z, t; θ)` for the whole batch.
    pub fn eval(&self, tape: &mut Tape, vars: &NetVars, z: Var, t: f64) -> Result<Var> {
        Ok(self.forward(tape, vars, z, t)?.out)
    }

    /// Row-wise `vᵀ ∂f/∂z` reusing a recorded forward pass.
    pub fn vjp_from(&self, tape: &mut Tape, vars: &NetVars, fwd: &Forward, v: Var) -> Result<Var> {
        let mut g = v;
        for (i, &(w, _)) in vars.layers.iter().enumerate().rev() {
            let ga = tape.matmul(g, w)?;
            let in_width = if i == 0 { self.dim } else { self.hidden[i - 1] };
            let gh = tape.slice_cols(ga, 0, in_width)?;
            g = if i == 0 { gh } else { tape.mul(gh, fwd.tanh_grads[i - 1])? };
        }
        Ok(g)
    }

    pub fn vjp_state(&self, tape: &mut Tape, vars: &NetVars, z: Var, t: f64, v: Var) -> Result<Var> {
        let fwd = self.forward(tape, vars, z, t)?;
        self.vjp_from(tape, vars, &fwd, v)
    }

    /// `∂z(T)/∂T` along the flow, which is the velocity itself.
    pub fn time_partial(&self, tape: &mut Tape, vars: &NetVars, z: Var, t: f64) -> Result<Var> {
        self.eval(tape, vars, z, t)
    }

    /// Evaluates `f` on plain values using a scratch tape.
    pub fn eval_values(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape)?;
        let zv = tape.constant(z.clone())?;
        let out = self.eval(&mut tape, &vars, zv, t)?;
        Ok(tape.value(out).clone())
    }

    pub fn metadata(&self) -> ArchitectureMeta {
        ArchitectureMeta {
            format: "toflow-params".into(),
            version: PARAM_VERSION,
            dim: self.dim,
            hidden: self.hidden.clone(),
            activation: "tanh".into(),
            time_conditioning: "concat".into(),
            param_count: self.param_count(),
        }
    }

    /// Flat little-endian record: magic, version, layer count, per-layer
    /// `(out, in)` shapes, then every `w` (row-major) followed by its `b`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.layers.len() + 8 * self.param_count());
        out.extend_from_slice(PARAM_MAGIC);
        out.extend_from_slice(&PARAM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.w.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(l.w.cols() as u32).to_le_bytes());
        }
        for l in &self.layers {
            for v in l.w.data().iter().chain(l.b.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Shape { op: "from_bytes", detail: m.to_string() };
        let mut cur = ByteReader { bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated magic"))? != PARAM_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = cur.u32().ok_or_else(|| bad("truncated version"))?;
        if version != PARAM_VERSION {
            return Err(Error::Version { found: version, expected: PARAM_VERSION });
        }
        let n = cur.u32().ok_or_else(|| bad("truncated layer count"))? as usize;
        if n == 0 {
            return Err(bad("no layers"));
        }
        let mut shapes = Vec::with_capacity(n);
        for _ in 0..n {
            let o = cur.u32().ok_or_else(|| bad("truncated shape"))? as usize;
            let i = cur.u32().ok_or_else(|| bad("truncated shape"))? as usize;
            shapes.push((o, i));
        }
        let mut layers = Vec::with_capacity(n);
        for &(o, i) in &shapes {
            let w = (0..o * i).map(|_| cur.f64()).collect::<Option<Vec<_>>>().ok_or_else(|| bad("truncated weights"))?;
            let b = (0..o).map(|_| cur.f64()).collect::<Option<Vec<_>>>().ok_or_else(|| bad("truncated bias"))?;
            layers.push(Layer { w: Tensor::new(o, i, w)?, b: Tensor::new(1, o, b)? });
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let dim = shapes[n - 1].0;
        let hidden: Vec<usize> = shapes[..n - 1].iter().map(|s| s.0).collect();
        Self::from_layers(dim, &hidden, layers)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}
