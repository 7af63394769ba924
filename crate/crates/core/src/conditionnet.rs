//! Query-conditioned bias generator.
//!
//! The query feature (length `dim`) is read as a sequence of `chunks`
//! consecutive slices of length `dim / chunks`, fed through one gated
//! recurrent (LSTM) cell with hidden size `hidden`, and the last hidden state
//! is projected back to `dim`. The projection starts at exactly zero, so a
//! fresh network emits the zero vector for every input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetShape {
    pub dim: usize,
    pub chunks: usize,
    pub hidden: usize,
}

impl NetShape {
    pub fn new(dim: usize, chunks: usize, hidden: usize) -> Result<Self> {
        if chunks == 0 || hidden == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "dim ({dim}), chunks ({chunks}) and hidden ({hidden}) must be positive"
            )));
        }
        if !dim.is_multiple_of(chunks) {
            return Err(Error::Config(format!(
                "dim {dim} is not divisible by chunk count {chunks}"
            )));
        }
        Ok(Self { dim, chunks, hidden })
    }

    pub fn chunk_size(&self) -> usize {
        self.dim / self.chunks
    }

    /// `4h(chunk + h + 1) + dim(h + 1)`
    pub fn parameter_count(&self) -> usize {
        4 * self.hidden * (self.chunk_size() + self.hidden + 1) + self.dim * (self.hidden + 1)
    }
}

/// Weights of one gate: `act(w x + u h + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    /// `hidden x chunk`
    pub w: Matrix,
    /// `hidden x hidden`
    pub u: Matrix,
    pub b: Vec<f64>,
}

impl Gate {
    fn zeros(hidden: usize, chunk: usize) -> Self {
        Self {
            w: Matrix::zeros(hidden, chunk),
            u: Matrix::zeros(hidden, hidden),
            b: vec![0.0; hidden],
        }
    }

    /// `w x + u h + b`
    fn preactivation(&self, x: &[f64], h: &[f64]) -> Vec<f64> {
        let mut out = self.b.clone();
        for (r, o) in out.iter_mut().enumerate() {
            let wx: f64 = self.w.row(r).iter().zip(x).map(|(a, b)| a * b).sum();
            let uh: f64 = self.u.row(r).iter().zip(h).map(|(a, b)| a * b).sum();
            *o += wx + uh;
        }
        out
    }
}

/// Network parameters. The same type also carries gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionNetParams {
    pub shape: NetShape,
    pub input: Gate,
    pub forget: Gate,
    pub output: Gate,
    pub cell: Gate,
    /// `dim x hidden`
    pub out_w: Matrix,
    pub out_b: Vec<f64>,
}

pub const DEFAULT_CHUNKS: usize = 8;
pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_FORGET_BIAS: f64 = 1.0;

/// Initializes gate weights uniform in `±1/sqrt(hidden)`, the forget-gate
/// bias to `forget_bias`, everything else (including the output head) to 0.
pub fn init_condition_net(shape: NetShape, forget_bias: f64, rng: &mut Rng) -> ConditionNetParams {
    let mut p = ConditionNetParams::zeros(shape);
    let bound = 1.0 / (shape.hidden as f64).sqrt();
    for gate in [&mut p.input, &mut p.forget, &mut p.output, &mut p.cell] {
        for v in gate.w.as_mut_slice().iter_mut().chain(gate.u.as_mut_slice()) {
            *v = rng.uniform(-bound, bound);
        }
    }
    p.forget.b.iter_mut().for_each(|b| *b = forget_bias);
    p
}

const TENSOR_NAMES: [&str; 14] = [
    "net.input.w",
    "net.input.u",
    "net.input.b",
    "net.forget.w",
    "net.forget.u",
    "net.forget.b",
    "net.output.w",
    "net.output.u",
    "net.output.b",
    "net.cell.w",
    "net.cell.u",
    "net.cell.b",
    "net.out.w",
    "net.out.b",
];

impl ConditionNetParams {
    pub fn zeros(shape: NetShape) -> Self {
        let (h, k) = (shape.hidden, shape.chunk_size());
        Self {
            shape,
            input: Gate::zeros(h, k),
            forget: Gate::zeros(h, k),
            output: Gate::zeros(h, k),
            cell: Gate::zeros(h, k),
            out_w: Matrix::zeros(shape.dim, h),
            out_b: vec![0.0; shape.dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    /// `(name, shape, data)` for every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let mut out = Vec::with_capacity(14);
        let mut names = TENSOR_NAMES.iter();
        for gate in [&self.input, &self.forget, &self.output, &self.cell] {
            out.push((
                *names.next().unwrap(),
                vec![gate.w.rows(), gate.w.cols()],
                gate.w.as_slice(),
            ));
            out.push((
                *names.next().unwrap(),
                vec![gate.u.rows(), gate.u.cols()],
                gate.u.as_slice(),
            ));
            out.push((*names.next().unwrap(), vec![gate.b.len()], gate.b.as_slice()));
        }
        out.push((
            *names.next().unwrap(),
            vec![self.out_w.rows(), self.out_w.cols()],
            self.out_w.as_slice(),
        ));
        out.push((*names.next().unwrap(), vec![self.out_b.len()], self.out_b.as_slice()));
        out
    }

    /// Mutable views in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = Vec::with_capacity(14);
        let mut names = TENSOR_NAMES.iter();
        for gate in [&mut self.input, &mut self.forget, &mut self.output, &mut self.cell] {
            out.push((*names.next().unwrap(), gate.w.as_mut_slice()));
            out.push((*names.next().unwrap(), gate.u.as_mut_slice()));
            out.push((*names.next().unwrap(), gate.b.as_mut_slice()));
        }
        out.push((*names.next().unwrap(), self.out_w.as_mut_slice()));
        out.push((*names.next().unwrap(), self.out_b.as_mut_slice()));
        out
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ConditionNetParams, scale: f64) {
        for ((_, dst), (_, _, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Step {
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Activations of one forward pass, consumed by [`condition_backward`].
pub struct NetTape {
    shape: NetShape,
    input: Vec<f64>,
    steps: Vec<Step>,
    h_last: Vec<f64>,
}

impl NetTape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Runs the recurrence and returns the bias vector `s` (length `dim`).
pub fn condition_forward(params: &ConditionNetParams, f_test: &[f64]) -> Result<(Vec<f64>, NetTape)> {
    let shape = params.shape;
    if f_test.len() != shape.dim {
        return Err(Error::shape(
            "condition_forward",
            format!("dim {}", shape.dim),
            format!("input of length {}", f_test.len()),
        ));
    }
    let hsz = shape.hidden;
    let mut h = vec![0.0; hsz];
    let mut c = vec![0.0; hsz];
    let mut steps = Vec::with_capacity(shape.chunks);

    for x in f_test.chunks_exact(shape.chunk_size()) {
        let i: Vec<f64> = params.input.preactivation(x, &h).into_iter().map(sigmoid).collect();
        let f: Vec<f64> = params.forget.preactivation(x, &h).into_iter().map(sigmoid).collect();
        let o: Vec<f64> = params.output.preactivation(x, &h).into_iter().map(sigmoid).collect();
        let g: Vec<f64> = params.cell.preactivation(x, &h).into_iter().map(f64::tanh).collect();
        let c_new: Vec<f64> = (0..hsz).map(|j| f[j] * c[j] + i[j] * g[j]).collect();
        let tanh_c: Vec<f64> = c_new.iter().map(|v| v.tanh()).collect();
        let h_new: Vec<f64> = (0..hsz).map(|j| o[j] * tanh_c[j]).collect();
        steps.push(Step {
            h_prev: std::mem::replace(&mut h, h_new),
            c_prev: std::mem::replace(&mut c, c_new),
            i,
            f,
            o,
            g,
            tanh_c,
        });
    }

    let mut s = params.out_b.clone();
    for (r, sr) in s.iter_mut().enumerate() {
        *sr += params.out_w.row(r).iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok((
        s,
        NetTape {
            shape,
            input: f_test.to_vec(),
            steps,
            h_last: h,
        },
    ))
}

/// Backpropagates `d_s` through a forward pass. Returns parameter gradients
/// and the gradient with respect to the input feature.
///
/// The tape is taken by value, so it cannot be replayed.
pub fn condition_backward(
    params: &ConditionNetParams,
    tape: NetTape,
    d_s: &[f64],
) -> Result<(ConditionNetParams, Vec<f64>)> {
    let shape = params.shape;
    if tape.shape != shape {
        return Err(Error::Contract(format!(
            "tape recorded for {:?}, parameters are {:?}",
            tape.shape, shape
        )));
    }
    if d_s.len() != shape.dim {
        return Err(Error::shape(
            "condition_backward",
            format!("dim {}", shape.dim),
            format!("upstream gradient of length {}", d_s.len()),
        ));
    }
    let hsz = shape.hidden;
    let k = shape.chunk_size();
    let mut grads = params.zeros_like();
    let mut d_input = vec![0.0; shape.dim];

    // output head
    let mut dh = vec![0.0; hsz];
    for (r, &ds) in d_s.iter().enumerate() {
        grads.out_b[r] = ds;
        if ds == 0.0 {
            continue;
        }
        for (g, h) in grads.out_w.row_mut(r).iter_mut().zip(&tape.h_last) {
            *g = ds * h;
        }
        for (j, w) in params.out_w.row(r).iter().enumerate() {
            dh[j] += w * ds;
        }
    }

    let mut dc = vec![0.0; hsz];
    for (t, step) in tape.steps.iter().enumerate().rev() {
        let x = &tape.input[t * k..(t + 1) * k];
        let mut da_i = vec![0.0; hsz];
        let mut da_f = vec![0.0; hsz];
        let mut da_o = vec![0.0; hsz];
        let mut da_g = vec![0.0; hsz];
        for j in 0..hsz {
            let d_o = dh[j] * step.tanh_c[j];
            dc[j] += dh[j] * step.o[j] * (1.0 - step.tanh_c[j] * step.tanh_c[j]);
            let d_i = dc[j] * step.g[j];
            let d_g = dc[j] * step.i[j];
            let d_f = dc[j] * step.c_prev[j];
            da_i[j] = d_i * step.i[j] * (1.0 - step.i[j]);
            da_f[j] = d_f * step.f[j] * (1.0 - step.f[j]);
            da_o[j] = d_o * step.o[j] * (1.0 - step.o[j]);
            da_g[j] = d_g * (1.0 - step.g[j] * step.g[j]);
            dc[j] *= step.f[j];
        }

        let mut dh_prev = vec![0.0; hsz];
        let dx = &mut d_input[t * k..(t + 1) * k];
        for (gate, grad, da) in [
            (&params.input, &mut grads.input, &da_i),
            (&params.forget, &mut grads.forget, &da_f),
            (&params.output, &mut grads.output, &da_o),
            (&params.cell, &mut grads.cell, &da_g),
        ] {
            for (r, &a) in da.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                grad.b[r] += a;
                for (gw, &xv) in grad.w.row_mut(r).iter_mut().zip(x) {
                    *gw += a * xv;
                }
                for (gu, &hv) in grad.u.row_mut(r).iter_mut().zip(&step.h_prev) {
                    *gu += a * hv;
                }
                for (d, &w) in dx.iter_mut().zip(gate.w.row(r)) {
                    *d += a * w;
                }
                for (d, &u) in dh_prev.iter_mut().zip(gate.u.row(r)) {
                    *d += a * u;
                }
            }
        }
        dh = dh_prev;
    }
    Ok((grads, d_input))
}
