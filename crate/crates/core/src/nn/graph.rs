//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records layer-level operations as they run forward and replays
//! them backwards in [`Graph::backward`]. Parameters live in a borrowed
//! [`ParamStore`]; gradients are returned in the store's order.

use rand::Rng;

use super::tensor::{gemm, Real, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Parameter(format!("duplicate parameter name `{name}`")));
        }
        self.names.push(name);
        self.tensors.push(t);
        Ok(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index(name).map(move |i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

struct GruCache<T> {
    batch: usize,
    steps: usize,
    input: usize,
    hidden: usize,
    /// Input in time-major order `[T, B, In]`.
    x_tm: Vec<T>,
    /// Hidden states `[T + 1, B, H]`, starting with the zero state.
    hs: Vec<T>,
    r: Vec<T>,
    z: Vec<T>,
    n: Vec<T>,
    /// Recurrent pre-activation of the candidate gate, `[T, B, H]`.
    ghn: Vec<T>,
}

enum Op<T> {
    Input,
    Param(usize),
    Conv1d { x: NodeId, w: NodeId, b: NodeId, kernel: usize, cols: Vec<T> },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Relu { x: NodeId },
    Dropout { x: NodeId, mask: Vec<T> },
    MeanTime { x: NodeId },
    LastStep { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<T>, inv_std: Vec<T> },
    Gru { x: NodeId, w_ih: NodeId, w_hh: NodeId, b_ih: NodeId, b_hh: NodeId, cache: Box<GruCache<T>> },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients aligned with the parameters of a [`ParamStore`].
pub type Gradients<T> = Vec<Tensor<T>>;

pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph { params, nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        match self.nodes[id.0].op {
            Op::Param(p) => &self.params.tensors[p],
            _ => &self.nodes[id.0].value,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, deps: &[NodeId]) -> NodeId {
        let needs_grad = matches!(op, Op::Param(_)) || deps.iter().any(|d| self.nodes[d.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Input, &[])
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let idx = self
            .params
            .index(name)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter `{name}`")))?;
        Ok(self.push(Tensor { shape: Vec::new(), data: Vec::new() }, Op::Param(idx), &[]))
    }

    fn shape_err(what: &str, got: &[usize], want: &str) -> Error {
        Error::Shape(format!("{what}: got {got:?}, expected {want}"))
    }

    /// Same-length 1D convolution over time. `x: [B, T, Cin]`,
    /// `w: [K * Cin, Cout]` (row `k * Cin + ci`), `b: [Cout]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, kernel: usize) -> Result<NodeId> {
        let xs = self.value(x).shape.clone();
        if xs.len() != 3 {
            return Err(Self::shape_err("conv1d input", &xs, "[batch, time, channels]"));
        }
        let (bsz, steps, cin) = (xs[0], xs[1], xs[2]);
        let ws = self.value(w).shape.clone();
        if ws.len() != 2 || ws[0] != kernel * cin {
            return Err(Self::shape_err("conv1d weight", &ws, &format!("[{}, out]", kernel * cin)));
        }
        let cout = ws[1];
        let pad = (kernel - 1) / 2;
        let kc = kernel * cin;
        let xv = &self.value(x).data;
        let mut cols = vec![T::zero(); bsz * steps * kc];
        for bi in 0..bsz {
            for t in 0..steps {
                let row = &mut cols[(bi * steps + t) * kc..(bi * steps + t + 1) * kc];
                for k in 0..kernel {
                    let src = t as isize + k as isize - pad as isize;
                    if src < 0 || src >= steps as isize {
                        continue;
                    }
                    let off = (bi * steps + src as usize) * cin;
                    row[k * cin..(k + 1) * cin].copy_from_slice(&xv[off..off + cin]);
                }
            }
        }
        let bias = &self.value(b).data;
        if bias.len() != cout {
            return Err(Self::shape_err("conv1d bias", &self.value(b).shape, &format!("[{cout}]")));
        }
        let mut out = Vec::with_capacity(bsz * steps * cout);
        for _ in 0..bsz * steps {
            out.extend_from_slice(bias);
        }
        gemm(bsz * steps, kc, cout, &cols, false, &self.value(w).data, false, T::one(), &mut out);
        let value = Tensor::new(vec![bsz, steps, cout], out);
        Ok(self.push(value, Op::Conv1d { x, w, b, kernel, cols }, &[x, w, b]))
    }

    /// Affine map over the last dimension: `x: [.., In]`, `w: [In, Out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape.clone();
        let ws = self.value(w).shape.clone();
        let inp = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != inp {
            return Err(Self::shape_err("linear weight", &ws, &format!("[{inp}, out]")));
        }
        let out_dim = ws[1];
        let rows = self.value(x).len() / inp.max(1);
        let bias = &self.value(b).data;
        if bias.len() != out_dim {
            return Err(Self::shape_err("linear bias", &self.value(b).shape, &format!("[{out_dim}]")));
        }
        let mut out = Vec::with_capacity(rows * out_dim);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        gemm(rows, inp, out_dim, &self.value(x).data, false, &self.value(w).data, false, T::one(), &mut out);
        let mut shape = xs;
        *shape.last_mut().expect("non-scalar input") = out_dim;
        Ok(self.push(Tensor::new(shape, out), Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out = Tensor::new(v.shape.clone(), v.data.iter().map(|&a| a.max(T::zero())).collect());
        self.push(out, Op::Relu { x }, &[x])
    }

    /// Inverted dropout with drop probability `p`.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, p: f64, rng: &mut R) -> NodeId {
        let keep = T::from_f64(1.0 / (1.0 - p));
        let v = self.value(x);
        let mask: Vec<T> = (0..v.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = Tensor::new(v.shape.clone(), v.data.iter().zip(&mask).map(|(a, m)| *a * *m).collect());
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    /// Mean over the time axis of `[B, T, C]`.
    pub fn mean_time(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.shape.len() != 3 {
            return Err(Self::shape_err("mean_time input", &v.shape, "[batch, time, channels]"));
        }
        let (b, t, c) = (v.shape[0], v.shape[1], v.shape[2]);
        let mut out = vec![T::zero(); b * c];
        for bi in 0..b {
            let acc = &mut out[bi * c..(bi + 1) * c];
            for ti in 0..t {
                add_into(acc, &v.data[(bi * t + ti) * c..(bi * t + ti + 1) * c]);
            }
            let inv = T::from_f64(1.0 / t as f64);
            acc.iter_mut().for_each(|a| *a = *a * inv);
        }
        Ok(self.push(Tensor::new(vec![b, c], out), Op::MeanTime { x }, &[x]))
    }

    /// Final time step of `[B, T, C]`.
    pub fn last_step(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.shape.len() != 3 || v.shape[1] == 0 {
            return Err(Self::shape_err("last_step input", &v.shape, "[batch, time>0, channels]"));
        }
        let (b, t, c) = (v.shape[0], v.shape[1], v.shape[2]);
        let mut out = Vec::with_capacity(b * c);
        for bi in 0..b {
            out.extend_from_slice(&v.data[(bi * t + t - 1) * c..(bi * t + t) * c]);
        }
        Ok(self.push(Tensor::new(vec![b, c], out), Op::LastStep { x }, &[x]))
    }

    /// Normalization over the last dimension with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let c = *v.shape.last().unwrap_or(&0);
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Self::shape_err("layer_norm gain/bias", &self.value(gain).shape, &format!("[{c}]")));
        }
        let rows = v.len() / c;
        let g = &self.value(gain).data;
        let bb = &self.value(bias).data;
        let mut xhat = vec![T::zero(); v.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); v.len()];
        let cf = T::from_f64(c as f64);
        for r in 0..rows {
            let row = &v.data[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / cf;
            let is = T::one() / (var + T::from_f64(LAYER_NORM_EPS)).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + bb[j];
            }
        }
        let value = Tensor::new(v.shape.clone(), out);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    /// One GRU layer over a whole sequence, gate order (reset, update,
    /// candidate):
    ///
    /// ```text
    /// r = s(x Wr + br + h Ur + cr)      z = s(x Wz + bz + h Uz + cz)
    /// n = tanh(x Wn + bn + r * (h Un + cn))
    /// h' = (1 - z) * n + z * h
    /// ```
    ///
    /// `x: [B, T, In]`, `w_ih: [In, 3H]`, `w_hh: [H, 3H]`, biases `[3H]`.
    /// Returns every hidden state, `[B, T, H]`.
    pub fn gru(&mut self, x: NodeId, w_ih: NodeId, w_hh: NodeId, b_ih: NodeId, b_hh: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape.clone();
        if xs.len() != 3 {
            return Err(Self::shape_err("gru input", &xs, "[batch, time, features]"));
        }
        let (bsz, steps, inp) = (xs[0], xs[1], xs[2]);
        let wi = self.value(w_ih).shape.clone();
        if wi.len() != 2 || wi[0] != inp || wi[1] % 3 != 0 {
            return Err(Self::shape_err("gru w_ih", &wi, &format!("[{inp}, 3 * hidden]")));
        }
        let h = wi[1] / 3;
        let wh = &self.value(w_hh).shape;
        if wh.as_slice() != [h, 3 * h] {
            return Err(Self::shape_err("gru w_hh", wh, &format!("[{h}, {}]", 3 * h)));
        }
        if self.value(b_ih).len() != 3 * h || self.value(b_hh).len() != 3 * h {
            return Err(Self::shape_err("gru bias", &self.value(b_ih).shape, &format!("[{}]", 3 * h)));
        }
        let h3 = 3 * h;
        let xv = &self.value(x).data;
        let mut x_tm = vec![T::zero(); steps * bsz * inp];
        for bi in 0..bsz {
            for t in 0..steps {
                x_tm[(t * bsz + bi) * inp..(t * bsz + bi + 1) * inp]
                    .copy_from_slice(&xv[(bi * steps + t) * inp..(bi * steps + t + 1) * inp]);
            }
        }
        let mut gi = Vec::with_capacity(steps * bsz * h3);
        for _ in 0..steps * bsz {
            gi.extend_from_slice(&self.value(b_ih).data);
        }
        gemm(steps * bsz, inp, h3, &x_tm, false, &self.value(w_ih).data, false, T::one(), &mut gi);

        let bh = &self.value(b_hh).data;
        let whh = &self.value(w_hh).data;
        let mut hs = vec![T::zero(); (steps + 1) * bsz * h];
        let mut r = vec![T::zero(); steps * bsz * h];
        let mut z = vec![T::zero(); steps * bsz * h];
        let mut n = vec![T::zero(); steps * bsz * h];
        let mut ghn = vec![T::zero(); steps * bsz * h];
        let mut gh = vec![T::zero(); bsz * h3];
        for t in 0..steps {
            for bi in 0..bsz {
                gh[bi * h3..(bi + 1) * h3].copy_from_slice(bh);
            }
            let (prev_all, next_all) = hs.split_at_mut((t + 1) * bsz * h);
            let prev = &prev_all[t * bsz * h..];
            gemm(bsz, h, h3, prev, false, whh, false, T::one(), &mut gh);
            let next = &mut next_all[..bsz * h];
            for bi in 0..bsz {
                let g_i = &gi[(t * bsz + bi) * h3..(t * bsz + bi + 1) * h3];
                let g_h = &gh[bi * h3..(bi + 1) * h3];
                for j in 0..h {
                    let o = (t * bsz + bi) * h + j;
                    let rv = sigmoid(g_i[j] + g_h[j]);
                    let zv = sigmoid(g_i[h + j] + g_h[h + j]);
                    let nv = (g_i[2 * h + j] + rv * g_h[2 * h + j]).tanh();
                    r[o] = rv;
                    z[o] = zv;
                    n[o] = nv;
                    ghn[o] = g_h[2 * h + j];
                    let hp = prev[bi * h + j];
                    next[bi * h + j] = (T::one() - zv) * nv + zv * hp;
                }
            }
        }
        let mut out = vec![T::zero(); bsz * steps * h];
        for t in 0..steps {
            for bi in 0..bsz {
                let src = ((t + 1) * bsz + bi) * h;
                out[(bi * steps + t) * h..(bi * steps + t + 1) * h].copy_from_slice(&hs[src..src + h]);
            }
        }
        let cache = Box::new(GruCache { batch: bsz, steps, input: inp, hidden: h, x_tm, hs, r, z, n, ghn });
        let value = Tensor::new(vec![bsz, steps, h], out);
        Ok(self.push(value, Op::Gru { x, w_ih, w_hh, b_ih, b_hh, cache }, &[x, w_ih, w_hh, b_ih, b_hh]))
    }

    /// Mean categorical cross-entropy of `logits: [B, C]` against `labels`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let v = self.value(logits);
        if v.shape.len() != 2 || v.shape[0] != labels.len() {
            return Err(Self::shape_err("cross_entropy logits", &v.shape, &format!("[{}, classes]", labels.len())));
        }
        let (b, c) = (v.shape[0], v.shape[1]);
        let mut probs = vec![T::zero(); b * c];
        let mut total = 0.0f64;
        for (bi, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(Error::Label { label, classes: c });
            }
            let row = &v.data[bi * c..(bi + 1) * c];
            let (p, lse) = softmax_row(row);
            probs[bi * c..(bi + 1) * c].copy_from_slice(&p);
            total += lse - row[label].as_f64();
        }
        let loss = Tensor::scalar(T::from_f64(total / b as f64));
        Ok(self.push(loss, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    /// Back-propagate from the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before a forward pass was recorded".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::State("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut param_grads: Gradients<T> = self.params.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => add_into(&mut param_grads[*p].data, &g),
                Op::Relu { x } => {
                    let xv = &self.value(*x).data;
                    let dx: Vec<T> = g.iter().zip(xv).map(|(&d, &a)| if a > T::zero() { d } else { T::zero() }).collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Dropout { x, mask } => {
                    let dx = g.iter().zip(mask).map(|(&d, &m)| d * m).collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::MeanTime { x } => {
                    let s = &self.value(*x).shape;
                    let (b, t, c) = (s[0], s[1], s[2]);
                    let inv = T::from_f64(1.0 / t as f64);
                    let mut dx = vec![T::zero(); b * t * c];
                    for bi in 0..b {
                        for ti in 0..t {
                            for j in 0..c {
                                dx[(bi * t + ti) * c + j] = g[bi * c + j] * inv;
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::LastStep { x } => {
                    let s = &self.value(*x).shape;
                    let (b, t, c) = (s[0], s[1], s[2]);
                    let mut dx = vec![T::zero(); b * t * c];
                    for bi in 0..b {
                        dx[(bi * t + t - 1) * c..(bi * t + t) * c].copy_from_slice(&g[bi * c..(bi + 1) * c]);
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let ws = &self.value(*w).shape;
                    let (inp, out) = (ws[0], ws[1]);
                    let rows = g.len() / out;
                    if self.nodes[w.0].needs_grad {
                        let mut dw = vec![T::zero(); inp * out];
                        gemm(inp, rows, out, &self.value(*x).data, true, &g, false, T::zero(), &mut dw);
                        self.accumulate(&mut grads, *w, dw);
                    }
                    if self.nodes[b.0].needs_grad {
                        self.accumulate(&mut grads, *b, column_sums(&g, out));
                    }
                    if self.nodes[x.0].needs_grad {
                        let mut dx = vec![T::zero(); rows * inp];
                        gemm(rows, out, inp, &g, false, &self.value(*w).data, true, T::zero(), &mut dx);
                        self.accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Conv1d { x, w, b, kernel, cols } => {
                    let xs = &self.value(*x).shape;
                    let (bsz, steps, cin) = (xs[0], xs[1], xs[2]);
                    let cout = self.value(*w).shape[1];
                    let kc = kernel * cin;
                    let rows = bsz * steps;
                    if self.nodes[w.0].needs_grad {
                        let mut dw = vec![T::zero(); kc * cout];
                        gemm(kc, rows, cout, cols, true, &g, false, T::zero(), &mut dw);
                        self.accumulate(&mut grads, *w, dw);
                    }
                    if self.nodes[b.0].needs_grad {
                        self.accumulate(&mut grads, *b, column_sums(&g, cout));
                    }
                    if self.nodes[x.0].needs_grad {
                        let mut dcols = vec![T::zero(); rows * kc];
                        gemm(rows, cout, kc, &g, false, &self.value(*w).data, true, T::zero(), &mut dcols);
                        let pad = (kernel - 1) / 2;
                        let mut dx = vec![T::zero(); bsz * steps * cin];
                        for bi in 0..bsz {
                            for t in 0..steps {
                                let row = &dcols[(bi * steps + t) * kc..(bi * steps + t + 1) * kc];
                                for k in 0..*kernel {
                                    let src = t as isize + k as isize - pad as isize;
                                    if src < 0 || src >= steps as isize {
                                        continue;
                                    }
                                    let off = (bi * steps + src as usize) * cin;
                                    add_into(&mut dx[off..off + cin], &row[k * cin..(k + 1) * cin]);
                                }
                            }
                        }
                        self.accumulate(&mut grads, *x, dx);
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gv = &self.value(*gain).data;
                    let c = gv.len();
                    let rows = g.len() / c;
                    let mut dgain = vec![T::zero(); c];
                    let mut dbias = vec![T::zero(); c];
                    let mut dx = vec![T::zero(); g.len()];
                    let cf = T::from_f64(c as f64);
                    for r in 0..rows {
                        let dy = &g[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for j in 0..c {
                            dgain[j] = dgain[j] + dy[j] * xh[j];
                            dbias[j] = dbias[j] + dy[j];
                            let dxh = dy[j] * gv[j];
                            sum_dxh = sum_dxh + dxh;
                            sum_dxh_xh = sum_dxh_xh + dxh * xh[j];
                        }
                        for j in 0..c {
                            let dxh = dy[j] * gv[j];
                            dx[r * c + j] = inv_std[r] / cf * (cf * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                        }
                    }
                    self.accumulate(&mut grads, *gain, dgain);
                    self.accumulate(&mut grads, *bias, dbias);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Gru { x, w_ih, w_hh, b_ih, b_hh, cache } => {
                    let (dx, dwi, dwh, dbi, dbh) = self.gru_backward(cache, &g, *w_ih, *w_hh);
                    self.accumulate(&mut grads, *w_ih, dwi);
                    self.accumulate(&mut grads, *w_hh, dwh);
                    self.accumulate(&mut grads, *b_ih, dbi);
                    self.accumulate(&mut grads, *b_hh, dbh);
                    if self.nodes[x.0].needs_grad {
                        self.accumulate(&mut grads, *x, dx);
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let c = probs.len() / labels.len();
                    let scale = g[0] / T::from_f64(labels.len() as f64);
                    let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (bi, &l) in labels.iter().enumerate() {
                        dl[bi * c + l] = dl[bi * c + l] - scale;
                    }
                    self.accumulate(&mut grads, *logits, dl);
                }
            }
        }
        Ok(param_grads)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], id: NodeId, g: Vec<T>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => add_into(existing, &g),
            slot @ None => *slot = Some(g),
        }
    }

    #[allow(clippy::type_complexity)]
    fn gru_backward(
        &self,
        c: &GruCache<T>,
        g: &[T],
        w_ih: NodeId,
        w_hh: NodeId,
    ) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
        let (bsz, steps, inp, h) = (c.batch, c.steps, c.input, c.hidden);
        let h3 = 3 * h;
        let whh = &self.value(w_hh).data;
        let mut dgi = vec![T::zero(); steps * bsz * h3];
        let mut dgh = vec![T::zero(); steps * bsz * h3];
        let mut dh = vec![T::zero(); bsz * h];
        let mut dh_prev = vec![T::zero(); bsz * h];
        let one = T::one();
        for t in (0..steps).rev() {
            for bi in 0..bsz {
                for j in 0..h {
                    dh[bi * h + j] = dh[bi * h + j] + g[(bi * steps + t) * h + j];
                }
            }
            for bi in 0..bsz {
                for j in 0..h {
                    let o = (t * bsz + bi) * h + j;
                    let (rv, zv, nv) = (c.r[o], c.z[o], c.n[o]);
                    let hp = c.hs[(t * bsz + bi) * h + j];
                    let d = dh[bi * h + j];
                    let dn = d * (one - zv);
                    let dz = d * (hp - nv);
                    let dn_pre = dn * (one - nv * nv);
                    let dr = dn_pre * c.ghn[o];
                    let dr_pre = dr * rv * (one - rv);
                    let dz_pre = dz * zv * (one - zv);
                    let base = (t * bsz + bi) * h3;
                    dgi[base + j] = dr_pre;
                    dgi[base + h + j] = dz_pre;
                    dgi[base + 2 * h + j] = dn_pre;
                    dgh[base + j] = dr_pre;
                    dgh[base + h + j] = dz_pre;
                    dgh[base + 2 * h + j] = dn_pre * rv;
                    dh_prev[bi * h + j] = d * zv;
                }
            }
            let dgh_t = &dgh[t * bsz * h3..(t + 1) * bsz * h3];
            gemm(bsz, h3, h, dgh_t, false, whh, true, T::one(), &mut dh_prev);
            std::mem::swap(&mut dh, &mut dh_prev);
        }
        let rows = steps * bsz;
        let mut dwi = vec![T::zero(); inp * h3];
        gemm(inp, rows, h3, &c.x_tm, true, &dgi, false, T::zero(), &mut dwi);
        let mut dwh = vec![T::zero(); h * h3];
        gemm(h, rows, h3, &c.hs[..rows * h], true, &dgh, false, T::zero(), &mut dwh);
        let dbi = column_sums(&dgi, h3);
        let dbh = column_sums(&dgh, h3);
        let mut dx_tm = vec![T::zero(); rows * inp];
        gemm(rows, h3, inp, &dgi, false, &self.value(w_ih).data, true, T::zero(), &mut dx_tm);
        let mut dx = vec![T::zero(); rows * inp];
        for t in 0..steps {
            for bi in 0..bsz {
                dx[(bi * steps + t) * inp..(bi * steps + t + 1) * inp]
                    .copy_from_slice(&dx_tm[(t * bsz + bi) * inp..(t * bsz + bi + 1) * inp]);
            }
        }
        (dx, dwi, dwh, dbi, dbh)
    }
}

fn column_sums<T: Real>(g: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in g.chunks_exact(cols) {
        add_into(&mut out, row);
    }
    out
}

/// Numerically stable softmax of one row; also returns log-sum-exp in f64.
pub fn softmax_row<T: Real>(row: &[T]) -> (Vec<T>, f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (exps.iter().map(|e| T::from_f64(e / sum)).collect(), max + sum.ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(entries: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamStore<f64> {
        let mut s = ParamStore::default();
        for (n, shape, data) in entries {
            s.push(*n, Tensor::new(shape.clone(), data.clone())).unwrap();
        }
        s
    }

    #[test]
    fn affine_gradient_by_hand() {
        // L = sum(y * c) with y = x W, so dL/dW = x^T c.
        let params = store(&[
            ("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]),
            ("b", vec![2], vec![0.0, 0.0]),
        ]);
        let mut g = Graph::new(&params);
        let x = g.input(Tensor::new(vec![1, 2], vec![5.0, 7.0]));
        let w = g.param("w").unwrap();
        let b = g.param("b").unwrap();
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data, vec![5.0 + 21.0, 10.0 + 28.0]);
        // Cross-entropy with a one-sample batch gives dL/dy = p - onehot.
        let loss = g.cross_entropy(y, &[0]).unwrap();
        let grads = g.backward(loss).unwrap();
        let (p, _) = softmax_row(&g.value(y).data);
        let dy = [p[0] - 1.0, p[1]];
        let want = [5.0 * dy[0], 5.0 * dy[1], 7.0 * dy[0], 7.0 * dy[1]];
        for (a, b) in grads[0].data.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in grads[1].data.iter().zip(dy) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let params = store(&[]);
        let g = Graph::<f64>::new(&params);
        assert!(matches!(g.backward(NodeId(0)), Err(Error::State(_))));
    }

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let params = store(&[
            ("w", vec![1, 2], vec![0.5, -0.5]),
            ("b", vec![2], vec![0.1, 0.2]),
            ("unused", vec![3], vec![1.0, 2.0, 3.0]),
        ]);
        let mut g = Graph::new(&params);
        let x = g.input(Tensor::new(vec![1, 1], vec![2.0]));
        let (w, b) = (g.param("w").unwrap(), g.param("b").unwrap());
        let y = g.linear(x, w, b).unwrap();
        let loss = g.cross_entropy(y, &[1]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads[2].data, vec![0.0; 3]);
        assert!(grads[0].data.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn label_out_of_range() {
        let params = store(&[]);
        let mut g = Graph::<f64>::new(&params);
        let x = g.input(Tensor::new(vec![1, 3], vec![0.0; 3]));
        assert!(matches!(g.cross_entropy(x, &[3]), Err(Error::Label { label: 3, classes: 3 })));
    }

    #[test]
    fn conv_shape_mismatch_names_dims() {
        let params = store(&[("w", vec![6, 2], vec![0.0; 12]), ("b", vec![2], vec![0.0; 2])]);
        let mut g = Graph::new(&params);
        let x = g.input(Tensor::new(vec![1, 4, 3], vec![0.0; 12]));
        let (w, b) = (g.param("w").unwrap(), g.param("b").unwrap());
        match g.conv1d(x, w, b, 3) {
            Err(Error::Shape(msg)) => assert!(msg.contains("[9, out]"), "{msg}"),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }
}
