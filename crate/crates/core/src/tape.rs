//! Define-by-run reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly and appends a node to the [`Tape`].
//! Nodes only reference earlier nodes, so the tape is always in topological
//! order and [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::linalg::{gemm, matmul, transpose};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Zero padding applied by [`Tape::conv1d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output length equals input length. Odd padding totals put the extra
    /// zero on the left.
    Same,
    /// No padding; output length is `L - K + 1`.
    Valid,
}

impl Padding {
    fn left(self, kernel: usize) -> usize {
        match self {
            Padding::Same => kernel / 2,
            Padding::Valid => 0,
        }
    }
}

#[derive(Debug)]
struct ConvGeom {
    batch: usize,
    l_in: usize,
    l_out: usize,
    c_in: usize,
    width: usize,
    c_out: usize,
    pad_left: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv1d {
        x: Var,
        k: Var,
        b: Var,
        cols: Vec<f64>,
        geom: ConvGeom,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
        sizes: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        inner: usize,
        axis_len: usize,
        start: usize,
        len: usize,
    },
    Transpose {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Sum {
        x: Var,
    },
    CrossEntropy {
        probs: Var,
        label: usize,
        clamped: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Probability floor used by [`Tape::cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `tensor` as an input. Its `requires_grad` flag decides whether
    /// [`Tape::backward`] fills its gradient slot.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Records a copy of `tensor` that takes part in differentiation.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let mut t = tensor.clone();
        t.zero_grad();
        t.set_requires_grad(true);
        self.leaf(t)
    }

    /// Records a copy of `tensor` that never receives a gradient.
    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        let mut t = tensor.clone();
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last loss passed to [`Tape::backward`] with respect
    /// to a `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::dim(op, "rank", 2, s.len())),
        }
    }

    fn make(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs = self.needs(inputs);
        let value = Tensor::new(shape, data).expect("primitive produced consistent shape");
        self.push(value, op, needs)
    }

    // ----- linear maps -------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", "axis 0 of right operand", k, k2));
        }
        let out = matmul(m, k, n, self.data(a), self.data(b));
        Ok(self.make(vec![m, n], out, Op::MatMul { a, b }, &[a, b]))
    }

    /// `input · weight + bias`, bias broadcast over rows.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, d_in) = self.rank2("dense", x)?;
        let (w_in, d_out) = self.rank2("dense", w)?;
        if d_in != w_in {
            return Err(Error::dim("dense", "axis 0 of weight", d_in, w_in));
        }
        if self.value(b).len() != d_out {
            return Err(Error::dim("dense", "bias length", d_out, self.value(b).len()));
        }
        let mut out = Vec::with_capacity(n * d_out);
        for _ in 0..n {
            out.extend_from_slice(self.data(b));
        }
        gemm(n, d_in, d_out, self.data(x), false, self.data(w), false, &mut out, 1.0);
        Ok(self.make(vec![n, d_out], out, Op::Dense { x, w, b }, &[x, w, b]))
    }

    /// 1-D convolution (cross-correlation) along the sequence axis.
    ///
    /// `x` is `[L, C_in]` or a batch `[B, L, C_in]`; `kernel` is
    /// `[K, C_in, C_out]`; `bias` is `[C_out]`. The batch axis, when present,
    /// is kept in the output.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, l_in, c_in) = match xs[..] {
            [l, c] => (1, l, c),
            [b, l, c] => (b, l, c),
            _ => return Err(Error::dim("conv1d", "input rank", 2, xs.len())),
        };
        let (width, k_in, c_out) = match *self.shape(kernel) {
            [kw, ci, co] => (kw, ci, co),
            ref s => return Err(Error::dim("conv1d", "kernel rank", 3, s.len())),
        };
        if k_in != c_in {
            return Err(Error::dim("conv1d", "input channels (axis 1 of kernel)", c_in, k_in));
        }
        if self.value(bias).len() != c_out {
            return Err(Error::dim("conv1d", "bias length", c_out, self.value(bias).len()));
        }
        let l_out = match padding {
            Padding::Same => l_in,
            Padding::Valid => {
                if width > l_in {
                    return Err(Error::dim("conv1d", "kernel width (sequence axis)", l_in, width));
                }
                l_in - width + 1
            }
        };
        let geom = ConvGeom {
            batch,
            l_in,
            l_out,
            c_in,
            width,
            c_out,
            pad_left: padding.left(width),
        };
        let cols = im2col(self.data(x), &geom);
        let rows = batch * l_out;
        let mut out = Vec::with_capacity(rows * c_out);
        for _ in 0..rows {
            out.extend_from_slice(self.data(bias));
        }
        gemm(rows, width * c_in, c_out, &cols, false, self.data(kernel), false, &mut out, 1.0);
        let shape = if xs.len() == 2 {
            vec![l_out, c_out]
        } else {
            vec![batch, l_out, c_out]
        };
        let op = Op::Conv1d {
            x,
            k: kernel,
            b: bias,
            cols,
            geom,
        };
        Ok(self.make(shape, out, op, &[x, kernel, bias]))
    }

    // ----- normalization -----------------------------------------------

    /// Softmax over the last axis with row-max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let width = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(width) {
            softmax_in_place(row);
        }
        let shape = t.shape().to_vec();
        self.make(shape, out, Op::Softmax { x }, &[x])
    }

    /// Per-row normalization followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, epsilon: f64) -> Result<Var> {
        let (n, d) = self.rank2("layer_norm", x)?;
        for (name, v) in [("gain length", gain), ("shift length", shift)] {
            if self.value(v).len() != d {
                return Err(Error::dim("layer_norm", name, d, self.value(v).len()));
            }
        }
        let xd = self.data(x);
        let g = self.data(gain);
        let s = self.data(shift);
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + epsilon).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + s[c];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            shift,
            xhat,
            inv_std,
        };
        Ok(self.make(vec![n, d], out, op, &[x, gain, shift]))
    }

    // ----- elementwise -------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(Error::dim(op, "rank", sa.len(), sb.len()));
        }
        if let Some(axis) = (0..sa.len()).find(|&i| sa[i] != sb[i]) {
            return Err(Error::dim(op, format!("axis {axis}"), sa[axis], sb[axis]));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.make(shape, out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.make(shape, out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.make(shape, out, Op::Scale { x, factor }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |x| Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |x| Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, |x| Op::Tanh { x })
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(Var) -> Op) -> Var {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.make(shape, out, op(x), &[x])
    }

    // ----- structural --------------------------------------------------

    /// Joins `parts` along `axis`; every other axis must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero parts"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", "axis index", base.len() - 1, axis));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() {
                return Err(Error::dim("concat", "rank", base.len(), s.len()));
            }
            if let Some(ax) = (0..s.len()).find(|&i| i != axis && s[i] != base[i]) {
                return Err(Error::dim("concat", format!("axis {ax}"), base[ax], s[ax]));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                let chunk = sz * inner;
                out.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let op = Op::Concat {
            parts: parts.to_vec(),
            outer,
            inner,
            sizes,
        };
        Ok(self.make(shape, out, op, parts))
    }

    /// Range `[start, start + len)` of `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("slice", "axis index", shape.len() - 1, axis));
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::dim("slice", format!("axis {axis}"), shape[axis], start + len));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let op = Op::Slice {
            x,
            outer,
            inner,
            axis_len,
            start,
            len,
        };
        Ok(self.make(out_shape, out, op, &[x]))
    }

    /// Matrix transpose of a 2-D value.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rank2("transpose", x)?;
        let out = transpose(r, c, self.data(x));
        Ok(self.make(vec![c, r], out, Op::Transpose { x }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::dim("reshape", "element count", self.value(x).len(), n));
        }
        let out = self.data(x).to_vec();
        Ok(self.make(shape.to_vec(), out, Op::Reshape { x }, &[x]))
    }

    /// Mean over the leading (time) axis: `[T, D] -> [D]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (t, d) = self.rank2("global_avg_pool", x)?;
        let src = self.data(x);
        let mut out = vec![0.0; d];
        for r in 0..t {
            out.iter_mut().zip(&src[r * d..(r + 1) * d]).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= t as f64);
        Ok(self.make(vec![d], out, Op::GlobalAvgPool { x }, &[x]))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.make(vec![1], vec![s], Op::Sum { x }, &[x])
    }

    /// `-ln(max(probs[label], 1e-12))` for a probability vector.
    pub fn cross_entropy(&mut self, probs: Var, label: usize) -> Result<Var> {
        let n = self.value(probs).len();
        if label >= n {
            return Err(Error::contract(format!("label {label} out of range for {n} classes")));
        }
        let p = self.data(probs)[label];
        let clamped = p < PROB_FLOOR;
        let loss = -p.max(PROB_FLOOR).ln();
        let op = Op::CrossEntropy {
            probs,
            label,
            clamped,
        };
        Ok(self.make(vec![1], vec![loss], op, &[probs]))
    }

    // ----- reverse sweep -----------------------------------------------

    /// Propagates d`loss` back through the tape and accumulates the result
    /// into the gradient slot of every reachable `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let send = |grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                slot => *slot = Some(d),
            }
        };
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if wants(*a) {
                    gemm(m, n, k, g, false, self.data(*b), true, slot(grads, *a, m * k), 1.0);
                }
                if wants(*b) {
                    gemm(k, m, n, self.data(*a), true, g, false, slot(grads, *b, k * n), 1.0);
                }
            }
            Op::Dense { x, w, b } => {
                let (n, d_in) = (self.shape(*x)[0], self.shape(*x)[1]);
                let d_out = self.shape(*w)[1];
                if wants(*x) {
                    gemm(n, d_out, d_in, g, false, self.data(*w), true, slot(grads, *x, n * d_in), 1.0);
                }
                if wants(*w) {
                    gemm(d_in, n, d_out, self.data(*x), true, g, false, slot(grads, *w, d_in * d_out), 1.0);
                }
                if wants(*b) {
                    send(grads, *b, column_sums(g, d_out));
                }
            }
            Op::Conv1d {
                x,
                k,
                b,
                cols,
                geom,
            } => {
                let rows = geom.batch * geom.l_out;
                let kc = geom.width * geom.c_in;
                if wants(*k) {
                    gemm(kc, rows, geom.c_out, cols, true, g, false, slot(grads, *k, kc * geom.c_out), 1.0);
                }
                if wants(*b) {
                    send(grads, *b, column_sums(g, geom.c_out));
                }
                if wants(*x) {
                    let mut dcols = vec![0.0; rows * kc];
                    gemm(rows, geom.c_out, kc, g, false, self.data(*k), true, &mut dcols, 0.0);
                    send(grads, *x, col2im(&dcols, geom));
                }
            }
            Op::Softmax { x } => {
                let width = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx
                    .chunks_mut(width)
                    .zip(y.chunks(width))
                    .zip(g.chunks(width))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..width {
                        dxr[c] = yr[c] * (gr[c] - dot);
                    }
                }
                send(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*x)[1];
                let gn = self.data(*gain);
                if wants(*gain) {
                    let mut dg = vec![0.0; d];
                    for (r, gr) in g.chunks(d).enumerate() {
                        for c in 0..d {
                            dg[c] += gr[c] * xhat[r * d + c];
                        }
                    }
                    send(grads, *gain, dg);
                }
                if wants(*shift) {
                    send(grads, *shift, column_sums(g, d));
                }
                if wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, gr) in g.chunks(d).enumerate() {
                        let h = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = (0..d).map(|c| gr[c] * gn[c]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            dx[r * d + c] = inv_std[r] * (dh[c] - mean_dh - h[c] * mean_dh_h);
                        }
                    }
                    send(grads, *x, dx);
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    send(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    send(grads, *b, g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    send(grads, *a, g.iter().zip(self.data(*b)).map(|(g, v)| g * v).collect());
                }
                if wants(*b) {
                    send(grads, *b, g.iter().zip(self.data(*a)).map(|(g, v)| g * v).collect());
                }
            }
            Op::Scale { x, factor } => send(grads, *x, g.iter().map(|v| v * factor).collect()),
            Op::Relu { x } => send(grads, 
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Sigmoid { x } => send(grads, *x, g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect()),
            Op::Tanh { x } => send(grads, *x, g.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect()),
            Op::Concat {
                parts,
                outer,
                inner,
                sizes,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&p, &sz) in parts.iter().zip(sizes) {
                    if wants(p) {
                        let mut d = Vec::with_capacity(outer * sz * inner);
                        for o in 0..*outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g[base..base + sz * inner]);
                        }
                        send(grads, p, d);
                    }
                    offset += sz;
                }
            }
            Op::Slice {
                x,
                outer,
                inner,
                axis_len,
                start,
                len,
            } => {
                if wants(*x) {
                    let dx = slot(grads, *x, outer * axis_len * inner);
                    for o in 0..*outer {
                        let dst = (o * axis_len + start) * inner;
                        let src = o * len * inner;
                        dx[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g[src..src + len * inner])
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Transpose { x } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                send(grads, *x, transpose(c, r, g));
            }
            Op::Reshape { x } => send(grads, *x, g.to_vec()),
            Op::GlobalAvgPool { x } => {
                let t = self.shape(*x)[0];
                let inv = 1.0 / t as f64;
                let row: Vec<f64> = g.iter().map(|v| v * inv).collect();
                send(grads, *x, row.repeat(t));
            }
            Op::Sum { x } => send(grads, *x, vec![g[0]; self.value(*x).len()]),
            Op::CrossEntropy {
                probs,
                label,
                clamped,
            } => {
                let mut d = vec![0.0; self.value(*probs).len()];
                if !clamped {
                    d[*label] = -g[0] / self.data(*probs)[*label];
                }
                send(grads, *probs, d);
            }
        }
    }
}

/// Gradient accumulator of `v`, zero-initialized on first use.
fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn column_sums(g: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    for row in g.chunks(width) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out
}

fn im2col(x: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let ConvGeom {
        batch,
        l_in,
        l_out,
        c_in,
        width,
        pad_left,
        ..
    } = *geom;
    let row_len = width * c_in;
    let mut cols = vec![0.0; batch * l_out * row_len];
    for b in 0..batch {
        for t in 0..l_out {
            let row = &mut cols[(b * l_out + t) * row_len..][..row_len];
            for k in 0..width {
                let src = (t + k) as isize - pad_left as isize;
                if src < 0 || src as usize >= l_in {
                    continue;
                }
                let base = (b * l_in + src as usize) * c_in;
                row[k * c_in..(k + 1) * c_in].copy_from_slice(&x[base..base + c_in]);
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let ConvGeom {
        batch,
        l_in,
        l_out,
        c_in,
        width,
        pad_left,
        ..
    } = *geom;
    let row_len = width * c_in;
    let mut dx = vec![0.0; batch * l_in * c_in];
    for b in 0..batch {
        for t in 0..l_out {
            let row = &dcols[(b * l_out + t) * row_len..][..row_len];
            for k in 0..width {
                let src = (t + k) as isize - pad_left as isize;
                if src < 0 || src as usize >= l_in {
                    continue;
                }
                let base = (b * l_in + src as usize) * c_in;
                dx[base..base + c_in]
                    .iter_mut()
                    .zip(&row[k * c_in..(k + 1) * c_in])
                    .for_each(|(d, v)| *d += v);
            }
        }
    }
    dx
}
