//! Reverse-mode autodiff over a recorded op tape.
//!
//! Every graph tensor is rank-2 (`[rows, cols]`); scalars are `[1, 1]`.
//! Ops validate shapes, reject non-finite outputs, and push a backward
//! record only while recording and only when the output can reach a
//! parameter. A graph built with [`Graph::inference`] records nothing,
//! which is how the teacher path gets its stop-gradient.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

struct NodeData<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
    needs_grad: bool,
}

enum Record<S> {
    Matmul { a: NodeId, b: NodeId, out: NodeId },
    AddBias { x: NodeId, b: NodeId, out: NodeId },
    RowMul { x: NodeId, w: NodeId, out: NodeId },
    Add { x: NodeId, y: NodeId, out: NodeId },
    Sub { x: NodeId, y: NodeId, out: NodeId },
    Mul { x: NodeId, y: NodeId, out: NodeId },
    Scale { x: NodeId, c: S, out: NodeId },
    LayerNorm { x: NodeId, out: NodeId, inv_std: Vec<S> },
    Softmax { x: NodeId, out: NodeId },
    Gelu { x: NodeId, out: NodeId },
    Huber { x: NodeId, delta: S, out: NodeId },
    Mha { q: NodeId, k: NodeId, v: NodeId, heads: usize, out: NodeId, probs: Vec<S> },
    AvgPool1d { x: NodeId, kernel: usize, out: NodeId },
    AvgPool2d { x: NodeId, grid: (usize, usize), kernel: usize, stride: usize, out: NodeId },
    ConcatRows { xs: Vec<NodeId>, out: NodeId },
    GatherRows { x: NodeId, idx: Vec<usize>, out: NodeId },
    MeanRows { x: NodeId, out: NodeId },
    MeanAll { x: NodeId, out: NodeId },
    SumAll { x: NodeId, out: NodeId },
}

pub struct Graph<S: Scalar> {
    nodes: Vec<NodeData<S>>,
    records: Vec<Record<S>>,
    recording: bool,
    backward_used: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// out += a @ b with a: [m,k], b: [k,n].
fn mm<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// out += a @ b^T with a: [m,n], b: [k,n], out: [m,k].
fn mm_bt<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, k: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            *o += dot(arow, &b[j * n..(j + 1) * n]);
        }
    }
}

/// out += a^T @ d with a: [m,k], d: [m,n], out: [k,n].
fn mm_at<S: Scalar>(a: &[S], d: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let drow = &d[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &dv) in orow.iter_mut().zip(drow) {
                *o += aik * dv;
            }
        }
    }
}

fn softmax_rows<S: Scalar>(x: &[S], rows: usize, cols: usize, out: &mut [S]) {
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let or = &mut out[r * cols..(r + 1) * cols];
        let mut mx = xr[0];
        for &v in xr.iter() {
            mx = mx.maximum(v);
        }
        let mut sum = S::ZERO;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - mx).exp();
            sum += *o;
        }
        for o in or.iter_mut() {
            *o = *o / sum;
        }
    }
}

/// dx = (dy - <dy, y>) * y per row, written via +=.
fn softmax_backward_rows<S: Scalar>(dy: &[S], y: &[S], rows: usize, cols: usize, dx: &mut [S]) {
    for r in 0..rows {
        let dyr = &dy[r * cols..(r + 1) * cols];
        let yr = &y[r * cols..(r + 1) * cols];
        let s = dot(dyr, yr);
        let dxr = &mut dx[r * cols..(r + 1) * cols];
        for ((o, &d), &v) in dxr.iter_mut().zip(dyr).zip(yr) {
            *o += (d - s) * v;
        }
    }
}

impl<S: Scalar> Graph<S> {
    /// Graph that records ops for a later backward pass.
    pub fn recording() -> Self {
        Graph {
            nodes: Vec::new(),
            records: Vec::new(),
            recording: true,
            backward_used: false,
        }
    }

    /// Forward-only graph: nothing is recorded, nothing gets a gradient.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            records: Vec::new(),
            recording: false,
            backward_used: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<S>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(NodeData {
            rows,
            cols,
            data,
            needs_grad: needs_grad && self.recording,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rank2(&self, t: &Tensor<S>, op: &'static str) -> Result<(usize, usize)> {
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch {
                op,
                details: format!("expected rank-2 tensor, got shape {:?}", other),
            }),
        }
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: &Tensor<S>) -> Result<NodeId> {
        let (r, c) = self.rank2(t, "input")?;
        Ok(self.push(r, c, t.data().to_vec(), false))
    }

    /// Trainable leaf; receives a gradient when the graph is recording.
    pub fn param(&mut self, t: &Tensor<S>) -> Result<NodeId> {
        let (r, c) = self.rank2(t, "param")?;
        Ok(self.push(r, c, t.data().to_vec(), true))
    }

    pub fn data(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<S> {
        let n = &self.nodes[id.0];
        Tensor::new(vec![n.rows, n.cols], n.data.clone()).expect("node shape consistent")
    }

    pub fn scalar_value(&self, id: NodeId) -> S {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    fn finish(
        &mut self,
        op: &'static str,
        rows: usize,
        cols: usize,
        data: Vec<S>,
        needs_grad: bool,
        record: impl FnOnce(NodeId) -> Record<S>,
    ) -> Result<NodeId> {
        if !data.iter().all(|v| v.finite()) {
            return Err(Error::NonFinite { op });
        }
        let needs = needs_grad && self.recording;
        let id = self.push(rows, cols, data, needs);
        if needs {
            self.records.push(record(id));
        }
        Ok(id)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims(a);
        let (kb, n) = self.dims(b);
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                details: format!("[{m}x{ka}] @ [{kb}x{n}]"),
            });
        }
        let mut out = vec![S::ZERO; m * n];
        mm(self.data(a), self.data(b), m, ka, n, &mut out);
        self.finish("matmul", m, n, out, self.needs(&[a, b]), |id| Record::Matmul {
            a,
            b,
            out: id,
        })
    }

    /// x: [s,n] plus a broadcast [1,n] bias row.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (s, n) = self.dims(x);
        let (br, bn) = self.dims(b);
        if br != 1 || bn != n {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                details: format!("x [{s}x{n}] + bias [{br}x{bn}]"),
            });
        }
        let mut out = self.data(x).to_vec();
        {
            let bias = &self.nodes[b.0].data;
            for row in out.chunks_exact_mut(n) {
                for (o, &bv) in row.iter_mut().zip(bias.iter()) {
                    *o += bv;
                }
            }
        }
        self.finish("add_bias", s, n, out, self.needs(&[x, b]), |id| Record::AddBias {
            x,
            b,
            out: id,
        })
    }

    /// x: [s,n] scaled elementwise per column by a [1,n] row (layer-norm gain).
    pub fn row_mul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (s, n) = self.dims(x);
        let (wr, wn) = self.dims(w);
        if wr != 1 || wn != n {
            return Err(Error::ShapeMismatch {
                op: "row_mul",
                details: format!("x [{s}x{n}] * row [{wr}x{wn}]"),
            });
        }
        let mut out = self.data(x).to_vec();
        {
            let w_ = &self.nodes[w.0].data;
            for row in out.chunks_exact_mut(n) {
                for (o, &wv) in row.iter_mut().zip(w_.iter()) {
                    *o *= wv;
                }
            }
        }
        self.finish("row_mul", s, n, out, self.needs(&[x, w]), |id| Record::RowMul {
            x,
            w,
            out: id,
        })
    }

    fn binary_elementwise(
        &mut self,
        op: &'static str,
        x: NodeId,
        y: NodeId,
        f: impl Fn(S, S) -> S,
        record: impl FnOnce(NodeId) -> Record<S>,
    ) -> Result<NodeId> {
        let (xr, xc) = self.dims(x);
        let (yr, yc) = self.dims(y);
        if (xr, xc) != (yr, yc) {
            return Err(Error::ShapeMismatch {
                op,
                details: format!("[{xr}x{xc}] vs [{yr}x{yc}]"),
            });
        }
        let out: Vec<S> = self
            .data(x)
            .iter()
            .zip(self.data(y).iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        self.finish(op, xr, xc, out, self.needs(&[x, y]), record)
    }

    pub fn add(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        self.binary_elementwise("add", x, y, |a, b| a + b, |id| Record::Add { x, y, out: id })
    }

    pub fn sub(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        self.binary_elementwise("sub", x, y, |a, b| a - b, |id| Record::Sub { x, y, out: id })
    }

    pub fn mul(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        self.binary_elementwise("mul", x, y, |a, b| a * b, |id| Record::Mul { x, y, out: id })
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> Result<NodeId> {
        let (r, n) = self.dims(x);
        let out: Vec<S> = self.data(x).iter().map(|&v| v * c).collect();
        self.finish("scale", r, n, out, self.needs(&[x]), |id| Record::Scale {
            x,
            c,
            out: id,
        })
    }

    /// Row-wise layer normalization without affine terms.
    pub fn layer_norm(&mut self, x: NodeId, eps: S) -> Result<NodeId> {
        let (s, n) = self.dims(x);
        let inv_n = S::ONE / S::from_f64(n as f64);
        let mut out = vec![S::ZERO; s * n];
        let mut inv_std = vec![S::ZERO; s];
        {
            let xd = &self.nodes[x.0].data;
            for r in 0..s {
                let xr = &xd[r * n..(r + 1) * n];
                let mut mean = S::ZERO;
                for &v in xr {
                    mean += v;
                }
                mean *= inv_n;
                let mut var = S::ZERO;
                for &v in xr {
                    let d = v - mean;
                    var += d * d;
                }
                var *= inv_n;
                let istd = S::ONE / (var + eps).sqrt();
                inv_std[r] = istd;
                for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(xr) {
                    *o = (v - mean) * istd;
                }
            }
        }
        self.finish("layer_norm", s, n, out, self.needs(&[x]), |id| Record::LayerNorm {
            x,
            out: id,
            inv_std,
        })
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (s, n) = self.dims(x);
        let mut out = vec![S::ZERO; s * n];
        softmax_rows(self.data(x), s, n, &mut out);
        self.finish("softmax", s, n, out, self.needs(&[x]), |id| Record::Softmax {
            x,
            out: id,
        })
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let (s, n) = self.dims(x);
        let c = S::from_f64(GELU_C);
        let a = S::from_f64(GELU_A);
        let half = S::from_f64(0.5);
        let out: Vec<S> = self
            .data(x)
            .iter()
            .map(|&v| {
                let u = c * (v + a * v * v * v);
                half * v * (S::ONE + u.tanh())
            })
            .collect();
        self.finish("gelu", s, n, out, self.needs(&[x]), |id| Record::Gelu { x, out: id })
    }

    /// Elementwise smooth-L1 kernel: 0.5 u^2 / delta inside |u| < delta,
    /// |u| - delta/2 outside.
    pub fn huber(&mut self, x: NodeId, delta: S) -> Result<NodeId> {
        let (s, n) = self.dims(x);
        let half = S::from_f64(0.5);
        let out: Vec<S> = self
            .data(x)
            .iter()
            .map(|&u| {
                if u.abs() < delta {
                    half * u * u / delta
                } else {
                    u.abs() - half * delta
                }
            })
            .collect();
        self.finish("huber", s, n, out, self.needs(&[x]), |id| Record::Huber {
            x,
            delta,
            out: id,
        })
    }

    /// Scaled dot-product multi-head attention over already-projected q/k/v.
    pub fn mha(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (s, d) = self.dims(q);
        for (name, id) in [("k", k), ("v", v)] {
            let (r2, d2) = self.dims(id);
            if (r2, d2) != (s, d) {
                return Err(Error::ShapeMismatch {
                    op: "mha",
                    details: format!("q [{s}x{d}] vs {name} [{r2}x{d2}]"),
                });
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "mha",
                details: format!("dim {d} not divisible by {heads} heads"),
            });
        }
        let dh = d / heads;
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = vec![S::ZERO; s * d];
        let mut probs = vec![S::ZERO; heads * s * s];
        {
            let qd = &self.nodes[q.0].data;
            let kd = &self.nodes[k.0].data;
            let vd = &self.nodes[v.0].data;
            let mut qh = vec![S::ZERO; s * dh];
            let mut kh = vec![S::ZERO; s * dh];
            let mut vh = vec![S::ZERO; s * dh];
            let mut scores = vec![S::ZERO; s * s];
            let mut oh = vec![S::ZERO; s * dh];
            for h in 0..heads {
                let off = h * dh;
                for r in 0..s {
                    qh[r * dh..(r + 1) * dh].copy_from_slice(&qd[r * d + off..r * d + off + dh]);
                    kh[r * dh..(r + 1) * dh].copy_from_slice(&kd[r * d + off..r * d + off + dh]);
                    vh[r * dh..(r + 1) * dh].copy_from_slice(&vd[r * d + off..r * d + off + dh]);
                }
                scores.iter_mut().for_each(|x| *x = S::ZERO);
                mm_bt(&qh, &kh, s, dh, s, &mut scores);
                scores.iter_mut().for_each(|x| *x *= scale);
                let ph = &mut probs[h * s * s..(h + 1) * s * s];
                softmax_rows(&scores, s, s, ph);
                oh.iter_mut().for_each(|x| *x = S::ZERO);
                mm(ph, &vh, s, s, dh, &mut oh);
                for r in 0..s {
                    out[r * d + off..r * d + off + dh].copy_from_slice(&oh[r * dh..(r + 1) * dh]);
                }
            }
        }
        self.finish("mha", s, d, out, self.needs(&[q, k, v]), |id| Record::Mha {
            q,
            k,
            v,
            heads,
            out: id,
            probs,
        })
    }

    /// Mean over consecutive row windows; kernel equals stride, remainder rows
    /// are dropped.
    pub fn avg_pool_1d(&mut self, x: NodeId, kernel: usize) -> Result<NodeId> {
        let (s, n) = self.dims(x);
        if kernel == 0 {
            return Err(Error::ShapeMismatch {
                op: "avg_pool_1d",
                details: "kernel must be >= 1".into(),
            });
        }
        let out_rows = s / kernel;
        if out_rows == 0 {
            return Err(Error::ShapeMismatch {
                op: "avg_pool_1d",
                details: format!("kernel {kernel} larger than {s} rows"),
            });
        }
        let inv = S::ONE / S::from_f64(kernel as f64);
        let mut out = vec![S::ZERO; out_rows * n];
        {
            let xd = &self.nodes[x.0].data;
            for t in 0..out_rows {
                let orow = &mut out[t * n..(t + 1) * n];
                for j in 0..kernel {
                    let xr = &xd[(t * kernel + j) * n..(t * kernel + j + 1) * n];
                    for (o, &v) in orow.iter_mut().zip(xr) {
                        *o += v;
                    }
                }
                for o in orow.iter_mut() {
                    *o *= inv;
                }
            }
        }
        self.finish("avg_pool_1d", out_rows, n, out, self.needs(&[x]), |id| {
            Record::AvgPool1d { x, kernel, out: id }
        })
    }

    /// Mean over kernel x kernel cells of a row-major `grid` of token rows,
    /// windows placed every `stride`; windows that would overflow are dropped.
    pub fn avg_pool_2d(
        &mut self,
        x: NodeId,
        grid: (usize, usize),
        kernel: usize,
        stride: usize,
    ) -> Result<NodeId> {
        let (s, n) = self.dims(x);
        let (rows, cols) = grid;
        if rows * cols != s {
            return Err(Error::ShapeMismatch {
                op: "avg_pool_2d",
                details: format!("grid {rows}x{cols} vs {s} rows"),
            });
        }
        if kernel == 0 || stride == 0 || kernel > rows || kernel > cols {
            return Err(Error::ShapeMismatch {
                op: "avg_pool_2d",
                details: format!("kernel {kernel} stride {stride} on grid {rows}x{cols}"),
            });
        }
        let out_r = (rows - kernel) / stride + 1;
        let out_c = (cols - kernel) / stride + 1;
        let inv = S::ONE / S::from_f64((kernel * kernel) as f64);
        let mut out = vec![S::ZERO; out_r * out_c * n];
        {
            let xd = &self.nodes[x.0].data;
            for oi in 0..out_r {
                for oj in 0..out_c {
                    let orow = &mut out[(oi * out_c + oj) * n..(oi * out_c + oj + 1) * n];
                    for a in 0..kernel {
                        for b in 0..kernel {
                            let cell = (oi * stride + a) * cols + (oj * stride + b);
                            let xr = &xd[cell * n..(cell + 1) * n];
                            for (o, &v) in orow.iter_mut().zip(xr) {
                                *o += v;
                            }
                        }
                    }
                    for o in orow.iter_mut() {
                        *o *= inv;
                    }
                }
            }
        }
        self.finish("avg_pool_2d", out_r * out_c, n, out, self.needs(&[x]), |id| {
            Record::AvgPool2d { x, grid, kernel, stride, out: id }
        })
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                details: "no inputs".into(),
            });
        }
        let (_, n) = self.dims(xs[0]);
        let mut total = 0;
        for &x in xs {
            let (r, c) = self.dims(x);
            if c != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    details: format!("column mismatch {c} vs {n}"),
                });
            }
            total += r;
        }
        let mut out = Vec::with_capacity(total * n);
        for &x in xs {
            out.extend_from_slice(self.data(x));
        }
        let xs = xs.to_vec();
        self.finish("concat_rows", total, n, out, self.needs(&xs), |id| Record::ConcatRows {
            xs,
            out: id,
        })
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (s, n) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= s) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                details: format!("index {bad} out of {s} rows"),
            });
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        {
            let xd = &self.nodes[x.0].data;
            for &i in idx {
                out.extend_from_slice(&xd[i * n..(i + 1) * n]);
            }
        }
        let idx = idx.to_vec();
        self.finish("gather_rows", idx.len(), n, out, self.needs(&[x]), |id| {
            Record::GatherRows { x, idx, out: id }
        })
    }

    /// Mean over the sequence (row) axis: [s,n] -> [1,n].
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (s, n) = self.dims(x);
        if s == 0 {
            return Err(Error::ShapeMismatch {
                op: "mean_rows",
                details: "empty sequence".into(),
            });
        }
        let inv = S::ONE / S::from_f64(s as f64);
        let mut out = vec![S::ZERO; n];
        {
            let xd = &self.nodes[x.0].data;
            for r in 0..s {
                for (o, &v) in out.iter_mut().zip(&xd[r * n..(r + 1) * n]) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        self.finish("mean_rows", 1, n, out, self.needs(&[x]), |id| Record::MeanRows {
            x,
            out: id,
        })
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let (s, n) = self.dims(x);
        let inv = S::ONE / S::from_f64((s * n) as f64);
        let mut acc = S::ZERO;
        for &v in self.data(x) {
            acc += v;
        }
        self.finish("mean_all", 1, 1, vec![acc * inv], self.needs(&[x]), |id| {
            Record::MeanAll { x, out: id }
        })
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let mut acc = S::ZERO;
        for &v in self.data(x) {
            acc += v;
        }
        self.finish("sum_all", 1, 1, vec![acc], self.needs(&[x]), |id| Record::SumAll {
            x,
            out: id,
        })
    }

    /// Replay the tape in reverse from a scalar loss. Consumes the recording:
    /// a second call is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<S>> {
        if self.backward_used {
            return Err(Error::BackwardReplay);
        }
        if !self.recording {
            return Err(Error::BackwardInvalid("graph is in inference mode".into()));
        }
        let (lr, lc) = self.dims(loss);
        if lr * lc != 1 {
            return Err(Error::BackwardInvalid(format!("loss has shape [{lr}x{lc}]")));
        }
        self.backward_used = true;

        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::ONE]);

        macro_rules! grad_buf {
            ($grads:expr, $self_:expr, $id:expr) => {{
                let n = &$self_.nodes[$id.0];
                $grads[$id.0].get_or_insert_with(|| vec![S::ZERO; n.rows * n.cols])
            }};
        }

        for rec in self.records.iter().rev() {
            match rec {
                Record::Matmul { a, b, out } => {
                    let Some(dout) = grads[out.0].take() else { continue };
                    let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let n = self.nodes[b.0].cols;
                    if self.nodes[a.0].needs_grad {
                        let bd = &self.nodes[b.0].data;
                        let da = grad_buf!(grads, self, a);
                        mm_bt(&dout, bd, m, n, k, da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let ad = &self.nodes[a.0].data;
                        let db = grad_buf!(grads, self, b);
                        mm_at(ad, &dout, m, k, n, db);
                    }
                }
                Record::AddBias { x, b, out } => {
                    let Some(dout) = grads[out.0].take() else { continue };
                    let n = self.nodes[b.0].cols;
                    if self.nodes[x.0].needs_grad {
                        let dx = grad_buf!(grads, self, x);
                        for (o, &d) in dx.iter_mut().zip(&dout) {
                            *o += d;
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = grad_buf!(grads, self, b);
                        for row in dout.chunks_exact(n) {
                            for (o, &d) in db.iter_mut().zip(row) {
                                *o += d;
                            }
                        }
                    }
                }
                Record::RowMul { x, w, out } => {
                    let Some(dout) = grads[out.0].take() else { continue };
                    let n = self.nodes[w.0].cols;
                    if self.nodes[x.0].needs_grad {
                        let wd = self.nodes[w.0].data.clone();
                        let dx = grad_buf!(grads, self, x);
                        for (row, drow) in dx.chunks_exact_mut(n).zip(dout.chunks_exact(n)) {
                            for ((o, &d), &wv) in row.iter_mut().zip(drow).zip(wd.iter()) {
                                *o += d * wv;
                            }
                        }
                    }
                    if self.nodes[w.0].needs_grad {
                        let xd = &self.nodes[x.0].data;
                        let mut acc = vec![S::ZERO; n];
                        for (xrow, drow) in xd.chunks_exact(n).zip(dout.chunks_exact(n)) {
                            for ((o, &xv), &d) in acc.iter_mut().zip(xrow).zip(drow) {
                                *o += xv * d;
                            }
                        }
                        let dw = grad_buf!(grads, self, w);
                        for (o, a) in dw.iter_mut().zip(acc) {
                            *o += a;
                        }
                    }
                }
                Record::Add { x, y, out } => {
                    let Some(dout) = grads[out.0].take() else { continue };
                    for id in [x, y] {
                        if self.nodes[id.0].needs_grad {
                            let dx = grad_buf!(grads, self, id);
                            for (o, &d) in dx.iter_mut().zip(&dout) {
                                *o += d;
                            }
                        }
                    }
                }
                Record::Sub { x, y, out } => {
                    let Some(dout) = grads[out.0].take() else { continue };
                    if self.nodes[x.0].needs_grad {
                        let dx = grad_buf!(grads, self, x);
                        for (o, &d) in dx.iter_mut().zip(&dout) {
                            *o += d;
                        }
                    }
                    if self.nodes[y.0].needs_grad {
                        let dy = grad_buf!(grads, self, y);
                        for (o, &d) in dy.iter_mut().zip(&dout) {
                            *o -= d;
                        }
                    }
                }
                Record::Mul { x, y, out } => {
                    let Some(dout) = grads[out.0].take() else { continue };
                    if self.nodes[x.0].needs_grad {
                        let yd = self.nodes[y.0].data.clone();
                        let dx = grad_buf!(grads, self, x);
                        for ((o, &d), &yv) in dx.iter_mut().zip(&dout).zip(yd.iter()) {
                            *o += d * yv;
                        }
                    }
                    if self.nodes[y.0].needs_grad {
                        let xd = self.nodes[x.0].data.clone();
                        let dy = grad_buf!(grads, self, y);
                        for ((o, &d), &xv) in dy.iter_mut().zip(&dout).zip(xd.iter()) {
                            *o += d * xv;
                        }
                    }
                }
                Record::Scale { x, c, out } => {
                    let Some(dout) = grads[out.0].take() else { continue };
                    if self.nodes[x.0].needs_grad {
                        let c = *c;
                        let dx = grad_buf!(grads, self, x);
                        for (o, &d) in dx.iter_mut().zip(&dout) {
                            *o += d * c;
                        }
                    }
                }
                Record::LayerNorm { x, out, inv_std } => {
                    let Some(dout) = grads[out.0].take() else { continue };
                    if !self.nodes[x.0].needs_grad {
                        continue;
                    }
                    let n = self.nodes[x.0].cols;
                    let inv_n = S::ONE / S::from_f64(n as f64);
                    let y = self.nodes[out.0].data.clone();
                    let dx = grad_buf!(grads, self, x);
                    for (r, (drow, yrow)) in dout.chunks_exact(n).zip(y.chunks_exact(n)).enumerate()
                    {
                        let mut mean_d = S::ZERO;
                        let mut mean_dy = S::ZERO;
                        for (&d, &yv) in drow.iter().zip(yrow) {
                            mean_d += d;
                            mean_dy += d * yv;
                        }
                        mean_d *= inv_n;
                        mean_dy *= inv_n;
                        let istd = inv_std[r];
                        let dxrow = &mut dx[r * n..(r + 1) * n];
                        for ((o, &d), &yv) in dxrow.iter_mut().zip(drow).zip(yrow) {
                            *o += istd * (d - mean_d - yv * mean_dy);
                        }
                    }
                }
                Record::Softmax { x, out } => {
                    let Some(dout) = grads[out.0].take() else { continue };
                    if !self.nodes[x.0].needs_grad {
                        continue;
                    }
                    let (s, n) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
                    let y = self.nodes[out.0].data.clone();
                    let dx = grad_buf!(grads, self, x);
                    softmax_backward_rows(&dout, &y, s, n, dx);
                }
                Record::Gelu { x, out } => {
                    let Some(dout) = grads[out.0].take() else { continue };
                    if !self.nodes[x.0].needs_grad {
                        continue;
                    }
                    let c = S::from_f64(GELU_C);
                    let a = S::from_f64(GELU_A);
                    let half = S::from_f64(0.5);
                    let three = S::from_f64(3.0);
                    let xd = self.nodes[x.0].data.clone();
                    let dx = grad_buf!(grads, self, x);
                    for ((o, &d), &v) in dx.iter_mut().zip(&dout).zip(xd.iter()) {
                        let u = c * (v + a * v * v * v);
                        let t = u.tanh();
                        let du = c * (S::ONE + three * a * v * v);
                        let g = half * (S::ONE + t) + half * v * (S::ONE - t * t) * du;
                        *o += d * g;
                    }
                }
                Record::Huber { x, delta, out } => {
                    let Some(dout) = grads[out.0].take() else { continue };
                    if !self.nodes[x.0].needs_grad {
                        continue;
                    }
                    let delta = *delta;
                    let xd = self.nodes[x.0].data.clone();
                    let dx = grad_buf!(grads, self, x);
                    for ((o, &d), &u) in dx.iter_mut().zip(&dout).zip(xd.iter()) {
                        let g = if u.abs() < delta {
                            u / delta
                        } else if u > S::ZERO {
                            S::ONE
                        } else {
                            -S::ONE
                        };
                        *o += d * g;
                    }
                }
                Record::Mha { q, k, v, heads, out, probs } => {
                    let Some(dout) = grads[out.0].take() else { continue };
                    let (s, d) = (self.nodes[q.0].rows, self.nodes[q.0].cols);
                    let heads = *heads;
                    let dh = d / heads;
                    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
                    let qd = self.nodes[q.0].data.clone();
                    let kd = self.nodes[k.0].data.clone();
                    let vd = self.nodes[v.0].data.clone();
                    let mut dq = vec![S::ZERO; s * d];
                    let mut dk = vec![S::ZERO; s * d];
                    let mut dv = vec![S::ZERO; s * d];
                    let mut qh = vec![S::ZERO; s * dh];
                    let mut kh = vec![S::ZERO; s * dh];
                    let mut vh = vec![S::ZERO; s * dh];
                    let mut doh = vec![S::ZERO; s * dh];
                    let mut dvh = vec![S::ZERO; s * dh];
                    let mut dprobs = vec![S::ZERO; s * s];
                    let mut dscores = vec![S::ZERO; s * s];
                    let mut dqh = vec![S::ZERO; s * dh];
                    let mut dkh = vec![S::ZERO; s * dh];
                    for h in 0..heads {
                        let off = h * dh;
                        for r in 0..s {
                            qh[r * dh..(r + 1) * dh]
                                .copy_from_slice(&qd[r * d + off..r * d + off + dh]);
                            kh[r * dh..(r + 1) * dh]
                                .copy_from_slice(&kd[r * d + off..r * d + off + dh]);
                            vh[r * dh..(r + 1) * dh]
                                .copy_from_slice(&vd[r * d + off..r * d + off + dh]);
                            doh[r * dh..(r + 1) * dh]
                                .copy_from_slice(&dout[r * d + off..r * d + off + dh]);
                        }
                        let ph = &probs[h * s * s..(h + 1) * s * s];
                        // dV = P^T dO
                        dvh.iter_mut().for_each(|x| *x = S::ZERO);
                        mm_at(ph, &doh, s, s, dh, &mut dvh);
                        // dP = dO V^T
                        dprobs.iter_mut().for_each(|x| *x = S::ZERO);
                        mm_bt(&doh, &vh, s, dh, s, &mut dprobs);
                        // dScores = softmax'(dP) * scale
                        dscores.iter_mut().for_each(|x| *x = S::ZERO);
                        softmax_backward_rows(&dprobs, ph, s, s, &mut dscores);
                        dscores.iter_mut().for_each(|x| *x *= scale);
                        // dQ = dScores K ; dK = dScores^T Q
                        dqh.iter_mut().for_each(|x| *x = S::ZERO);
                        mm(&dscores, &kh, s, s, dh, &mut dqh);
                        dkh.iter_mut().for_each(|x| *x = S::ZERO);
                        mm_at(&dscores, &qh, s, s, dh, &mut dkh);
                        for r in 0..s {
                            dq[r * d + off..r * d + off + dh]
                                .copy_from_slice(&dqh[r * dh..(r + 1) * dh]);
                            dk[r * d + off..r * d + off + dh]
                                .copy_from_slice(&dkh[r * dh..(r + 1) * dh]);
                            dv[r * d + off..r * d + off + dh]
                                .copy_from_slice(&dvh[r * dh..(r + 1) * dh]);
                        }
                    }
                    for (id, dlocal) in [(q, dq), (k, dk), (v, dv)] {
                        if self.nodes[id.0].needs_grad {
                            let dst = grad_buf!(grads, self, id);
                            for (o, d) in dst.iter_mut().zip(dlocal) {
                                *o += d;
                            }
                        }
                    }
                }
                Record::AvgPool1d { x, kernel, out } => {
                    let Some(dout) = grads[out.0].take() else { continue };
                    if !self.nodes[x.0].needs_grad {
                        continue;
                    }
                    let n = self.nodes[x.0].cols;
                    let kernel = *kernel;
                    let inv = S::ONE / S::from_f64(kernel as f64);
                    let out_rows = self.nodes[out.0].rows;
                    let dx = grad_buf!(grads, self, x);
                    for t in 0..out_rows {
                        let drow = &dout[t * n..(t + 1) * n];
                        for j in 0..kernel {
                            let dst = &mut dx[(t * kernel + j) * n..(t * kernel + j + 1) * n];
                            for (o, &dv) in dst.iter_mut().zip(drow) {
                                *o += dv * inv;
                            }
                        }
                    }
                }
                Record::AvgPool2d { x, grid, kernel, stride, out } => {
                    let Some(dout) = grads[out.0].take() else { continue };
                    if !self.nodes[x.0].needs_grad {
                        continue;
                    }
                    let n = self.nodes[x.0].cols;
                    let (rows, cols) = *grid;
                    let (kernel, stride) = (*kernel, *stride);
                    let out_r = (rows - kernel) / stride + 1;
                    let out_c = (cols - kernel) / stride + 1;
                    let inv = S::ONE / S::from_f64((kernel * kernel) as f64);
                    let dx = grad_buf!(grads, self, x);
                    for oi in 0..out_r {
                        for oj in 0..out_c {
                            let drow = &dout[(oi * out_c + oj) * n..(oi * out_c + oj + 1) * n];
                            for a in 0..kernel {
                                for b in 0..kernel {
                                    let cell = (oi * stride + a) * cols + (oj * stride + b);
                                    let dst = &mut dx[cell * n..(cell + 1) * n];
                                    for (o, &dv) in dst.iter_mut().zip(drow) {
                                        *o += dv * inv;
                                    }
                                }
                            }
                        }
                    }
                }
                Record::ConcatRows { xs, out } => {
                    let Some(dout) = grads[out.0].take() else { continue };
                    let n = self.nodes[out.0].cols;
                    let mut offset = 0;
                    for &x in xs {
                        let r = self.nodes[x.0].rows;
                        if self.nodes[x.0].needs_grad {
                            let piece = &dout[offset * n..(offset + r) * n];
                            let dx = grad_buf!(grads, self, x);
                            for (o, &d) in dx.iter_mut().zip(piece) {
                                *o += d;
                            }
                        }
                        offset += r;
                    }
                }
                Record::GatherRows { x, idx, out } => {
                    let Some(dout) = grads[out.0].take() else { continue };
                    if !self.nodes[x.0].needs_grad {
                        continue;
                    }
                    let n = self.nodes[x.0].cols;
                    let dx = grad_buf!(grads, self, x);
                    for (slot, &src) in idx.iter().enumerate() {
                        let drow = &dout[slot * n..(slot + 1) * n];
                        let dst = &mut dx[src * n..(src + 1) * n];
                        for (o, &d) in dst.iter_mut().zip(drow) {
                            *o += d;
                        }
                    }
                }
                Record::MeanRows { x, out } => {
                    let Some(dout) = grads[out.0].take() else { continue };
                    if !self.nodes[x.0].needs_grad {
                        continue;
                    }
                    let (s, n) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
                    let inv = S::ONE / S::from_f64(s as f64);
                    let dx = grad_buf!(grads, self, x);
                    for row in dx.chunks_exact_mut(n) {
                        for (o, &d) in row.iter_mut().zip(&dout) {
                            *o += d * inv;
                        }
                    }
                }
                Record::MeanAll { x, out } => {
                    let Some(dout) = grads[out.0].take() else { continue };
                    if !self.nodes[x.0].needs_grad {
                        continue;
                    }
                    let (s, n) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
                    let d = dout[0] / S::from_f64((s * n) as f64);
                    let dx = grad_buf!(grads, self, x);
                    for o in dx.iter_mut() {
                        *o += d;
                    }
                }
                Record::SumAll { x, out } => {
                    let Some(dout) = grads[out.0].take() else { continue };
                    if !self.nodes[x.0].needs_grad {
                        continue;
                    }
                    let d = dout[0];
                    let dx = grad_buf!(grads, self, x);
                    for o in dx.iter_mut() {
                        *o += d;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}
