//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every primitive evaluates eagerly and appends a node holding its output
//! and the indices of its inputs. [`Tape::backward`] consumes the tape and
//! replays the adjoints from the last node to the first, accumulating
//! parameter gradients into a [`ParamStore`].

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{gemm_acc, gemm_at_acc, gemm_bt_acc};
use super::{NumericsError, ParamId, ParamStore, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;
const NORMALIZE_EPS: f64 = 1e-12;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// A contiguous run of rows `[start, start + len)` treated as one set or
/// sequence by the segmented primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Segment { start, len }
    }

    #[inline]
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Builds back-to-back segments from a list of lengths.
pub fn segments_from_lengths(lengths: &[usize]) -> Vec<Segment> {
    let mut start = 0;
    lengths
        .iter()
        .map(|&len| {
            let s = Segment::new(start, len);
            start += len;
            s
        })
        .collect()
}

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    tape: u64,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Gelu(usize),
    Sigmoid(usize),
    Log(usize),
    Exp(usize),
    Relu(usize),
    PowScalar(usize, f64),
    Clamp(usize, f64, f64),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(usize),
    SegmentSoftmax(usize, Rc<[Segment]>),
    SegmentWeightedSum {
        w: usize,
        z: usize,
        segments: Rc<[Segment]>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        segments: Rc<[Segment]>,
        heads: usize,
        scale: f64,
        probs: Vec<f64>,
    },
    GatherRows(usize, Rc<[usize]>),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
    },
    Sum(usize),
    WeightedSum(usize, Tensor),
    NormalizeRows(usize),
    LogSumExpRows {
        x: usize,
        mask: Option<Rc<[bool]>>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Relu(_) => "relu",
            Op::PowScalar(..) => "pow_scalar",
            Op::Clamp(..) => "clamp",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::SegmentWeightedSum { .. } => "segment_weighted_sum",
            Op::Attention { .. } => "attention",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Sum(_) => "sum",
            Op::WeightedSum(..) => "weighted_sum",
            Op::NormalizeRows(_) => "normalize_rows",
            Op::LogSumExpRows { .. } => "log_sum_exp_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of the primitives applied during one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, shapes: &[(usize, usize)]) -> NumericsError {
    let s: Vec<String> = shapes.iter().map(|(r, c)| format!("{r}x{c}")).collect();
    NumericsError::Shape {
        op,
        shapes: s.join(", "),
    }
}

#[inline]
fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// In-place softmax over a slice using max subtraction.
fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            idx: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(
            v.tape, self.id,
            "variable belongs to a different tape (node {})",
            v.idx
        );
        v.idx
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v)].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Names of the recorded primitives, in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Places a parameter on the tape; its adjoint is accumulated into the
    /// store on backward.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (m, k) = self.nodes[ai].value.shape();
        let (k2, n) = self.nodes[bi].value.shape();
        if k != k2 {
            return Err(shape_err("matmul", &[(m, k), (k2, n)]));
        }
        let mut out = Tensor::zeros(m, n);
        gemm_acc(
            self.nodes[ai].value.data(),
            self.nodes[bi].value.data(),
            out.data_mut(),
            m,
            k,
            n,
        );
        Ok(self.push(out, Op::MatMul(ai, bi)))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (m, k) = self.nodes[ai].value.shape();
        let (n, k2) = self.nodes[bi].value.shape();
        if k != k2 {
            return Err(shape_err("matmul_bt", &[(m, k), (n, k2)]));
        }
        let mut out = Tensor::zeros(m, n);
        gemm_bt_acc(
            self.nodes[ai].value.data(),
            self.nodes[bi].value.data(),
            out.data_mut(),
            m,
            k,
            n,
        );
        Ok(self.push(out, Op::MatMulBt(ai, bi)))
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var, NumericsError> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (sa, sb) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        if sa != sb {
            return Err(shape_err(name, &[sa, sb]));
        }
        let data = self.nodes[ai]
            .value
            .data()
            .iter()
            .zip(self.nodes[bi].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(Tensor::from_vec(sa.0, sa.1, data), op(ai, bi)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Adds a `1 × n` row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (ai, bi) = (self.idx(a), self.idx(row));
        let (m, n) = self.nodes[ai].value.shape();
        let sb = self.nodes[bi].value.shape();
        if sb != (1, n) {
            return Err(shape_err("add_row", &[(m, n), sb]));
        }
        let mut out = self.nodes[ai].value.clone();
        let b = self.nodes[bi].value.data();
        for r in 0..m {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(ai, bi)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Var {
        let ai = self.idx(a);
        let out = self.nodes[ai].value.map(f);
        self.push(out, op(ai))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, |i| Op::Scale(i, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, stable_sigmoid, Op::Sigmoid)
    }

    /// Natural logarithm; inputs must be positive.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp)
    }

    /// `max(0, x)`.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), |i| Op::PowScalar(i, p))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), |i| Op::Clamp(i, lo, hi))
    }

    /// Row-wise layer normalisation with learnable `1 × n` gain and bias.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let (xi, gi, bi) = (self.idx(x), self.idx(gamma), self.idx(beta));
        let (m, n) = self.nodes[xi].value.shape();
        let (sg, sb) = (self.nodes[gi].value.shape(), self.nodes[bi].value.shape());
        if sg != (1, n) || sb != (1, n) {
            return Err(shape_err("layer_norm", &[(m, n), sg, sb]));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = Tensor::zeros(m, n);
        {
            let xv = &self.nodes[xi].value;
            let g = self.nodes[gi].value.data();
            let b = self.nodes[bi].value.data();
            for r in 0..m {
                let row = xv.row(r);
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let s = 1.0 / (var + eps).sqrt();
                inv_std[r] = s;
                let o = out.row_mut(r);
                for c in 0..n {
                    let h = (row[c] - mean) * s;
                    xhat[r * n + c] = h;
                    o[c] = g[c] * h + b[c];
                }
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                inv_std,
            },
        ))
    }

    /// Softmax over each row, computed with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        let mut out = self.nodes[ai].value.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(ai))
    }

    fn check_segments(
        &self,
        name: &'static str,
        rows: usize,
        segments: &[Segment],
    ) -> Result<(), NumericsError> {
        let mut next = 0;
        for s in segments {
            if s.start != next || s.len == 0 {
                return Err(NumericsError::Segments {
                    op: name,
                    detail: format!("segment {:?} does not continue at row {next}", s),
                });
            }
            next = s.end();
        }
        if next != rows {
            return Err(NumericsError::Segments {
                op: name,
                detail: format!("segments cover {next} rows, input has {rows}"),
            });
        }
        Ok(())
    }

    /// Softmax of a column vector within each segment.
    pub fn segment_softmax(
        &mut self,
        x: Var,
        segments: Rc<[Segment]>,
    ) -> Result<Var, NumericsError> {
        let xi = self.idx(x);
        let (t, c) = self.nodes[xi].value.shape();
        if c != 1 {
            return Err(shape_err("segment_softmax", &[(t, c)]));
        }
        self.check_segments("segment_softmax", t, &segments)?;
        let mut out = self.nodes[xi].value.clone();
        for s in segments.iter() {
            softmax_in_place(&mut out.data_mut()[s.start..s.end()]);
        }
        Ok(self.push(out, Op::SegmentSoftmax(xi, segments)))
    }

    /// For weights `w: T × 1` and rows `z: T × d`, returns `S × d` whose row
    /// `s` is the weighted sum of the rows of `z` in segment `s`.
    pub fn segment_weighted_sum(
        &mut self,
        w: Var,
        z: Var,
        segments: Rc<[Segment]>,
    ) -> Result<Var, NumericsError> {
        let (wi, zi) = (self.idx(w), self.idx(z));
        let (sw, sz) = (self.nodes[wi].value.shape(), self.nodes[zi].value.shape());
        if sw.1 != 1 || sw.0 != sz.0 {
            return Err(shape_err("segment_weighted_sum", &[sw, sz]));
        }
        self.check_segments("segment_weighted_sum", sz.0, &segments)?;
        let d = sz.1;
        let mut out = Tensor::zeros(segments.len(), d);
        {
            let wv = self.nodes[wi].value.data();
            let zv = &self.nodes[zi].value;
            for (si, s) in segments.iter().enumerate() {
                let o = out.row_mut(si);
                for t in s.start..s.end() {
                    let wt = wv[t];
                    for (ov, &zt) in o.iter_mut().zip(zv.row(t)) {
                        *ov += wt * zt;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::SegmentWeightedSum {
                w: wi,
                z: zi,
                segments,
            },
        ))
    }

    /// Multi-head scaled dot-product self-attention restricted to each
    /// segment. `q`, `k`, `v` are `T × d` projections; head `h` uses columns
    /// `[h·d/heads, (h+1)·d/heads)`. No positional information is involved.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: Rc<[Segment]>,
        heads: usize,
        scale: f64,
    ) -> Result<Var, NumericsError> {
        let (qi, ki, vi) = (self.idx(q), self.idx(k), self.idx(v));
        let sq = self.nodes[qi].value.shape();
        let sk = self.nodes[ki].value.shape();
        let sv = self.nodes[vi].value.shape();
        if sq != sk || sq != sv || heads == 0 || !sq.1.is_multiple_of(heads) {
            return Err(shape_err("attention", &[sq, sk, sv]));
        }
        self.check_segments("attention", sq.0, &segments)?;
        let (t_total, d) = sq;
        let dh = d / heads;
        let prob_len: usize = segments.iter().map(|s| s.len * s.len).sum::<usize>() * heads;
        let mut probs = vec![0.0; prob_len];
        let mut out = Tensor::zeros(t_total, d);
        {
            let qv = &self.nodes[qi].value;
            let kv = &self.nodes[ki].value;
            let vv = &self.nodes[vi].value;
            let mut off = 0;
            for s in segments.iter() {
                let n = s.len;
                for h in 0..heads {
                    let c0 = h * dh;
                    let p = &mut probs[off..off + n * n];
                    for i in 0..n {
                        let qr = &qv.row(s.start + i)[c0..c0 + dh];
                        for j in 0..n {
                            let kr = &kv.row(s.start + j)[c0..c0 + dh];
                            let mut acc = 0.0;
                            for (a, b) in qr.iter().zip(kr) {
                                acc += a * b;
                            }
                            p[i * n + j] = acc * scale;
                        }
                        softmax_in_place(&mut p[i * n..(i + 1) * n]);
                        let o = &mut out.row_mut(s.start + i)[c0..c0 + dh];
                        for j in 0..n {
                            let pij = p[i * n + j];
                            let vr = &vv.row(s.start + j)[c0..c0 + dh];
                            for (ov, &x) in o.iter_mut().zip(vr) {
                                *ov += pij * x;
                            }
                        }
                    }
                    off += n * n;
                }
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q: qi,
                k: ki,
                v: vi,
                segments,
                heads,
                scale,
                probs,
            },
        ))
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: Rc<[usize]>) -> Result<Var, NumericsError> {
        let xi = self.idx(x);
        let (m, n) = self.nodes[xi].value.shape();
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(NumericsError::Shape {
                op: "gather_rows",
                shapes: format!("{m}x{n}, row index {bad}"),
            });
        }
        let mut out = Tensor::zeros(indices.len(), n);
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.nodes[xi].value.row(i));
        }
        Ok(self.push(out, Op::GatherRows(xi, indices)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let idxs: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let shapes: Vec<(usize, usize)> =
            idxs.iter().map(|&i| self.nodes[i].value.shape()).collect();
        let cols = match shapes.first() {
            Some(s) => s.1,
            None => return Err(shape_err("concat_rows", &[])),
        };
        if shapes.iter().any(|s| s.1 != cols) {
            return Err(shape_err("concat_rows", &shapes));
        }
        let rows: usize = shapes.iter().map(|s| s.0).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &i in &idxs {
            data.extend_from_slice(self.nodes[i].value.data());
        }
        Ok(self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(idxs)))
    }

    /// Concatenation along the feature dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let idxs: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let shapes: Vec<(usize, usize)> =
            idxs.iter().map(|&i| self.nodes[i].value.shape()).collect();
        let rows = match shapes.first() {
            Some(s) => s.0,
            None => return Err(shape_err("concat_cols", &[])),
        };
        if shapes.iter().any(|s| s.0 != rows) {
            return Err(shape_err("concat_cols", &shapes));
        }
        let cols: usize = shapes.iter().map(|s| s.1).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &i in &idxs {
                let src = self.nodes[i].value.row(r);
                out.row_mut(r)[c0..c0 + src.len()].copy_from_slice(src);
                c0 += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(idxs)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let xi = self.idx(x);
        let (m, n) = self.nodes[xi].value.shape();
        if start + len > n {
            return Err(NumericsError::Shape {
                op: "slice_cols",
                shapes: format!("{m}x{n}, columns {start}..{}", start + len),
            });
        }
        let mut out = Tensor::zeros(m, len);
        for r in 0..m {
            out.row_mut(r)
                .copy_from_slice(&self.nodes[xi].value.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols { x: xi, start }))
    }

    /// Sum of all entries, as a `1 × 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        let s = self.nodes[ai].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(ai))
    }

    /// `Σ wᵢⱼ xᵢⱼ` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var, NumericsError> {
        let xi = self.idx(x);
        let sx = self.nodes[xi].value.shape();
        if sx != weights.shape() {
            return Err(shape_err("weighted_sum", &[sx, weights.shape()]));
        }
        let s = self.nodes[xi]
            .value
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(xi, weights)))
    }

    /// Scales each row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let mut out = self.nodes[xi].value.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = (row.iter().map(|v| v * v).sum::<f64>() + NORMALIZE_EPS).sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        self.push(out, Op::NormalizeRows(xi))
    }

    /// Row-wise `log Σⱼ exp(xᵢⱼ)` over the entries where `mask` is true
    /// (all entries when `mask` is `None`). Returns an `m × 1` column.
    pub fn log_sum_exp_rows(
        &mut self,
        x: Var,
        mask: Option<Rc<[bool]>>,
    ) -> Result<Var, NumericsError> {
        let xi = self.idx(x);
        let (m, n) = self.nodes[xi].value.shape();
        if let Some(mk) = &mask {
            if mk.len() != m * n {
                return Err(NumericsError::Shape {
                    op: "log_sum_exp_rows",
                    shapes: format!("{m}x{n}, mask of length {}", mk.len()),
                });
            }
        }
        let mut out = Tensor::zeros(m, 1);
        for r in 0..m {
            let row = self.nodes[xi].value.row(r);
            let keep = |c: usize| mask.as_ref().is_none_or(|mk| mk[r * n + c]);
            let max = (0..n)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(NumericsError::Shape {
                    op: "log_sum_exp_rows",
                    shapes: format!("{m}x{n}, row {r} has no unmasked entries"),
                });
            }
            let s: f64 = (0..n)
                .filter(|&c| keep(c))
                .map(|c| (row[c] - max).exp())
                .sum();
            out.set(r, 0, max + s.ln());
        }
        Ok(self.push(out, Op::LogSumExpRows { x: xi, mask }))
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape and adds
    /// `d loss / d param` into the store's gradient accumulators.
    pub fn backward(self, loss: Var, store: &mut ParamStore) -> Result<(), NumericsError> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(NumericsError::NotOnTape);
        }
        let ls = self.nodes[loss.idx].value.shape();
        if ls != (1, 1) {
            return Err(NumericsError::NonScalarLoss(ls.0, ls.1));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.idx] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let out = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::MatMul(a, b) => {
                    let (m, k) = nodes[*a].value.shape();
                    let n = nodes[*b].value.cols();
                    let mut ga = Tensor::zeros(m, k);
                    gemm_bt_acc(g.data(), nodes[*b].value.data(), ga.data_mut(), m, n, k);
                    let mut gb = Tensor::zeros(k, n);
                    gemm_at_acc(nodes[*a].value.data(), g.data(), gb.data_mut(), m, k, n);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    // out = a bᵀ, a: m×k, b: n×k
                    let (m, k) = nodes[*a].value.shape();
                    let n = nodes[*b].value.rows();
                    let mut ga = Tensor::zeros(m, k);
                    gemm_acc(g.data(), nodes[*b].value.data(), ga.data_mut(), m, n, k);
                    let mut gb = Tensor::zeros(n, k);
                    gemm_at_acc(g.data(), nodes[*a].value.data(), gb.data_mut(), m, n, k);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&g, &nodes[*b].value, |gv, bv| gv * bv);
                    let gb = zip_map(&g, &nodes[*a].value, |gv, av| gv * av);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, b) => {
                    let n = g.cols();
                    let mut gb = Tensor::zeros(1, n);
                    for r in 0..g.rows() {
                        for (o, &x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.map(|x| x * s)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Gelu(a) => {
                    let ga = zip_map(&g, &nodes[*a].value, |gv, x| gv * gelu_grad(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = zip_map(&g, out, |gv, y| gv * y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = zip_map(&g, &nodes[*a].value, |gv, x| gv / x);
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = zip_map(&g, out, |gv, y| gv * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = zip_map(&g, &nodes[*a].value, |gv, x| if x > 0.0 { gv } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::PowScalar(a, p) => {
                    let p = *p;
                    let ga = zip_map(&g, &nodes[*a].value, |gv, x| {
                        if x == 0.0 && p >= 1.0 {
                            if p == 1.0 {
                                gv
                            } else {
                                0.0
                            }
                        } else {
                            gv * p * x.powf(p - 1.0)
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = zip_map(&g, &nodes[*a].value, |gv, x| {
                        if x > *lo && x < *hi {
                            gv
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (m, n) = g.shape();
                    let gam = nodes[*gamma].value.data();
                    let mut gg = Tensor::zeros(1, n);
                    let mut gbeta = Tensor::zeros(1, n);
                    let mut gx = Tensor::zeros(m, n);
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        let gr = g.row(r);
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..n {
                            gbeta.data_mut()[c] += gr[c];
                            gg.data_mut()[c] += gr[c] * xh[c];
                            dxhat[c] = gr[c] * gam[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xh[c];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        let s = inv_std[r];
                        let o = gx.row_mut(r);
                        for c in 0..n {
                            o[c] = s * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *beta, gbeta);
                    acc(&mut grads, *x, gx);
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = Tensor::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        softmax_backward(out.row(r), g.row(r), ga.row_mut(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SegmentSoftmax(a, segments) => {
                    let mut ga = Tensor::zeros(g.rows(), 1);
                    for s in segments.iter() {
                        let r = s.start..s.end();
                        softmax_backward(
                            &out.data()[r.clone()],
                            &g.data()[r.clone()],
                            &mut ga.data_mut()[r],
                        );
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SegmentWeightedSum { w, z, segments } => {
                    let zv = &nodes[*z].value;
                    let wv = nodes[*w].value.data();
                    let mut gw = Tensor::zeros(zv.rows(), 1);
                    let mut gz = Tensor::zeros(zv.rows(), zv.cols());
                    for (si, s) in segments.iter().enumerate() {
                        let go = g.row(si);
                        for t in s.start..s.end() {
                            let mut dot = 0.0;
                            for (a, b) in go.iter().zip(zv.row(t)) {
                                dot += a * b;
                            }
                            gw.data_mut()[t] = dot;
                            let wt = wv[t];
                            for (o, &x) in gz.row_mut(t).iter_mut().zip(go) {
                                *o = wt * x;
                            }
                        }
                    }
                    acc(&mut grads, *w, gw);
                    acc(&mut grads, *z, gz);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    segments,
                    heads,
                    scale,
                    probs,
                } => {
                    let (gq, gk, gv) = attention_backward(
                        &g,
                        &nodes[*q].value,
                        &nodes[*k].value,
                        &nodes[*v].value,
                        segments,
                        *heads,
                        *scale,
                        probs,
                    );
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
                Op::GatherRows(a, indices) => {
                    let (m, n) = nodes[*a].value.shape();
                    let mut ga = Tensor::zeros(m, n);
                    for (r, &src) in indices.iter().enumerate() {
                        for (o, &x) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut r0 = 0;
                    for &p in parts {
                        let rows = nodes[p].value.rows();
                        let data = g.data()[r0 * cols..(r0 + rows) * cols].to_vec();
                        acc(&mut grads, p, Tensor::from_vec(rows, cols, data));
                        r0 += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let mut c0 = 0;
                    for &p in parts {
                        let cols = nodes[p].value.cols();
                        let mut gp = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + cols]);
                        }
                        acc(&mut grads, p, gp);
                        c0 += cols;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (m, n) = nodes[*x].value.shape();
                    let len = g.cols();
                    let mut gx = Tensor::zeros(m, n);
                    for r in 0..m {
                        gx.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Sum(a) => {
                    let (m, n) = nodes[*a].value.shape();
                    acc(&mut grads, *a, Tensor::filled(m, n, g.item()));
                }
                Op::WeightedSum(a, w) => {
                    let gs = g.item();
                    acc(&mut grads, *a, w.map(|x| x * gs));
                }
                Op::NormalizeRows(a) => {
                    let xv = &nodes[*a].value;
                    let mut ga = Tensor::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let norm =
                            (xv.row(r).iter().map(|v| v * v).sum::<f64>() + NORMALIZE_EPS).sqrt();
                        let y = out.row(r);
                        let gr = g.row(r);
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                            *o = (gv - yv * dot) / norm;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSumExpRows { x, mask } => {
                    let xv = &nodes[*x].value;
                    let (m, n) = xv.shape();
                    let mut gx = Tensor::zeros(m, n);
                    for r in 0..m {
                        let lse = out.get(r, 0);
                        let gr = g.get(r, 0);
                        let row = xv.row(r);
                        let o = gx.row_mut(r);
                        for c in 0..n {
                            if mask.as_ref().is_none_or(|mk| mk[r * n + c]) {
                                o[c] = gr * (row[c] - lse).exp();
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
            }
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut grads[i] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

fn softmax_backward(y: &[f64], gy: &[f64], gx: &mut [f64]) {
    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
    for ((o, &yv), &g) in gx.iter_mut().zip(y).zip(gy) {
        *o = yv * (g - dot);
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    g: &Tensor,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    segments: &[Segment],
    heads: usize,
    scale: f64,
    probs: &[f64],
) -> (Tensor, Tensor, Tensor) {
    let (t, d) = q.shape();
    let dh = d / heads;
    let mut gq = Tensor::zeros(t, d);
    let mut gk = Tensor::zeros(t, d);
    let mut gv = Tensor::zeros(t, d);
    let mut dp = Vec::new();
    let mut off = 0;
    for s in segments {
        let n = s.len;
        for h in 0..heads {
            let c0 = h * dh;
            let p = &probs[off..off + n * n];
            dp.clear();
            dp.resize(n * n, 0.0);
            // dV_j += Σ_i P_ij dO_i ; dP_ij = dO_i · V_j
            for i in 0..n {
                let go = &g.row(s.start + i)[c0..c0 + dh];
                for j in 0..n {
                    let pij = p[i * n + j];
                    let vr = &v.row(s.start + j)[c0..c0 + dh];
                    let mut dot = 0.0;
                    for (a, b) in go.iter().zip(vr) {
                        dot += a * b;
                    }
                    dp[i * n + j] = dot;
                    let gvr = &mut gv.row_mut(s.start + j)[c0..c0 + dh];
                    for (o, &x) in gvr.iter_mut().zip(go) {
                        *o += pij * x;
                    }
                }
            }
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), then through the scaled dot products.
            for i in 0..n {
                let row_p = &p[i * n..(i + 1) * n];
                let row_dp = &dp[i * n..(i + 1) * n];
                let dot: f64 = row_p.iter().zip(row_dp).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    let ds = row_p[j] * (row_dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in c0..c0 + dh {
                        let kv = k.get(s.start + j, c);
                        let qv = q.get(s.start + i, c);
                        gq.data_mut()[(s.start + i) * d + c] += ds * kv;
                        gk.data_mut()[(s.start + j) * d + c] += ds * qv;
                    }
                }
            }
            off += n * n;
        }
    }
    (gq, gk, gv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric_input_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row_vector(vec![0.0, 0.0]));
        let y = t.softmax_rows(x);
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_logit_does_not_overflow() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row_vector(vec![1e4, 0.0]));
        let y = t.softmax_rows(x);
        let v = t.value(y).data();
        assert_eq!(v[0], 1.0);
        // exp(-1e4) underflows to exactly zero in double precision
        assert_eq!(v[1], 0.0);
        assert!(v.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0));
        let y = t.sigmoid(x);
        assert_eq!(t.value(y).item(), 0.5);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("2x3"), "{msg}");
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut store = ParamStore::new(0);
        let id = store
            .add("p", "x", Tensor::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]))
            .unwrap();
        let mut t = Tape::new();
        let p = t.param(&store, id);
        let s = t.sum(p);
        t.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[1.0; 4]);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut store = ParamStore::new(0);
        let vals = vec![1.0, -2.0, 3.0, 0.5, 7.0];
        let id = store
            .add("p", "x", Tensor::row_vector(vals.clone()))
            .unwrap();
        let mut t = Tape::new();
        let p = t.param(&store, id);
        let sq = t.mul(p, p).unwrap();
        let s = t.sum(sq);
        let l = t.scale(s, 0.5);
        t.backward(l, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), vals.as_slice());
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut store = ParamStore::new(0);
        let id = store
            .add("p", "x", Tensor::row_vector(vec![1.0, 2.0]))
            .unwrap();
        for _ in 0..2 {
            let mut t = Tape::new();
            let p = t.param(&store, id);
            let s = t.sum(p);
            t.backward(s, &mut store).unwrap();
        }
        assert_eq!(store.grad(id).data(), &[2.0, 2.0]);
        store.zero_grad();
        assert_eq!(store.grad(id).data(), &[0.0, 0.0]);
    }

    #[test]
    fn loss_from_another_tape_is_rejected() {
        let mut store = ParamStore::new(0);
        let mut t1 = Tape::new();
        let x = t1.constant(Tensor::scalar(1.0));
        let t2 = Tape::new();
        assert!(matches!(
            t2.backward(x, &mut store),
            Err(NumericsError::NotOnTape)
        ));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut store = ParamStore::new(0);
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(2, 1));
        assert!(matches!(
            t.backward(x, &mut store),
            Err(NumericsError::NonScalarLoss(2, 1))
        ));
    }

    #[test]
    fn segments_must_tile_the_rows() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(4, 1));
        let bad: Rc<[Segment]> = vec![Segment::new(0, 2), Segment::new(3, 1)].into();
        assert!(t.segment_softmax(x, bad).is_err());
        let good: Rc<[Segment]> = segments_from_lengths(&[1, 3]).into();
        let y = t.segment_softmax(x, good).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
    }
}
