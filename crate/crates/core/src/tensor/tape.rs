use super::{softmax_into, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside the engine.
///
/// The caller evaluates the forward value itself and registers it with
/// [`Tape::custom`]; during the reverse sweep the op receives the upstream
/// gradient and accumulates into the gradients of its inputs. `grad_in[k]` is
/// `None` when input `k` does not need a gradient.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        grad_in: &mut [Option<&mut [f64]>],
    );
}

enum Stored<'p> {
    Borrowed(&'p Tensor),
    Owned(Tensor),
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Gather { table: NodeId, ids: Vec<usize> },
    SliceCols { src: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    Row { src: NodeId, index: usize },
    Transpose(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Gelu(NodeId),
    Abs(NodeId),
    Square(NodeId),
    LnFloor { src: NodeId, eps: f64 },
    SoftmaxRows { src: NodeId, temperature: f64 },
    LayerNorm {
        src: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    NormalizeSum(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Pick { src: NodeId, index: usize },
    Custom { inputs: Vec<NodeId>, op: Box<dyn CustomOp> },
}

struct Node<'p> {
    value: Stored<'p>,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations in evaluation order so that a single reverse
/// sweep yields all gradients.
///
/// Parameters are borrowed for the lifetime of the tape rather than copied.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to `id`; zeros when `id` does not influence the
    /// loss.
    pub fn wrt(&self, id: NodeId) -> Vec<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.lens[id.0]],
        }
    }

    /// Adds `scale * ∂loss/∂id` into `dst`.
    pub fn accumulate_into(&self, id: NodeId, scale: f64, dst: &mut [f64]) {
        if let Some(g) = &self.grads[id.0] {
            for (d, v) in dst.iter_mut().zip(g) {
                *d += scale * v;
            }
        }
    }

    pub fn touched(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c = beta * c + op(a) · op(b)` where `op(a)` is `m × k` and `op(b)` is
/// `k × n`. Transposed operands are read in place through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly the extents implied by (m, k, n) and the
    // strides above, as asserted.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id.0].value {
            Stored::Borrowed(t) => t,
            Stored::Owned(t) => t,
        }
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.value(id).data()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|&i| self.needs(i));
        self.nodes.push(Node {
            value: Stored::Owned(value),
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], data).expect("shape computed by the op")
    }

    /// Records an input tensor. It participates in differentiation when
    /// `requires_grad` is set on it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let needs_grad = value.requires_grad();
        self.nodes.push(Node {
            value: Stored::Owned(value),
            op: Op::Leaf,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value.with_grad(false))
    }

    /// Records a borrowed trainable parameter.
    pub fn param(&mut self, value: &'p Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Stored::Borrowed(value),
            op: Op::Leaf,
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn zip_map(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "elementwise operands differ in size");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Self::mat(va.rows(), va.cols(), data);
        self.push(out, op, &[a, b])
    }

    fn map(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let out = Self::mat(va.rows(), va.cols(), data);
        self.push(out, op, &[a])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_map(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `1 × n` row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (va, vr) = (self.value(a), self.value(row));
        let cols = va.cols();
        assert_eq!(vr.len(), cols, "broadcast row has wrong width");
        let r = vr.data();
        let mut data = va.data().to_vec();
        for chunk in data.chunks_exact_mut(cols) {
            for (x, &b) in chunk.iter_mut().zip(r) {
                *x += b;
            }
        }
        let out = Self::mat(va.rows(), cols, data);
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        assert_eq!(vb.rows(), k, "matmul inner dimensions differ");
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut data, 0.0);
        self.push(Self::mat(m, n, data), Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, n) = (va.rows(), va.cols(), vb.rows());
        assert_eq!(vb.cols(), k, "matmul_nt inner dimensions differ");
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), true, &mut data, 0.0);
        self.push(Self::mat(m, n, data), Op::MatMulNt(a, b), &[a, b])
    }

    /// Selects rows of `table`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let vt = self.value(table);
        let cols = vt.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            assert!(i < vt.rows(), "gather index {i} out of range");
            data.extend_from_slice(vt.row(i));
        }
        let out = Self::mat(ids.len(), cols, data);
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, src: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(src);
        let (rows, cols) = (v.rows(), v.cols());
        assert!(start < end && end <= cols, "column slice out of range");
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..end]);
        }
        let out = Self::mat(rows, end - start, data);
        self.push(out, Op::SliceCols { src, start }, &[src])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows(), rows, "concat operands differ in rows");
                data.extend_from_slice(v.row(r));
            }
        }
        let out = Self::mat(rows, total, data);
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn row(&mut self, src: NodeId, index: usize) -> NodeId {
        let v = self.value(src);
        let data = v.row(index).to_vec();
        let out = Self::mat(1, v.cols(), data);
        self.push(out, Op::Row { src, index }, &[src])
    }

    pub fn transpose(&mut self, src: NodeId) -> NodeId {
        let v = self.value(src);
        let (rows, cols) = (v.rows(), v.cols());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = v.data()[r * cols + c];
            }
        }
        let out = Self::mat(cols, rows, data);
        self.push(out, Op::Transpose(src), &[src])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Gelu(a), gelu)
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Square(a), |x| x * x)
    }

    /// `ln(max(x, eps))`; floored entries are constants for differentiation.
    pub fn ln_floor(&mut self, a: NodeId, eps: f64) -> NodeId {
        self.map(a, Op::LnFloor { src: a, eps }, move |x| x.max(eps).ln())
    }

    /// Row-wise softmax of `x / temperature`.
    pub fn softmax_rows(&mut self, src: NodeId, temperature: f64) -> Result<NodeId, TensorError> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(TensorError::BadTemperature(temperature));
        }
        let v = self.value(src);
        if let Some((index, &value)) = v.data().iter().enumerate().find(|(_, x)| !x.is_finite()) {
            return Err(TensorError::NonFinite { index, value });
        }
        let (rows, cols) = (v.rows(), v.cols());
        let mut data = vec![0.0; rows * cols];
        for (x, o) in v.data().chunks_exact(cols).zip(data.chunks_exact_mut(cols)) {
            softmax_into(x, temperature, o);
        }
        let out = Self::mat(rows, cols, data);
        Ok(self.push(out, Op::SoftmaxRows { src, temperature }, &[src]))
    }

    /// Row-wise layer normalization with learned `gain` and `bias` rows.
    pub fn layer_norm(&mut self, src: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let v = self.value(src);
        let (rows, cols) = (v.rows(), v.cols());
        let (g, b) = (self.data(gain), self.data(bias));
        assert_eq!(g.len(), cols);
        assert_eq!(b.len(), cols);
        let mut normalized = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let x = v.row(r);
            let mean = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|&u| (u - mean) * (u - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let xh = (x[c] - mean) * is;
                normalized[r * cols + c] = xh;
                data[r * cols + c] = g[c] * xh + b[c];
            }
        }
        let out = Self::mat(rows, cols, data);
        self.push(
            out,
            Op::LayerNorm {
                src,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[src, gain, bias],
        )
    }

    /// `x / Σx` over all entries.
    pub fn normalize_sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s: f64 = v.data().iter().sum();
        let data = v.data().iter().map(|x| x / s).collect();
        let out = Self::mat(v.rows(), v.cols(), data);
        self.push(out, Op::NormalizeSum(a), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// A single entry (flat index) as a scalar.
    pub fn pick(&mut self, src: NodeId, index: usize) -> NodeId {
        let s = self.data(src)[index];
        self.push(Tensor::scalar(s), Op::Pick { src, index }, &[src])
    }

    /// Records the output of an externally evaluated op.
    pub fn custom(&mut self, inputs: &[NodeId], output: Tensor, op: Box<dyn CustomOp>) -> NodeId {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let lens: Vec<usize> = (0..self.nodes.len()).map(|i| self.value(NodeId(i)).len()).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = self.value(NodeId(i));
            let want = |id: NodeId| self.nodes[id.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    for (id, sign) in [(*a, 1.0), (*b, 1.0)] {
                        if want(id) {
                            let d = acc(&mut grads, id, lens[id.0]);
                            d.iter_mut().zip(&g).for_each(|(d, v)| *d += sign * v);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    for (id, sign) in [(*a, 1.0), (*b, -1.0)] {
                        if want(id) {
                            let d = acc(&mut grads, id, lens[id.0]);
                            d.iter_mut().zip(&g).for_each(|(d, v)| *d += sign * v);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.data(*a), self.data(*b));
                    if want(*a) {
                        let d = acc(&mut grads, *a, lens[a.0]);
                        for ((d, v), y) in d.iter_mut().zip(&g).zip(vb) {
                            *d += v * y;
                        }
                    }
                    if want(*b) {
                        let d = acc(&mut grads, *b, lens[b.0]);
                        for ((d, v), x) in d.iter_mut().zip(&g).zip(va) {
                            *d += v * x;
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    if want(*a) {
                        let d = acc(&mut grads, *a, lens[a.0]);
                        d.iter_mut().zip(&g).for_each(|(d, v)| *d += v);
                    }
                    if want(*row) {
                        let cols = lens[row.0];
                        let d = acc(&mut grads, *row, cols);
                        for chunk in g.chunks_exact(cols) {
                            d.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if want(*a) {
                        let d = acc(&mut grads, *a, lens[a.0]);
                        d.iter_mut().zip(&g).for_each(|(d, v)| *d += c * v);
                    }
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                    if want(*a) {
                        // dA = dC · Bᵀ
                        let d = acc(&mut grads, *a, m * k);
                        gemm(m, n, k, &g, false, vb.data(), true, d, 1.0);
                    }
                    if want(*b) {
                        // dB = Aᵀ · dC
                        let d = acc(&mut grads, *b, k * n);
                        gemm(k, m, n, va.data(), true, &g, false, d, 1.0);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                    if want(*a) {
                        // dA = dC · B
                        let d = acc(&mut grads, *a, m * k);
                        gemm(m, n, k, &g, false, vb.data(), false, d, 1.0);
                    }
                    if want(*b) {
                        // dB = dCᵀ · A
                        let d = acc(&mut grads, *b, n * k);
                        gemm(n, m, k, &g, true, va.data(), false, d, 1.0);
                    }
                }
                Op::Gather { table, ids } => {
                    if want(*table) {
                        let cols = self.value(*table).cols();
                        let d = acc(&mut grads, *table, lens[table.0]);
                        for (r, &id) in ids.iter().enumerate() {
                            let src = &g[r * cols..(r + 1) * cols];
                            d[id * cols..(id + 1) * cols]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, v)| *d += v);
                        }
                    }
                }
                Op::SliceCols { src, start } => {
                    if want(*src) {
                        let cols = self.value(*src).cols();
                        let width = out.cols();
                        let d = acc(&mut grads, *src, lens[src.0]);
                        for (r, chunk) in g.chunks_exact(width).enumerate() {
                            let off = r * cols + start;
                            d[off..off + width]
                                .iter_mut()
                                .zip(chunk)
                                .for_each(|(d, v)| *d += v);
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = out.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let width = self.value(p).cols();
                        if want(p) {
                            let d = acc(&mut grads, p, lens[p.0]);
                            for (r, chunk) in d.chunks_exact_mut(width).enumerate() {
                                let off = r * total + offset;
                                chunk
                                    .iter_mut()
                                    .zip(&g[off..off + width])
                                    .for_each(|(d, v)| *d += v);
                            }
                        }
                        offset += width;
                    }
                }
                Op::Row { src, index } => {
                    if want(*src) {
                        let cols = out.cols();
                        let d = acc(&mut grads, *src, lens[src.0]);
                        d[index * cols..(index + 1) * cols]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(d, v)| *d += v);
                    }
                }
                Op::Transpose(src) => {
                    if want(*src) {
                        let (rows, cols) = (out.rows(), out.cols());
                        let d = acc(&mut grads, *src, lens[src.0]);
                        for r in 0..rows {
                            for c in 0..cols {
                                d[c * rows + r] += g[r * cols + c];
                            }
                        }
                    }
                }
                Op::Tanh(a) => self.unary_back(&mut grads, &lens, *a, out.data(), &g, |_, y| 1.0 - y * y),
                Op::Sigmoid(a) => self.unary_back(&mut grads, &lens, *a, out.data(), &g, |_, y| y * (1.0 - y)),
                Op::Gelu(a) => self.unary_back(&mut grads, &lens, *a, out.data(), &g, |x, _| gelu_grad(x)),
                Op::Abs(a) => self.unary_back(&mut grads, &lens, *a, out.data(), &g, |x, _| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }),
                Op::Square(a) => self.unary_back(&mut grads, &lens, *a, out.data(), &g, |x, _| 2.0 * x),
                Op::LnFloor { src, eps } => {
                    let eps = *eps;
                    self.unary_back(&mut grads, &lens, *src, out.data(), &g, move |x, _| {
                        if x > eps {
                            1.0 / x
                        } else {
                            0.0
                        }
                    })
                }
                Op::SoftmaxRows { src, temperature } => {
                    if want(*src) {
                        let cols = out.cols();
                        let d = acc(&mut grads, *src, lens[src.0]);
                        for ((y, gy), dx) in out
                            .data()
                            .chunks_exact(cols)
                            .zip(g.chunks_exact(cols))
                            .zip(d.chunks_exact_mut(cols))
                        {
                            let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                            for c in 0..cols {
                                dx[c] += y[c] * (gy[c] - dot) / temperature;
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    src,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let cols = out.cols();
                    if want(*gain) {
                        let d = acc(&mut grads, *gain, cols);
                        for (gy, xh) in g.chunks_exact(cols).zip(normalized.chunks_exact(cols)) {
                            for c in 0..cols {
                                d[c] += gy[c] * xh[c];
                            }
                        }
                    }
                    if want(*bias) {
                        let d = acc(&mut grads, *bias, cols);
                        for gy in g.chunks_exact(cols) {
                            d.iter_mut().zip(gy).for_each(|(d, v)| *d += v);
                        }
                    }
                    if want(*src) {
                        let gain_v = self.data(*gain).to_vec();
                        let d = acc(&mut grads, *src, lens[src.0]);
                        let nf = cols as f64;
                        let mut dxh = vec![0.0; cols];
                        for (r, ((gy, xh), dx)) in g
                            .chunks_exact(cols)
                            .zip(normalized.chunks_exact(cols))
                            .zip(d.chunks_exact_mut(cols))
                            .enumerate()
                        {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for c in 0..cols {
                                dxh[c] = gy[c] * gain_v[c];
                                s1 += dxh[c];
                                s2 += dxh[c] * xh[c];
                            }
                            let k = inv_std[r] / nf;
                            for c in 0..cols {
                                dx[c] += k * (nf * dxh[c] - s1 - xh[c] * s2);
                            }
                        }
                    }
                }
                Op::NormalizeSum(a) => {
                    if want(*a) {
                        let s: f64 = self.data(*a).iter().sum();
                        let y = out.data();
                        let dot: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
                        let d = acc(&mut grads, *a, lens[a.0]);
                        for (dx, gy) in d.iter_mut().zip(&g) {
                            *dx += (gy - dot) / s;
                        }
                    }
                }
                Op::Sum(a) => {
                    if want(*a) {
                        let d = acc(&mut grads, *a, lens[a.0]);
                        d.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::Mean(a) => {
                    if want(*a) {
                        let k = g[0] / lens[a.0] as f64;
                        let d = acc(&mut grads, *a, lens[a.0]);
                        d.iter_mut().for_each(|d| *d += k);
                    }
                }
                Op::Pick { src, index } => {
                    if want(*src) {
                        let d = acc(&mut grads, *src, lens[src.0]);
                        d[*index] += g[0];
                    }
                }
                Op::Custom { inputs, op } => {
                    let values: Vec<&Tensor> = inputs.iter().map(|&id| self.value(id)).collect();
                    let mut bufs: Vec<Option<Vec<f64>>> = inputs
                        .iter()
                        .map(|&id| want(id).then(|| vec![0.0; lens[id.0]]))
                        .collect();
                    {
                        let mut views: Vec<Option<&mut [f64]>> =
                            bufs.iter_mut().map(|b| b.as_deref_mut()).collect();
                        op.backward(&values, out, &g, &mut views);
                    }
                    for (&id, buf) in inputs.iter().zip(bufs) {
                        if let Some(buf) = buf {
                            let d = acc(&mut grads, id, lens[id.0]);
                            d.iter_mut().zip(&buf).for_each(|(d, v)| *d += v);
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads, lens })
    }

    fn unary_back(
        &self,
        grads: &mut [Option<Vec<f64>>],
        lens: &[usize],
        a: NodeId,
        y: &[f64],
        g: &[f64],
        deriv: impl Fn(f64, f64) -> f64,
    ) {
        if !self.needs(a) {
            return;
        }
        let x = self.data(a);
        let d = acc(grads, a, lens[a.0]);
        for (((d, gv), &xv), &yv) in d.iter_mut().zip(g).zip(x).zip(y) {
            *d += gv * deriv(xv, yv);
        }
    }
}
