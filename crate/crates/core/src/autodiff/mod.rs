//! Reverse-mode automatic differentiation on dense row-major tensors.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! then walks the record in reverse, accumulating gradients for all nodes.
//! The graph is rebuilt on every forward pass — throughput comes from
//! batching work, not from caching graphs. Values are 64-bit floats
//! throughout so finite-difference checks are unambiguous.
//!
//! The op set is exactly what the two networks in [`crate::models`] need:
//! matmul, elementwise arithmetic, activations, row softmax, layer norm,
//! row/column concatenation and slicing, a lower-triangular assembly op for
//! covariance factors, and a fused Gaussian negative log-likelihood.

pub mod check;
pub mod kernels;

use kernels::{layer_norm_row, mm, mm_abt_acc, mm_atb_acc, sigmoid, softmax_row, softplus};

/// Dense tensor: shape plus row-major values, with an optional gradient
/// buffer of identical shape (filled in by training).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], grad: None }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row and column counts when interpreted as a matrix. Rank-1 tensors
    /// are rows, scalars are 1x1.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("tensors above rank 2 are not supported"),
        }
    }

    pub fn grad_mut(&mut self) -> &mut Vec<f64> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `[n x d] + [1 x d]`, the bias broadcast.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `scale * x + shift`, elementwise with constants.
    /// The shift is applied at construction; only the scale matters for
    /// the backward pass.
    Affine(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows { x: NodeId, gamma: NodeId, beta: NodeId },
    MeanRows(NodeId),
    SumAll(NodeId),
    ConcatCols(NodeId, NodeId),
    ConcatRows(NodeId, NodeId),
    SliceCols { x: NodeId, start: usize, len: usize },
    Transpose(NodeId),
    /// Builds a `k x k` lower-triangular matrix from a diagonal row vector
    /// and the strictly-lower entries in row-major order.
    AssembleTril { diag: NodeId, below: NodeId, k: usize },
    /// `0.5 k ln(2pi) + sum ln L_ii + 0.5 |L^-1 (y - mean)|^2` for constant y.
    GaussianNll { mean: NodeId, tril: NodeId, target: Vec<f64> },
}

struct Node {
    rows: usize,
    cols: usize,
    op: Op,
}

/// Records a forward computation and runs reverse-mode accumulation.
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    /// Leaf nodes bound to named parameters, in binding order.
    bindings: Vec<(NodeId, String)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), values: Vec::new(), grads: Vec::new(), bindings: Vec::new() }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { rows, cols, op });
        self.values.push(value);
        id
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.values[id.0].len(), 1);
        self.values[id.0][0]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    /// Number of nodes currently on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- node constructors -------------------------------------------------

    /// Constant leaf.
    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        self.push(rows, cols, value, Op::Leaf)
    }

    pub fn leaf_row(&mut self, value: &[f64]) -> NodeId {
        self.leaf(1, value.len(), value.to_vec())
    }

    /// Leaf bound to a named parameter; its gradient is retrievable through
    /// [`Tape::param_grads`] after a backward pass.
    pub fn param(&mut self, name: &str, t: &Tensor) -> NodeId {
        let (r, c) = t.rows_cols();
        let id = self.push(r, c, t.data.clone(), Op::Leaf);
        self.bindings.push((id, name.to_string()));
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        assert_eq!(ka, kb, "matmul inner dimensions {} vs {}", ka, kb);
        let mut out = vec![0.0; m * n];
        mm(&self.values[a.0], &self.values[b.0], m, ka, n, &mut out);
        self.push(m, n, out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.binary_shape(a, b);
        let v = zip_map(&self.values[a.0], &self.values[b.0], |x, y| x + y);
        self.push(r, c, v, Op::Add(a, b))
    }

    /// Broadcast add of a `1 x d` row onto every row of an `n x d` matrix.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let (n, d) = self.shape(x);
        let (rr, rc) = self.shape(row);
        assert_eq!((rr, rc), (1, d), "bias row must be 1 x {}", d);
        let mut v = self.values[x.0].clone();
        let bias = &self.values[row.0];
        for chunk in v.chunks_mut(d) {
            for (o, &b) in chunk.iter_mut().zip(bias.iter()) {
                *o += b;
            }
        }
        self.push(n, d, v, Op::AddRow(x, row))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.binary_shape(a, b);
        let v = zip_map(&self.values[a.0], &self.values[b.0], |x, y| x - y);
        self.push(r, c, v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.binary_shape(a, b);
        let v = zip_map(&self.values[a.0], &self.values[b.0], |x, y| x * y);
        self.push(r, c, v, Op::Mul(a, b))
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let (r, c) = self.shape(x);
        let v = self.values[x.0].iter().map(|&v| scale * v + shift).collect();
        self.push(r, c, v, Op::Affine(x, scale))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let v = self.values[x.0].iter().map(|&v| sigmoid(v)).collect();
        self.push(r, c, v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let v = self.values[x.0].iter().map(|&v| v.tanh()).collect();
        self.push(r, c, v, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let v = self.values[x.0].iter().map(|&v| v.max(0.0)).collect();
        self.push(r, c, v, Op::Relu(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let v = self.values[x.0].iter().map(|&v| softplus(v)).collect();
        self.push(r, c, v, Op::Softplus(x))
    }

    /// Stable softmax applied independently to each row.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let mut v = self.values[x.0].clone();
        for row in v.chunks_mut(c) {
            softmax_row(row);
        }
        self.push(r, c, v, Op::SoftmaxRows(x))
    }

    /// Per-row layer normalization with affine parameters (`1 x d` each).
    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (n, d) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, d));
        assert_eq!(self.shape(beta), (1, d));
        let mut v = vec![0.0; n * d];
        for (orow, xrow) in v.chunks_mut(d).zip(self.values[x.0].chunks(d)) {
            layer_norm_row(xrow, &self.values[gamma.0], &self.values[beta.0], orow);
        }
        self.push(n, d, v, Op::LayerNormRows { x, gamma, beta })
    }

    /// Column means: `n x d -> 1 x d`.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let (n, d) = self.shape(x);
        assert!(n >= 1);
        let mut v = vec![0.0; d];
        for row in self.values[x.0].chunks(d) {
            for (o, &val) in v.iter_mut().zip(row.iter()) {
                *o += val;
            }
        }
        let inv = 1.0 / n as f64;
        for o in v.iter_mut() {
            *o *= inv;
        }
        self.push(1, d, v, Op::MeanRows(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].iter().sum();
        self.push(1, 1, vec![v], Op::SumAll(x))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ra, rb, "concat_cols row mismatch");
        let mut v = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            v.extend_from_slice(&self.values[a.0][i * ca..(i + 1) * ca]);
            v.extend_from_slice(&self.values[b.0][i * cb..(i + 1) * cb]);
        }
        self.push(ra, ca + cb, v, Op::ConcatCols(a, b))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ca, cb, "concat_rows column mismatch");
        let mut v = self.values[a.0].clone();
        v.extend_from_slice(&self.values[b.0]);
        self.push(ra + rb, ca, v, Op::ConcatRows(a, b))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.shape(x);
        assert!(start + len <= c, "slice {}..{} out of {} columns", start, start + len, c);
        let mut v = Vec::with_capacity(r * len);
        for i in 0..r {
            v.extend_from_slice(&self.values[x.0][i * c + start..i * c + start + len]);
        }
        self.push(r, len, v, Op::SliceCols { x, start, len })
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let xv = &self.values[x.0];
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                v[j * r + i] = xv[i * c + j];
            }
        }
        self.push(c, r, v, Op::Transpose(x))
    }

    pub fn assemble_tril(&mut self, diag: NodeId, below: NodeId, k: usize) -> NodeId {
        assert_eq!(self.shape(diag), (1, k));
        assert_eq!(self.shape(below), (1, k * (k - 1) / 2));
        let mut v = vec![0.0; k * k];
        for i in 0..k {
            v[i * k + i] = self.values[diag.0][i];
        }
        let mut b = 0;
        for i in 1..k {
            for j in 0..i {
                v[i * k + j] = self.values[below.0][b];
                b += 1;
            }
        }
        self.push(k, k, v, Op::AssembleTril { diag, below, k })
    }

    /// Negative log-likelihood of `target` under `N(mean, L L^T)` where `L`
    /// is the `k x k` lower-triangular node `tril` (positive diagonal).
    pub fn gaussian_nll(&mut self, mean: NodeId, tril: NodeId, target: &[f64]) -> NodeId {
        let k = target.len();
        assert_eq!(self.shape(mean), (1, k));
        assert_eq!(self.shape(tril), (k, k));
        let l = &self.values[tril.0];
        let mu = &self.values[mean.0];
        let z = forward_substitute(l, mu, target, k);
        let mut val = 0.5 * k as f64 * (2.0 * std::f64::consts::PI).ln();
        for i in 0..k {
            val += l[i * k + i].ln();
        }
        val += 0.5 * z.iter().map(|&v| v * v).sum::<f64>();
        self.push(1, 1, vec![val], Op::GaussianNll { mean, tril, target: target.to_vec() })
    }

    fn binary_shape(&self, a: NodeId, b: NodeId) -> (usize, usize) {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert_eq!(sa, sb, "elementwise op shape mismatch {:?} vs {:?}", sa, sb);
        sa
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode accumulation from a scalar root. Every node reachable
    /// from the root receives `d root / d node`; unreachable nodes keep a
    /// zero gradient. Panics if the root is not a scalar (contract
    /// violation).
    pub fn backward(&mut self, root: NodeId) {
        let (r, c) = self.shape(root);
        assert_eq!(r * c, 1, "backward requires a scalar root, got {}x{}", r, c);
        self.grads = self.values.iter().map(|v| vec![0.0; v.len()]).collect();
        self.grads[root.0][0] = 1.0;

        for i in (0..=root.0).rev() {
            let (lower, upper) = self.grads.split_at_mut(i);
            let gout: &[f64] = &upper[0];
            if gout.iter().all(|&g| g == 0.0) {
                continue;
            }
            let node = &self.nodes[i];
            match node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let n = node.cols;
                    // dA += G B^T ; dB += A^T G
                    mm_abt_acc(gout, &self.values[b.0], m, n, k, &mut lower[a.0]);
                    mm_atb_acc(&self.values[a.0], gout, m, k, n, &mut lower[b.0]);
                }
                Op::Add(a, b) => {
                    acc(&mut lower[a.0], gout);
                    acc(&mut lower[b.0], gout);
                }
                Op::AddRow(x, row) => {
                    acc(&mut lower[x.0], gout);
                    let d = node.cols;
                    for chunk in gout.chunks(d) {
                        for (o, &g) in lower[row.0].iter_mut().zip(chunk.iter()) {
                            *o += g;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    acc(&mut lower[a.0], gout);
                    for (o, &g) in lower[b.0].iter_mut().zip(gout.iter()) {
                        *o -= g;
                    }
                }
                Op::Mul(a, b) => {
                    for ((o, &g), &bv) in
                        lower[a.0].iter_mut().zip(gout.iter()).zip(self.values[b.0].iter())
                    {
                        *o += g * bv;
                    }
                    for ((o, &g), &av) in
                        lower[b.0].iter_mut().zip(gout.iter()).zip(self.values[a.0].iter())
                    {
                        *o += g * av;
                    }
                }
                Op::Affine(x, scale) => {
                    for (o, &g) in lower[x.0].iter_mut().zip(gout.iter()) {
                        *o += scale * g;
                    }
                }
                Op::Sigmoid(x) => {
                    for ((o, &g), &s) in
                        lower[x.0].iter_mut().zip(gout.iter()).zip(self.values[i].iter())
                    {
                        *o += g * s * (1.0 - s);
                    }
                }
                Op::Tanh(x) => {
                    for ((o, &g), &t) in
                        lower[x.0].iter_mut().zip(gout.iter()).zip(self.values[i].iter())
                    {
                        *o += g * (1.0 - t * t);
                    }
                }
                Op::Relu(x) => {
                    for ((o, &g), &xv) in
                        lower[x.0].iter_mut().zip(gout.iter()).zip(self.values[x.0].iter())
                    {
                        if xv > 0.0 {
                            *o += g;
                        }
                    }
                }
                Op::Softplus(x) => {
                    for ((o, &g), &xv) in
                        lower[x.0].iter_mut().zip(gout.iter()).zip(self.values[x.0].iter())
                    {
                        *o += g * sigmoid(xv);
                    }
                }
                Op::SoftmaxRows(x) => {
                    let d = node.cols;
                    for ((grow, srow), orow) in gout
                        .chunks(d)
                        .zip(self.values[i].chunks(d))
                        .zip(lower[x.0].chunks_mut(d))
                    {
                        let dot: f64 = grow.iter().zip(srow.iter()).map(|(&g, &s)| g * s).sum();
                        for ((o, &g), &s) in orow.iter_mut().zip(grow.iter()).zip(srow.iter()) {
                            *o += s * (g - dot);
                        }
                    }
                }
                Op::LayerNormRows { x, gamma, beta } => {
                    let d = node.cols;
                    let df = d as f64;
                    let gam = &self.values[gamma.0];
                    for (row_idx, (grow, xrow)) in
                        gout.chunks(d).zip(self.values[x.0].chunks(d)).enumerate()
                    {
                        let mean = xrow.iter().sum::<f64>() / df;
                        let var =
                            xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / df;
                        let inv_std = 1.0 / (var + kernels::LAYER_NORM_EPS).sqrt();
                        let xhat: Vec<f64> =
                            xrow.iter().map(|&v| (v - mean) * inv_std).collect();
                        let dxhat: Vec<f64> =
                            grow.iter().zip(gam.iter()).map(|(&g, &gm)| g * gm).collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum();
                        {
                            let orow = &mut lower[x.0][row_idx * d..(row_idx + 1) * d];
                            for j in 0..d {
                                orow[j] += inv_std / df
                                    * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                            }
                        }
                        for ((og, &g), &xh) in
                            lower[gamma.0].iter_mut().zip(grow.iter()).zip(xhat.iter())
                        {
                            *og += g * xh;
                        }
                        for (ob, &g) in lower[beta.0].iter_mut().zip(grow.iter()) {
                            *ob += g;
                        }
                    }
                }
                Op::MeanRows(x) => {
                    let n = self.nodes[x.0].rows;
                    let d = node.cols;
                    let inv = 1.0 / n as f64;
                    for chunk in lower[x.0].chunks_mut(d) {
                        for (o, &g) in chunk.iter_mut().zip(gout.iter()) {
                            *o += g * inv;
                        }
                    }
                }
                Op::SumAll(x) => {
                    let g = gout[0];
                    for o in lower[x.0].iter_mut() {
                        *o += g;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[a.0].cols;
                    let cb = self.nodes[b.0].cols;
                    for (row_idx, grow) in gout.chunks(ca + cb).enumerate() {
                        for (o, &g) in lower[a.0][row_idx * ca..(row_idx + 1) * ca]
                            .iter_mut()
                            .zip(&grow[..ca])
                        {
                            *o += g;
                        }
                        for (o, &g) in lower[b.0][row_idx * cb..(row_idx + 1) * cb]
                            .iter_mut()
                            .zip(&grow[ca..])
                        {
                            *o += g;
                        }
                    }
                }
                Op::ConcatRows(a, b) => {
                    let na = self.values[a.0].len();
                    acc(&mut lower[a.0], &gout[..na]);
                    acc(&mut lower[b.0], &gout[na..]);
                }
                Op::SliceCols { x, start, len } => {
                    let c = self.nodes[x.0].cols;
                    for (row_idx, grow) in gout.chunks(len).enumerate() {
                        for (o, &g) in lower[x.0]
                            [row_idx * c + start..row_idx * c + start + len]
                            .iter_mut()
                            .zip(grow.iter())
                        {
                            *o += g;
                        }
                    }
                }
                Op::Transpose(x) => {
                    let (r, c) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
                    for i2 in 0..r {
                        for j2 in 0..c {
                            lower[x.0][i2 * c + j2] += gout[j2 * r + i2];
                        }
                    }
                }
                Op::AssembleTril { diag, below, k } => {
                    for i2 in 0..k {
                        lower[diag.0][i2] += gout[i2 * k + i2];
                    }
                    let mut b = 0;
                    for i2 in 1..k {
                        for j2 in 0..i2 {
                            lower[below.0][b] += gout[i2 * k + j2];
                            b += 1;
                        }
                    }
                }
                Op::GaussianNll { mean, tril, ref target } => {
                    let k = target.len();
                    let g0 = gout[0];
                    let l = &self.values[tril.0];
                    let mu = &self.values[mean.0];
                    let z = forward_substitute(l, mu, target, k);
                    // Solve L^T g = z (back substitution).
                    let mut gv = vec![0.0; k];
                    for i2 in (0..k).rev() {
                        let mut s = z[i2];
                        for j2 in i2 + 1..k {
                            s -= l[j2 * k + i2] * gv[j2];
                        }
                        gv[i2] = s / l[i2 * k + i2];
                    }
                    for (o, &g) in lower[mean.0].iter_mut().zip(gv.iter()) {
                        *o -= g0 * g;
                    }
                    for i2 in 0..k {
                        lower[tril.0][i2 * k + i2] += g0 / l[i2 * k + i2];
                        for j2 in 0..=i2 {
                            lower[tril.0][i2 * k + j2] -= g0 * gv[i2] * z[j2];
                        }
                    }
                }
            }
        }
    }

    /// Named parameter gradients accumulated by the last backward pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.bindings.iter().map(|(id, name)| (name.as_str(), self.grads[id.0].as_slice()))
    }
}

/// Solves `L z = target - mu` by forward substitution.
fn forward_substitute(l: &[f64], mu: &[f64], target: &[f64], k: usize) -> Vec<f64> {
    let mut z = vec![0.0; k];
    for i in 0..k {
        let mut s = target[i] - mu[i];
        for j in 0..i {
            s -= l[i * k + j] * z[j];
        }
        z[i] = s / l[i * k + i];
    }
    z
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn acc(out: &mut [f64], g: &[f64]) {
    for (o, &v) in out.iter_mut().zip(g.iter()) {
        *o += v;
    }
}

#[cfg(test)]
mod tests {
    use super::check::{central_diff, grads_match};
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf_row(&[1.0, 2.0, 3.0]);
        let sq = tape.mul(x, x);
        let loss = tape.sum_all(sq);
        tape.backward(loss);
        assert_eq!(tape.grad(x), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn disconnected_leaf_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf_row(&[1.0, 2.0]);
        let y = tape.leaf_row(&[5.0, -1.0]);
        let sq = tape.mul(x, x);
        let loss = tape.sum_all(sq);
        tape.backward(loss);
        assert_eq!(tape.grad(y), &[0.0, 0.0]);
    }

    #[test]
    fn backward_panics_on_nonscalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf_row(&[1.0, 2.0]);
        let y = tape.mul(x, x);
        let err = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            tape.backward(y);
        }));
        assert!(err.is_err());
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let x0 = [0.3, -1.2, 0.8, 2.0, 0.1, -0.4];
        let gamma0 = [1.1, 0.9, 1.0];
        let beta0 = [0.0, 0.2, -0.1];
        let f = |xs: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.leaf(2, 3, xs.to_vec());
            let g = tape.leaf_row(&gamma0);
            let b = tape.leaf_row(&beta0);
            let ln = tape.layer_norm_rows(x, g, b);
            let loss = tape.sum_all(ln);
            tape.scalar(loss)
        };
        let mut tape = Tape::new();
        let x = tape.leaf(2, 3, x0.to_vec());
        let g = tape.leaf_row(&gamma0);
        let b = tape.leaf_row(&beta0);
        let ln = tape.layer_norm_rows(x, g, b);
        let loss = tape.sum_all(ln);
        tape.backward(loss);
        let numeric = central_diff(&f, &x0, 1e-6);
        assert!(grads_match(tape.grad(x), &numeric, 1e-5), "dx mismatch");
    }

    #[test]
    fn matmul_transpose_slice_concat_gradients() {
        // A composite touching matmul, transpose, slicing, and concat.
        let a0 = [0.5, -0.2, 1.3, 0.7, -1.1, 0.4];
        let f = |av: &[f64]| {
            let mut tape = Tape::new();
            let a = tape.leaf(2, 3, av.to_vec());
            let at = tape.transpose(a);
            let prod = tape.matmul(a, at); // 2x2
            let left = tape.slice_cols(prod, 0, 1);
            let right = tape.slice_cols(prod, 1, 1);
            let cat = tape.concat_cols(left, right);
            let s = tape.sigmoid(cat);
            let loss = tape.sum_all(s);
            tape.scalar(loss)
        };
        let mut tape = Tape::new();
        let a = tape.leaf(2, 3, a0.to_vec());
        let at = tape.transpose(a);
        let prod = tape.matmul(a, at);
        let left = tape.slice_cols(prod, 0, 1);
        let right = tape.slice_cols(prod, 1, 1);
        let cat = tape.concat_cols(left, right);
        let s = tape.sigmoid(cat);
        let loss = tape.sum_all(s);
        tape.backward(loss);
        let numeric = central_diff(&f, &a0, 1e-6);
        assert!(grads_match(tape.grad(a), &numeric, 1e-5));
    }

    #[test]
    fn gaussian_nll_value_at_mean_identity_scale() {
        // With target == mean and L = I the NLL is 0.5 * k * ln(2 pi).
        let k = 6;
        let mut tape = Tape::new();
        let mean = tape.leaf_row(&vec![0.3; k]);
        let diag = tape.leaf_row(&vec![1.0; k]);
        let below = tape.leaf_row(&vec![0.0; k * (k - 1) / 2]);
        let tril = tape.assemble_tril(diag, below, k);
        let nll = tape.gaussian_nll(mean, tril, &vec![0.3; k]);
        let expected = 0.5 * 6.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((tape.scalar(nll) - expected).abs() < 1e-12);
    }

    #[test]
    fn gaussian_nll_gradients_match_finite_differences() {
        let k = 4;
        let target = [0.4, -0.3, 0.9, 0.05];
        // Pack mean (k), diag raw (k), below (k(k-1)/2) into one vector.
        let nb = k * (k - 1) / 2;
        let mut packed = vec![0.1, -0.2, 0.3, 0.0, /* diag raw */ 0.2, -0.1, 0.4, 0.3];
        packed.extend((0..nb).map(|i| 0.05 * (i as f64 + 1.0)));
        let f = |p: &[f64]| {
            let mut tape = Tape::new();
            let mean = tape.leaf_row(&p[..k]);
            let draw = tape.leaf_row(&p[k..2 * k]);
            let below = tape.leaf_row(&p[2 * k..]);
            let sp = tape.softplus(draw);
            let diag = tape.affine(sp, 1.0, 1e-4);
            let tril = tape.assemble_tril(diag, below, k);
            let nll = tape.gaussian_nll(mean, tril, &target);
            tape.scalar(nll)
        };
        let mut tape = Tape::new();
        let mean = tape.leaf_row(&packed[..k]);
        let draw = tape.leaf_row(&packed[k..2 * k]);
        let below = tape.leaf_row(&packed[2 * k..]);
        let sp = tape.softplus(draw);
        let diag = tape.affine(sp, 1.0, 1e-4);
        let tril = tape.assemble_tril(diag, below, k);
        let nll = tape.gaussian_nll(mean, tril, &target);
        tape.backward(nll);
        let numeric = central_diff(&f, &packed, 1e-6);
        let mut analytic = tape.grad(mean).to_vec();
        analytic.extend_from_slice(tape.grad(draw));
        analytic.extend_from_slice(tape.grad(below));
        assert!(grads_match(&analytic, &numeric, 1e-5));
    }
}
