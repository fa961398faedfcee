//! Eager tape-based compute graph with reverse-mode gradient accumulation.
//!
//! Tensors live in an arena owned by the graph and are addressed by
//! [`TensorId`]. Creation order is topological order, so the backward pass
//! walks ids in reverse and every consumer's contribution has already been
//! accumulated by the time a producer is visited. Interior gradients are
//! freed as soon as they are consumed; gradients of `requires_grad` leaves
//! survive for the caller.

use super::kernels;
use super::Real;
use crate::{Error, Result};

/// Handle to a tensor inside a [`Graph`].
pub type TensorId = usize;

/// Epsilon added to the variance inside layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    AddBias(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Matmul(TensorId, TensorId),
    MatmulNT(TensorId, TensorId),
    Softmax(TensorId),
    SoftmaxCausal(TensorId),
    Sigmoid(TensorId),
    Gelu(TensorId),
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    },
    CrossEntropyMean {
        logits: TensorId,
        targets: Vec<u32>,
    },
    Embed {
        table: TensorId,
        ids: Vec<u32>,
    },
    ConcatCols(Vec<TensorId>),
    SliceCols {
        x: TensorId,
        start: usize,
        len: usize,
    },
    Sum(TensorId),
}

struct Node<E> {
    rows: usize,
    cols: usize,
    data: Vec<E>,
    requires_grad: bool,
    needs_grad: bool,
    op: Op,
}

/// Arena of tensors plus the op tape that produced them.
pub struct Graph<E: Real> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
    backward_ran: bool,
}

impl<E: Real> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_ran: false,
        }
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<E>, op: Op, needs_grad: bool) -> TensorId {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            data,
            requires_grad: false,
            needs_grad,
            op,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id].needs_grad
    }

    fn shape_err(op: &'static str, detail: String) -> Error {
        Error::Shape { op, detail }
    }

    /// Inserts a constant or parameter tensor.
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<E>, requires_grad: bool) -> Result<TensorId> {
        if data.len() != rows * cols {
            return Err(Self::shape_err(
                "leaf",
                format!("data length {} != {rows}x{cols}", data.len()),
            ));
        }
        let id = self.push(rows, cols, data, Op::Leaf, requires_grad);
        self.nodes[id].requires_grad = requires_grad;
        Ok(id)
    }

    /// Rows and columns of a tensor; 1-D tensors are `(1, n)`.
    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    /// Read-only view of a tensor's values.
    pub fn data(&self, id: TensorId) -> &[E] {
        &self.nodes[id].data
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, id: TensorId) -> E {
        debug_assert_eq!(self.nodes[id].data.len(), 1);
        self.nodes[id].data[0]
    }

    /// Gradient of a `requires_grad` leaf after [`Graph::backward`].
    pub fn grad(&self, id: TensorId) -> Option<&[E]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Number of tensors in the arena.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if (ar, ac) != (br, bc) {
            return Err(Self::shape_err("add", format!("{ar}x{ac} vs {br}x{bc}")));
        }
        let data = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(ar, ac, data, Op::Add(a, b), ng))
    }

    /// Adds a 1-D bias of length `cols` to every row of `x`.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(x);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != c {
            return Err(Self::shape_err(
                "add_bias",
                format!("bias {br}x{bc} does not match row width {c}"),
            ));
        }
        let mut data = self.nodes[x].data.clone();
        for row in data.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(&self.nodes[bias].data) {
                *o += b;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(r, c, data, Op::AddBias(x, bias), ng))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if (ar, ac) != (br, bc) {
            return Err(Self::shape_err("mul", format!("{ar}x{ac} vs {br}x{bc}")));
        }
        let data = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(ar, ac, data, Op::Mul(a, b), ng))
    }

    /// Multiplies every element by a compile-time constant factor.
    pub fn scale(&mut self, x: TensorId, factor: f64) -> Result<TensorId> {
        let (r, c) = self.shape(x);
        let f = E::from_f64(factor);
        let data = self.nodes[x].data.iter().map(|&v| v * f).collect();
        let ng = self.needs(x);
        Ok(self.push(r, c, data, Op::Scale(x, factor), ng))
    }

    /// `a[m,k] * b[k,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Self::shape_err(
                "matmul",
                format!("{m}x{k} incompatible with {k2}x{n}"),
            ));
        }
        let mut data = vec![E::zero(); m * n];
        kernels::mm_nn(&self.nodes[a].data, &self.nodes[b].data, m, k, n, &mut data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, data, Op::Matmul(a, b), ng))
    }

    /// `a[m,k] * b[n,k]^T`.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Self::shape_err(
                "matmul_nt",
                format!("{m}x{k} incompatible with transposed {n}x{k2}"),
            ));
        }
        let mut data = vec![E::zero(); m * n];
        kernels::mm_nt(&self.nodes[a].data, &self.nodes[b].data, m, k, n, &mut data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, data, Op::MatmulNT(a, b), ng))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(x);
        let mut data = self.nodes[x].data.clone();
        kernels::softmax_rows(&mut data, r, c);
        let ng = self.needs(x);
        Ok(self.push(r, c, data, Op::Softmax(x), ng))
    }

    /// Causally masked row softmax over a square score matrix.
    pub fn softmax_causal(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(x);
        if r != c {
            return Err(Self::shape_err(
                "softmax_causal",
                format!("expected square scores, got {r}x{c}"),
            ));
        }
        let mut data = self.nodes[x].data.clone();
        kernels::softmax_causal(&mut data, r);
        let ng = self.needs(x);
        Ok(self.push(r, c, data, Op::SoftmaxCausal(x), ng))
    }

    /// Elementwise logistic sigmoid.
    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(x);
        let data = self.nodes[x].data.iter().map(|&v| kernels::sigmoid(v)).collect();
        let ng = self.needs(x);
        Ok(self.push(r, c, data, Op::Sigmoid(x), ng))
    }

    /// Elementwise GELU (tanh approximation).
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(x);
        let data = self.nodes[x].data.iter().map(|&v| kernels::gelu(v)).collect();
        let ng = self.needs(x);
        Ok(self.push(r, c, data, Op::Gelu(x), ng))
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layernorm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(x);
        let (gr, gc) = self.shape(gamma);
        let (br, bc) = self.shape(beta);
        if gr != 1 || gc != c || br != 1 || bc != c {
            return Err(Self::shape_err(
                "layernorm",
                format!("affine params {gr}x{gc}/{br}x{bc} do not match row width {c}"),
            ));
        }
        let eps = E::from_f64(LAYERNORM_EPS);
        let mut data = vec![E::zero(); r * c];
        for i in 0..r {
            let row = &self.nodes[x].data[i * c..(i + 1) * c];
            let (mean, rstd) = kernels::row_moments(row, eps);
            let out = &mut data[i * c..(i + 1) * c];
            for j in 0..c {
                let xhat = (row[j] - mean) * rstd;
                out[j] = self.nodes[gamma].data[j] * xhat + self.nodes[beta].data[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(r, c, data, Op::LayerNorm { x, gamma, beta }, ng))
    }

    /// Mean next-token cross-entropy of `logits[t,v]` against integer targets.
    pub fn cross_entropy_mean(&mut self, logits: TensorId, targets: &[u32]) -> Result<TensorId> {
        let (r, c) = self.shape(logits);
        if targets.len() != r {
            return Err(Self::shape_err(
                "cross_entropy_mean",
                format!("{} targets for {r} logit rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c) {
            return Err(Self::shape_err(
                "cross_entropy_mean",
                format!("target id {bad} out of range for vocab {c}"),
            ));
        }
        let mut total = E::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &self.nodes[logits].data[i * c..(i + 1) * c];
            total += kernels::logsumexp(row) - row[t as usize];
        }
        let mean = total / E::from_f64(r as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            1,
            1,
            vec![mean],
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Gathers rows of `table` by id: `out[i,:] = table[ids[i],:]`.
    pub fn embed(&mut self, table: TensorId, ids: &[u32]) -> Result<TensorId> {
        let (v, d) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= v) {
            let pos = ids.iter().position(|&t| t as usize >= v).unwrap();
            return Err(Self::shape_err(
                "embed",
                format!("id {bad} at position {pos} out of range for table with {v} rows"),
            ));
        }
        let mut data = vec![E::zero(); ids.len() * d];
        for (i, &t) in ids.iter().enumerate() {
            let src = &self.nodes[table].data[t as usize * d..(t as usize + 1) * d];
            data[i * d..(i + 1) * d].copy_from_slice(src);
        }
        let ng = self.needs(table);
        Ok(self.push(
            ids.len(),
            d,
            data,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Concatenates tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Self::shape_err("concat_cols", "no inputs".into()));
        }
        let (r, _) = self.shape(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(Self::shape_err(
                    "concat_cols",
                    format!("row count {pr} differs from {r}"),
                ));
            }
            total += pc;
        }
        let mut data = vec![E::zero(); r * total];
        let mut offset = 0;
        for &p in parts {
            let (_, pc) = self.shape(p);
            for i in 0..r {
                let src = &self.nodes[p].data[i * pc..(i + 1) * pc];
                data[i * total + offset..i * total + offset + pc].copy_from_slice(src);
            }
            offset += pc;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(r, total, data, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Selects the column range `start..start+len` from every row.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(Self::shape_err(
                "slice_cols",
                format!("range {start}..{} exceeds width {c}", start + len),
            ));
        }
        let mut data = vec![E::zero(); r * len];
        for i in 0..r {
            let src = &self.nodes[x].data[i * c + start..i * c + start + len];
            data[i * len..(i + 1) * len].copy_from_slice(src);
        }
        let ng = self.needs(x);
        Ok(self.push(r, len, data, Op::SliceCols { x, start, len }, ng))
    }

    /// Sum of all elements, as a `1x1` tensor.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let mut total = E::zero();
        for &v in &self.nodes[x].data {
            total += v;
        }
        let ng = self.needs(x);
        Ok(self.push(1, 1, vec![total], Op::Sum(x), ng))
    }

    /// Clears accumulated gradients so another backward pass may run.
    pub fn reset_backward(&mut self) {
        self.grads.clear();
        self.backward_ran = false;
    }

    /// Reverse-mode gradient accumulation from a scalar root.
    ///
    /// Walks the tape once in reverse creation order, summing contributions
    /// at fan-out points. Gradients of interior tensors are released as soon
    /// as they have been propagated; only `requires_grad` leaves keep theirs.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.backward_ran {
            return Err(Error::BackwardAlreadyRan);
        }
        self.backward_ran = true;
        let (rr, rc) = self.shape(root);
        if rr * rc != 1 {
            return Err(Self::shape_err(
                "backward",
                format!("root must be scalar, got {rr}x{rc}"),
            ));
        }
        self.grads = Vec::with_capacity(self.nodes.len());
        self.grads.resize_with(self.nodes.len(), || None);
        self.grads[root] = Some(vec![E::one()]);

        for id in (0..=root).rev() {
            if !self.nodes[id].needs_grad {
                self.grads[id] = None;
                continue;
            }
            let gy = match self.grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {
                    if self.nodes[id].requires_grad {
                        self.grads[id] = Some(gy);
                    }
                    continue;
                }
                Op::Add(a, b) => {
                    self.accumulate_slice(a, &gy);
                    self.accumulate_slice(b, &gy);
                }
                Op::AddBias(x, bias) => {
                    self.accumulate_slice(x, &gy);
                    if self.needs(bias) {
                        let c = self.nodes[bias].cols;
                        let mut gb = vec![E::zero(); c];
                        for row in gy.chunks(c) {
                            for (o, &g) in gb.iter_mut().zip(row) {
                                *o += g;
                            }
                        }
                        self.accumulate_slice(bias, &gb);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let ga: Vec<E> = gy
                            .iter()
                            .zip(&self.nodes[b].data)
                            .map(|(&g, &v)| g * v)
                            .collect();
                        self.accumulate_slice(a, &ga);
                    }
                    if self.needs(b) {
                        let gb: Vec<E> = gy
                            .iter()
                            .zip(&self.nodes[a].data)
                            .map(|(&g, &v)| g * v)
                            .collect();
                        self.accumulate_slice(b, &gb);
                    }
                }
                Op::Scale(x, factor) => {
                    if self.needs(x) {
                        let f = E::from_f64(factor);
                        let gx: Vec<E> = gy.iter().map(|&g| g * f).collect();
                        self.accumulate_slice(x, &gx);
                    }
                }
                Op::Matmul(a, b) => {
                    let (m, k) = self.shape(a);
                    let (_, n) = self.shape(b);
                    if self.needs(a) {
                        let mut ga = vec![E::zero(); m * k];
                        kernels::mm_nt(&gy, &self.nodes[b].data, m, n, k, &mut ga);
                        self.accumulate_slice(a, &ga);
                    }
                    if self.needs(b) {
                        let mut gb = vec![E::zero(); k * n];
                        kernels::mm_tn(&self.nodes[a].data, &gy, m, k, n, &mut gb);
                        self.accumulate_slice(b, &gb);
                    }
                }
                Op::MatmulNT(a, b) => {
                    let (m, k) = self.shape(a);
                    let (n, _) = self.shape(b);
                    if self.needs(a) {
                        let mut ga = vec![E::zero(); m * k];
                        kernels::mm_nn(&gy, &self.nodes[b].data, m, n, k, &mut ga);
                        self.accumulate_slice(a, &ga);
                    }
                    if self.needs(b) {
                        let mut gb = vec![E::zero(); n * k];
                        kernels::mm_tn(&gy, &self.nodes[a].data, m, n, k, &mut gb);
                        self.accumulate_slice(b, &gb);
                    }
                }
                Op::Softmax(x) => {
                    if self.needs(x) {
                        let (r, c) = self.shape(id);
                        let y = &self.nodes[id].data;
                        let mut gx = vec![E::zero(); r * c];
                        for i in 0..r {
                            let yr = &y[i * c..(i + 1) * c];
                            let gr = &gy[i * c..(i + 1) * c];
                            let s = kernels::dot(yr, gr);
                            for j in 0..c {
                                gx[i * c + j] = yr[j] * (gr[j] - s);
                            }
                        }
                        self.accumulate_slice(x, &gx);
                    }
                }
                Op::SoftmaxCausal(x) => {
                    if self.needs(x) {
                        let (t, _) = self.shape(id);
                        let y = &self.nodes[id].data;
                        let mut gx = vec![E::zero(); t * t];
                        for q in 0..t {
                            let yr = &y[q * t..q * t + q + 1];
                            let gr = &gy[q * t..q * t + q + 1];
                            let s = kernels::dot(yr, gr);
                            for j in 0..=q {
                                gx[q * t + j] = yr[j] * (gr[j] - s);
                            }
                        }
                        self.accumulate_slice(x, &gx);
                    }
                }
                Op::Sigmoid(x) => {
                    if self.needs(x) {
                        let gx: Vec<E> = gy
                            .iter()
                            .zip(&self.nodes[id].data)
                            .map(|(&g, &y)| g * y * (E::one() - y))
                            .collect();
                        self.accumulate_slice(x, &gx);
                    }
                }
                Op::Gelu(x) => {
                    if self.needs(x) {
                        let gx: Vec<E> = gy
                            .iter()
                            .zip(&self.nodes[x].data)
                            .map(|(&g, &v)| g * kernels::gelu_grad(v))
                            .collect();
                        self.accumulate_slice(x, &gx);
                    }
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let (r, c) = self.shape(id);
                    let eps = E::from_f64(LAYERNORM_EPS);
                    let inv_c = E::one() / E::from_f64(c as f64);
                    let mut gx = vec![E::zero(); r * c];
                    let mut gg = vec![E::zero(); c];
                    let mut gb = vec![E::zero(); c];
                    for i in 0..r {
                        let xr = &self.nodes[x].data[i * c..(i + 1) * c];
                        let gr = &gy[i * c..(i + 1) * c];
                        let (mean, rstd) = kernels::row_moments(xr, eps);
                        let mut m1 = E::zero();
                        let mut m2 = E::zero();
                        for j in 0..c {
                            let xhat = (xr[j] - mean) * rstd;
                            let gxh = gr[j] * self.nodes[gamma].data[j];
                            m1 += gxh;
                            m2 += gxh * xhat;
                            gg[j] += gr[j] * xhat;
                            gb[j] += gr[j];
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for j in 0..c {
                            let xhat = (xr[j] - mean) * rstd;
                            gx[i * c + j] = rstd * (gr[j] * self.nodes[gamma].data[j] - m1 - xhat * m2);
                        }
                    }
                    if self.needs(x) {
                        self.accumulate_slice(x, &gx);
                    }
                    if self.needs(gamma) {
                        self.accumulate_slice(gamma, &gg);
                    }
                    if self.needs(beta) {
                        self.accumulate_slice(beta, &gb);
                    }
                }
                Op::CrossEntropyMean { logits, targets } => {
                    if self.needs(logits) {
                        let (r, c) = self.shape(logits);
                        let g0 = gy[0] / E::from_f64(r as f64);
                        let mut gl = vec![E::zero(); r * c];
                        for (i, &t) in targets.iter().enumerate() {
                            let row = &self.nodes[logits].data[i * c..(i + 1) * c];
                            let out = &mut gl[i * c..(i + 1) * c];
                            out.copy_from_slice(row);
                            kernels::softmax_slice(out);
                            for v in out.iter_mut() {
                                *v *= g0;
                            }
                            out[t as usize] -= g0;
                        }
                        self.accumulate_slice(logits, &gl);
                    }
                }
                Op::Embed { table, ids } => {
                    if self.needs(table) {
                        let (_, d) = self.shape(table);
                        self.ensure_grad(table);
                        let gt = self.grads[table].as_mut().unwrap();
                        for (i, &t) in ids.iter().enumerate() {
                            let dst = &mut gt[t as usize * d..(t as usize + 1) * d];
                            for (o, &g) in dst.iter_mut().zip(&gy[i * d..(i + 1) * d]) {
                                *o += g;
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let (r, total) = self.shape(id);
                    let mut offset = 0;
                    for &p in &parts {
                        let (_, pc) = self.shape(p);
                        if self.needs(p) {
                            let mut gp = vec![E::zero(); r * pc];
                            for i in 0..r {
                                gp[i * pc..(i + 1) * pc]
                                    .copy_from_slice(&gy[i * total + offset..i * total + offset + pc]);
                            }
                            self.accumulate_slice(p, &gp);
                        }
                        offset += pc;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    if self.needs(x) {
                        let (r, c) = self.shape(x);
                        self.ensure_grad(x);
                        let gx = self.grads[x].as_mut().unwrap();
                        for i in 0..r {
                            let dst = &mut gx[i * c + start..i * c + start + len];
                            for (o, &g) in dst.iter_mut().zip(&gy[i * len..(i + 1) * len]) {
                                *o += g;
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    if self.needs(x) {
                        let n = self.nodes[x].data.len();
                        let gx = vec![gy[0]; n];
                        self.accumulate_slice(x, &gx);
                    }
                }
            }
        }
        Ok(())
    }

    fn ensure_grad(&mut self, id: TensorId) {
        if self.grads[id].is_none() {
            self.grads[id] = Some(vec![E::zero(); self.nodes[id].data.len()]);
        }
    }

    fn accumulate_slice(&mut self, id: TensorId, contribution: &[E]) {
        if !self.needs(id) {
            return;
        }
        self.ensure_grad(id);
        let g = self.grads[id].as_mut().unwrap();
        for (o, &c) in g.iter_mut().zip(contribution) {
            *o += c;
        }
    }
}
