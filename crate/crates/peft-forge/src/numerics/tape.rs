//! Reverse-mode gradient tape over a closed operation set.
//!
//! A [`GradTape`] is created per training step, records the forward pass as a
//! linear sequence of nodes, and replays it in reverse to accumulate
//! d(loss)/d(parameter) for every trainable parameter reached in the forward
//! pass. The tape is generic over the element type, so the same code runs
//! training at f32 and gradient checks at f64.
//!
//! Gradients never flow into nodes whose `requires_grad` flag is false
//! (constants, frozen parameters, and anything computed only from them), so
//! frozen-backbone backward work is skipped rather than zeroed out.

use std::collections::BTreeMap;

use super::kernels;
use super::param::Parameter;
use super::tensor::{DType, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op<E> {
    Leaf { key: Option<String> },
    Matmul(ValueId, ValueId),
    /// A x B^T with B stored row-major as [n, k].
    MatmulNT(ValueId, ValueId),
    Add(ValueId, ValueId),
    /// x [m,n] plus a length-n bias broadcast over rows.
    AddBias(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Scale(ValueId, f64),
    Gelu(ValueId),
    Tanh(ValueId),
    LayerNorm { x: ValueId, gain: ValueId, bias: ValueId, xhat: Vec<E>, inv_std: Vec<E> },
    SoftmaxRows { x: ValueId, visible: Vec<usize> },
    CrossEntropyMean { logits: ValueId, targets: Vec<u32>, ignore: u32, probs: Vec<E>, count: usize },
    Gather { table: ValueId, ids: Vec<u32> },
    Kron(ValueId, ValueId),
    ConcatRows(Vec<ValueId>),
    RowSlice { x: ValueId, start: usize },
    ConcatCols(Vec<ValueId>),
    ColSlice { x: ValueId, start: usize },
    Reshape(ValueId),
    SumAll(ValueId),
}

struct Node<E> {
    shape: Vec<usize>,
    data: Vec<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Gradients keyed by parameter registry key. Only trainable parameters that
/// were reached in the forward pass appear; everything else reads as zero.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.map.get(key)
    }

    pub fn get_or_zeros(&self, key: &str, shape: &[usize], dtype: DType) -> Tensor {
        self.map
            .get(key)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec(), dtype))
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, key: String, grad: Tensor) {
        self.map.insert(key, grad);
    }

    /// Sum another gradient store into this one. Shared parameters receive
    /// contributions from every batch (or task) that touched them.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (k, g) in other.map.iter() {
            match self.map.get_mut(k) {
                None => {
                    self.map.insert(k.clone(), g.clone());
                }
                Some(mine) => {
                    *mine = mine.add(g)?;
                }
            }
        }
        Ok(())
    }

    /// Multiply every gradient by a constant.
    pub fn scale(&mut self, factor: f64) {
        for g in self.map.values_mut() {
            let scaled: Vec<f64> = g.to_f64_vec().iter().map(|x| x * factor).collect();
            *g = Tensor::from_f64(g.shape().to_vec(), scaled, g.dtype()).expect("same numel");
        }
    }
}

/// Reverse-mode tape. One per training step; never shared across threads.
pub struct GradTape<E: Element> {
    nodes: Vec<Node<E>>,
    param_ids: BTreeMap<String, ValueId>,
}

impl<E: Element> Default for GradTape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> GradTape<E> {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new(), param_ids: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Copy a recorded value out as a boundary tensor.
    pub fn value(&self, id: ValueId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::from_elems(n.shape.clone(), n.data.clone())
    }

    fn data(&self, id: ValueId) -> &[E] {
        &self.nodes[id.0].data
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<E>, op: Op<E>, requires_grad: bool) -> ValueId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, op, requires_grad });
        ValueId(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        data: Vec<E>,
        op: Op<E>,
        requires_grad: bool,
    ) -> Result<ValueId> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        Ok(self.push(shape, data, op, requires_grad))
    }

    fn rg(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Register a parameter as a leaf. Registering the same key twice returns
    /// the same node, so gradients from every use accumulate in one place.
    pub fn param(&mut self, p: &Parameter) -> Result<ValueId> {
        if let Some(&id) = self.param_ids.get(&p.key) {
            return Ok(id);
        }
        if p.value.dtype() != E::DTYPE {
            return Err(Error::Dimension(format!(
                "parameter {} is {}, tape is {}",
                p.key,
                p.value.dtype(),
                E::DTYPE
            )));
        }
        let id = self.push(
            p.value.shape().to_vec(),
            p.value.elems::<E>().to_vec(),
            Op::Leaf { key: Some(p.key.clone()) },
            p.trainable,
        );
        self.param_ids.insert(p.key.clone(), id);
        Ok(id)
    }

    /// Non-differentiable input (features, embedded constants). Converted to
    /// the tape dtype if needed.
    pub fn constant(&mut self, t: &Tensor) -> ValueId {
        let t = t.to_dtype(E::DTYPE);
        self.push(
            t.shape().to_vec(),
            t.elems::<E>().to_vec(),
            Op::Leaf { key: None },
            false,
        )
    }

    /// Trainable leaf with an explicit key, outside any registry. Handy in
    /// tests and gradient-check harnesses.
    pub fn var(&mut self, key: &str, t: &Tensor) -> ValueId {
        let t = t.to_dtype(E::DTYPE);
        self.push(
            t.shape().to_vec(),
            t.elems::<E>().to_vec(),
            Op::Leaf { key: Some(key.to_string()) },
            true,
        )
    }

    fn dims2(&self, id: ValueId, op: &str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("{op}: expected 2-D, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner dims disagree ({m}x{k} vs {k2}x{n})"
            )));
        }
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("matmul", vec![m, n], out, Op::Matmul(a, b), rg)
    }

    /// A x B^T where B is stored as [n, k].
    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_nt: inner dims disagree ({m}x{k} vs {n}x{k2}^T)"
            )));
        }
        let out = kernels::matmul_nt(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("matmul_nt", vec![m, n], out, Op::MatmulNT(a, b), rg)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "add: shapes {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<E> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("add", self.nodes[a.0].shape.clone(), out, Op::Add(a, b), rg)
    }

    /// x [m,n] + bias [n], broadcast over rows.
    pub fn add_bias(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let (m, n) = self.dims2(x, "add_bias")?;
        let bs = self.shape(bias);
        if bs != [n] {
            return Err(Error::Dimension(format!(
                "add_bias: bias shape {bs:?} does not match row width {n}"
            )));
        }
        let b = self.data(bias);
        let mut out = self.data(x).to_vec();
        for r in 0..m {
            for j in 0..n {
                out[r * n + j] += b[j];
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push_checked("add_bias", vec![m, n], out, Op::AddBias(x, bias), rg)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "mul: shapes {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<E> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("mul", self.nodes[a.0].shape.clone(), out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> Result<ValueId> {
        let ce = E::from_f64(c);
        let out: Vec<E> = self.data(x).iter().map(|&v| v * ce).collect();
        let rg = self.rg(x);
        self.push_checked("scale", self.nodes[x.0].shape.clone(), out, Op::Scale(x, c), rg)
    }

    pub fn gelu(&mut self, x: ValueId) -> Result<ValueId> {
        let out: Vec<E> = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        let rg = self.rg(x);
        self.push_checked("gelu", self.nodes[x.0].shape.clone(), out, Op::Gelu(x), rg)
    }

    pub fn tanh_act(&mut self, x: ValueId) -> Result<ValueId> {
        let out: Vec<E> = self.data(x).iter().map(|&v| v.tanh()).collect();
        let rg = self.rg(x);
        self.push_checked("tanh", self.nodes[x.0].shape.clone(), out, Op::Tanh(x), rg)
    }

    /// Per-last-axis layer normalization with affine gain/bias.
    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
        eps: f64,
    ) -> Result<ValueId> {
        let (rows, d) = match self.shape(x) {
            [n] => (1usize, *n),
            [r, d] => (*r, *d),
            s => return Err(Error::Dimension(format!("layer_norm: rank {} input", s.len()))),
        };
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm: gain/bias must be [{d}], got {:?}/{:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let (y, xhat, inv_std) =
            kernels::layer_norm(self.data(x), self.data(gain), self.data(bias), rows, d, eps);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push_checked(
            "layer_norm",
            self.nodes[x.0].shape.clone(),
            y,
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            rg,
        )
    }

    /// Row-wise softmax over the first `visible[r]` entries of row r; the
    /// rest of the row is exactly zero. Encodes causal and full attention
    /// masks without non-finite sentinels.
    pub fn softmax_rows(&mut self, x: ValueId, visible: Vec<usize>) -> Result<ValueId> {
        let (m, n) = self.dims2(x, "softmax_rows")?;
        if visible.len() != m {
            return Err(Error::Dimension(format!(
                "softmax_rows: {} visibility entries for {m} rows",
                visible.len()
            )));
        }
        let out = kernels::softmax_rows(self.data(x), m, n, &visible);
        let rg = self.rg(x);
        self.push_checked("softmax_rows", vec![m, n], out, Op::SoftmaxRows { x, visible }, rg)
    }

    /// Mean negative log-likelihood over non-ignored positions; scalar output.
    /// All positions ignored yields exactly zero with zero gradient.
    pub fn cross_entropy_mean(
        &mut self,
        logits: ValueId,
        targets: &[u32],
        ignore: u32,
    ) -> Result<ValueId> {
        let (m, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} targets for {m} rows",
                targets.len()
            )));
        }
        for (r, &t) in targets.iter().enumerate() {
            if t != ignore && t as usize >= v {
                return Err(Error::Index(format!(
                    "cross_entropy: target {t} at row {r} out of range (vocab {v})"
                )));
            }
        }
        let x = self.data(logits);
        let mut probs = vec![E::zero(); m * v];
        let mut total = E::zero();
        let mut count = 0usize;
        for r in 0..m {
            let t = targets[r];
            if t == ignore {
                continue;
            }
            count += 1;
            let row = &x[r * v..(r + 1) * v];
            let mut mx = row[0];
            for &e in row {
                mx = mx.maximum(e);
            }
            let mut sum = E::zero();
            for j in 0..v {
                let ex = (row[j] - mx).exp();
                probs[r * v + j] = ex;
                sum += ex;
            }
            for j in 0..v {
                probs[r * v + j] = probs[r * v + j] / sum;
            }
            total += sum.ln() - (row[t as usize] - mx);
        }
        let loss = if count == 0 { E::zero() } else { total / E::from_f64(count as f64) };
        let rg = self.rg(logits);
        self.push_checked(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropyMean { logits, targets: targets.to_vec(), ignore, probs, count },
            rg,
        )
    }

    /// Gather rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: ValueId, ids: &[u32]) -> Result<ValueId> {
        let (rows, d) = self.dims2(table, "gather_rows")?;
        for &id in ids {
            if id as usize >= rows {
                return Err(Error::Index(format!(
                    "gather_rows: index {id} out of range (table has {rows} rows)"
                )));
            }
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id as usize * d..(id as usize + 1) * d]);
        }
        let rg = self.rg(table);
        self.push_checked(
            "gather_rows",
            vec![ids.len(), d],
            out,
            Op::Gather { table, ids: ids.to_vec() },
            rg,
        )
    }

    /// Kronecker product of two 2-D tensors.
    pub fn kron(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (p, q) = self.dims2(a, "kron")?;
        let (m, n) = self.dims2(b, "kron")?;
        let out = kernels::kron(self.data(a), self.data(b), p, q, m, n);
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("kron", vec![p * m, q * n], out, Op::Kron(a, b), rg)
    }

    /// Stack 2-D tensors with equal widths on top of each other.
    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_rows: no inputs".into()));
        }
        let (_, n) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, w) = self.dims2(p, "concat_rows")?;
            if w != n {
                return Err(Error::Dimension(format!(
                    "concat_rows: widths differ ({n} vs {w})"
                )));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push_checked("concat_rows", vec![rows, n], out, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Rows [start, start+len) of a 2-D tensor.
    pub fn row_slice(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let (m, n) = self.dims2(x, "row_slice")?;
        if start + len > m {
            return Err(Error::Dimension(format!(
                "row_slice: rows [{start}, {}) out of range (have {m})",
                start + len
            )));
        }
        let out = self.data(x)[start * n..(start + len) * n].to_vec();
        let rg = self.rg(x);
        self.push_checked("row_slice", vec![len, n], out, Op::RowSlice { x, start }, rg)
    }

    /// Concatenate 2-D tensors with equal heights side by side.
    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_cols: no inputs".into()));
        }
        let (m, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (r, w) = self.dims2(p, "concat_cols")?;
            if r != m {
                return Err(Error::Dimension(format!(
                    "concat_cols: heights differ ({m} vs {r})"
                )));
            }
            widths.push(w);
            total += w;
        }
        let mut out = vec![E::zero(); m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for r in 0..m {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push_checked("concat_cols", vec![m, total], out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Columns [start, start+len) of a 2-D tensor.
    pub fn col_slice(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let (m, n) = self.dims2(x, "col_slice")?;
        if start + len > n {
            return Err(Error::Dimension(format!(
                "col_slice: cols [{start}, {}) out of range (have {n})",
                start + len
            )));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(x);
        self.push_checked("col_slice", vec![m, len], out, Op::ColSlice { x, start }, rg)
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        if shape.iter().product::<usize>() != self.data(x).len() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} to {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.data(x).to_vec();
        let rg = self.rg(x);
        self.push_checked("reshape", shape, out, Op::Reshape(x), rg)
    }

    /// Sum of all elements; scalar output.
    pub fn sum_all(&mut self, x: ValueId) -> Result<ValueId> {
        let mut acc = E::zero();
        for &v in self.data(x) {
            acc += v;
        }
        let rg = self.rg(x);
        self.push_checked("sum_all", vec![1], vec![acc], Op::SumAll(x), rg)
    }

    /// Run the backward pass from a scalar loss. Returns gradients for every
    /// trainable leaf reached in the forward pass. A loss with no trainable
    /// ancestry (including an empty tape) yields an empty store, which reads
    /// as all-zero gradients.
    pub fn backward(&mut self, loss: ValueId) -> Result<Gradients> {
        if self.data(loss).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward: loss must be scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![E::one()]);
        }

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            // Leaves keep their accumulated gradient for export.
            if matches!(self.nodes[idx].op, Op::Leaf { .. }) {
                grads[idx] = Some(g);
            }
        }

        let mut out = Gradients::default();
        for (key, &id) in self.param_ids.iter() {
            let node = &self.nodes[id.0];
            if !node.requires_grad {
                continue;
            }
            if let Some(g) = grads[id.0].take() {
                out.insert(key.clone(), Tensor::from_elems(node.shape.clone(), g));
            }
        }
        // Free-standing vars (tests) are exported too.
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { key: Some(k) } = &node.op {
                if node.requires_grad && !out.map.contains_key(k) {
                    if let Some(g) = grads[idx].take() {
                        out.insert(k.clone(), Tensor::from_elems(node.shape.clone(), g));
                    }
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<E>>], id: ValueId, delta: Vec<E>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_node(&self, idx: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}

            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    // dA = dC x B^T
                    let da = kernels::matmul_nt(g, self.data(*b), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    // dB = A^T x dC
                    let db = kernels::matmul_tn(self.data(*a), g, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }

            Op::MatmulNT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.rg(*a) {
                    // dA = dC x B
                    let da = kernels::matmul(g, self.data(*b), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    // dB = dC^T x A
                    let db = kernels::matmul_tn(g, self.data(*a), m, n, k);
                    self.accumulate(grads, *b, db);
                }
            }

            Op::Add(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.to_vec());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.to_vec());
                }
            }

            Op::AddBias(x, bias) => {
                if self.rg(*x) {
                    self.accumulate(grads, *x, g.to_vec());
                }
                if self.rg(*bias) {
                    let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let mut db = vec![E::zero(); n];
                    for r in 0..m {
                        for j in 0..n {
                            db[j] += g[r * n + j];
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }

            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let da: Vec<E> = g.iter().zip(self.data(*b)).map(|(&d, &y)| d * y).collect();
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let db: Vec<E> = g.iter().zip(self.data(*a)).map(|(&d, &x)| d * x).collect();
                    self.accumulate(grads, *b, db);
                }
            }

            Op::Scale(x, c) => {
                if self.rg(*x) {
                    let ce = E::from_f64(*c);
                    let dx: Vec<E> = g.iter().map(|&d| d * ce).collect();
                    self.accumulate(grads, *x, dx);
                }
            }

            Op::Gelu(x) => {
                if self.rg(*x) {
                    let dx: Vec<E> = g
                        .iter()
                        .zip(self.data(*x))
                        .map(|(&d, &v)| d * kernels::gelu_grad(v))
                        .collect();
                    self.accumulate(grads, *x, dx);
                }
            }

            Op::Tanh(x) => {
                if self.rg(*x) {
                    let y = &self.nodes[idx].data;
                    let dx: Vec<E> = g
                        .iter()
                        .zip(y)
                        .map(|(&d, &t)| d * (E::one() - t * t))
                        .collect();
                    self.accumulate(grads, *x, dx);
                }
            }

            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = *self.shape(*x).last().unwrap();
                let rows = self.data(*x).len() / d;
                let gain_v = self.data(*gain);
                if self.rg(*gain) {
                    let mut dg = vec![E::zero(); d];
                    for r in 0..rows {
                        for i in 0..d {
                            dg[i] += g[r * d + i] * xhat[r * d + i];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.rg(*bias) {
                    let mut db = vec![E::zero(); d];
                    for r in 0..rows {
                        for i in 0..d {
                            db[i] += g[r * d + i];
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
                if self.rg(*x) {
                    let dn = E::from_f64(d as f64);
                    let mut dx = vec![E::zero(); rows * d];
                    for r in 0..rows {
                        let mut mean_dxhat = E::zero();
                        let mut mean_dxhat_xhat = E::zero();
                        for i in 0..d {
                            let dxh = g[r * d + i] * gain_v[i];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[r * d + i];
                        }
                        mean_dxhat = mean_dxhat / dn;
                        mean_dxhat_xhat = mean_dxhat_xhat / dn;
                        for i in 0..d {
                            let dxh = g[r * d + i] * gain_v[i];
                            dx[r * d + i] =
                                inv_std[r] * (dxh - mean_dxhat - xhat[r * d + i] * mean_dxhat_xhat);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }

            Op::SoftmaxRows { x, visible } => {
                if self.rg(*x) {
                    let y = &self.nodes[idx].data;
                    let n = self.shape(*x)[1];
                    let rows = self.shape(*x)[0];
                    let mut dx = vec![E::zero(); rows * n];
                    for r in 0..rows {
                        let v = visible[r].min(n);
                        let mut dot = E::zero();
                        for j in 0..v {
                            dot += g[r * n + j] * y[r * n + j];
                        }
                        for j in 0..v {
                            dx[r * n + j] = y[r * n + j] * (g[r * n + j] - dot);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }

            Op::CrossEntropyMean { logits, targets, ignore, probs, count } => {
                if self.rg(*logits) && *count > 0 {
                    let v = self.shape(*logits)[1];
                    let scale = g[0] / E::from_f64(*count as f64);
                    let mut dl = vec![E::zero(); targets.len() * v];
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        for j in 0..v {
                            let onehot = if j == t as usize { E::one() } else { E::zero() };
                            dl[r * v + j] = (probs[r * v + j] - onehot) * scale;
                        }
                    }
                    self.accumulate(grads, *logits, dl);
                }
            }

            Op::Gather { table, ids } => {
                if self.rg(*table) {
                    let (rows, d) = (self.shape(*table)[0], self.shape(*table)[1]);
                    let mut dt = vec![E::zero(); rows * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id as usize * d + j] += g[r * d + j];
                        }
                    }
                    self.accumulate(grads, *table, dt);
                }
            }

            Op::Kron(a, b) => {
                let (p, q) = (self.shape(*a)[0], self.shape(*a)[1]);
                let (m, n) = (self.shape(*b)[0], self.shape(*b)[1]);
                let out_cols = q * n;
                if self.rg(*a) {
                    let bv = self.data(*b);
                    let mut da = vec![E::zero(); p * q];
                    for i in 0..p {
                        for j in 0..q {
                            let mut acc = E::zero();
                            for s in 0..m {
                                let grow = (i * m + s) * out_cols + j * n;
                                for t in 0..n {
                                    acc += g[grow + t] * bv[s * n + t];
                                }
                            }
                            da[i * q + j] = acc;
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let av = self.data(*a);
                    let mut db = vec![E::zero(); m * n];
                    for i in 0..p {
                        for j in 0..q {
                            let aij = av[i * q + j];
                            for s in 0..m {
                                let grow = (i * m + s) * out_cols + j * n;
                                for t in 0..n {
                                    db[s * n + t] += aij * g[grow + t];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }

            Op::ConcatRows(parts) => {
                let n = self.shape(ValueId(idx))[1];
                let mut offset = 0;
                for &p in parts {
                    let r = self.shape(p)[0];
                    if self.rg(p) {
                        let dp = g[offset * n..(offset + r) * n].to_vec();
                        self.accumulate(grads, p, dp);
                    }
                    offset += r;
                }
            }

            Op::RowSlice { x, start } => {
                if self.rg(*x) {
                    let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let len = self.shape(ValueId(idx))[0];
                    let mut dx = vec![E::zero(); m * n];
                    dx[start * n..(start + len) * n].copy_from_slice(g);
                    self.accumulate(grads, *x, dx);
                }
            }

            Op::ConcatCols(parts) => {
                let total = self.shape(ValueId(idx))[1];
                let m = self.shape(ValueId(idx))[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.rg(p) {
                        let mut dp = vec![E::zero(); m * w];
                        for r in 0..m {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }

            Op::ColSlice { x, start } => {
                if self.rg(*x) {
                    let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let len = self.shape(ValueId(idx))[1];
                    let mut dx = vec![E::zero(); m * n];
                    for r in 0..m {
                        dx[r * n + start..r * n + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    self.accumulate(grads, *x, dx);
                }
            }

            Op::Reshape(x) => {
                if self.rg(*x) {
                    self.accumulate(grads, *x, g.to_vec());
                }
            }

            Op::SumAll(x) => {
                if self.rg(*x) {
                    let dx = vec![g[0]; self.data(*x).len()];
                    self.accumulate(grads, *x, dx);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_forward_and_grad() {
        let mut tape = GradTape::<f64>::new();
        let a = tape.var("a", &t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.var("b", &t(vec![2, 1], vec![5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).to_f64_vec(), vec![17.0, 39.0]);
        let loss = tape.sum_all(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        // d sum(A x B) / dA = ones x B^T
        assert_eq!(grads.get("a").unwrap().to_f64_vec(), vec![5.0, 6.0, 5.0, 6.0]);
        // d / dB = A^T x ones
        assert_eq!(grads.get("b").unwrap().to_f64_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let mut tape = GradTape::<f64>::new();
        let a = tape.var("a", &t(vec![2, 3], vec![0.0; 6]));
        let b = tape.var("b", &t(vec![2, 2], vec![0.0; 4]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn kron_requires_2d() {
        let mut tape = GradTape::<f64>::new();
        let a = tape.var("a", &t(vec![2], vec![1.0, 2.0]));
        let b = tape.var("b", &t(vec![2, 2], vec![0.0; 4]));
        assert!(matches!(tape.kron(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn empty_tape_backward_is_all_zero() {
        let mut tape = GradTape::<f64>::new();
        let p = Parameter::new(
            "p",
            t(vec![2], vec![1.0, 2.0]),
            true,
            crate::numerics::ParamGroup::Peft,
        );
        let _pid = tape.param(&p).unwrap();
        let c = tape.constant(&t(vec![1], vec![0.0]));
        let grads = tape.backward(c).unwrap();
        assert!(grads.get("p").is_none());
        let z = grads.get_or_zeros("p", &[2], DType::F64);
        assert_eq!(z.to_f64_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn param_registration_dedupes_by_key() {
        let mut tape = GradTape::<f64>::new();
        let p = Parameter::new(
            "shared",
            t(vec![1], vec![3.0]),
            true,
            crate::numerics::ParamGroup::Peft,
        );
        let a = tape.param(&p).unwrap();
        let b = tape.param(&p).unwrap();
        assert_eq!(a, b);
        // Used twice: loss = p * p has gradient 2p.
        let prod = tape.mul(a, b).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("shared").unwrap().to_f64_vec(), vec![6.0]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut tape = GradTape::<f64>::new();
        let frozen = Parameter::new(
            "frozen",
            t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]),
            false,
            crate::numerics::ParamGroup::Backbone,
        );
        let w = tape.param(&frozen).unwrap();
        let x = tape.var("x", &t(vec![1, 2], vec![1.0, 2.0]));
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get("frozen").is_none());
        assert!(grads.get("x").is_some());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let mut tape = GradTape::<f64>::new();
        let logits = tape.var("l", &t(vec![1, 4], vec![0.3; 4]));
        let loss = tape.cross_entropy_mean(logits, &[2], u32::MAX).unwrap();
        let got = tape.value(loss).get(0);
        assert!((got - 4.0f64.ln()).abs() < 1e-10, "{got}");
    }

    #[test]
    fn cross_entropy_huge_margin_is_near_zero() {
        let mut tape = GradTape::<f64>::new();
        let logits = tape.var("l", &t(vec![1, 3], vec![100.0, -100.0, -100.0]));
        let loss = tape.cross_entropy_mean(logits, &[0], u32::MAX).unwrap();
        assert!(tape.value(loss).get(0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero_with_zero_grad() {
        let mut tape = GradTape::<f64>::new();
        let logits = tape.var("l", &t(vec![2, 3], vec![0.5; 6]));
        let loss = tape.cross_entropy_mean(logits, &[9, 9], 9).unwrap();
        assert_eq!(tape.value(loss).get(0), 0.0);
        let grads = tape.backward(loss).unwrap();
        if let Some(g) = grads.get("l") {
            assert!(g.to_f64_vec().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut tape = GradTape::<f64>::new();
        let logits = tape.var("l", &t(vec![1, 3], vec![0.0; 3]));
        assert!(matches!(
            tape.cross_entropy_mean(logits, &[3], u32::MAX),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        let mut tape = GradTape::<f64>::new();
        let vals = vec![0.2, -0.4, 0.9];
        let logits = tape.var("l", &t(vec![1, 3], vals.clone()));
        let loss = tape.cross_entropy_mean(logits, &[1], u32::MAX).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get("l").unwrap().to_f64_vec();
        let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = vals.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, &e) in exps.iter().enumerate() {
            let expect = e / z - if j == 1 { 1.0 } else { 0.0 };
            assert!((g[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_known_values() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.var("x", &t(vec![2], vec![0.0, 10.0]));
        let y = tape.gelu(x).unwrap();
        let out = tape.value(y).to_f64_vec();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 10.0).abs() < 1e-4);
    }

    #[test]
    fn tanh_saturates() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.var("x", &t(vec![2], vec![0.0, 20.0]));
        let y = tape.tanh_act(x).unwrap();
        let out = tape.value(y).to_f64_vec();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn layer_norm_zero_gain_gives_bias() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.var("x", &t(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]));
        let gain = tape.var("g", &t(vec![3], vec![0.0; 3]));
        let bias = tape.var("b", &t(vec![3], vec![7.0, 8.0, 9.0]));
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        let out = tape.value(y).to_f64_vec();
        assert_eq!(out, vec![7.0, 8.0, 9.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn layer_norm_gain_bias_shape_checked() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.var("x", &t(vec![2, 3], vec![0.0; 6]));
        let gain = tape.var("g", &t(vec![2], vec![1.0; 2]));
        let bias = tape.var("b", &t(vec![3], vec![0.0; 3]));
        assert!(matches!(
            tape.layer_norm(x, gain, bias, 1e-5),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn gradient_accumulates_across_uses() {
        // y = x*x + x -> dy/dx = 2x + 1
        let mut tape = GradTape::<f64>::new();
        let x = tape.var("x", &t(vec![1], vec![3.0]));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().to_f64_vec(), vec![7.0]);
    }

    #[test]
    fn nonfinite_output_is_surfaced() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.var("x", &t(vec![1], vec![1e308]));
        let doubled = tape.scale(x, 10.0);
        assert!(matches!(doubled, Err(Error::NonFinite(_))));
    }

    #[test]
    fn gradients_accumulate_store() {
        let mut a = Gradients::default();
        a.insert("w".into(), t(vec![2], vec![1.0, 2.0]));
        let mut b = Gradients::default();
        b.insert("w".into(), t(vec![2], vec![10.0, 20.0]));
        b.insert("v".into(), t(vec![1], vec![5.0]));
        a.accumulate(&b).unwrap();
        assert_eq!(a.get("w").unwrap().to_f64_vec(), vec![11.0, 22.0]);
        assert_eq!(a.get("v").unwrap().to_f64_vec(), vec![5.0]);
    }
}
