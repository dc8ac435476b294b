//! Wengert tape: forward primitives record themselves, `backward` replays in
//! reverse. Node ids are topologically ordered by construction, so one
//! reverse sweep visits every node exactly once.
//!
//! Shape errors and non-finite softmax/cross-entropy inputs are programmer
//! errors and panic with the op name and offending shapes; nothing here
//! propagates NaN silently.

use super::{matmul_raw, Scalar, Tensor};

/// Handle onto a tape node.
pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    Relu { a: NodeId },
    Gelu { a: NodeId },
    Sigmoid { a: NodeId },
    Tanh { a: NodeId },
    Log { a: NodeId },
    SoftmaxLast { a: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Embedding { table: NodeId, ids: Vec<usize> },
    ConcatLast { parts: Vec<NodeId> },
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
    Sum { a: NodeId },
    Transpose { a: NodeId },
    SliceCols { a: NodeId, start: usize, end: usize },
    SelectRows { a: NodeId, rows: Vec<usize> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op,
}

/// Ordered record of primitive applications over one forward pass.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

/// Per-node gradients produced by [`backward`]. Nodes the loss never
/// reached read back as zeros of the node's shape.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn wrt(&self, id: NodeId) -> Tensor<F> {
        match &self.grads[id] {
            Some(g) => Tensor::new(self.shapes[id].clone(), g.clone()),
            None => Tensor::zeros(self.shapes[id].clone()),
        }
    }

    pub fn has(&self, id: NodeId) -> bool {
        self.grads[id].is_some()
    }
}

/// rhs broadcast pattern accepted by add/mul.
enum Broadcast {
    Same,
    /// rhs is a single element applied everywhere.
    ScalarRhs,
    /// rhs shape is a suffix of lhs shape; repeats over leading dims.
    LeadingRhs { chunk: usize },
}

fn broadcast_kind(op: &str, lhs: &[usize], rhs: &[usize], rhs_numel: usize) -> Broadcast {
    if lhs == rhs {
        return Broadcast::Same;
    }
    if rhs_numel == 1 {
        return Broadcast::ScalarRhs;
    }
    if rhs.len() < lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        return Broadcast::LeadingRhs { chunk: rhs_numel };
    }
    panic!("{op}: shapes {lhs:?} and {rhs:?} do not match (leading broadcast only)");
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op });
        id
    }

    /// Record a tensor as a leaf (input or parameter).
    pub fn leaf(&mut self, t: Tensor<F>) -> NodeId {
        self.push(t, Op::Leaf)
    }

    /// a\[m,k\] * b\[k,n\] -> \[m,n\]. 2-D only.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes {sa:?} x {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], data), Op::Matmul { a, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise_binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise_binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn elementwise_binary(
        &mut self,
        name: &str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(F, F) -> F,
        op: Op,
    ) -> NodeId {
        let rhs_numel = self.value(b).numel();
        let kind = broadcast_kind(name, self.value(a).shape(), self.value(b).shape(), rhs_numel);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<F> = match kind {
            Broadcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::ScalarRhs => av.iter().map(|&x| f(x, bv[0])).collect(),
            Broadcast::LeadingRhs { chunk } => av
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[i % chunk]))
                .collect(),
        };
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, data), op)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let cf = F::from_f64(c);
        let data: Vec<F> = self.value(a).data().iter().map(|&x| x * cf).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Scale { a, c })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(F::ZERO), Op::Relu { a })
    }

    /// tanh-approximated GELU; smooth, so finite differences stay honest.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, gelu_scalar, Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| F::ONE / (F::ONE + (-x).exp()), Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.tanh(), Op::Tanh { a })
    }

    /// Elementwise natural log. Panics on non-positive input rather than
    /// producing NaN/-inf.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        for &x in self.value(a).data() {
            assert!(x > F::ZERO, "log: non-positive input {x}");
        }
        self.unary(a, |x| x.ln(), Op::Log { a })
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(F) -> F, op: Op) -> NodeId {
        let data: Vec<F> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, data), op)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        assert!(
            t.data().iter().all(|v| v.is_finite()),
            "softmax: non-finite input"
        );
        let cols = *t.shape().last().expect("softmax: empty shape");
        let data = softmax_rows(t.data(), cols);
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::SoftmaxLast { a })
    }

    /// Layer normalization over the last axis with learned gain/bias.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let d = *self.value(x).shape().last().unwrap();
        assert_eq!(
            self.value(gamma).shape(),
            &[d],
            "layer_norm: gamma shape {:?} vs feature dim {d}",
            self.value(gamma).shape()
        );
        assert_eq!(
            self.value(beta).shape(),
            &[d],
            "layer_norm: beta shape {:?} vs feature dim {d}",
            self.value(beta).shape()
        );
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let epsf = F::from_f64(eps);
        let mut out = vec![F::ZERO; xd.len()];
        let inv_d = F::from_f64(1.0 / d as f64);
        for (row_out, row) in out.chunks_mut(d).zip(xd.chunks(d)) {
            let mut mean = F::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = F::ZERO;
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var = var * inv_d;
            let inv_std = F::ONE / (var + epsf).sqrt();
            for j in 0..d {
                row_out[j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out), Op::LayerNorm { x, gamma, beta, eps })
    }

    /// table\[v,d\] indexed by ids -> \[len(ids), d\].
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        assert_eq!(t.shape().len(), 2, "embedding: table must be 2-D");
        let (v, d) = (t.shape()[0], t.shape()[1]);
        assert!(!ids.is_empty(), "embedding: empty id list");
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embedding: id {id} out of range for table rows {v}");
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        self.push(
            Tensor::new(vec![ids.len(), d], data),
            Op::Embedding { table, ids: ids.to_vec() },
        )
    }

    /// Concatenate along the last axis; all other dims must agree.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat: no inputs");
        let lead = self.value(parts[0]).shape()[..self.value(parts[0]).shape().len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut total_cols = 0;
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(
                &s[..s.len() - 1],
                &lead[..],
                "concat: leading dims differ ({s:?})"
            );
            total_cols += s[s.len() - 1];
        }
        let mut data = vec![F::ZERO; rows * total_cols];
        let mut col_off = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let c = s[s.len() - 1];
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total_cols + col_off..r * total_cols + col_off + c]
                    .copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            col_off += c;
        }
        let mut shape = lead;
        shape.push(total_cols);
        self.push(
            Tensor::new(shape, data),
            Op::ConcatLast { parts: parts.to_vec() },
        )
    }

    /// Mean over rows of -log softmax(row)\[target\]; log-sum-exp form.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let t = self.value(logits);
        assert_eq!(t.shape().len(), 2, "cross_entropy: logits must be 2-D");
        assert!(
            t.data().iter().all(|v| v.is_finite()),
            "cross_entropy: non-finite logits"
        );
        let (m, n) = (t.shape()[0], t.shape()[1]);
        assert_eq!(targets.len(), m, "cross_entropy: {m} rows, {} targets", targets.len());
        let mut total = F::ZERO;
        for (row, &tgt) in t.data().chunks(n).zip(targets) {
            assert!(tgt < n, "cross_entropy: target {tgt} out of range {n}");
            let mx = row.iter().fold(row[0], |acc, &v| acc.max(v));
            let mut lse = F::ZERO;
            for &v in row {
                lse += (v - mx).exp();
            }
            let lse = lse.ln() + mx;
            total += lse - row[tgt];
        }
        let mean = total * F::from_f64(1.0 / m as f64);
        self.push(
            Tensor::scalar(mean),
            Op::CrossEntropy { logits, targets: targets.to_vec() },
        )
    }

    /// Sum of all elements -> scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let mut s = F::ZERO;
        for &v in self.value(a).data() {
            s += v;
        }
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 2, "transpose: 2-D only, got {:?}", t.shape());
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let src = t.data();
        let mut data = vec![F::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], data), Op::Transpose { a })
    }

    /// Columns \[start, end) of a 2-D tensor.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 2, "slice_cols: 2-D only");
        let (m, n) = (t.shape()[0], t.shape()[1]);
        assert!(
            start < end && end <= n,
            "slice_cols: range {start}..{end} out of {n} columns"
        );
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&t.data()[r * n + start..r * n + end]);
        }
        self.push(Tensor::new(vec![m, w], data), Op::SliceCols { a, start, end })
    }

    /// Gather rows of a 2-D tensor; repeated rows accumulate on backward.
    pub fn select_rows(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 2, "select_rows: 2-D only");
        let (m, n) = (t.shape()[0], t.shape()[1]);
        assert!(!rows.is_empty(), "select_rows: empty row list");
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            assert!(r < m, "select_rows: row {r} out of {m}");
            data.extend_from_slice(&t.data()[r * n..(r + 1) * n]);
        }
        self.push(
            Tensor::new(vec![rows.len(), n], data),
            Op::SelectRows { a, rows: rows.to_vec() },
        )
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_scalar<F: Scalar>(x: F) -> F {
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    half * x * (F::ONE + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad_scalar<F: Scalar>(x: F) -> F {
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three_k = F::from_f64(3.0 * 0.044715);
    let inner = c * (x + k * x * x * x);
    let th = inner.tanh();
    let sech2 = F::ONE - th * th;
    let d_inner = c * (F::ONE + three_k * x * x);
    half * (F::ONE + th) + half * x * sech2 * d_inner
}

fn softmax_rows<F: Scalar>(data: &[F], cols: usize) -> Vec<F> {
    let mut out = vec![F::ZERO; data.len()];
    for (row_out, row) in out.chunks_mut(cols).zip(data.chunks(cols)) {
        let mx = row.iter().fold(row[0], |acc, &v| acc.max(v));
        let mut denom = F::ZERO;
        for (o, &v) in row_out.iter_mut().zip(row) {
            *o = (v - mx).exp();
            denom += *o;
        }
        let inv = F::ONE / denom;
        for o in row_out.iter_mut() {
            *o = *o * inv;
        }
    }
    out
}

fn accumulate<F: Scalar>(slot: &mut Option<Vec<F>>, numel: usize, add: impl FnOnce(&mut [F])) {
    let g = slot.get_or_insert_with(|| vec![F::ZERO; numel]);
    add(g);
}

/// Reverse sweep from a scalar loss node. Sibling uses of a node sum their
/// contributions; nodes unreachable from the loss stay `None` (read as zero).
pub fn backward<F: Scalar>(tape: &Tape<F>, loss: NodeId) -> Gradients<F> {
    assert_eq!(
        tape.value(loss).numel(),
        1,
        "backward: loss must be scalar, got shape {:?}",
        tape.value(loss).shape()
    );
    let n = tape.nodes.len();
    let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
    let shapes: Vec<Vec<usize>> = tape.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
    grads[loss] = Some(vec![F::ONE]);

    for id in (0..=loss).rev() {
        let g = match grads[id].take() {
            Some(g) => g,
            None => continue,
        };
        match &tape.nodes[id].op {
            Op::Leaf => {
                grads[id] = Some(g);
                continue;
            }
            Op::Matmul { a, b } => {
                let (m, k) = {
                    let s = tape.value(*a).shape();
                    (s[0], s[1])
                };
                let nn = tape.value(*b).shape()[1];
                // dA = G * B^T
                let bt = transpose_raw(tape.value(*b).data(), k, nn);
                let da = matmul_raw(&g, &bt, m, nn, k);
                // dB = A^T * G
                let at = transpose_raw(tape.value(*a).data(), m, k);
                let db = matmul_raw(&at, &g, k, m, nn);
                accumulate(&mut grads[*a], m * k, |t| add_into(t, &da));
                accumulate(&mut grads[*b], k * nn, |t| add_into(t, &db));
            }
            Op::Add { a, b } => {
                let na = tape.value(*a).numel();
                let nb = tape.value(*b).numel();
                accumulate(&mut grads[*a], na, |t| add_into(t, &g));
                accumulate(&mut grads[*b], nb, |t| reduce_into(t, &g, nb));
            }
            Op::Mul { a, b } => {
                let na = tape.value(*a).numel();
                let nb = tape.value(*b).numel();
                let av = tape.value(*a).data();
                let bv = tape.value(*b).data();
                let da: Vec<F> = g.iter().enumerate().map(|(i, &gv)| gv * bv[i % nb]).collect();
                let db_full: Vec<F> = g.iter().zip(av).map(|(&gv, &x)| gv * x).collect();
                accumulate(&mut grads[*a], na, |t| add_into(t, &da));
                accumulate(&mut grads[*b], nb, |t| reduce_into(t, &db_full, nb));
            }
            Op::Scale { a, c } => {
                let cf = F::from_f64(*c);
                let na = tape.value(*a).numel();
                accumulate(&mut grads[*a], na, |t| {
                    for (tv, &gv) in t.iter_mut().zip(&g) {
                        *tv += gv * cf;
                    }
                });
            }
            Op::Relu { a } => {
                let xv = tape.value(*a).data();
                let na = xv.len();
                accumulate(&mut grads[*a], na, |t| {
                    for ((tv, &gv), &x) in t.iter_mut().zip(&g).zip(xv) {
                        if x > F::ZERO {
                            *tv += gv;
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let xv = tape.value(*a).data();
                let na = xv.len();
                accumulate(&mut grads[*a], na, |t| {
                    for ((tv, &gv), &x) in t.iter_mut().zip(&g).zip(xv) {
                        *tv += gv * gelu_grad_scalar(x);
                    }
                });
            }
            Op::Sigmoid { a } => {
                let yv = tape.nodes[id].value.data();
                let na = yv.len();
                accumulate(&mut grads[*a], na, |t| {
                    for ((tv, &gv), &y) in t.iter_mut().zip(&g).zip(yv) {
                        *tv += gv * y * (F::ONE - y);
                    }
                });
            }
            Op::Tanh { a } => {
                let yv = tape.nodes[id].value.data();
                let na = yv.len();
                accumulate(&mut grads[*a], na, |t| {
                    for ((tv, &gv), &y) in t.iter_mut().zip(&g).zip(yv) {
                        *tv += gv * (F::ONE - y * y);
                    }
                });
            }
            Op::Log { a } => {
                let xv = tape.value(*a).data();
                let na = xv.len();
                accumulate(&mut grads[*a], na, |t| {
                    for ((tv, &gv), &x) in t.iter_mut().zip(&g).zip(xv) {
                        *tv += gv / x;
                    }
                });
            }
            Op::SoftmaxLast { a } => {
                let yv = tape.nodes[id].value.data();
                let cols = *tape.nodes[id].value.shape().last().unwrap();
                let na = yv.len();
                let mut dg = vec![F::ZERO; na];
                for ((dg_row, g_row), y_row) in
                    dg.chunks_mut(cols).zip(g.chunks(cols)).zip(yv.chunks(cols))
                {
                    let mut dot = F::ZERO;
                    for (&gv, &y) in g_row.iter().zip(y_row) {
                        dot += gv * y;
                    }
                    for ((d, &gv), &y) in dg_row.iter_mut().zip(g_row).zip(y_row) {
                        *d = y * (gv - dot);
                    }
                }
                accumulate(&mut grads[*a], na, |t| add_into(t, &dg));
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xd = tape.value(*x).data();
                let gd = tape.value(*gamma).data();
                let d = *tape.value(*x).shape().last().unwrap();
                let nx = xd.len();
                let mut dx = vec![F::ZERO; nx];
                let mut dgamma = vec![F::ZERO; d];
                let mut dbeta = vec![F::ZERO; d];
                let inv_d = F::from_f64(1.0 / d as f64);
                let epsf = F::from_f64(*eps);
                for (v, (row, g_row)) in xd.chunks(d).zip(g.chunks(d)).enumerate() {
                    let mut mean = F::ZERO;
                    for &xv in row {
                        mean += xv;
                    }
                    mean = mean * inv_d;
                    let mut var = F::ZERO;
                    for &xv in row {
                        var += (xv - mean) * (xv - mean);
                    }
                    var = var * inv_d;
                    let inv_std = F::ONE / (var + epsf).sqrt();
                    let xhat: Vec<F> = row.iter().map(|&xv| (xv - mean) * inv_std).collect();
                    let mut dxhat = vec![F::ZERO; d];
                    let mut sum_dxhat = F::ZERO;
                    let mut sum_dxhat_xhat = F::ZERO;
                    for j in 0..d {
                        dgamma[j] += g_row[j] * xhat[j];
                        dbeta[j] += g_row[j];
                        dxhat[j] = g_row[j] * gd[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    let df = F::from_f64(d as f64);
                    for j in 0..d {
                        dx[v * d + j] =
                            inv_std * inv_d * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                accumulate(&mut grads[*x], nx, |t| add_into(t, &dx));
                accumulate(&mut grads[*gamma], d, |t| add_into(t, &dgamma));
                accumulate(&mut grads[*beta], d, |t| add_into(t, &dbeta));
            }
            Op::Embedding { table, ids } => {
                let (v, d) = {
                    let s = tape.value(*table).shape();
                    (s[0], s[1])
                };
                accumulate(&mut grads[*table], v * d, |t| {
                    for (i, &id_) in ids.iter().enumerate() {
                        for j in 0..d {
                            t[id_ * d + j] += g[i * d + j];
                        }
                    }
                });
            }
            Op::ConcatLast { parts } => {
                let total_cols = *tape.nodes[id].value.shape().last().unwrap();
                let rows = tape.nodes[id].value.numel() / total_cols;
                let mut col_off = 0;
                for &p in parts {
                    let c = *tape.value(p).shape().last().unwrap();
                    let np = tape.value(p).numel();
                    accumulate(&mut grads[p], np, |t| {
                        for r in 0..rows {
                            for j in 0..c {
                                t[r * c + j] += g[r * total_cols + col_off + j];
                            }
                        }
                    });
                    col_off += c;
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = tape.value(*logits).data();
                let (m, nn) = {
                    let s = tape.value(*logits).shape();
                    (s[0], s[1])
                };
                let scale = g[0] * F::from_f64(1.0 / m as f64);
                let mut dl = vec![F::ZERO; m * nn];
                for (r, (row, &tgt)) in lv.chunks(nn).zip(targets).enumerate() {
                    let sm = softmax_rows(row, nn);
                    for j in 0..nn {
                        let indicator = if j == tgt { F::ONE } else { F::ZERO };
                        dl[r * nn + j] = scale * (sm[j] - indicator);
                    }
                }
                accumulate(&mut grads[*logits], m * nn, |t| add_into(t, &dl));
            }
            Op::Sum { a } => {
                let na = tape.value(*a).numel();
                accumulate(&mut grads[*a], na, |t| {
                    for tv in t.iter_mut() {
                        *tv += g[0];
                    }
                });
            }
            Op::Transpose { a } => {
                let (m, nn) = {
                    let s = tape.value(*a).shape();
                    (s[0], s[1])
                };
                // output is [n, m]; route g back through the transpose
                let dg = transpose_raw(&g, nn, m);
                accumulate(&mut grads[*a], m * nn, |t| add_into(t, &dg));
            }
            Op::SliceCols { a, start, end } => {
                let (m, nn) = {
                    let s = tape.value(*a).shape();
                    (s[0], s[1])
                };
                let w = end - start;
                accumulate(&mut grads[*a], m * nn, |t| {
                    for r in 0..m {
                        for j in 0..w {
                            t[r * nn + start + j] += g[r * w + j];
                        }
                    }
                });
            }
            Op::SelectRows { a, rows } => {
                let (m, nn) = {
                    let s = tape.value(*a).shape();
                    (s[0], s[1])
                };
                accumulate(&mut grads[*a], m * nn, |t| {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..nn {
                            t[r * nn + j] += g[i * nn + j];
                        }
                    }
                });
            }
        }
        grads[id] = Some(g);
    }
    Gradients { grads, shapes }
}

fn add_into<F: Scalar>(target: &mut [F], src: &[F]) {
    for (t, &s) in target.iter_mut().zip(src) {
        *t += s;
    }
}

/// Sum `src` into the (possibly broadcast-smaller) `target` by cycling.
fn reduce_into<F: Scalar>(target: &mut [F], src: &[F], nb: usize) {
    for (i, &s) in src.iter().enumerate() {
        target[i % nb] += s;
    }
}

fn transpose_raw<F: Scalar>(data: &[F], m: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = data[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data)
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new();
        let eye = tape.leaf(t64(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a = tape.leaf(t64(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]));
        let c = tape.matmul(eye, a);
        assert_eq!(tape.value(c).data(), tape.value(a).data());
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(vec![1, 4], vec![0.0; 4]));
        let s = tape.softmax_last(a);
        for &v in tape.value(s).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(0.0f64));
        let s = tape.sigmoid(a);
        assert!((tape.value(s).item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]));
        let loss = tape.sum(a);
        let grads = backward(&tape, loss);
        assert_eq!(grads.wrt(a).data(), &[1.0; 6]);
    }

    #[test]
    fn backward_sigmoid_dot_at_zero_weights() {
        // loss = sigmoid(w . x) at w = 0 -> grad_w = 0.25 * x
        let x = vec![1.0f64, -2.0, 3.0];
        let mut tape = Tape::new();
        let w = tape.leaf(t64(vec![1, 3], vec![0.0; 3]));
        let xv = tape.leaf(t64(vec![3, 1], x.clone()));
        let z = tape.matmul(w, xv);
        let p = tape.sigmoid(z);
        let loss = tape.sum(p);
        let grads = backward(&tape, loss);
        let gw = grads.wrt(w);
        for (g, xi) in gw.data().iter().zip(&x) {
            assert!((g - 0.25 * xi).abs() < 1e-12, "{g} vs {}", 0.25 * xi);
        }
    }

    #[test]
    fn backward_accumulates_on_reuse() {
        // y = a*a consumed twice via mul; dy/da = 2a
        let mut tape = Tape::new();
        let a = tape.leaf(t64(vec![1, 2], vec![3.0, -4.0]));
        let sq = tape.mul(a, a);
        let loss = tape.sum(sq);
        let grads = backward(&tape, loss);
        assert_eq!(grads.wrt(a).data(), &[6.0, -8.0]);
    }

    #[test]
    fn unreachable_node_reads_zero_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(vec![1, 2], vec![1.0, 2.0]));
        let b = tape.leaf(t64(vec![1, 2], vec![5.0, 6.0]));
        let loss = tape.sum(a);
        let grads = backward(&tape, loss);
        assert!(!grads.has(b));
        assert_eq!(grads.wrt(b).data(), &[0.0, 0.0]);
    }

    #[test]
    #[should_panic(expected = "loss must be scalar")]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(vec![1, 2], vec![1.0, 2.0]));
        let _ = backward(&tape, a);
    }

    #[test]
    #[should_panic(expected = "matmul: incompatible shapes")]
    fn matmul_shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(vec![2, 3], vec![0.0; 6]));
        let b = tape.leaf(t64(vec![2, 3], vec![0.0; 6]));
        let _ = tape.matmul(a, b);
    }

    #[test]
    #[should_panic(expected = "softmax: non-finite input")]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(vec![1, 2], vec![f64::NAN, 0.0]));
        let _ = tape.softmax_last(a);
    }

    #[test]
    fn cross_entropy_matches_manual_lse() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t64(vec![1, 3], vec![2.0, 1.0, 0.1]));
        let ce = tape.cross_entropy(logits, &[0]);
        let lse = (2.0f64.exp() + 1.0f64.exp() + 0.1f64.exp()).ln();
        assert!((tape.value(ce).item() - (lse - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(vec![2, 2], vec![1., 2., 3., 4.]));
        let b = tape.leaf(t64(vec![2, 1], vec![9., 8.]));
        let c = tape.concat_last(&[a, b]);
        assert_eq!(tape.value(c).shape(), &[2, 3]);
        assert_eq!(tape.value(c).data(), &[1., 2., 9., 3., 4., 8.]);
        let back = tape.slice_cols(c, 0, 2);
        assert_eq!(tape.value(back).data(), tape.value(a).data());
    }

    #[test]
    fn select_rows_repeats_accumulate() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(vec![2, 2], vec![1., 2., 3., 4.]));
        let sel = tape.select_rows(a, &[1, 1, 0]);
        assert_eq!(tape.value(sel).data(), &[3., 4., 3., 4., 1., 2.]);
        let loss = tape.sum(sel);
        let grads = backward(&tape, loss);
        assert_eq!(grads.wrt(a).data(), &[1., 1., 2., 2.]);
    }

    #[test]
    fn f32_forward_is_bit_deterministic() {
        use rand::SeedableRng;
        let run = || -> Vec<f32> {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
            let mut store: crate::tensor::ParamStore<f32> = crate::tensor::ParamStore::new();
            store.insert_randn("w1", vec![6, 6], 0.3, &mut rng);
            store.insert_randn("w2", vec![6, 3], 0.3, &mut rng);
            let mut g = crate::tensor::Graph::new(&store);
            let w1 = g.param("w1");
            let w2 = g.param("w2");
            let x = g.constant(Tensor::new(vec![2, 6], (0..12).map(|i| i as f32 * 0.13).collect()));
            let h = g.tape.matmul(x, w1);
            let h = g.tape.tanh(h);
            let o = g.tape.matmul(h, w2);
            let s = g.tape.softmax_last(o);
            g.value(s).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn softmax_rows_sum_to_one(
                logits in proptest::collection::vec(-30.0f64..30.0, 2..24)
            ) {
                let n = logits.len();
                let mut tape = Tape::new();
                let a = tape.leaf(Tensor::new(vec![1, n], logits));
                let s = tape.softmax_last(a);
                let total: f64 = tape.value(s).data().iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
            }

            #[test]
            fn softmax_shift_invariant(
                logits in proptest::collection::vec(-20.0f64..20.0, 2..16),
                shift in -50.0f64..50.0
            ) {
                let n = logits.len();
                let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
                let mut t1 = Tape::new();
                let a1 = t1.leaf(Tensor::new(vec![1, n], logits));
                let s1 = t1.softmax_last(a1);
                let mut t2 = Tape::new();
                let a2 = t2.leaf(Tensor::new(vec![1, n], shifted));
                let s2 = t2.softmax_last(a2);
                for (x, y) in t1.value(s1).data().iter().zip(t2.value(s2).data()) {
                    prop_assert!((x - y).abs() < 1e-6);
                }
            }

            // Bounded domain: beyond |x| ~ 36 f64 sigmoid rounds to exactly
            // 0.0 or 1.0, so the open-interval claim holds pre-saturation.
            #[test]
            fn sigmoid_stays_in_open_unit_interval(
                xs in proptest::collection::vec(-30.0f64..30.0, 1..16)
            ) {
                let n = xs.len();
                let mut tape = Tape::new();
                let a = tape.leaf(Tensor::new(vec![1, n], xs));
                let s = tape.sigmoid(a);
                for &v in tape.value(s).data() {
                    prop_assert!(v > 0.0 && v < 1.0);
                }
            }
        }
    }
}
