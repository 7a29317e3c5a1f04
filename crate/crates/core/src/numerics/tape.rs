//! Reverse-mode differentiation over a fixed operation set.
//!
//! A [`Tape`] records eager forward computations as a flat list of nodes;
//! [`Tape::backward`] walks the list in reverse and accumulates gradients.
//! The operation set is exactly what the losses in this crate need: matrix
//! products (dense and sparse-times-dense), elementwise maps, row softmax,
//! pairwise gather ops, the expert-fusion combination, the student-t soft
//! assignment, min-max column scaling plus row normalization for the
//! similarity matrix, and fused scalar loss heads (cross-entropy forms and
//! the self-training KL).
//!
//! Sparse factors and supervision slices are borrowed for the tape's
//! lifetime; they are constants, never differentiated. The sparse factor of
//! [`Tape::spmm`] must be symmetric (the normalized adjacency is), which the
//! backward pass relies on.

use crate::numerics::dense::{softmax_row_in_place, DenseMatrix};
use crate::numerics::params::ParameterSet;
use crate::numerics::sparse::{spmm, CsrMatrix};
use crate::numerics::LOG_CLAMP;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<'g> {
    Leaf,
    /// leaf that never receives a gradient (frozen inputs)
    Constant,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNt(Var, Var),
    /// symmetric sparse constant times dense
    Spmm(&'g CsrMatrix, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    /// matrix plus a 1xC row broadcast to every row
    AddRowBroadcast(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    /// 1xC mean over rows
    MeanRows(Var),
    /// per pair (i, j): dot(z_i, z_j), as an n_pairs x 1 column
    PairDot(Var, &'g [(u32, u32)]),
    /// per pair (i, j): z_i ⊙ z_j
    PairMul(Var, &'g [(u32, u32)]),
    /// per pair (i, j): |z_i - z_j|
    PairAbsDiff(Var, &'g [(u32, u32)]),
    /// out[i,:] = Σ_k gates[i,k] · experts_k[i,:]
    Fuse {
        experts: Vec<Var>,
        gates: Var,
    },
    /// student-t (one degree of freedom) soft assignment of rows to centers
    SoftAssign {
        z: Var,
        centers: Var,
    },
    MinMaxScaleCols(Var),
    RowNormalize(Var),
    /// mean softmax cross-entropy of logit rows against class labels
    SoftmaxCrossEntropy(Var, &'g [u32]),
    /// mean binary cross-entropy of an n x 1 logit column against targets
    BceWithLogits(Var, &'g [f64]),
    /// -mean log q[id, label] over a node subset, clamped logs
    NllSelected {
        q: Var,
        ids: &'g [u32],
        labels: &'g [u32],
    },
    /// dense BCE of an NxN score matrix against a sparse 0/1 target,
    /// diagonal treated as exactly 1
    StructureBce(Var, &'g CsrMatrix),
    /// KL(P ‖ Q) against a fixed target distribution P (owned constant,
    /// no gradient flows through it)
    KlFixedTarget(Var, DenseMatrix),
    /// weighted sum of scalar nodes
    WeightedSum(Vec<(Var, f64)>),
}

pub struct Tape<'g> {
    values: Vec<DenseMatrix>,
    ops: Vec<Op<'g>>,
}

/// Gradients of one scalar node with respect to every leaf it reaches.
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseMatrix> {
        self.grads[v.0].as_ref()
    }
}

impl<'g> Default for Tape<'g> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'g> Tape<'g> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, value: DenseMatrix, op: Op<'g>) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.values[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Registers a leaf (input or parameter snapshot).
    pub fn leaf(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers a frozen input: no gradient is ever computed for it, which
    /// skips the corresponding backward products entirely.
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Constant)
    }

    fn wants_grad(&self, v: Var) -> bool {
        !matches!(self.ops[v.0], Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].matmul(&self.values[b.0]).expect("matmul");
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0]
            .matmul_nt(&self.values[b.0])
            .expect("matmul_nt");
        self.push(v, Op::MatMulNt(a, b))
    }

    pub fn spmm(&mut self, s: &'g CsrMatrix, b: Var) -> Var {
        let v = spmm(s, &self.values[b.0]).expect("spmm");
        self.push(v, Op::Spmm(s, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].add(&self.values[b.0]).expect("add");
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].sub(&self.values[b.0]).expect("sub");
        self.push(v, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0]
            .hadamard(&self.values[b.0])
            .expect("hadamard");
        self.push(v, Op::Hadamard(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.values[a.0].scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Var {
        let m = &self.values[a.0];
        let r = &self.values[row.0];
        assert_eq!(r.rows(), 1, "broadcast row must be 1xC");
        assert_eq!(m.cols(), r.cols(), "broadcast width mismatch");
        let mut out = m.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.row(0)) {
                *o += b;
            }
        }
        self.push(out, Op::AddRowBroadcast(a, row))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.values[a.0].map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.values[a.0].clone();
        for i in 0..v.rows() {
            softmax_row_in_place(v.row_mut(i));
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = &self.values[a.0];
        let n = m.rows() as f64;
        let mut out = DenseMatrix::zeros(1, m.cols());
        for i in 0..m.rows() {
            for (o, &x) in out.row_mut(0).iter_mut().zip(m.row(i)) {
                *o += x;
            }
        }
        for o in out.data_mut() {
            *o /= n;
        }
        self.push(out, Op::MeanRows(a))
    }

    pub fn pair_dot(&mut self, z: Var, pairs: &'g [(u32, u32)]) -> Var {
        let m = &self.values[z.0];
        let mut out = DenseMatrix::zeros(pairs.len(), 1);
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let (ri, rj) = (m.row(i as usize), m.row(j as usize));
            let dot: f64 = ri.iter().zip(rj).map(|(&a, &b)| a * b).sum();
            out.set(p, 0, dot);
        }
        self.push(out, Op::PairDot(z, pairs))
    }

    pub fn pair_mul(&mut self, z: Var, pairs: &'g [(u32, u32)]) -> Var {
        let m = &self.values[z.0];
        let mut out = DenseMatrix::zeros(pairs.len(), m.cols());
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let (ri, rj) = (m.row(i as usize), m.row(j as usize));
            for (k, o) in out.row_mut(p).iter_mut().enumerate() {
                *o = ri[k] * rj[k];
            }
        }
        self.push(out, Op::PairMul(z, pairs))
    }

    pub fn pair_abs_diff(&mut self, z: Var, pairs: &'g [(u32, u32)]) -> Var {
        let m = &self.values[z.0];
        let mut out = DenseMatrix::zeros(pairs.len(), m.cols());
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let (ri, rj) = (m.row(i as usize), m.row(j as usize));
            for (k, o) in out.row_mut(p).iter_mut().enumerate() {
                *o = (ri[k] - rj[k]).abs();
            }
        }
        self.push(out, Op::PairAbsDiff(z, pairs))
    }

    pub fn fuse(&mut self, experts: Vec<Var>, gates: Var) -> Var {
        assert!(!experts.is_empty(), "fuse needs at least one expert");
        let g = &self.values[gates.0];
        assert_eq!(g.cols(), experts.len(), "gate width must equal expert count");
        let (n, d) = self.values[experts[0].0].shape();
        for e in &experts {
            assert_eq!(self.values[e.0].shape(), (n, d), "expert shape mismatch");
        }
        assert_eq!(g.rows(), n, "gate rows must equal node count");
        let mut out = DenseMatrix::zeros(n, d);
        for i in 0..n {
            for (k, e) in experts.iter().enumerate() {
                let w = g.get(i, k);
                let e_row = self.values[e.0].row(i);
                for (o, &x) in out.row_mut(i).iter_mut().zip(e_row) {
                    *o += w * x;
                }
            }
        }
        self.push(out, Op::Fuse { experts, gates })
    }

    /// `q_ij = (1 + ||z_i - c_j||²)^{-1}` normalized over j.
    pub fn soft_assign(&mut self, z: Var, centers: Var) -> Var {
        let q = soft_assign_forward(&self.values[z.0], &self.values[centers.0]);
        self.push(q, Op::SoftAssign { z, centers })
    }

    /// Scales every column into [0,1]; constant columns map to 0.5.
    pub fn minmax_scale_cols(&mut self, a: Var) -> Var {
        let m = &self.values[a.0];
        let (mins, maxs) = col_min_max(m);
        let mut out = DenseMatrix::zeros(m.rows(), m.cols());
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                let rng = maxs[j] - mins[j];
                let v = if rng == 0.0 {
                    0.5
                } else {
                    (m.get(i, j) - mins[j]) / rng
                };
                out.set(i, j, v);
            }
        }
        self.push(out, Op::MinMaxScaleCols(a))
    }

    /// L2-normalizes every row; all-zero rows stay zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let m = &self.values[a.0];
        let mut out = m.clone();
        for i in 0..out.rows() {
            let norm = row_norm(m.row(i));
            if norm > 0.0 {
                for v in out.row_mut(i) {
                    *v /= norm;
                }
            }
        }
        self.push(out, Op::RowNormalize(a))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &'g [u32]) -> Var {
        let m = &self.values[logits.0];
        assert_eq!(m.rows(), labels.len(), "one label per logit row");
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = m.row(i);
            total += log_sum_exp(row) - row[y as usize];
        }
        let v = DenseMatrix::scalar(total / labels.len() as f64);
        self.push(v, Op::SoftmaxCrossEntropy(logits, labels))
    }

    pub fn bce_with_logits(&mut self, logits: Var, targets: &'g [f64]) -> Var {
        let m = &self.values[logits.0];
        assert_eq!(m.cols(), 1, "logits must be a column");
        assert_eq!(m.rows(), targets.len(), "one target per logit");
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let x = m.get(i, 0);
            total += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        }
        let v = DenseMatrix::scalar(total / targets.len() as f64);
        self.push(v, Op::BceWithLogits(logits, targets))
    }

    pub fn nll_selected(&mut self, q: Var, ids: &'g [u32], labels: &'g [u32]) -> Var {
        assert_eq!(ids.len(), labels.len(), "one label per selected node");
        assert!(!ids.is_empty(), "selected node set is empty");
        let m = &self.values[q.0];
        let mut total = 0.0;
        for (&i, &y) in ids.iter().zip(labels) {
            total -= m.get(i as usize, y as usize).max(LOG_CLAMP).ln();
        }
        let v = DenseMatrix::scalar(total / ids.len() as f64);
        self.push(v, Op::NllSelected { q, ids, labels })
    }

    pub fn structure_bce(&mut self, scores: Var, target: &'g CsrMatrix) -> Var {
        let s = &self.values[scores.0];
        let n = s.rows();
        assert_eq!(s.shape(), (n, n), "score matrix must be square");
        assert_eq!(target.n(), n, "target size mismatch");
        let mut total = 0.0;
        for i in 0..n {
            let cols = target.row_cols(i);
            let mut pos = 0usize;
            for j in 0..n {
                let is_edge = pos < cols.len() && cols[pos] == j;
                if is_edge {
                    pos += 1;
                }
                let sij = if i == j { 1.0 } else { s.get(i, j) };
                let p = sij.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
                total += if is_edge { -p.ln() } else { -(1.0 - p).ln() };
            }
        }
        let v = DenseMatrix::scalar(total / (n * n) as f64);
        self.push(v, Op::StructureBce(scores, target))
    }

    /// `KL(p ‖ q) / N` with `p` held constant. The training loop snapshots
    /// `p` from the current assignment via [`sharpen_target`] each epoch, so
    /// no gradient flows through the target.
    pub fn kl_fixed_target(&mut self, q: Var, p: DenseMatrix) -> Var {
        let m = &self.values[q.0];
        assert_eq!(m.shape(), p.shape(), "target shape mismatch");
        let n = m.rows() as f64;
        let mut total = 0.0;
        for (pv, qv) in p.data().iter().zip(m.data()) {
            if *pv > 0.0 {
                total += pv * (pv.max(LOG_CLAMP).ln() - qv.max(LOG_CLAMP).ln());
            }
        }
        let v = DenseMatrix::scalar(total / n);
        self.push(v, Op::KlFixedTarget(q, p))
    }

    /// Convenience for the training loop: snapshots the sharpened target
    /// from the current value of `q` and scores KL against it.
    pub fn kl_self_target(&mut self, q: Var) -> Var {
        let p = sharpen_target(&self.values[q.0]);
        self.kl_fixed_target(q, p)
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let mut total = 0.0;
        for &(t, c) in &terms {
            total += c * self.values[t.0].as_scalar();
        }
        self.push(DenseMatrix::scalar(total), Op::WeightedSum(terms))
    }

    /// Backpropagates from a scalar node. Interior gradients are dropped as
    /// soon as they are consumed; leaf gradients are kept for extraction.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.values[loss.0].shape(),
            (1, 1),
            "backward starts from a scalar"
        );
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; self.values.len()];
        grads[loss.0] = Some(DenseMatrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &self.ops[idx] {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    if self.wants_grad(*a) {
                        let da = g.matmul_nt(&self.values[b.0]).expect("backward matmul");
                        acc(&mut grads, *a, da);
                    }
                    if self.wants_grad(*b) {
                        let db = self.values[a.0].matmul_tn(&g).expect("backward matmul");
                        acc(&mut grads, *b, db);
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.wants_grad(*a) {
                        let da = g.matmul(&self.values[b.0]).expect("backward matmul_nt");
                        acc(&mut grads, *a, da);
                    }
                    if self.wants_grad(*b) {
                        let db = g.matmul_tn(&self.values[a.0]).expect("backward matmul_nt");
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Spmm(s, b) => {
                    // relies on s being symmetric
                    if self.wants_grad(*b) {
                        let db = spmm(s, &g).expect("backward spmm");
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.scale(-1.0));
                    acc(&mut grads, *a, g);
                }
                Op::Hadamard(a, b) => {
                    let da = g.hadamard(&self.values[b.0]).expect("backward hadamard");
                    let db = g.hadamard(&self.values[a.0]).expect("backward hadamard");
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Scale(a, c) => {
                    acc(&mut grads, *a, g.scale(*c));
                }
                Op::AddRowBroadcast(a, row) => {
                    let mut drow = DenseMatrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, &x) in drow.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *row, drow);
                    acc(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let da = g
                        .hadamard(&self.values[idx].map(|y| if y > 0.0 { 1.0 } else { 0.0 }))
                        .expect("backward relu");
                    acc(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let da = g
                        .hadamard(&self.values[idx].map(|y| y * (1.0 - y)))
                        .expect("backward sigmoid");
                    acc(&mut grads, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.values[idx];
                    let mut da = DenseMatrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let dot: f64 = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for (k, o) in da.row_mut(i).iter_mut().enumerate() {
                            *o = yr[k] * (gr[k] - dot);
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::MeanRows(a) => {
                    let m = &self.values[a.0];
                    let n = m.rows() as f64;
                    let mut da = DenseMatrix::zeros(m.rows(), m.cols());
                    for i in 0..m.rows() {
                        for (o, &x) in da.row_mut(i).iter_mut().zip(g.row(0)) {
                            *o = x / n;
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::PairDot(z, pairs) => {
                    let m = &self.values[z.0];
                    let mut dz = DenseMatrix::zeros(m.rows(), m.cols());
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        let gp = g.get(p, 0);
                        let (i, j) = (i as usize, j as usize);
                        for k in 0..m.cols() {
                            dz.set(i, k, dz.get(i, k) + gp * m.get(j, k));
                            dz.set(j, k, dz.get(j, k) + gp * m.get(i, k));
                        }
                    }
                    acc(&mut grads, *z, dz);
                }
                Op::PairMul(z, pairs) => {
                    let m = &self.values[z.0];
                    let mut dz = DenseMatrix::zeros(m.rows(), m.cols());
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        let (i, j) = (i as usize, j as usize);
                        for k in 0..m.cols() {
                            let gp = g.get(p, k);
                            dz.set(i, k, dz.get(i, k) + gp * m.get(j, k));
                            dz.set(j, k, dz.get(j, k) + gp * m.get(i, k));
                        }
                    }
                    acc(&mut grads, *z, dz);
                }
                Op::PairAbsDiff(z, pairs) => {
                    let m = &self.values[z.0];
                    let mut dz = DenseMatrix::zeros(m.rows(), m.cols());
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        let (i, j) = (i as usize, j as usize);
                        for k in 0..m.cols() {
                            let s = (m.get(i, k) - m.get(j, k)).signum_or_zero();
                            let gp = g.get(p, k) * s;
                            dz.set(i, k, dz.get(i, k) + gp);
                            dz.set(j, k, dz.get(j, k) - gp);
                        }
                    }
                    acc(&mut grads, *z, dz);
                }
                Op::Fuse { experts, gates } => {
                    let gm = &self.values[gates.0];
                    let (n, _) = g.shape();
                    let mut dgates = DenseMatrix::zeros(gm.rows(), gm.cols());
                    for (k, e) in experts.iter().enumerate() {
                        let ev = &self.values[e.0];
                        let mut de = DenseMatrix::zeros(ev.rows(), ev.cols());
                        for i in 0..n {
                            let w = gm.get(i, k);
                            let gr = g.row(i);
                            let er = ev.row(i);
                            let mut dot = 0.0;
                            for (c, o) in de.row_mut(i).iter_mut().enumerate() {
                                *o = w * gr[c];
                                dot += gr[c] * er[c];
                            }
                            dgates.set(i, k, dot);
                        }
                        acc(&mut grads, *e, de);
                    }
                    acc(&mut grads, *gates, dgates);
                }
                Op::SoftAssign { z, centers } => {
                    let (dz, dc) =
                        soft_assign_backward(&self.values[z.0], &self.values[centers.0], &g);
                    if self.wants_grad(*z) {
                        acc(&mut grads, *z, dz);
                    }
                    if self.wants_grad(*centers) {
                        acc(&mut grads, *centers, dc);
                    }
                }
                Op::MinMaxScaleCols(a) => {
                    let m = &self.values[a.0];
                    let (mins, maxs) = col_min_max(m);
                    let mut da = DenseMatrix::zeros(m.rows(), m.cols());
                    for j in 0..m.cols() {
                        let rng = maxs[j] - mins[j];
                        if rng == 0.0 {
                            continue;
                        }
                        let (mut imin, mut imax) = (0usize, 0usize);
                        for i in 0..m.rows() {
                            if m.get(i, j) < m.get(imin, j) {
                                imin = i;
                            }
                            if m.get(i, j) > m.get(imax, j) {
                                imax = i;
                            }
                        }
                        let mut d_min = 0.0;
                        let mut d_max = 0.0;
                        for i in 0..m.rows() {
                            let gij = g.get(i, j);
                            da.set(i, j, da.get(i, j) + gij / rng);
                            d_min += gij * (m.get(i, j) - maxs[j]) / (rng * rng);
                            d_max += gij * (mins[j] - m.get(i, j)) / (rng * rng);
                        }
                        da.set(imin, j, da.get(imin, j) + d_min);
                        da.set(imax, j, da.get(imax, j) + d_max);
                    }
                    acc(&mut grads, *a, da);
                }
                Op::RowNormalize(a) => {
                    let m = &self.values[a.0];
                    let u = &self.values[idx];
                    let mut da = DenseMatrix::zeros(m.rows(), m.cols());
                    for i in 0..m.rows() {
                        let norm = row_norm(m.row(i));
                        if norm == 0.0 {
                            continue;
                        }
                        let (ur, gr) = (u.row(i), g.row(i));
                        let dot: f64 = ur.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for (k, o) in da.row_mut(i).iter_mut().enumerate() {
                            *o = (gr[k] - dot * ur[k]) / norm;
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::SoftmaxCrossEntropy(logits, labels) => {
                    let m = &self.values[logits.0];
                    let scale = g.as_scalar() / labels.len() as f64;
                    let mut da = DenseMatrix::zeros(m.rows(), m.cols());
                    for (i, &y) in labels.iter().enumerate() {
                        let mut row = m.row(i).to_vec();
                        softmax_row_in_place(&mut row);
                        for (k, o) in da.row_mut(i).iter_mut().enumerate() {
                            let target = if k == y as usize { 1.0 } else { 0.0 };
                            *o = scale * (row[k] - target);
                        }
                    }
                    acc(&mut grads, *logits, da);
                }
                Op::BceWithLogits(logits, targets) => {
                    let m = &self.values[logits.0];
                    let scale = g.as_scalar() / targets.len() as f64;
                    let mut da = DenseMatrix::zeros(m.rows(), 1);
                    for (i, &t) in targets.iter().enumerate() {
                        da.set(i, 0, scale * (sigmoid(m.get(i, 0)) - t));
                    }
                    acc(&mut grads, *logits, da);
                }
                Op::NllSelected { q, ids, labels } => {
                    let m = &self.values[q.0];
                    let scale = g.as_scalar() / ids.len() as f64;
                    let mut da = DenseMatrix::zeros(m.rows(), m.cols());
                    for (&i, &y) in ids.iter().zip(*labels) {
                        let (i, y) = (i as usize, y as usize);
                        let v = m.get(i, y);
                        if v > LOG_CLAMP {
                            da.set(i, y, da.get(i, y) - scale / v);
                        }
                    }
                    acc(&mut grads, *q, da);
                }
                Op::StructureBce(scores, target) => {
                    let s = &self.values[scores.0];
                    let n = s.rows();
                    let scale = g.as_scalar() / (n * n) as f64;
                    let mut da = DenseMatrix::zeros(n, n);
                    for i in 0..n {
                        let cols = target.row_cols(i);
                        let mut pos = 0usize;
                        for j in 0..n {
                            let is_edge = pos < cols.len() && cols[pos] == j;
                            if is_edge {
                                pos += 1;
                            }
                            if i == j {
                                continue; // diagonal fixed at 1, no gradient
                            }
                            let sij = s.get(i, j);
                            let mut d = 0.0;
                            if is_edge && sij > LOG_CLAMP {
                                d -= 1.0 / sij;
                            }
                            if !is_edge && sij < 1.0 - LOG_CLAMP {
                                d += 1.0 / (1.0 - sij);
                            }
                            da.set(i, j, scale * d);
                        }
                    }
                    acc(&mut grads, *scores, da);
                }
                Op::KlFixedTarget(q, p) => {
                    let m = &self.values[q.0];
                    let scale = g.as_scalar() / m.rows() as f64;
                    let mut da = DenseMatrix::zeros(m.rows(), m.cols());
                    for (k, (pv, qv)) in p.data().iter().zip(m.data()).enumerate() {
                        if *qv > LOG_CLAMP {
                            da.data_mut()[k] = -scale * pv / qv;
                        }
                    }
                    acc(&mut grads, *q, da);
                }
                Op::WeightedSum(terms) => {
                    let gs = g.as_scalar();
                    for &(t, c) in terms {
                        acc(&mut grads, t, DenseMatrix::scalar(gs * c));
                    }
                }
            }
        }
        Gradients { grads }
    }
}

/// Leaf handles for every parameter of a [`ParameterSet`] on one tape.
pub struct BoundParams {
    entries: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
            .1
    }

    /// Accumulates tape gradients back into the parameter gradient buffers.
    pub fn write_grads(&self, grads: &Gradients, params: &mut ParameterSet) {
        for (name, var) in &self.entries {
            if let Some(g) = grads.get(*var) {
                params.grad_mut(name).add_assign_scaled(g, 1.0);
            }
        }
    }
}

/// Snapshots every parameter value as a tape leaf.
pub fn bind_params<'g>(tape: &mut Tape<'g>, params: &ParameterSet) -> BoundParams {
    let entries = params
        .iter()
        .map(|p| (p.name.clone(), tape.leaf(p.value.clone())))
        .collect();
    BoundParams { entries }
}

fn acc(grads: &mut [Option<DenseMatrix>], v: Var, delta: DenseMatrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign_scaled(&delta, 1.0),
        slot @ None => *slot = Some(delta),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn col_min_max(m: &DenseMatrix) -> (Vec<f64>, Vec<f64>) {
    let mut mins = vec![f64::INFINITY; m.cols()];
    let mut maxs = vec![f64::NEG_INFINITY; m.cols()];
    for i in 0..m.rows() {
        for (j, &v) in m.row(i).iter().enumerate() {
            if v < mins[j] {
                mins[j] = v;
            }
            if v > maxs[j] {
                maxs[j] = v;
            }
        }
    }
    (mins, maxs)
}

/// Plain (tape-free) student-t soft assignment, shared with inference paths.
pub fn soft_assign_forward(z: &DenseMatrix, centers: &DenseMatrix) -> DenseMatrix {
    assert_eq!(z.cols(), centers.cols(), "embedding/center width mismatch");
    let (n, c) = (z.rows(), centers.rows());
    let mut q = DenseMatrix::zeros(n, c);
    for i in 0..n {
        let zi = z.row(i);
        let mut sum = 0.0;
        for j in 0..c {
            let d2: f64 = zi
                .iter()
                .zip(centers.row(j))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            let kernel = 1.0 / (1.0 + d2);
            q.set(i, j, kernel);
            sum += kernel;
        }
        for v in q.row_mut(i) {
            *v /= sum;
        }
    }
    q
}

fn soft_assign_backward(
    z: &DenseMatrix,
    centers: &DenseMatrix,
    g: &DenseMatrix,
) -> (DenseMatrix, DenseMatrix) {
    let (n, c) = (z.rows(), centers.rows());
    let d = z.cols();
    let mut dz = DenseMatrix::zeros(n, d);
    let mut dc = DenseMatrix::zeros(c, d);
    let mut kernel = vec![0.0; c];
    for i in 0..n {
        let zi = z.row(i);
        let mut sum = 0.0;
        for j in 0..c {
            let d2: f64 = zi
                .iter()
                .zip(centers.row(j))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            kernel[j] = 1.0 / (1.0 + d2);
            sum += kernel[j];
        }
        // dL/dkernel_j = (g_ij - Σ_j' g_ij' q_ij') / sum, with q = kernel/sum
        let gdotq: f64 = (0..c).map(|j| g.get(i, j) * kernel[j] / sum).sum();
        for j in 0..c {
            let dl_dk = (g.get(i, j) - gdotq) / sum;
            // dkernel/dz_i = -2 kernel² (z_i - c_j)
            let t = -2.0 * kernel[j] * kernel[j] * dl_dk;
            let cj = centers.row(j);
            for k in 0..d {
                let diff = zi[k] - cj[k];
                dz.set(i, k, dz.get(i, k) + t * diff);
                dc.set(j, k, dc.get(j, k) - t * diff);
            }
        }
    }
    (dz, dc)
}

/// Sharpened self-training target: `p_ij ∝ q_ij² / Σ_i q_ij`, renormalized
/// per row.
pub fn sharpen_target(q: &DenseMatrix) -> DenseMatrix {
    let (n, c) = q.shape();
    let mut freq = vec![0.0; c];
    for i in 0..n {
        for (j, f) in freq.iter_mut().enumerate() {
            *f += q.get(i, j);
        }
    }
    let mut p = DenseMatrix::zeros(n, c);
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..c {
            let w = if freq[j] > 0.0 {
                q.get(i, j) * q.get(i, j) / freq[j]
            } else {
                0.0
            };
            p.set(i, j, w);
            sum += w;
        }
        if sum > 0.0 {
            for v in p.row_mut(i) {
                *v /= sum;
            }
        }
    }
    p
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}
