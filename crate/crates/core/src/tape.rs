//! Reverse-mode automatic differentiation over a define-by-run tape.
//!
//! The tape records one node per operation; node ids are handed out in
//! topological order, so a single reverse sweep computes exact gradients.
//! Tapes are cheap and rebuilt for every forward pass (the sharpness-aware
//! optimizer needs two independent passes per step).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{argmax_row, log_softmax_row, softmax_row, Tensor, EPS_NORM};

/// Index of a node on its tape.
pub type NodeId = usize;

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Debug)]
enum Op {
    Const,
    Param(String),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Matrix [B, D] plus a [D] row vector added to every row.
    AddRowBroadcast(NodeId, NodeId),
    /// C = A · B with A [m, k], B [k, n].
    MatMul(NodeId, NodeId),
    /// C = A · Bᵀ with A [m, k], B [n, k]; the natural layout for
    /// weight matrices stored as [out, in].
    MatMulNt(NodeId, NodeId),
    Relu(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    /// Row-wise x / ‖x‖₂; norms recomputed from the stored input in backward.
    L2Normalize(NodeId),
    /// out[i] = input[i, idx[i]].
    RowGather(NodeId, Vec<usize>),
    /// out[i] = max_k input[i, k]; argmax (lowest index on ties) frozen at
    /// forward time so backward routes to exactly one entry.
    RowMax(NodeId, Vec<usize>),
    /// Mean pairwise ranking hinge: for each pair (i, j),
    /// max(0, |c_i − c_j| − sign(c_i − c_j)·(s_i − s_j)) with sign(0) = 0.
    /// c values are constants; gradient flows into s only.
    CrlPairs {
        s: NodeId,
        c: Vec<f64>,
        pairs: Vec<(usize, usize)>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// A recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value computed at `id`.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    fn check_input(&self, id: NodeId, op: &'static str) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(Error::TapeCorruption(format!(
                "{op}: input id {id} not yet on tape"
            )));
        }
        Ok(())
    }

    /// Record a constant: no gradient is tracked through it.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Const, t)
    }

    /// Record a named trainable parameter.
    pub fn param(&mut self, name: &str, t: Tensor) -> NodeId {
        self.push(Op::Param(name.to_string()), t)
    }

    fn binary_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.check_input(a, op_name)?;
        self.check_input(b, op_name)?;
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: op_name,
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check_input(a, "scale")?;
        let ta = &self.nodes[a].value;
        let data = ta.data().iter().map(|&x| c * x).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Scale(a, c), value))
    }

    /// `a` is `[B, D]`, `b` is `[D]`; adds `b` to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_input(a, "add_row_broadcast")?;
        self.check_input(b, "add_row_broadcast")?;
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let mismatch = |detail: String| Error::ShapeMismatch {
            op: "add_row_broadcast",
            detail,
        };
        if ta.shape().len() != 2 || tb.shape().len() != 1 {
            return Err(mismatch(format!(
                "need [B,D] + [D], got {:?} + {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
        if tb.shape()[0] != cols {
            return Err(mismatch(format!("row width {} vs bias {}", cols, tb.shape()[0])));
        }
        let mut data = ta.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += tb.data()[c];
            }
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(Op::AddRowBroadcast(a, b), value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_input(a, "matmul")?;
        self.check_input(b, "matmul")?;
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} · {:?}", ta.shape(), tb.shape()),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let value = mat_mul(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], value)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_input(a, "matmul_nt")?;
        self.check_input(b, "matmul_nt")?;
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                detail: format!("{:?} · {:?}ᵀ", ta.shape(), tb.shape()),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += ta.data()[i * k + t] * tb.data()[j * k + t];
                }
                data[i * n + j] = acc;
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::MatMulNt(a, b), value))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_input(a, "relu")?;
        let ta = &self.nodes[a].value;
        let data = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Relu(a), value))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_input(a, "log")?;
        let ta = &self.nodes[a].value;
        let data = ta.data().iter().map(|&x| x.ln()).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Log(a), value))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_input(a, "exp")?;
        let ta = &self.nodes[a].value;
        let data = ta.data().iter().map(|&x| x.exp()).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Exp(a), value))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_input(a, "sum")?;
        let total: f64 = self.nodes[a].value.data().iter().sum();
        Ok(self.push(Op::Sum(a), Tensor::scalar(total)))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_input(a, "mean")?;
        let ta = &self.nodes[a].value;
        if ta.is_empty() {
            return Err(Error::EmptyInput("mean"));
        }
        let total: f64 = ta.data().iter().sum();
        let value = Tensor::scalar(total / ta.len() as f64);
        Ok(self.push(Op::Mean(a), value))
    }

    fn rowwise(
        &mut self,
        a: NodeId,
        op_name: &'static str,
        f: impl Fn(&[f64]) -> Result<Vec<f64>>,
        op: Op,
    ) -> Result<NodeId> {
        self.check_input(a, op_name)?;
        let ta = &self.nodes[a].value;
        let (rows, cols) = ta.as_matrix_dims().map_err(|_| Error::ShapeMismatch {
            op: op_name,
            detail: format!("need 1-D or 2-D, got {:?}", ta.shape()),
        })?;
        if cols == 0 {
            return Err(Error::EmptyInput(op_name));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            data.extend(f(&ta.data()[r * cols..(r + 1) * cols])?);
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(op, value))
    }

    /// Row-wise stable softmax; 1-D input is a single row.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.rowwise(a, "softmax", |row| Ok(softmax_row(row)), Op::Softmax(a))
    }

    /// Row-wise stable log-softmax.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.rowwise(a, "log_softmax", |row| Ok(log_softmax_row(row)), Op::LogSoftmax(a))
    }

    /// Row-wise x / ‖x‖₂. Rows with norm ≤ EPS_NORM are degenerate.
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.rowwise(
            a,
            "l2_normalize",
            |row| {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm <= EPS_NORM {
                    return Err(Error::DegenerateVector {
                        norm,
                        min: EPS_NORM,
                    });
                }
                Ok(row.iter().map(|&v| v / norm).collect())
            },
            Op::L2Normalize(a),
        )
    }

    /// out[i] = a[i, indices[i]] for a `[B, K]` input.
    pub fn row_gather(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        self.check_input(a, "row_gather")?;
        let ta = &self.nodes[a].value;
        let mismatch = |detail: String| Error::ShapeMismatch {
            op: "row_gather",
            detail,
        };
        if ta.shape().len() != 2 {
            return Err(mismatch(format!("need [B,K], got {:?}", ta.shape())));
        }
        let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
        if indices.len() != rows {
            return Err(mismatch(format!("{} indices for {} rows", indices.len(), rows)));
        }
        let mut data = Vec::with_capacity(rows);
        for (r, &ix) in indices.iter().enumerate() {
            if ix >= cols {
                return Err(mismatch(format!("index {} out of width {}", ix, cols)));
            }
            data.push(ta.data()[r * cols + ix]);
        }
        let value = Tensor::new(vec![rows], data)?;
        Ok(self.push(Op::RowGather(a, indices.to_vec()), value))
    }

    /// out[i] = max_k a[i, k]; ties resolve to the lowest column index.
    pub fn row_max(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_input(a, "row_max")?;
        let ta = &self.nodes[a].value;
        if ta.shape().len() != 2 || ta.shape()[1] == 0 {
            return Err(Error::ShapeMismatch {
                op: "row_max",
                detail: format!("need non-empty [B,K], got {:?}", ta.shape()),
            });
        }
        let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
        let mut data = Vec::with_capacity(rows);
        let mut arg = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &ta.data()[r * cols..(r + 1) * cols];
            let am = argmax_row(row);
            arg.push(am);
            data.push(row[am]);
        }
        let value = Tensor::new(vec![rows], data)?;
        Ok(self.push(Op::RowMax(a, arg), value))
    }

    /// Mean over `pairs` of the correctness-ranking hinge
    /// max(0, |c_i − c_j| − sign(c_i − c_j)·(s_i − s_j)), sign(0) = 0.
    /// The targets `c` are constants; only `s` receives gradient.
    pub fn crl_pairs(&mut self, s: NodeId, c: &[f64], pairs: &[(usize, usize)]) -> Result<NodeId> {
        self.check_input(s, "crl_pairs")?;
        let ts = &self.nodes[s].value;
        let mismatch = |detail: String| Error::ShapeMismatch {
            op: "crl_pairs",
            detail,
        };
        if ts.shape().len() != 1 {
            return Err(mismatch(format!("scores must be 1-D, got {:?}", ts.shape())));
        }
        let n = ts.shape()[0];
        if c.len() != n {
            return Err(mismatch(format!("{} targets for {} scores", c.len(), n)));
        }
        if pairs.is_empty() {
            return Err(Error::EmptyInput("crl_pairs"));
        }
        for &(i, j) in pairs {
            if i >= n || j >= n {
                return Err(mismatch(format!("pair ({i},{j}) out of {n} samples")));
            }
        }
        let sv = ts.data();
        let total: f64 = pairs
            .iter()
            .map(|&(i, j)| crl_hinge(c[i], c[j], sv[i], sv[j]))
            .sum();
        let value = Tensor::scalar(total / pairs.len() as f64);
        Ok(self.push(
            Op::CrlPairs {
                s,
                c: c.to_vec(),
                pairs: pairs.to_vec(),
            },
            value,
        ))
    }

    /// Reverse sweep from a scalar `loss` node. Returns exact gradients for
    /// every parameter registered on the tape; parameters the loss does not
    /// reach get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap> {
        self.check_input(loss, "backward")?;
        let lt = &self.nodes[loss].value;
        if !lt.is_scalar() {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss] = Some(Tensor::scalar(1.0));

        for id in (0..self.nodes.len()).rev() {
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Const | Op::Param(_) => {
                    adj[id] = Some(g); // keep for collection below
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, negate(&g));
                }
                Op::Mul(a, b) => {
                    let ga = elementwise(&g, &self.nodes[*b].value, |x, y| x * y);
                    let gb = elementwise(&g, &self.nodes[*a].value, |x, y| x * y);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Scale(a, c) => {
                    let ga = map(&g, |x| c * x);
                    accumulate(&mut adj, *a, ga);
                }
                Op::AddRowBroadcast(a, b) => {
                    let cols = self.nodes[*a].value.shape()[1];
                    let rows = self.nodes[*a].value.shape()[0];
                    let mut gb = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += g.data()[r * cols + c];
                        }
                    }
                    accumulate(&mut adj, *a, g);
                    accumulate(&mut adj, *b, Tensor::from_vec(gb));
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    // dA = g · Bᵀ ; dB = Aᵀ · g
                    let ga = mat_mul_bt(g.data(), tb.data(), m, n, k);
                    let gb = mat_mul_at(ta.data(), g.data(), m, k, n);
                    accumulate(&mut adj, *a, Tensor::new(vec![m, k], ga).expect("shape"));
                    accumulate(&mut adj, *b, Tensor::new(vec![k, n], gb).expect("shape"));
                }
                Op::MatMulNt(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[0];
                    // C = A · Bᵀ  ⇒  dA = g · B ; dB = gᵀ · A
                    let ga = mat_mul(g.data(), tb.data(), m, n, k);
                    let gb = mat_mul_at(g.data(), ta.data(), m, n, k);
                    accumulate(&mut adj, *a, Tensor::new(vec![m, k], ga).expect("shape"));
                    accumulate(&mut adj, *b, Tensor::new(vec![n, k], gb).expect("shape"));
                }
                Op::Relu(a) => {
                    let ga = elementwise(&g, &self.nodes[*a].value, |gv, x| {
                        if x > 0.0 {
                            gv
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut adj, *a, ga);
                }
                Op::Log(a) => {
                    let ga = elementwise(&g, &self.nodes[*a].value, |gv, x| gv / x);
                    accumulate(&mut adj, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = elementwise(&g, &self.nodes[id].value, |gv, y| gv * y);
                    accumulate(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    let ta = &self.nodes[*a].value;
                    let ga = Tensor::new(ta.shape().to_vec(), vec![gv; ta.len()]).expect("shape");
                    accumulate(&mut adj, *a, ga);
                }
                Op::Mean(a) => {
                    let ta = &self.nodes[*a].value;
                    let gv = g.data()[0] / ta.len() as f64;
                    let ga = Tensor::new(ta.shape().to_vec(), vec![gv; ta.len()]).expect("shape");
                    accumulate(&mut adj, *a, ga);
                }
                Op::Softmax(a) => {
                    // dx = y ⊙ (g − ⟨g, y⟩) per row, with y the stored output.
                    let y = &self.nodes[id].value;
                    let (rows, cols) = y.as_matrix_dims().expect("validated at forward");
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let yr = &y.data()[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for c in 0..cols {
                            ga[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    let shape = self.nodes[*a].value.shape().to_vec();
                    accumulate(&mut adj, *a, Tensor::new(shape, ga).expect("shape"));
                }
                Op::LogSoftmax(a) => {
                    // dx = g − softmax(x) · Σg per row; softmax = exp(stored output).
                    let y = &self.nodes[id].value;
                    let (rows, cols) = y.as_matrix_dims().expect("validated at forward");
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let yr = &y.data()[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let gsum: f64 = gr.iter().sum();
                        for c in 0..cols {
                            ga[r * cols + c] = gr[c] - yr[c].exp() * gsum;
                        }
                    }
                    let shape = self.nodes[*a].value.shape().to_vec();
                    accumulate(&mut adj, *a, Tensor::new(shape, ga).expect("shape"));
                }
                Op::L2Normalize(a) => {
                    // y = x/r ⇒ dx = (g − y·⟨y, g⟩)/r per row.
                    let x = &self.nodes[*a].value;
                    let y = &self.nodes[id].value;
                    let (rows, cols) = y.as_matrix_dims().expect("validated at forward");
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let xr = &x.data()[r * cols..(r + 1) * cols];
                        let yr = &y.data()[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for c in 0..cols {
                            ga[r * cols + c] = (gr[c] - yr[c] * dot) / norm;
                        }
                    }
                    let shape = x.shape().to_vec();
                    accumulate(&mut adj, *a, Tensor::new(shape, ga).expect("shape"));
                }
                Op::RowGather(a, indices) => {
                    let ta = &self.nodes[*a].value;
                    let cols = ta.shape()[1];
                    let mut ga = vec![0.0; ta.len()];
                    for (r, &ix) in indices.iter().enumerate() {
                        ga[r * cols + ix] += g.data()[r];
                    }
                    accumulate(
                        &mut adj,
                        *a,
                        Tensor::new(ta.shape().to_vec(), ga).expect("shape"),
                    );
                }
                Op::RowMax(a, arg) => {
                    let ta = &self.nodes[*a].value;
                    let cols = ta.shape()[1];
                    let mut ga = vec![0.0; ta.len()];
                    for (r, &am) in arg.iter().enumerate() {
                        ga[r * cols + am] += g.data()[r];
                    }
                    accumulate(
                        &mut adj,
                        *a,
                        Tensor::new(ta.shape().to_vec(), ga).expect("shape"),
                    );
                }
                Op::CrlPairs { s, c, pairs } => {
                    let sv = self.nodes[*s].value.data();
                    let scale = g.data()[0] / pairs.len() as f64;
                    let mut gs = vec![0.0; sv.len()];
                    for &(i, j) in pairs {
                        let sgn = sign(c[i] - c[j]);
                        // Hinge active strictly above zero; boundary has
                        // subgradient 0 by convention.
                        if crl_hinge(c[i], c[j], sv[i], sv[j]) > 0.0 {
                            gs[i] -= sgn * scale;
                            gs[j] += sgn * scale;
                        }
                    }
                    accumulate(&mut adj, *s, Tensor::from_vec(gs));
                }
            }
        }

        let mut grads = GradMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = adj[id]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                grads.insert(name.clone(), g);
            }
        }
        Ok(grads)
    }
}

/// sign with sign(0) = 0.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One ranking-hinge term: max(0, |Δc| − sign(Δc)·Δs).
pub fn crl_hinge(c_i: f64, c_j: f64, s_i: f64, s_j: f64) -> f64 {
    let dc = c_i - c_j;
    (dc.abs() - sign(dc) * (s_i - s_j)).max(0.0)
}

fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut adj[id] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn negate(t: &Tensor) -> Tensor {
    map(t, |x| -x)
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&x| f(x)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

/// C[m,n] = A[m,k] · B[k,n]
fn mat_mul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[t * n + j];
            }
        }
    }
    out
}

/// C[m,k] = A[m,n] · B[k,n]ᵀ
fn mat_mul_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            let mut acc = 0.0;
            for t in 0..n {
                acc += a[i * n + t] * b[j * n + t];
            }
            out[i * k + j] = acc;
        }
    }
    out
}

/// C[k,n] = A[m,k]ᵀ · B[m,n]
fn mat_mul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for t in 0..m {
        for i in 0..k {
            let av = a[t * k + i];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[t * n + j];
            }
        }
    }
    out
}

/// Central finite-difference gradients of an arbitrary scalar function of
/// named tensors. Completely independent of the tape: the closure is
/// re-evaluated at coordinate-wise perturbed inputs. Intended as the
/// ground-truth oracle for gradient tests.
pub fn finite_difference_grads<F>(params: &BTreeMap<String, Tensor>, h: f64, f: F) -> GradMap
where
    F: Fn(&BTreeMap<String, Tensor>) -> f64,
{
    let mut out = GradMap::new();
    for (name, tensor) in params {
        let mut grad = vec![0.0; tensor.len()];
        for i in 0..tensor.len() {
            let mut bumped = params.clone();
            bumped.get_mut(name).unwrap().data_mut()[i] += h;
            let plus = f(&bumped);
            bumped.get_mut(name).unwrap().data_mut()[i] -= 2.0 * h;
            let minus = f(&bumped);
            grad[i] = (plus - minus) / (2.0 * h);
        }
        out.insert(
            name.clone(),
            Tensor::new(tensor.shape().to_vec(), grad).expect("shape preserved"),
        );
    }
    out
}

/// Largest relative discrepancy between two gradient maps, where the
/// relative scale is max(|a|, |b|, 1).
pub fn max_relative_error(a: &GradMap, b: &GradMap) -> f64 {
    let mut worst = 0.0f64;
    for (name, ta) in a {
        let tb = &b[name];
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let denom = x.abs().max(y.abs()).max(1.0);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let u1: f64 = rng.random::<f64>().max(1e-12);
                let u2: f64 = rng.random();
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::from_vec(vec![3.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["w"].data(), &[6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::from_vec(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::scalar(5.0));
        let loss = tape.scale(c, 2.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        // w never touches the loss: zero gradient of the right shape.
        assert_eq!(grads["w"].data(), &[0.0, 0.0]);
        let _ = w;
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::NotScalar(_))));
    }

    #[test]
    fn two_class_cross_entropy_matches_finite_differences() {
        // loss = −log softmax(W·x + b)[target] for a random linear model.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = randn(&mut rng, &[1, 3]);
        let mut params = GradMap::new();
        params.insert("w".into(), randn(&mut rng, &[2, 3]));
        params.insert("b".into(), randn(&mut rng, &[2]));
        let target = 1usize;

        let eval = |p: &GradMap, tape: &mut Tape| -> NodeId {
            let xn = tape.constant(x.clone());
            let w = tape.param("w", p["w"].clone());
            let b = tape.param("b", p["b"].clone());
            let z = tape.matmul_nt(xn, w).unwrap();
            let z = tape.add_row_broadcast(z, b).unwrap();
            let lp = tape.log_softmax(z).unwrap();
            let picked = tape.row_gather(lp, &[target]).unwrap();
            let s = tape.sum(picked).unwrap();
            tape.scale(s, -1.0).unwrap()
        };

        let mut tape = Tape::new();
        let loss = eval(&params, &mut tape);
        let grads = tape.backward(loss).unwrap();

        let fd = finite_difference_grads(&params, 1e-5, |p| {
            let mut t = Tape::new();
            let l = eval(p, &mut t);
            t.value(l).item().unwrap()
        });
        assert!(max_relative_error(&grads, &fd) < 1e-6);
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        // One composite touching every primitive, checked at many random points.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..100 {
            let mut params = GradMap::new();
            let mut a = randn(&mut rng, &[2, 3]);
            // keep relu inputs away from the kink and log inputs positive
            for v in a.data_mut() {
                *v = v.abs() + 0.5;
            }
            params.insert("a".into(), a);
            params.insert("b".into(), randn(&mut rng, &[2, 3]));
            params.insert("w".into(), randn(&mut rng, &[4, 3]));

            let build = |p: &GradMap, tape: &mut Tape| -> NodeId {
                let a = tape.param("a", p["a"].clone());
                let b = tape.param("b", p["b"].clone());
                let w = tape.param("w", p["w"].clone());
                let s = tape.add(a, b).unwrap();
                let d = tape.sub(s, b).unwrap();
                let m = tape.mul(d, s).unwrap();
                let r = tape.relu(m).unwrap();
                let lg = tape.log(a).unwrap(); // a > 0 by construction
                let e = tape.exp(lg).unwrap();
                let mixed = tape.add(r, e).unwrap();
                let z = tape.matmul_nt(mixed, w).unwrap(); // [2,4]
                let zz = tape.matmul(z, w).unwrap(); // [2,3]
                let sm = tape.softmax(zz).unwrap();
                let ls = tape.log_softmax(zz).unwrap();
                let both = tape.add(sm, ls).unwrap();
                let nrm = tape.l2_normalize(both).unwrap();
                let mn = tape.mean(nrm).unwrap();
                let sm2 = tape.sum(zz).unwrap();
                let t = tape.scale(sm2, 0.01).unwrap();
                tape.add(mn, t).unwrap()
            };

            let mut tape = Tape::new();
            let loss = build(&params, &mut tape);
            let grads = tape.backward(loss).unwrap();
            let fd = finite_difference_grads(&params, 1e-5, |p| {
                let mut t = Tape::new();
                let l = build(p, &mut t);
                t.value(l).item().unwrap()
            });
            let err = max_relative_error(&grads, &fd);
            assert!(err < 1e-5, "trial {trial}: rel err {err}");
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut tape = Tape::new();
            let w = tape.param(
                "w",
                Tensor::new(vec![2, 3], vec![0.3, -0.7, 1.1, 0.2, 0.9, -0.4]).unwrap(),
            );
            let sm = tape.softmax(w).unwrap();
            let mx = tape.row_max(sm).unwrap();
            let loss = tape.sum(mx).unwrap();
            tape.backward(loss).unwrap()
        };
        let a = build();
        let b = build();
        assert_eq!(a["w"].data(), b["w"].data());
    }

    #[test]
    fn softmax_shift_invariance() {
        let logits = vec![0.3, -1.2, 2.0, 0.0];
        let shifted: Vec<f64> = logits.iter().map(|v| v + 123.456).collect();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(logits));
        let b = tape.constant(Tensor::from_vec(shifted));
        let pa = tape.softmax(a).unwrap();
        let pb = tape.softmax(b).unwrap();
        for (x, y) in tape.value(pa).data().iter().zip(tape.value(pb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_spec_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let p = tape.softmax(a).unwrap();
        assert!((tape.value(p).data()[0] - 0.5).abs() < 1e-15);

        let b = tape.constant(Tensor::from_vec(vec![1f64.ln(), 3f64.ln()]));
        let p = tape.softmax(b).unwrap();
        assert!((tape.value(p).data()[0] - 0.25).abs() < 1e-12);
        assert!((tape.value(p).data()[1] - 0.75).abs() < 1e-12);

        let c = tape.constant(Tensor::from_vec(vec![1000.0, 0.0]));
        let p = tape.softmax(c).unwrap();
        let v = tape.value(p).data();
        assert!(v[0] > 1.0 - 1e-12 && v[1] < 1e-12 && v.iter().all(|x| x.is_finite()));
        let sum: f64 = v.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![1.0, 0.0]));
        let n = tape.l2_normalize(a).unwrap();
        assert_eq!(tape.value(n).data(), &[1.0, 0.0]);

        let b = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let n = tape.l2_normalize(b).unwrap();
        let v = tape.value(n).data();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
        assert!((tape.value(n).l2_norm() - 1.0).abs() < 1e-12);

        let z = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        assert!(matches!(
            tape.l2_normalize(z),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::from_vec(vec![0.0, -1.0, 2.0]));
        let r = tape.relu(w).unwrap();
        let loss = tape.sum(r).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["w"].data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn row_max_gradient_routes_to_argmax() {
        let mut tape = Tape::new();
        let w = tape.param(
            "w",
            Tensor::new(vec![2, 3], vec![1.0, 5.0, 2.0, 7.0, 7.0, 0.0]).unwrap(),
        );
        let m = tape.row_max(w).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0, 7.0]);
        let loss = tape.sum(m).unwrap();
        let grads = tape.backward(loss).unwrap();
        // tie in row 1 resolves to the lowest index
        assert_eq!(grads["w"].data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn crl_pairs_values_and_gradient() {
        let mut tape = Tape::new();
        let s = tape.param("s", Tensor::from_vec(vec![0.4, 0.9]));
        let c = [0.8, 0.5];
        let loss = tape.crl_pairs(s, &c, &[(0, 1)]).unwrap();
        // max(0, 0.3 − 1·(0.4 − 0.9)) = 0.8
        assert!((tape.value(loss).item().unwrap() - 0.8).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["s"].data(), &[-1.0, 1.0]);

        // satisfied ordering ⇒ zero loss, zero gradient
        let mut tape = Tape::new();
        let s = tape.param("s", Tensor::from_vec(vec![0.9, 0.4]));
        let loss = tape.crl_pairs(s, &c, &[(0, 1)]).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["s"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn crl_gradient_matches_finite_differences_off_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = [0.9, 0.2, 0.6, 0.4];
        let pairs = [(0, 1), (1, 2), (2, 3), (3, 0)];
        for _ in 0..50 {
            let mut params = GradMap::new();
            let mut s = randn(&mut rng, &[4]);
            for v in s.data_mut() {
                *v = 0.5 + 0.4 * v.tanh();
            }
            // keep every hinge comfortably away from its boundary
            let sv = s.data().to_vec();
            let near_kink = pairs.iter().any(|&(i, j)| {
                let dc: f64 = c[i] - c[j];
                (dc.abs() - sign(dc) * (sv[i] - sv[j])).abs() < 1e-3
            });
            if near_kink {
                continue;
            }
            params.insert("s".into(), s);
            let mut tape = Tape::new();
            let sn = tape.param("s", params["s"].clone());
            let loss = tape.crl_pairs(sn, &c, &pairs).unwrap();
            let grads = tape.backward(loss).unwrap();
            let fd = finite_difference_grads(&params, 1e-6, |p| {
                let mut t = Tape::new();
                let sn = t.param("s", p["s"].clone());
                let l = t.crl_pairs(sn, &c, &pairs).unwrap();
                t.value(l).item().unwrap()
            });
            assert!(max_relative_error(&grads, &fd) < 1e-5);
        }
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = w·w + 3w ⇒ dloss/dw = 2w + 3
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::from_vec(vec![2.0]));
        let sq = tape.mul(w, w).unwrap();
        let tr = tape.scale(w, 3.0).unwrap();
        let both = tape.add(sq, tr).unwrap();
        let loss = tape.sum(both).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["w"].data(), &[7.0]);
    }

    #[test]
    fn matmul_shapes_checked() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.matmul(a, b).is_err());
        assert!(tape.matmul_nt(a, b).is_ok());
    }
}
