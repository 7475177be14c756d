use super::kernels::{self, PROB_FLOOR};
use super::Tensor;
use crate::error::{shape_mismatch, Error, Result};

/// Magnitude below which no op can overflow f64 at the sizes used here.
const TAME_LIMIT: f64 = 1e100;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddN(Vec<Var>),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Slice2d {
        src: Var,
        row0: usize,
        col0: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Cosine {
        a: Var,
        b: Var,
        norm_a: f64,
        norm_b: f64,
    },
    Stack(Vec<Var>),
    Index(Var, usize),
    CrossEntropy {
        probs: Var,
        class: usize,
        prob: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run record of executed operations.
///
/// Nodes are appended in execution order, so inputs always precede their
/// consumers. [`Tape::backward`] may run once per tape; a second call is
/// rejected with [`Error::BackwardTwice`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
    clamp_events: usize,
}

/// Gradients produced by one backward pass, indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
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

    /// Number of cross-entropy evaluations whose probability hit the clamp floor.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// A leaf that receives gradients on [`Tape::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        debug_assert!(
            value.is_finite() || !self.inputs_tame(&op),
            "non-finite output from {op:?}"
        );
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inputs small enough that no op can overflow on them, so a non-finite
    /// output would be a bug rather than arithmetic overflow.
    fn inputs_tame(&self, op: &Op) -> bool {
        op_inputs(op).iter().all(|v| {
            let t = &self.nodes[v.0].value;
            t.data().iter().all(|x| x.abs() < TAME_LIMIT)
        })
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(shape_mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(shape_mismatch("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMulNt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, rg, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_mismatch("add", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Add(a, b)))
    }

    /// Sum of several same-shaped values, accumulated left to right.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars.first().ok_or_else(|| Error::InvalidArgument {
            op: "add_n",
            reason: "no operands".into(),
        })?;
        let shape = self.shape(first).to_vec();
        let mut acc = self.value(first).data().to_vec();
        for &v in &vars[1..] {
            if self.shape(v) != shape.as_slice() {
                return Err(shape_mismatch("add_n", &shape, self.shape(v)));
            }
            for (a, b) in acc.iter_mut().zip(self.value(v).data()) {
                *a += b;
            }
        }
        let rg = self.any_grad(vars);
        Ok(self.push(Tensor::new(shape, acc)?, rg, Op::AddN(vars.to_vec())))
    }

    /// `a[n×d] + bias[d]`, broadcasting the bias over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, d) = self.dims2(a)?;
        if self.value(bias).len() != d {
            return Err(shape_mismatch("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::AddRow(a, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_mismatch("mul", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a);
        let t = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|x| x * s).collect(),
        };
        let rg = self.any_grad(&[a]);
        self.push(t, rg, Op::Scale(a, s))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = super::softmax(self.value(a), axis)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, rg, Op::Softmax(a, axis)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument {
                op: "layer_norm",
                reason: format!("eps must be positive, got {eps}"),
            });
        }
        let d = *self.shape(x).last().unwrap();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(shape_mismatch("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let n = self.value(x).len();
        let mut out = vec![0.0; n];
        let mut xhat = vec![0.0; n];
        let mut rstd = vec![0.0; n / d];
        kernels::layer_norm(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            d,
            &mut out,
            &mut xhat,
            &mut rstd,
        );
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = super::gelu(self.value(a));
        let rg = self.any_grad(&[a]);
        self.push(t, rg, Op::Gelu(a))
    }

    /// Rectangular window `[row0, row0+rows) × [col0, col0+cols)` of a 2-D value.
    pub fn slice2d(
        &mut self,
        src: Var,
        row0: usize,
        rows: usize,
        col0: usize,
        cols: usize,
    ) -> Result<Var> {
        let (m, n) = self.dims2(src)?;
        if rows == 0 || cols == 0 || row0 + rows > m || col0 + cols > n {
            return Err(Error::InvalidArgument {
                op: "slice2d",
                reason: format!(
                    "window rows {row0}..{} cols {col0}..{} outside {m}×{n}",
                    row0 + rows,
                    col0 + cols
                ),
            });
        }
        let data = self.value(src).data();
        let mut out = Vec::with_capacity(rows * cols);
        for r in row0..row0 + rows {
            out.extend_from_slice(&data[r * n + col0..r * n + col0 + cols]);
        }
        let rg = self.any_grad(&[src]);
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            rg,
            Op::Slice2d { src, row0, col0 },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut cols = None;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if *cols.get_or_insert(c) != c {
                return Err(shape_mismatch("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let cols = cols.ok_or_else(|| Error::InvalidArgument {
            op: "concat_rows",
            reason: "no operands".into(),
        })?;
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            rg,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if *rows.get_or_insert(r) != r {
                return Err(shape_mismatch("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let rows = rows.ok_or_else(|| Error::InvalidArgument {
            op: "concat_cols",
            reason: "no operands".into(),
        })?;
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            rg,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, rg, Op::Reshape(a)))
    }

    /// Cosine similarity of two same-sized values viewed as flat vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(shape_mismatch("cosine", self.shape(a), self.shape(b)));
        }
        let (c, norm_a, norm_b) = kernels::cosine(self.value(a).data(), self.value(b).data())?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::scalar(c),
            rg,
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
            },
        ))
    }

    /// Packs scalar values into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        let mut out = Vec::with_capacity(scalars.len());
        for &s in scalars {
            if !self.value(s).is_scalar() {
                return Err(Error::InvalidArgument {
                    op: "stack",
                    reason: format!("operand has shape {:?}", self.shape(s)),
                });
            }
            out.push(self.value(s).data()[0]);
        }
        if out.is_empty() {
            return Err(Error::InvalidArgument {
                op: "stack",
                reason: "no operands".into(),
            });
        }
        let rg = self.any_grad(scalars);
        Ok(self.push(Tensor::vector(out), rg, Op::Stack(scalars.to_vec())))
    }

    /// Picks one element (flat index) as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let n = self.value(a).len();
        if i >= n {
            return Err(Error::IndexOutOfRange {
                index: i,
                extent: n,
            });
        }
        let v = self.value(a).data()[i];
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::scalar(v), rg, Op::Index(a, i)))
    }

    /// `-ln(probs[class])` with the probability clamped at `1e-12`; clamps are
    /// counted in [`Tape::clamp_events`].
    pub fn cross_entropy(&mut self, probs: Var, class: usize) -> Result<Var> {
        let (loss, clamped) = super::cross_entropy(self.value(probs), class)?;
        if clamped {
            self.clamp_events += 1;
        }
        let prob = self.value(probs).data()[class].max(PROB_FLOOR);
        let rg = self.any_grad(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy { probs, class, prob },
        ))
    }

    /// Reverse pass from a scalar root. Runs at most once per tape.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if !self.value(root).is_scalar() {
            return Err(Error::NonScalarRoot(self.shape(root).to_vec()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().unwrap();
                let n = val(*b).dims2().unwrap().1;
                let bdata = val(*b).data();
                let adata = val(*a).data();
                if let Some(ga) = acc(nodes, grads, *a) {
                    kernels::matmul_nt_acc(g, bdata, ga, m, n, k);
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    kernels::matmul_tn_acc(adata, g, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                // out[m×n] = a[m×k] · b[n×k]ᵀ
                let (m, k) = val(*a).dims2().unwrap();
                let n = val(*b).dims2().unwrap().0;
                let adata = val(*a).data();
                let bdata = val(*b).data();
                if let Some(ga) = acc(nodes, grads, *a) {
                    let mut tmp = vec![0.0; m * k];
                    kernels::matmul(g, bdata, &mut tmp, m, n, k);
                    add_into(ga, &tmp);
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    kernels::matmul_tn_acc(g, adata, gb, m, n, k);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = val(*a).dims2().unwrap();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::AddN(vars) => {
                for &v in vars {
                    if let Some(gv) = acc(nodes, grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    add_into(ga, g);
                }
                let d = val(*bias).len();
                if let Some(gb) = acc(nodes, grads, *bias) {
                    for row in g.chunks_exact(d) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if let Some(ga) = acc(nodes, grads, *a) {
                    for ((x, gi), y) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * y;
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for ((x, gi), y) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * y;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    for (x, gi) in ga.iter_mut().zip(g) {
                        *x += gi * s;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::Softmax(a, axis) => {
                let y = &nodes[i].value;
                if let Some(ga) = acc(nodes, grads, *a) {
                    kernels::softmax_axis_backward(y.data(), g, ga, y.shape(), *axis);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = val(*gamma).len();
                let gam = val(*gamma).data();
                if let Some(gx) = acc(nodes, grads, *x) {
                    let mut gxhat = vec![0.0; d];
                    for (r, grow) in g.chunks_exact(d).enumerate() {
                        let hrow = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            gxhat[j] = grow[j] * gam[j];
                        }
                        let mean_g = gxhat.iter().sum::<f64>() / d as f64;
                        let mean_gh = kernels::dot(&gxhat, hrow) / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (gxhat[j] - mean_g - hrow[j] * mean_gh);
                        }
                    }
                }
                if let Some(gg) = acc(nodes, grads, *gamma) {
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = acc(nodes, grads, *beta) {
                    for grow in g.chunks_exact(d) {
                        add_into(gb, grow);
                    }
                }
            }
            Op::Gelu(a) => {
                let xv = val(*a).data();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for ((x, gi), &xi) in ga.iter_mut().zip(g).zip(xv) {
                        *x += gi * kernels::gelu_grad(xi);
                    }
                }
            }
            Op::Slice2d { src, row0, col0 } => {
                let (rows, cols) = nodes[i].value.dims2().unwrap();
                let n = val(*src).dims2().unwrap().1;
                if let Some(gs) = acc(nodes, grads, *src) {
                    for r in 0..rows {
                        let dst = &mut gs[(row0 + r) * n + col0..(row0 + r) * n + col0 + cols];
                        add_into(dst, &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    if let Some(gp) = acc(nodes, grads, p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = nodes[i].value.dims2().unwrap();
                let mut col = 0;
                for &p in parts {
                    let w = val(p).dims2().unwrap().1;
                    if let Some(gp) = acc(nodes, grads, p) {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + col..r * total + col + w],
                            );
                        }
                    }
                    col += w;
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
            } => {
                let c = nodes[i].value.data()[0];
                let (av, bv) = (val(*a).data(), val(*b).data());
                let inv = 1.0 / (norm_a * norm_b);
                if let Some(ga) = acc(nodes, grads, *a) {
                    let s = c / (norm_a * norm_a);
                    for ((x, &ai), &bi) in ga.iter_mut().zip(av).zip(bv) {
                        *x += g[0] * (bi * inv - s * ai);
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    let s = c / (norm_b * norm_b);
                    for ((x, &bi), &ai) in gb.iter_mut().zip(bv).zip(av) {
                        *x += g[0] * (ai * inv - s * bi);
                    }
                }
            }
            Op::Stack(scalars) => {
                for (k, &s) in scalars.iter().enumerate() {
                    if let Some(gs) = acc(nodes, grads, s) {
                        gs[0] += g[k];
                    }
                }
            }
            Op::Index(a, idx) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    ga[*idx] += g[0];
                }
            }
            Op::CrossEntropy { probs, class, prob } => {
                if let Some(gp) = acc(nodes, grads, *probs) {
                    gp[*class] -= g[0] / prob;
                }
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => {
            vec![*a, *b]
        }
        Op::Cosine { a, b, .. } => vec![*a, *b],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::Sum(a)
        | Op::Softmax(a, _)
        | Op::Gelu(a)
        | Op::Reshape(a)
        | Op::Index(a, _) => vec![*a],
        Op::Slice2d { src, .. } => vec![*src],
        Op::CrossEntropy { probs, .. } => vec![*probs],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::AddN(v) | Op::ConcatRows(v) | Op::ConcatCols(v) | Op::Stack(v) => v.clone(),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}


fn acc<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}
