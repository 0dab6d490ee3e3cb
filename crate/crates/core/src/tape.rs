//! Reverse-mode differentiation over batched matrix primitives.
//!
//! Every node holds a row-major matrix; a batch of points is a matrix with
//! one row per point. A [`Tape`] records the forward evaluation of a loss
//! built from the primitives below and [`gradient`] replays it backwards to
//! get the derivative with respect to a flat parameter vector.
//!
//! Supported primitives: affine maps, `tanh`, leaky ReLU, `exp`, elementwise
//! sum/difference/product, scaling, column concatenation, pairwise Euclidean
//! distances, min/max selection, sum, squared norm and L2 norm. The set is
//! closed; operands with incompatible shapes are rejected when the node is
//! recorded.
//!
//! Min and max selection propagate the adjoint to the selected entry only.
//! Ties go to the lowest index (row-major for whole-matrix reductions, the
//! first operand for [`Tape::maximum`]).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Constant,
    Param { offset: usize },
    Affine { x: Var, w: Var, b: Option<Var> },
    Tanh(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatCols(Var, Var),
    PairwiseDistance(Var, Var),
    MinAlongRows(Var),
    MinAlongCols(Var),
    MaxAll(Var),
    Maximum(Var, Var),
    Sum(Var),
    SquaredNorm(Var),
    Norm(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param { .. } => "param",
            Op::Affine { .. } => "affine",
            Op::Tanh(_) => "tanh",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Exp(_) => "exp",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ConcatCols(..) => "concat_cols",
            Op::PairwiseDistance(..) => "pairwise_distance",
            Op::MinAlongRows(_) => "min_along_rows",
            Op::MinAlongCols(_) => "min_along_cols",
            Op::MaxAll(_) => "max_all",
            Op::Maximum(..) => "maximum",
            Op::Sum(_) => "sum",
            Op::SquaredNorm(_) => "squared_norm",
            Op::Norm(_) => "norm",
        }
    }
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    /// Selected flat indices for min/max nodes.
    picks: Vec<usize>,
    needs_grad: bool,
}

/// Recording of one forward evaluation.
pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>, picks: Vec<usize>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let needs_grad = match op {
            Op::Constant => false,
            Op::Param { .. } => true,
            _ => self.inputs(op).iter().flatten().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { op, rows, cols, value, picks, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn inputs(&self, op: Op) -> [Option<Var>; 3] {
        match op {
            Op::Constant | Op::Param { .. } => [None, None, None],
            Op::Affine { x, w, b } => [Some(x), Some(w), b],
            Op::Tanh(a)
            | Op::LeakyRelu(a, _)
            | Op::Exp(a)
            | Op::Scale(a, _)
            | Op::MinAlongRows(a)
            | Op::MinAlongCols(a)
            | Op::MaxAll(a)
            | Op::Sum(a)
            | Op::SquaredNorm(a)
            | Op::Norm(a) => [Some(a), None, None],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ConcatCols(a, b)
            | Op::PairwiseDistance(a, b)
            | Op::Maximum(a, b) => [Some(a), Some(b), None],
        }
    }

    fn shape_err(op: &'static str, detail: alloc::string::String) -> Error {
        Error::Shape { op, detail }
    }

    /// A constant `rows × cols` matrix.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Self::shape_err(
                "constant",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(self.push(Op::Constant, rows, cols, data, Vec::new()))
    }

    /// The parameters `[offset, offset + rows·cols)` viewed as a row-major
    /// `rows × cols` matrix.
    pub fn param(&mut self, offset: usize, rows: usize, cols: usize) -> Result<Var> {
        let end = offset + rows * cols;
        if end > self.params.len() {
            return Err(Self::shape_err(
                "param",
                format!("slot {offset}..{end} outside {} parameters", self.params.len()),
            ));
        }
        let value = self.params[offset..end].to_vec();
        Ok(self.push(Op::Param { offset }, rows, cols, value, Vec::new()))
    }

    /// `x · wᵀ + b` with `x: n × i`, `w: o × i`, `b: 1 × o`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, i) = self.shape(x);
        let (o, wi) = self.shape(w);
        if wi != i {
            return Err(Self::shape_err("affine", format!("input {n}x{i}, weights {o}x{wi}")));
        }
        let mut out = vec![0.0; n * o];
        if let Some(b) = b {
            if self.shape(b) != (1, o) {
                return Err(Self::shape_err("affine", format!("bias must be 1x{o}")));
            }
            let bias = &self.nodes[b.0].value;
            for row in out.chunks_exact_mut(o) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(
            n,
            i,
            o,
            Operand::plain(&self.nodes[x.0].value, i),
            Operand::transposed(&self.nodes[w.0].value, i),
            beta,
            &mut out,
        );
        Ok(self.push(Op::Affine { x, w, b }, n, o, out, Vec::new()))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.shape(a);
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        self.push(op, r, c, value, Vec::new())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), math::tanh)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), math::exp)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(b) != (r, c) {
            let (br, bc) = self.shape(b);
            return Err(Self::shape_err(op.name(), format!("{r}x{c} vs {br}x{bc}")));
        }
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(op, r, c, value, Vec::new()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise maximum; ties select `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Maximum(a, b), |x, y| if x >= y { x } else { y })
    }

    /// `[a | b]` for matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Self::shape_err("concat_cols", format!("{ra} rows vs {rb} rows")));
        }
        let cols = ca + cb;
        let mut value = Vec::with_capacity(ra * cols);
        for r in 0..ra {
            value.extend_from_slice(&self.nodes[a.0].value[r * ca..(r + 1) * ca]);
            value.extend_from_slice(&self.nodes[b.0].value[r * cb..(r + 1) * cb]);
        }
        Ok(self.push(Op::ConcatCols(a, b), ra, cols, value, Vec::new()))
    }

    /// `D[i, j] = ‖a_i − b_j‖₂` between the rows of `a: n × d` and `b: m × d`.
    pub fn pairwise_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.shape(a);
        let (m, db) = self.shape(b);
        if d != db {
            return Err(Self::shape_err("pairwise_distance", format!("dims {d} vs {db}")));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut value = Vec::with_capacity(n * m);
        for i in 0..n {
            let ai = &av[i * d..(i + 1) * d];
            for j in 0..m {
                let bj = &bv[j * d..(j + 1) * d];
                let s: f64 = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
                value.push(math::sqrt(s));
            }
        }
        Ok(self.push(Op::PairwiseDistance(a, b), n, m, value, Vec::new()))
    }

    /// Row-wise minimum, `n × m → n × 1`.
    pub fn min_along_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        if m == 0 {
            return Err(Self::shape_err("min_along_rows", "no columns".into()));
        }
        let av = &self.nodes[a.0].value;
        let mut value = Vec::with_capacity(n);
        let mut picks = Vec::with_capacity(n);
        for i in 0..n {
            let row = &av[i * m..(i + 1) * m];
            let j = argmin(row);
            value.push(row[j]);
            picks.push(i * m + j);
        }
        Ok(self.push(Op::MinAlongRows(a), n, 1, value, picks))
    }

    /// Column-wise minimum, `n × m → 1 × m`.
    pub fn min_along_cols(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        if n == 0 {
            return Err(Self::shape_err("min_along_cols", "no rows".into()));
        }
        let av = &self.nodes[a.0].value;
        let mut best: Vec<f64> = av[..m].to_vec();
        let mut rows = vec![0usize; m];
        for i in 1..n {
            for j in 0..m {
                let x = av[i * m + j];
                if x < best[j] {
                    best[j] = x;
                    rows[j] = i;
                }
            }
        }
        let picks = rows.iter().enumerate().map(|(j, &i)| i * m + j).collect();
        Ok(self.push(Op::MinAlongCols(a), 1, m, best, picks))
    }

    /// Maximum over all entries, `→ 1 × 1`.
    pub fn max_all(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.is_empty() {
            return Err(Self::shape_err("max_all", "empty operand".into()));
        }
        let mut k = 0;
        for (i, &x) in av.iter().enumerate() {
            if x > av[k] {
                k = i;
            }
        }
        let value = vec![av[k]];
        Ok(self.push(Op::MaxAll(a), 1, 1, value, vec![k]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(Op::Sum(a), 1, 1, vec![s], Vec::new())
    }

    /// Sum of squared entries, `→ 1 × 1`.
    pub fn squared_norm(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().map(|x| x * x).sum();
        self.push(Op::SquaredNorm(a), 1, 1, vec![s], Vec::new())
    }

    /// Frobenius / Euclidean norm, `→ 1 × 1`.
    pub fn norm(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.iter().map(|x| x * x).sum();
        self.push(Op::Norm(a), 1, 1, vec![math::sqrt(s)], Vec::new())
    }

    /// Adjoint of `output` with respect to the parameter vector.
    pub fn backward(&self, output: Var) -> Result<Vec<f64>> {
        if self.shape(output) != (1, 1) {
            let (r, c) = self.shape(output);
            return Err(Self::shape_err("backward", format!("output must be 1x1, got {r}x{c}")));
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut adj: Vec<Option<Vec<f64>>> = (0..=output.0).map(|_| None).collect();
        adj[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient { node: idx, op: node.op.name() });
            }
            self.propagate(node, &g, &mut adj, &mut grad);
        }
        Ok(grad)
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>], grad: &mut [f64]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match node.op {
            Op::Constant => {}
            Op::Param { offset } => {
                for (dst, x) in grad[offset..offset + g.len()].iter_mut().zip(g) {
                    *dst += x;
                }
            }
            Op::Affine { x, w, b } => {
                let (n, i) = self.shape(x);
                let o = node.cols;
                if needs(x) {
                    // dx = g · w
                    let dx = slot(adj, x, n * i);
                    gemm(n, o, i, Operand::plain(g, o), Operand::plain(&self.nodes[w.0].value, i), 1.0, dx);
                }
                if needs(w) {
                    // dw = gᵀ · x
                    let dw = slot(adj, w, o * i);
                    gemm(o, n, i, Operand::transposed(g, o), Operand::plain(&self.nodes[x.0].value, i), 1.0, dw);
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let db = slot(adj, b, o);
                    for row in g.chunks_exact(o) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                let da = slot(adj, a, g.len());
                for ((d, &gi), &y) in da.iter_mut().zip(g).zip(&node.value) {
                    *d += gi * (1.0 - y * y);
                }
            }
            Op::LeakyRelu(a, slope) => {
                let av = &self.nodes[a.0].value;
                let da = slot(adj, a, g.len());
                for ((d, &gi), &x) in da.iter_mut().zip(g).zip(av) {
                    *d += if x > 0.0 { gi } else { slope * gi };
                }
            }
            Op::Exp(a) => {
                let da = slot(adj, a, g.len());
                for ((d, &gi), &y) in da.iter_mut().zip(g).zip(&node.value) {
                    *d += gi * y;
                }
            }
            Op::Scale(a, k) => {
                let da = slot(adj, a, g.len());
                for (d, &gi) in da.iter_mut().zip(g) {
                    *d += k * gi;
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(a) {
                    let da = slot(adj, a, g.len());
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if needs(b) {
                    let db = slot(adj, b, g.len());
                    for (d, &gi) in db.iter_mut().zip(g) {
                        *d += sign * gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let bv = &self.nodes[b.0].value;
                    let da = slot(adj, a, g.len());
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                }
                if needs(b) {
                    let av = &self.nodes[a.0].value;
                    let db = slot(adj, b, g.len());
                    for ((d, &gi), &x) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                }
            }
            Op::Maximum(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let first: Vec<bool> = av.iter().zip(bv).map(|(x, y)| x >= y).collect();
                if needs(a) {
                    let da = slot(adj, a, g.len());
                    for ((d, &gi), &f) in da.iter_mut().zip(g).zip(&first) {
                        if f {
                            *d += gi;
                        }
                    }
                }
                if needs(b) {
                    let db = slot(adj, b, g.len());
                    for ((d, &gi), &f) in db.iter_mut().zip(g).zip(&first) {
                        if !f {
                            *d += gi;
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (rows, ca) = self.shape(a);
                let cb = self.shape(b).1;
                let cols = ca + cb;
                if needs(a) {
                    let da = slot(adj, a, rows * ca);
                    for r in 0..rows {
                        for c in 0..ca {
                            da[r * ca + c] += g[r * cols + c];
                        }
                    }
                }
                if needs(b) {
                    let db = slot(adj, b, rows * cb);
                    for r in 0..rows {
                        for c in 0..cb {
                            db[r * cb + c] += g[r * cols + ca + c];
                        }
                    }
                }
            }
            Op::PairwiseDistance(a, b) => {
                let (n, d) = self.shape(a);
                let m = self.shape(b).0;
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                // Entries with zero distance get a zero subgradient.
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let gij = g[i * m + j];
                        let dist = node.value[i * m + j];
                        if gij == 0.0 || dist == 0.0 {
                            continue;
                        }
                        let k = gij / dist;
                        for c in 0..d {
                            let diff = av[i * d + c] - bv[j * d + c];
                            da[i * d + c] += k * diff;
                            db[j * d + c] -= k * diff;
                        }
                    }
                }
                if needs(a) {
                    add_into(slot(adj, a, n * d), &da);
                }
                if needs(b) {
                    add_into(slot(adj, b, m * d), &db);
                }
            }
            Op::MinAlongRows(a) | Op::MinAlongCols(a) | Op::MaxAll(a) => {
                let len = self.nodes[a.0].value.len();
                let da = slot(adj, a, len);
                for (&k, &gi) in node.picks.iter().zip(g) {
                    da[k] += gi;
                }
            }
            Op::Sum(a) => {
                let len = self.nodes[a.0].value.len();
                for d in slot(adj, a, len) {
                    *d += g[0];
                }
            }
            Op::SquaredNorm(a) => {
                let av = &self.nodes[a.0].value;
                let da = slot(adj, a, av.len());
                for (d, &x) in da.iter_mut().zip(av) {
                    *d += 2.0 * x * g[0];
                }
            }
            Op::Norm(a) => {
                let av = &self.nodes[a.0].value;
                let n = node.value[0];
                if n > 0.0 {
                    let da = slot(adj, a, av.len());
                    for (d, &x) in da.iter_mut().zip(av) {
                        *d += x / n * g[0];
                    }
                }
            }
        }
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Index of the smallest entry; ties go to the lowest index.
fn argmin(xs: &[f64]) -> usize {
    let mut k = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[k] {
            k = i;
        }
    }
    k
}

/// Row-major matrix operand, optionally read transposed.
struct Operand<'a> {
    data: &'a [f64],
    /// Row length of the stored (untransposed) matrix.
    stride: usize,
    transposed: bool,
}

impl<'a> Operand<'a> {
    fn plain(data: &'a [f64], stride: usize) -> Self {
        Self { data, stride, transposed: false }
    }

    fn transposed(data: &'a [f64], stride: usize) -> Self {
        Self { data, stride, transposed: true }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.stride as isize)
        } else {
            (self.stride as isize, 1)
        }
    }
}

/// `c ← a · b + beta · c` for `a: m × k`, `b: k × n`, `c: m × n` row-major.
fn gemm(m: usize, k: usize, n: usize, a: Operand<'_>, b: Operand<'_>, beta: f64, c: &mut [f64]) {
    assert!(a.data.len() >= m * k && b.data.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the assertion above bounds every index the kernel touches for
    // the given dimensions and strides; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Evaluates `build` on a fresh tape at `at` and returns the loss and its
/// gradient with respect to `at`.
pub fn gradient<F>(at: &[f64], build: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(at);
    let out = build(&mut tape)?;
    let (r, c) = tape.shape(out);
    if (r, c) != (1, 1) {
        return Err(Error::Shape { op: "gradient", detail: format!("loss must be 1x1, got {r}x{c}") });
    }
    let loss = tape.scalar(out);
    let grad = tape.backward(out)?;
    Ok((loss, grad))
}
