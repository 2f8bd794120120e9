//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Graph`] records every operation eagerly: values are computed when a
//! node is pushed, and [`Graph::backward`] sweeps the record in reverse
//! insertion order. Insertion order is a topological order, so gradient
//! accumulation is fixed and results are bitwise reproducible.
//!
//! Sub-computations that are independent of each other (one per expert) can
//! be recorded as *regions*: each region is a self-contained graph whose
//! leaves mirror nodes of the outer graph. Regions can be built on separate
//! threads; they are appended in index order, so the serial and parallel
//! paths yield identical records.

use rayon::prelude::*;

use super::matrix::{softmax_in_place, Matrix};
use super::special::{check_sigma, gelu, gelu_derivative, normal_cdf_unchecked, normal_pdf_unchecked};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Region<T> {
    inputs: Vec<NodeId>,
    graph: Graph<T>,
    locals: Vec<NodeId>,
    output: NodeId,
}

enum Op<T> {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    MulConst(NodeId, Matrix<T>),
    AddRow(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    Sum(NodeId),
    SoftmaxRows(NodeId),
    Gelu(NodeId),
    NormalCdf(NodeId, T),
    LogClamped(NodeId, T),
    SquaredCv(NodeId),
    SoftmaxXent {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        weights: Vec<T>,
    },
    GatherRows(NodeId, Vec<usize>),
    ScatterRows(NodeId, Vec<usize>),
    Column(NodeId, usize),
    Region(Box<Region<T>>),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn grad_any(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let g = self.grad_any(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), g))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_transposed(self.value(b))?;
        let g = self.grad_any(&[a, b]);
        Ok(self.push(v, Op::MatMulT(a, b), g))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let g = self.grad_any(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        let g = self.grad_any(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        let g = self.grad_any(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).scale(s);
        let g = self.grad_any(&[a]);
        self.push(v, Op::Scale(a, s), g)
    }

    /// Elementwise product with a fixed matrix.
    pub fn mul_const(&mut self, a: NodeId, k: Matrix<T>) -> Result<NodeId> {
        let v = self.value(a).hadamard(&k)?;
        let g = self.grad_any(&[a]);
        Ok(self.push(v, Op::MulConst(a, k), g))
    }

    /// Adds a 1×m row to every row of an n×m matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::dim(
                "add_row",
                format!("{}x{} plus row {}x{}", av.rows(), av.cols(), rv.rows(), rv.cols()),
            ));
        }
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (x, &b) in v.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *x = *x + b;
            }
        }
        let g = self.grad_any(&[a, row]);
        Ok(self.push(v, Op::AddRow(a, row), g))
    }

    /// Scales row i of an n×m matrix by entry i of an n×1 column.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(Error::dim(
                "mul_col",
                format!("{}x{} times column {}x{}", av.rows(), av.cols(), cv.rows(), cv.cols()),
            ));
        }
        let mut v = av.clone();
        for r in 0..v.rows() {
            let c = cv[(r, 0)];
            for x in v.row_mut(r) {
                *x = *x * c;
            }
        }
        let g = self.grad_any(&[a, col]);
        Ok(self.push(v, Op::MulCol(a, col), g))
    }

    /// Sum of all entries, as 1×1.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::scalar(self.value(a).sum());
        let g = self.grad_any(&[a]);
        self.push(v, Op::Sum(a), g)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        let g = self.grad_any(&[a]);
        self.push(v, Op::SoftmaxRows(a), g)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        let g = self.grad_any(&[a]);
        self.push(v, Op::Gelu(a), g)
    }

    /// Elementwise N(0, σ²) CDF.
    pub fn normal_cdf(&mut self, a: NodeId, sigma: T) -> Result<NodeId> {
        check_sigma(sigma)?;
        let v = self.value(a).map(|x| normal_cdf_unchecked(x, sigma));
        let g = self.grad_any(&[a]);
        Ok(self.push(v, Op::NormalCdf(a, sigma), g))
    }

    /// Elementwise `ln(max(x, floor))`; zero gradient where the floor is active.
    pub fn log_clamped(&mut self, a: NodeId, floor: T) -> NodeId {
        let v = self.value(a).map(|x| x.max(floor).ln());
        let g = self.grad_any(&[a]);
        self.push(v, Op::LogClamped(a, floor), g)
    }

    /// Squared coefficient of variation of all entries: population
    /// variance divided by the squared mean.
    pub fn squared_cv(&mut self, a: NodeId) -> Result<NodeId> {
        let (mean, var) = mean_var(self.value(a).as_slice());
        if mean == T::zero() {
            return Err(Error::DegenerateBatch(
                "squared coefficient of variation of a zero-mean vector".into(),
            ));
        }
        let v = Matrix::scalar(var / (mean * mean));
        let g = self.grad_any(&[a]);
        Ok(self.push(v, Op::SquaredCv(a), g))
    }

    /// Weighted softmax cross-entropy: `Σ_t w_t · (logsumexp(z_t) − z_t[y_t])`
    /// over rows with a target. Rows whose target is `None` contribute nothing.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: Vec<Option<usize>>,
        weights: Vec<T>,
    ) -> Result<NodeId> {
        let z = self.value(logits);
        if targets.len() != z.rows() || weights.len() != z.rows() {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!(
                    "{} logit rows, {} targets, {} weights",
                    z.rows(),
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        let mut total = T::zero();
        for (t, target) in targets.iter().enumerate() {
            let Some(y) = *target else { continue };
            if y >= z.cols() {
                return Err(Error::Contract(format!(
                    "target class {y} outside {} logits",
                    z.cols()
                )));
            }
            let row = z.row(t);
            total = total + weights[t] * (log_sum_exp(row) - row[y]);
        }
        let g = self.grad_any(&[logits]);
        Ok(self.push(
            Matrix::scalar(total),
            Op::SoftmaxXent {
                logits,
                targets,
                weights,
            },
            g,
        ))
    }

    pub fn gather_rows(&mut self, a: NodeId, index: Vec<usize>) -> Result<NodeId> {
        let av = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= av.rows()) {
            return Err(Error::dim("gather_rows", format!("row {bad} of {}", av.rows())));
        }
        let mut v = Matrix::zeros(index.len(), av.cols());
        for (j, &i) in index.iter().enumerate() {
            v.row_mut(j).copy_from_slice(av.row(i));
        }
        let g = self.grad_any(&[a]);
        Ok(self.push(v, Op::GatherRows(a, index), g))
    }

    /// Places row j of `a` at row `index[j]` of a zero matrix with `rows` rows.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, a: NodeId, index: Vec<usize>, rows: usize) -> Result<NodeId> {
        let av = self.value(a);
        if index.len() != av.rows() {
            return Err(Error::dim(
                "scatter_rows",
                format!("{} indices for {} rows", index.len(), av.rows()),
            ));
        }
        let mut seen = vec![false; rows];
        let mut v = Matrix::zeros(rows, av.cols());
        for (j, &i) in index.iter().enumerate() {
            if i >= rows || seen[i] {
                return Err(Error::Contract(format!(
                    "scatter target row {i} out of range or repeated"
                )));
            }
            seen[i] = true;
            v.row_mut(i).copy_from_slice(av.row(j));
        }
        let g = self.grad_any(&[a]);
        Ok(self.push(v, Op::ScatterRows(a, index), g))
    }

    /// Column `c` as an n×1 matrix.
    pub fn column(&mut self, a: NodeId, c: usize) -> Result<NodeId> {
        let av = self.value(a);
        if c >= av.cols() {
            return Err(Error::dim("column", format!("column {c} of {}", av.cols())));
        }
        let v = Matrix::from_fn(av.rows(), 1, |r, _| av[(r, c)]);
        let g = self.grad_any(&[a]);
        Ok(self.push(v, Op::Column(a, c), g))
    }

    /// Records `build` as a self-contained region whose leaves mirror `inputs`.
    pub fn region<F>(&mut self, inputs: &[NodeId], build: F) -> Result<NodeId>
    where
        F: FnOnce(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
    {
        let region = self.build_region(inputs.to_vec(), build)?;
        Ok(self.push_region(region))
    }

    /// Records several independent regions, optionally building them on the
    /// rayon pool. The record is identical either way.
    pub fn regions<F>(
        &mut self,
        inputs: Vec<Vec<NodeId>>,
        parallel: bool,
        build: F,
    ) -> Result<Vec<NodeId>>
    where
        F: Fn(usize, &mut Graph<T>, &[NodeId]) -> Result<NodeId> + Sync,
    {
        let this = &*self;
        let built: Vec<Result<Region<T>>> = if parallel {
            inputs
                .into_par_iter()
                .enumerate()
                .map(|(i, ins)| this.build_region(ins, |g, l| build(i, g, l)))
                .collect()
        } else {
            inputs
                .into_iter()
                .enumerate()
                .map(|(i, ins)| this.build_region(ins, |g, l| build(i, g, l)))
                .collect()
        };
        let mut ids = Vec::with_capacity(built.len());
        for region in built {
            ids.push(self.push_region(region?));
        }
        Ok(ids)
    }

    fn build_region<F>(&self, inputs: Vec<NodeId>, build: F) -> Result<Region<T>>
    where
        F: FnOnce(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
    {
        let mut graph = Graph::new();
        let locals: Vec<NodeId> = inputs
            .iter()
            .map(|&id| {
                let value = self.value(id).clone();
                if self.nodes[id.0].needs_grad {
                    graph.leaf(value)
                } else {
                    graph.constant(value)
                }
            })
            .collect();
        let output = build(&mut graph, &locals)?;
        Ok(Region {
            inputs,
            graph,
            locals,
            output,
        })
    }

    fn push_region(&mut self, region: Region<T>) -> NodeId {
        let value = region.graph.value(region.output).clone();
        let g = region.graph.nodes[region.output.0].needs_grad;
        self.push(value, Op::Region(Box::new(region)), g)
    }

    /// Gradients of a scalar `root` with respect to every node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got {}x{}",
                rv.rows(),
                rv.cols()
            )));
        }
        let grads = self.sweep(root, Matrix::scalar(T::one()))?;
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            grads,
        })
    }

    fn sweep(&self, root: NodeId, seed: Matrix<T>) -> Result<Vec<Option<Matrix<T>>>> {
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Matrix<T>,
        g: &Matrix<T>,
        grads: &mut [Option<Matrix<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.matmul_transposed(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, self.value(*a).transposed_matmul(g)?)?;
                }
            }
            Op::MatMulT(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.matmul(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.transposed_matmul(self.value(*a))?)?;
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.scale(-T::one()))?;
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.hadamard(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.hadamard(self.value(*a))?)?;
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s))?,
            Op::MulConst(a, k) => accumulate(grads, *a, g.hadamard(k)?)?,
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if self.wants(*row) {
                    let mut col_sums = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (s, &x) in col_sums.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *s = *s + x;
                        }
                    }
                    accumulate(grads, *row, col_sums)?;
                }
            }
            Op::MulCol(a, col) => {
                let av = self.value(*a);
                let cv = self.value(*col);
                if self.wants(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let c = cv[(r, 0)];
                        for x in ga.row_mut(r) {
                            *x = *x * c;
                        }
                    }
                    accumulate(grads, *a, ga)?;
                }
                if self.wants(*col) {
                    let gc = Matrix::from_fn(av.rows(), 1, |r, _| {
                        super::matrix::dot(g.row(r), av.row(r))
                    });
                    accumulate(grads, *col, gc)?;
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                accumulate(grads, *a, Matrix::filled(r, c, g[(0, 0)]))?;
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let inner = super::matrix::dot(gr, y);
                    for ((d, &yi), &gi) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *d = yi * (gi - inner);
                    }
                }
                accumulate(grads, *a, ga)?;
            }
            Op::Gelu(a) => {
                let ga = g.zip_map(self.value(*a), "gelu", |gi, x| gi * gelu_derivative(x))?;
                accumulate(grads, *a, ga)?;
            }
            Op::NormalCdf(a, sigma) => {
                let s = *sigma;
                let ga = g.zip_map(self.value(*a), "normal_cdf", |gi, x| {
                    gi * normal_pdf_unchecked(x, s)
                })?;
                accumulate(grads, *a, ga)?;
            }
            Op::LogClamped(a, floor) => {
                let f = *floor;
                let ga = g.zip_map(self.value(*a), "log_clamped", |gi, x| {
                    if x > f {
                        gi / x
                    } else {
                        T::zero()
                    }
                })?;
                accumulate(grads, *a, ga)?;
            }
            Op::SquaredCv(a) => {
                let av = self.value(*a);
                let (mean, var) = mean_var(av.as_slice());
                let n = T::from_count(av.len());
                let factor = g[(0, 0)] * T::lit(2.0) / (n * mean * mean);
                let shift = var / mean;
                accumulate(grads, *a, av.map(|x| factor * ((x - mean) - shift)))?;
            }
            Op::SoftmaxXent {
                logits,
                targets,
                weights,
            } => {
                let z = self.value(*logits);
                let mut gz = Matrix::zeros(z.rows(), z.cols());
                let scale = g[(0, 0)];
                for (t, target) in targets.iter().enumerate() {
                    let Some(y) = *target else { continue };
                    let row = gz.row_mut(t);
                    row.copy_from_slice(z.row(t));
                    softmax_in_place(row);
                    row[y] = row[y] - T::one();
                    let w = weights[t] * scale;
                    for x in row.iter_mut() {
                        *x = *x * w;
                    }
                }
                accumulate(grads, *logits, gz)?;
            }
            Op::GatherRows(a, index) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for (j, &i) in index.iter().enumerate() {
                    for (d, &x) in ga.row_mut(i).iter_mut().zip(g.row(j)) {
                        *d = *d + x;
                    }
                }
                accumulate(grads, *a, ga)?;
            }
            Op::ScatterRows(a, index) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for (j, &i) in index.iter().enumerate() {
                    ga.row_mut(j).copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, ga)?;
            }
            Op::Column(a, c) => {
                let (r, cols) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, cols);
                for i in 0..r {
                    ga[(i, *c)] = g[(i, 0)];
                }
                accumulate(grads, *a, ga)?;
            }
            Op::Region(region) => {
                let inner = region.graph.sweep(region.output, g.clone())?;
                for (&outer, &local) in region.inputs.iter().zip(&region.locals) {
                    if !self.wants(outer) {
                        continue;
                    }
                    if let Some(gl) = &inner[local.0] {
                        accumulate(grads, outer, gl.clone())?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], id: NodeId, g: Matrix<T>) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.accumulate(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let s = row.iter().fold(T::zero(), |acc, &x| acc + (x - max).exp());
    max + s.ln()
}

pub(crate) fn mean_var<T: Scalar>(xs: &[T]) -> (T, T) {
    // the summed mean of equal values can be off by an ulp; keep var exactly 0
    if let Some(&first) = xs.first() {
        if xs.iter().all(|&x| x == first) {
            return (first, T::zero());
        }
    }
    let n = T::from_count(xs.len());
    let mean = xs.iter().fold(T::zero(), |a, &x| a + x) / n;
    let var = xs
        .iter()
        .fold(T::zero(), |a, &x| a + (x - mean) * (x - mean))
        / n;
    (mean, var)
}

/// Result of a reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `id`; all zeros when the node did not influence the root.
    pub fn get(&self, id: NodeId) -> Matrix<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn try_get(&self, id: NodeId) -> Option<&Matrix<T>> {
        self.grads[id.0].as_ref()
    }
}
