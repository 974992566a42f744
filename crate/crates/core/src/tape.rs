//! Reverse-mode automatic differentiation over row-major 2D tensors.
//!
//! Every node holds a dense `rows x cols` block of `f64`. Operations are
//! recorded in creation order, so a node can only reference earlier nodes
//! and the backward sweep is a single reverse pass over the node list.
//!
//! Parameters enter the tape in two ways: small dense tensors (network
//! weights) are copied in with [`Tape::param`]; large lookup tables (hash
//! grids, height grids) are read through [`Tape::gather`], which records only
//! the sparse interpolation plan and scatters gradients straight into the
//! table's gradient buffer.

use std::fmt;

use thiserror::Error;

use crate::params::{Gradients, Param, ParamId};

#[derive(Debug, Error, PartialEq)]
pub enum TapeError {
    #[error("node {node} references later node {input}; graph is not topologically ordered")]
    GraphCycle { node: usize, input: usize },
    #[error("backward must start from a 1x1 node, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
}

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape does not match data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(1, 1, vec![v])
    }

    pub fn column(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(n, 1, data)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` through `matrixmultiply`.
///
/// `ta`/`tb` select the transpose of the stored row-major operand.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    // Stored shapes: a is (m x k) or (k x m) when transposed; same for b.
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slices are sized for the strides above (checked by the asserts).
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dimensions differ");
    let mut out = Tensor::zeros(a.rows, b.cols);
    gemm(a.rows, a.cols, b.cols, &a.data, false, &b.data, false, &mut out.data, 0.0);
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Sparse interpolation plan for [`Tape::gather`].
///
/// Output row `i`, block `b` is `sum_k weights[i][b][k] * table[index[i][b][k]]`,
/// where each table row has `width` entries. Output has `blocks * width`
/// columns.
#[derive(Clone, Debug)]
pub struct GatherPlan {
    pub rows: usize,
    pub blocks: usize,
    pub corners: usize,
    pub index: Vec<u32>,
    pub weight: Vec<f64>,
}

impl GatherPlan {
    pub fn new(blocks: usize, corners: usize) -> Self {
        Self { rows: 0, blocks, corners, index: Vec::new(), weight: Vec::new() }
    }

    pub fn with_capacity(rows: usize, blocks: usize, corners: usize) -> Self {
        let n = rows * blocks * corners;
        Self { rows: 0, blocks, corners, index: Vec::with_capacity(n), weight: Vec::with_capacity(n) }
    }

    /// Evaluates the plan against a table without recording anything.
    pub fn apply(&self, table: &[f64], width: usize) -> Tensor {
        let mut out = Tensor::zeros(self.rows, self.blocks * width);
        let per_row = self.blocks * self.corners;
        for i in 0..self.rows {
            let orow = &mut out.data[i * self.blocks * width..(i + 1) * self.blocks * width];
            for b in 0..self.blocks {
                let base = i * per_row + b * self.corners;
                let dst = &mut orow[b * width..(b + 1) * width];
                for k in 0..self.corners {
                    let w = self.weight[base + k];
                    if w == 0.0 {
                        continue;
                    }
                    let src = &table[self.index[base + k] as usize * width..][..width];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        out
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-ray constants for the transmittance/weight operation.
#[derive(Clone, Debug)]
struct WeightsAux {
    delta: Vec<f64>,
}

#[derive(Clone, Debug)]
struct DistortionAux {
    /// Normalized interval boundaries, `rows x (cols + 1)`.
    s: Vec<f64>,
    /// Per-ray multiplier (cos theta times lambda).
    scale: Vec<f64>,
}

/// Per-row geometry for the Hapke operation.
#[derive(Clone, Debug)]
struct HapkeAux {
    params: crate::shading::HapkeParams,
    sun: [f64; 3],
    intensity: f64,
    /// Unit view directions (camera toward surface), one per row.
    view: Vec<[f64; 3]>,
}

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param(ParamId),
    Gather { param: ParamId, width: usize, plan: GatherPlan },
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Relu(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Cols(Var, usize),
    Concat(Vec<Var>),
    Reshape(Var),
    RowSum(Var),
    SegmentSum(Var, usize),
    Sum(Var),
    Mean(Var),
    Weights(Var, WeightsAux),
    Distortion(Var, DistortionAux),
    Normals(Var),
    Hapke(Var, Box<HapkeAux>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation. Create one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.data.len(), 1);
        t.data[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const)
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    pub fn param(&mut self, p: &Param) -> Var {
        let (rows, cols) = p.matrix_shape();
        self.push(Tensor::new(rows, cols, p.data.clone()), Op::Param(p.id))
    }

    pub fn gather(&mut self, p: &Param, width: usize, plan: GatherPlan) -> Var {
        let value = plan.apply(&p.data, width);
        self.push(value, Op::Gather { param: p.id, width, plan })
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.nodes[a.0].value;
        let value = Tensor::new(src.rows, src.cols, src.data.iter().map(|&x| f(x)).collect());
        self.push(value, op)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(x.same_shape(y), "shape mismatch {:?} vs {:?}", x, y);
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.rows, x.cols, data);
        self.push(value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul(self.value(a), self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows, 1);
        assert_eq!(r.cols, x.cols);
        let mut value = x.clone();
        for chunk in value.data.chunks_mut(x.cols) {
            for (v, b) in chunk.iter_mut().zip(&r.data) {
                *v += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Multiplies each row of `a` by the matching entry of the `rows x 1` column `c`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (x, s) = (self.value(a), self.value(c));
        assert_eq!(s.cols, 1);
        assert_eq!(s.rows, x.rows);
        let mut value = x.clone();
        for (chunk, &k) in value.data.chunks_mut(x.cols.max(1)).zip(&s.data) {
            for v in chunk {
                *v *= k;
            }
        }
        self.push(value, Op::MulCol(a, c))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Elementwise clamp; gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Columns `start..start + len`.
    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols);
        let mut data = Vec::with_capacity(x.rows * len);
        for r in 0..x.rows {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let value = Tensor::new(x.rows, len, data);
        self.push(value, Op::Cols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows, rows, "concat row mismatch");
                data.extend_from_slice(t.row(r));
            }
        }
        self.push(Tensor::new(rows, cols, data), Op::Concat(parts.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        let value = Tensor::new(rows, cols, x.data.clone());
        self.push(value, Op::Reshape(a))
    }

    /// Sums every row to a `rows x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows).map(|r| x.row(r).iter().sum()).collect();
        self.push(Tensor::column(data), Op::RowSum(a))
    }

    /// Sums consecutive groups of `group` rows.
    pub fn segment_sum(&mut self, a: Var, group: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows % group, 0);
        let n = x.rows / group;
        let mut out = Tensor::zeros(n, x.cols);
        for r in 0..x.rows {
            let dst = r / group;
            for c in 0..x.cols {
                out.data[dst * x.cols + c] += x.data[r * x.cols + c];
            }
        }
        self.push(out, Op::SegmentSum(a, group))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.data.len().max(1) as f64;
        let s = x.data.iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Volume-rendering weights from per-interval densities.
    ///
    /// `density` is `rays x samples`; `delta` holds the interval lengths in
    /// the same layout. Densities are clamped to `[0, 1e6]` and optical depths
    /// to at most 80.
    pub fn render_weights(&mut self, density: Var, delta: Vec<f64>) -> Var {
        let x = self.value(density);
        assert_eq!(delta.len(), x.data.len());
        let mut out = Tensor::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let range = r * x.cols..(r + 1) * x.cols;
            crate::render::weights_into(&x.data[range.clone()], &delta[range.clone()], &mut out.data[range]);
        }
        self.push(out, Op::Weights(density, WeightsAux { delta }))
    }

    /// Per-ray distortion loss `scale_r * (sum_ij w_i w_j |m_i - m_j| + 1/3 sum_i w_i^2 ds_i)`
    /// on normalized boundaries `s` (`rays x (samples + 1)`). Returns `rays x 1`.
    pub fn distortion(&mut self, weights: Var, s: Vec<f64>, scale: Vec<f64>) -> Var {
        let w = self.value(weights);
        let k = w.cols;
        assert_eq!(s.len(), w.rows * (k + 1));
        assert_eq!(scale.len(), w.rows);
        let data = (0..w.rows).map(|r| scale[r] * crate::losses::distortion_value(w.row(r), &s[r * (k + 1)..(r + 1) * (k + 1)])).collect();
        self.push(Tensor::column(data), Op::Distortion(weights, DistortionAux { s, scale }))
    }

    /// Unit normals `(-gx, -gy, 1)/norm` from `rows x 2` slopes `(gx, gy)`.
    pub fn normals_from_slopes(&mut self, slopes: Var) -> Var {
        let g = self.value(slopes);
        assert_eq!(g.cols, 2);
        let mut data = Vec::with_capacity(g.rows * 3);
        for r in 0..g.rows {
            let (gx, gy) = (g.get(r, 0), g.get(r, 1));
            let inv = 1.0 / (gx * gx + gy * gy + 1.0).sqrt();
            data.extend_from_slice(&[-gx * inv, -gy * inv, inv]);
        }
        self.push(Tensor::new(g.rows, 3, data), Op::Normals(slopes))
    }

    /// Hapke lighting scalar per row for `rows x 3` unit normals.
    pub fn hapke(
        &mut self,
        normals: Var,
        params: crate::shading::HapkeParams,
        sun: &crate::shading::SunGeometry,
        view: Vec<[f64; 3]>,
    ) -> Var {
        let n = self.value(normals);
        assert_eq!(n.cols, 3);
        assert_eq!(view.len(), n.rows);
        let data = (0..n.rows)
            .map(|r| {
                let nr = [n.get(r, 0), n.get(r, 1), n.get(r, 2)];
                crate::shading::hapke_terms(&params, sun.dir, sun.intensity, nr, view[r]).value
            })
            .collect();
        let aux = HapkeAux { params, sun: sun.dir, intensity: sun.intensity, view };
        self.push(Tensor::column(data), Op::Hapke(normals, Box::new(aux)))
    }

    /// Reverse sweep from the scalar node `loss`, accumulating parameter
    /// gradients into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) -> Result<(), TapeError> {
        let lv = self.value(loss);
        if lv.data.len() != 1 {
            return Err(TapeError::NonScalarLoss { rows: lv.rows, cols: lv.cols });
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::new(lv.rows, lv.cols, vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            for input in op_inputs(&node.op) {
                if input.0 >= idx {
                    return Err(TapeError::GraphCycle { node: idx, input: input.0 });
                }
            }
            self.backward_node(idx, &g, &mut adj, grads);
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &Tensor, adj: &mut [Option<Tensor>], grads: &mut Gradients) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor| match &mut adj[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let map = |t: &Tensor, f: &dyn Fn(usize) -> f64| Tensor::new(t.rows, t.cols, (0..t.data.len()).map(f).collect());
        match &node.op {
            Op::Const => {}
            Op::Param(id) => grads.accumulate(*id, &g.data),
            Op::Gather { param, width, plan } => {
                let buf = grads.get_mut(*param);
                let per_row = plan.blocks * plan.corners;
                let out_cols = plan.blocks * width;
                for i in 0..plan.rows {
                    for b in 0..plan.blocks {
                        let go = &g.data[i * out_cols + b * width..][..*width];
                        let base = i * per_row + b * plan.corners;
                        for k in 0..plan.corners {
                            let w = plan.weight[base + k];
                            if w == 0.0 {
                                continue;
                            }
                            let dst = &mut buf[plan.index[base + k] as usize * width..][..*width];
                            for (d, s) in dst.iter_mut().zip(go) {
                                *d += w * s;
                            }
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let mut ga = Tensor::zeros(x.rows, x.cols);
                gemm(x.rows, g.cols, x.cols, &g.data, false, &y.data, true, &mut ga.data, 0.0);
                let mut gb = Tensor::zeros(y.rows, y.cols);
                gemm(x.cols, x.rows, y.cols, &x.data, true, &g.data, false, &mut gb.data, 0.0);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::AddRow(a, row) => {
                let mut gr = Tensor::zeros(1, g.cols);
                for chunk in g.data.chunks(g.cols) {
                    for (s, v) in gr.data.iter_mut().zip(chunk) {
                        *s += v;
                    }
                }
                acc(*a, g.clone());
                acc(*row, gr);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, map(g, &|i| -g.data[i]));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, map(g, &|i| g.data[i] * y.data[i]));
                acc(*b, map(g, &|i| g.data[i] * x.data[i]));
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, map(g, &|i| g.data[i] / y.data[i]));
                acc(*b, map(g, &|i| -g.data[i] * x.data[i] / (y.data[i] * y.data[i])));
            }
            Op::MulCol(a, c) => {
                let (x, s) = (val(*a), val(*c));
                let cols = x.cols;
                acc(*a, map(g, &|i| g.data[i] * s.data[i / cols]));
                let gc = (0..x.rows).map(|r| (0..cols).map(|j| g.data[r * cols + j] * x.data[r * cols + j]).sum()).collect();
                acc(*c, Tensor::column(gc));
            }
            Op::Scale(a, k) => acc(*a, map(g, &|i| k * g.data[i])),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Sigmoid(a) => acc(*a, map(g, &|i| g.data[i] * out.data[i] * (1.0 - out.data[i]))),
            Op::Tanh(a) => acc(*a, map(g, &|i| g.data[i] * (1.0 - out.data[i] * out.data[i]))),
            Op::Softplus(a) => {
                let x = val(*a);
                acc(*a, map(g, &|i| g.data[i] * sigmoid(x.data[i])));
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, map(g, &|i| if x.data[i] > 0.0 { g.data[i] } else { 0.0 }));
            }
            Op::Exp(a) => acc(*a, map(g, &|i| g.data[i] * out.data[i])),
            Op::Abs(a) => {
                let x = val(*a);
                acc(
                    *a,
                    map(g, &|i| {
                        let v = x.data[i];
                        if v > 0.0 {
                            g.data[i]
                        } else if v < 0.0 {
                            -g.data[i]
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::Square(a) => {
                let x = val(*a);
                acc(*a, map(g, &|i| 2.0 * x.data[i] * g.data[i]));
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                acc(
                    *a,
                    map(g, &|i| {
                        let v = x.data[i];
                        if v >= *lo && v <= *hi {
                            g.data[i]
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::Cols(a, start) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    ga.data[r * x.cols + start..r * x.cols + start + g.cols].copy_from_slice(g.row(r));
                }
                acc(*a, ga);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let t = val(p);
                    let mut gp = Tensor::zeros(t.rows, t.cols);
                    for r in 0..t.rows {
                        gp.data[r * t.cols..(r + 1) * t.cols].copy_from_slice(&g.row(r)[offset..offset + t.cols]);
                    }
                    offset += t.cols;
                    acc(p, gp);
                }
            }
            Op::Reshape(a) => {
                let x = val(*a);
                acc(*a, Tensor::new(x.rows, x.cols, g.data.clone()));
            }
            Op::RowSum(a) => {
                let x = val(*a);
                acc(*a, map(x, &|i| g.data[i / x.cols]));
            }
            Op::SegmentSum(a, group) => {
                let x = val(*a);
                acc(
                    *a,
                    map(x, &|i| {
                        let (r, c) = (i / x.cols, i % x.cols);
                        g.data[(r / group) * x.cols + c]
                    }),
                );
            }
            Op::Sum(a) => {
                let x = val(*a);
                acc(*a, map(x, &|_| g.data[0]));
            }
            Op::Mean(a) => {
                let x = val(*a);
                let n = x.data.len().max(1) as f64;
                acc(*a, map(x, &|_| g.data[0] / n));
            }
            Op::Weights(d, aux) => {
                let x = val(*d);
                let mut gd = Tensor::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let range = r * x.cols..(r + 1) * x.cols;
                    crate::render::weights_backward(
                        &x.data[range.clone()],
                        &aux.delta[range.clone()],
                        &out.data[range.clone()],
                        &g.data[range.clone()],
                        &mut gd.data[range],
                    );
                }
                acc(*d, gd);
            }
            Op::Distortion(w, aux) => {
                let x = val(*w);
                let k = x.cols;
                let mut gw = Tensor::zeros(x.rows, k);
                for r in 0..x.rows {
                    let s = &aux.s[r * (k + 1)..(r + 1) * (k + 1)];
                    let f = g.data[r] * aux.scale[r];
                    crate::losses::distortion_grad(x.row(r), s, f, &mut gw.data[r * k..(r + 1) * k]);
                }
                acc(*w, gw);
            }
            Op::Normals(slopes) => {
                let x = val(*slopes);
                let mut gs = Tensor::zeros(x.rows, 2);
                for r in 0..x.rows {
                    let (gx, gy) = (x.get(r, 0), x.get(r, 1));
                    let q = gx * gx + gy * gy + 1.0;
                    let inv = 1.0 / q.sqrt();
                    let inv3 = inv / q;
                    let (g0, g1, g2) = (g.get(r, 0), g.get(r, 1), g.get(r, 2));
                    // n = (-gx, -gy, 1) * q^{-1/2}
                    let dgx = g0 * (-inv + gx * gx * inv3) + g1 * (gx * gy * inv3) + g2 * (-gx * inv3);
                    let dgy = g0 * (gx * gy * inv3) + g1 * (-inv + gy * gy * inv3) + g2 * (-gy * inv3);
                    gs.data[2 * r] = dgx;
                    gs.data[2 * r + 1] = dgy;
                }
                acc(*slopes, gs);
            }
            Op::Hapke(normals, aux) => {
                let x = val(*normals);
                let mut gn = Tensor::zeros(x.rows, 3);
                for r in 0..x.rows {
                    let nr = [x.get(r, 0), x.get(r, 1), x.get(r, 2)];
                    let t = crate::shading::hapke_terms(&aux.params, aux.sun, aux.intensity, nr, aux.view[r]);
                    let v = aux.view[r];
                    for c in 0..3 {
                        gn.data[3 * r + c] = g.data[r] * (t.d_mu0 * aux.sun[c] - t.d_mu * v[c]);
                    }
                }
                acc(*normals, gn);
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Const | Op::Param(_) | Op::Gather { .. } => vec![],
        Op::MatMul(a, b) | Op::AddRow(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MulCol(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Sigmoid(a)
        | Op::Tanh(a)
        | Op::Softplus(a)
        | Op::Relu(a)
        | Op::Exp(a)
        | Op::Abs(a)
        | Op::Square(a)
        | Op::Clamp(a, _, _)
        | Op::Cols(a, _)
        | Op::Reshape(a)
        | Op::RowSum(a)
        | Op::SegmentSum(a, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Weights(a, _)
        | Op::Distortion(a, _)
        | Op::Normals(a)
        | Op::Hapke(a, _) => vec![*a],
        Op::Concat(parts) => parts.clone(),
    }
}
