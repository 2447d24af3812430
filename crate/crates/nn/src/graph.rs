use ndarray::{Array2, Axis, Zip};

use crate::float::Float;

/// Index value meaning "read zero" in a gather and "drop" in a scatter.
pub const PAD_INDEX: usize = usize::MAX;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    MulConst(Var, Array2<T>),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    Gather(Var, Vec<usize>),
    ScatterAdd(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Saved forward quantity for ops whose backward needs it
    /// (row inverse std for layer norm, probabilities for cross-entropy).
    aux: Option<Array2<T>>,
}

/// A tape of 2-D values. Build the forward pass with the op methods, then call
/// [`Graph::backward`] on a scalar (1×1) node.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn bump<T: Float>(slot: &mut Option<Array2<T>>, delta: Array2<T>) {
    match slot {
        Some(acc) => *acc += &delta,
        None => *slot = Some(delta),
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_full(value, op, requires_grad, None)
    }

    fn push_full(&mut self, value: Array2<T>, op: Op<T>, requires_grad: bool, aux: Option<Array2<T>>) -> Var {
        // Transposes and concatenations can come back column-major; gather needs flat row-major data.
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Array2<T>) -> Var {
        self.push_full(value, Op::Leaf, true, None)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push_full(value, Op::Leaf, false, None)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        let value = &self.nodes[v.0].value;
        assert_eq!(value.dim(), (1, 1), "scalar() on non-scalar node");
        value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul: inner dimensions differ");
        let out = va.dot(vb);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shapes differ");
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shapes differ");
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shapes differ");
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// `x[n×d] + row[1×d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (vx, vr) = (self.value(x), self.value(row));
        assert!(vr.nrows() == 1 && vr.ncols() == vx.ncols(), "add_row: bad row shape");
        let out = vx + vr;
        self.push(out, Op::AddRow(x, row), &[x, row])
    }

    /// `x[n×d] ⊙ row[1×d]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (vx, vr) = (self.value(x), self.value(row));
        assert!(vr.nrows() == 1 && vr.ncols() == vx.ncols(), "mul_row: bad row shape");
        let out = vx * vr;
        self.push(out, Op::MulRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x) * c;
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// Elementwise product with a fixed array (dropout masks, windows).
    pub fn mul_const(&mut self, x: Var, mask: Array2<T>) -> Var {
        assert_eq!(self.shape(x), mask.dim(), "mul_const: shapes differ");
        let out = self.value(x) * &mask;
        self.push(out, Op::MulConst(x, mask), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self.value(x).mapv(|v| if v > T::zero() { v } else { v * slope });
        self.push(out, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.tanh());
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.exp());
        self.push(out, Op::Exp(x), &[x])
    }

    /// Natural log; the input must be strictly positive.
    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.ln());
        self.push(out, Op::Ln(x), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.sqrt());
        self.push(out, Op::Sqrt(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.abs());
        self.push(out, Op::Abs(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).to_owned();
        for mut row in out.rows_mut() {
            let max = row.fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
            row.mapv_inplace(|v| (v - max).exp());
            let total: T = row.iter().copied().sum();
            row.mapv_inplace(|v| v / total);
        }
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    /// Per-row standardisation without affine parameters.
    pub fn layer_norm_rows(&mut self, x: Var, eps: T) -> Var {
        let vx = self.value(x);
        let (rows, cols) = vx.dim();
        let n = T::of(cols as f64);
        let mut out = vx.to_owned();
        let mut inv_std = Array2::zeros((rows, 1));
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std[[r, 0]] = inv;
        }
        let requires_grad = self.nodes[x.0].requires_grad;
        self.push_full(out, Op::LayerNormRows(x), requires_grad, Some(inv_std))
    }

    /// `out.flat[i] = src.flat[index[i]]`, or zero where `index[i] == PAD_INDEX`.
    pub fn gather(&mut self, src: Var, index: Vec<usize>, shape: (usize, usize)) -> Var {
        assert_eq!(index.len(), shape.0 * shape.1, "gather: index length != output size");
        let vs = self.value(src);
        let flat = vs.as_slice().expect("graph values are standard layout");
        let data: Vec<T> = index
            .iter()
            .map(|&i| if i == PAD_INDEX { T::zero() } else { flat[i] })
            .collect();
        let out = Array2::from_shape_vec(shape, data).expect("shape checked");
        self.push(out, Op::Gather(src, index), &[src])
    }

    /// `out.flat[index[i]] += src.flat[i]`; entries with `PAD_INDEX` are dropped.
    pub fn scatter_add(&mut self, src: Var, index: Vec<usize>, shape: (usize, usize)) -> Var {
        let vs = self.value(src);
        assert_eq!(index.len(), vs.len(), "scatter_add: index length != source size");
        let flat = vs.as_slice().expect("graph values are standard layout");
        let mut data = vec![T::zero(); shape.0 * shape.1];
        for (&i, &v) in index.iter().zip(flat) {
            if i != PAD_INDEX {
                data[i] += v;
            }
        }
        let out = Array2::from_shape_vec(shape, data).expect("shape checked");
        self.push(out, Op::ScatterAdd(src, index), &[src])
    }

    /// Repeat rows of `x` in the given order (embedding lookup, length regulation).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let (n, d) = self.shape(x);
        let mut index = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            assert!(r < n, "select_rows: row {r} out of range {n}");
            index.extend(r * d..(r + 1) * d);
        }
        self.gather(x, index, (rows.len(), d))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `[start, end)` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.value(x).slice(ndarray::s![.., start..end]).to_owned();
        self.push(out, Op::SliceCols(x, start), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: T = self.value(x).iter().copied().sum();
        self.push(Array2::from_elem((1, 1), total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let total: T = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push(Array2::from_elem((1, 1), total), Op::Mean(x), &[x])
    }

    /// Mean over rows of `-log softmax(logits)[row, target[row]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let vl = self.value(logits);
        let (rows, cols) = vl.dim();
        assert_eq!(rows, targets.len(), "cross_entropy: one target per row");
        let mut probs = vl.to_owned();
        let mut total = T::zero();
        for (mut row, &t) in probs.rows_mut().into_iter().zip(targets) {
            assert!(t < cols, "cross_entropy: target {t} >= {cols}");
            let max = row.fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
            let log_z = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += log_z - row[t];
            row.mapv_inplace(|v| (v - log_z).exp());
        }
        let loss = total / T::of(rows as f64);
        let requires_grad = self.nodes[logits.0].requires_grad;
        self.push_full(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy(logits, targets.to_vec()),
            requires_grad,
            Some(probs),
        )
    }

    /// Reverse pass from a 1×1 node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), T::one()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let want = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if want(*a) {
                        bump(&mut grads[a.0], g.dot(&self.value(*b).t()));
                    }
                    if want(*b) {
                        bump(&mut grads[b.0], self.value(*a).t().dot(&g));
                    }
                }
                Op::Transpose(a) => bump(&mut grads[a.0], g.t().to_owned()),
                Op::Add(a, b) => {
                    if want(*a) {
                        bump(&mut grads[a.0], g.clone());
                    }
                    if want(*b) {
                        bump(&mut grads[b.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if want(*a) {
                        bump(&mut grads[a.0], g.clone());
                    }
                    if want(*b) {
                        bump(&mut grads[b.0], -g);
                    }
                }
                Op::Mul(a, b) => {
                    if want(*a) {
                        bump(&mut grads[a.0], &g * self.value(*b));
                    }
                    if want(*b) {
                        bump(&mut grads[b.0], &g * self.value(*a));
                    }
                }
                Op::AddRow(x, row) => {
                    if want(*row) {
                        bump(&mut grads[row.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if want(*x) {
                        bump(&mut grads[x.0], g);
                    }
                }
                Op::MulRow(x, row) => {
                    if want(*row) {
                        let gr = (&g * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        bump(&mut grads[row.0], gr);
                    }
                    if want(*x) {
                        bump(&mut grads[x.0], &g * self.value(*row));
                    }
                }
                Op::Scale(x, c) => bump(&mut grads[x.0], g * *c),
                Op::MulConst(x, m) => bump(&mut grads[x.0], g * m),
                Op::Relu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(self.value(*x))
                        .for_each(|gv, &xv| if xv <= T::zero() { *gv = T::zero() });
                    bump(&mut grads[x.0], gx);
                }
                Op::LeakyRelu(x, slope) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(self.value(*x))
                        .for_each(|gv, &xv| if xv <= T::zero() { *gv *= *slope });
                    bump(&mut grads[x.0], gx);
                }
                Op::Tanh(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(&node.value)
                        .for_each(|gv, &y| *gv *= T::one() - y * y);
                    bump(&mut grads[x.0], gx);
                }
                Op::Exp(x) => bump(&mut grads[x.0], g * &node.value),
                Op::Ln(x) => bump(&mut grads[x.0], g / self.value(*x)),
                Op::Sqrt(x) => {
                    let two = T::of(2.0);
                    let mut gx = g;
                    Zip::from(&mut gx).and(&node.value).for_each(|gv, &y| *gv /= two * y);
                    bump(&mut grads[x.0], gx);
                }
                Op::Square(x) => bump(&mut grads[x.0], g * self.value(*x) * T::of(2.0)),
                Op::Abs(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|gv, &xv| {
                        *gv = if xv > T::zero() {
                            *gv
                        } else if xv < T::zero() {
                            -*gv
                        } else {
                            T::zero()
                        }
                    });
                    bump(&mut grads[x.0], gx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut gx = &g * y;
                    let dots = gx.sum_axis(Axis(1));
                    for ((mut row, yrow), d) in gx.rows_mut().into_iter().zip(y.rows()).zip(dots.iter()) {
                        Zip::from(&mut row).and(&yrow).for_each(|gv, &yv| *gv -= yv * *d);
                    }
                    bump(&mut grads[x.0], gx);
                }
                Op::LayerNormRows(x) => {
                    let y = &node.value;
                    let inv_std = node.aux.as_ref().expect("layer norm saves inv std");
                    let n = T::of(y.ncols() as f64);
                    let mut gx = g.clone();
                    for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let grow = g.row(r);
                        let yrow = y.row(r);
                        let mean_g = grow.iter().copied().sum::<T>() / n;
                        let mean_gy = grow.iter().zip(yrow.iter()).map(|(&a, &b)| a * b).sum::<T>() / n;
                        let inv = inv_std[[r, 0]];
                        Zip::from(&mut row)
                            .and(&yrow)
                            .for_each(|gv, &yv| *gv = inv * (*gv - mean_g - yv * mean_gy));
                    }
                    bump(&mut grads[x.0], gx);
                }
                Op::Gather(src, index) => {
                    let mut gs = Array2::zeros(self.shape(*src));
                    {
                        let flat = gs.as_slice_mut().expect("fresh array");
                        for (&i, &gv) in index.iter().zip(g.iter()) {
                            if i != PAD_INDEX {
                                flat[i] += gv;
                            }
                        }
                    }
                    bump(&mut grads[src.0], gs);
                }
                Op::ScatterAdd(src, index) => {
                    let g = g.as_standard_layout();
                    let gflat = g.as_slice().expect("standard layout");
                    let data: Vec<T> = index
                        .iter()
                        .map(|&i| if i == PAD_INDEX { T::zero() } else { gflat[i] })
                        .collect();
                    let gs = Array2::from_shape_vec(self.shape(*src), data).expect("same size");
                    bump(&mut grads[src.0], gs);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let width = self.shape(*p).1;
                        if want(*p) {
                            let part = g.slice(ndarray::s![.., start..start + width]).to_owned();
                            bump(&mut grads[p.0], part);
                        }
                        start += width;
                    }
                }
                Op::SliceCols(x, start) => {
                    let mut gx = Array2::zeros(self.shape(*x));
                    let width = g.ncols();
                    gx.slice_mut(ndarray::s![.., *start..*start + width]).assign(&g);
                    bump(&mut grads[x.0], gx);
                }
                Op::Sum(x) => bump(&mut grads[x.0], Array2::from_elem(self.shape(*x), g[[0, 0]])),
                Op::Mean(x) => {
                    let n = T::of(self.value(*x).len() as f64);
                    bump(&mut grads[x.0], Array2::from_elem(self.shape(*x), g[[0, 0]] / n));
                }
                Op::CrossEntropy(logits, targets) => {
                    let mut gx = node.aux.clone().expect("cross-entropy saves probabilities");
                    for (mut row, &t) in gx.rows_mut().into_iter().zip(targets) {
                        row[t] -= T::one();
                    }
                    let scale = g[[0, 0]] / T::of(targets.len() as f64);
                    gx.mapv_inplace(|v| v * scale);
                    bump(&mut grads[logits.0], gx);
                }
            }
        }
        Gradients { grads }
    }
}
