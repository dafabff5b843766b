//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every value is a 2-D array; vectors are `1×n` rows. A [`Graph`] is built
//! fresh for each forward pass and discarded after [`Graph::backward`].

use ndarray::{s, Array2, Axis, Zip};

use crate::Real;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a square-kernel 2-D convolution lowered to `im2col`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Source pixel for patch row `(c, ky, kx)` at output position `(oy, ox)`.
    fn source(&self, ky: usize, kx: usize, oy: usize, ox: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some(y as usize * self.width + x as usize)
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    MulScalar(Var, Var),
    Relu(Var),
    Exp(Var),
    Clamp(Var, T, T),
    SoftmaxRows(Var),
    NormalizeRows(Var, T),
    SumAll(Var),
    MeanAll(Var),
    RowSums(Var),
    ColMeans(Var),
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    RowNorm(Var),
    SoftmaxXent(Var, Vec<usize>),
    Im2Col(Var, ConvGeom),
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn softmax_row<T: Real>(row: ndarray::ArrayView1<T>, out: ndarray::ArrayViewMut1<T>) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    let mut out = out;
    for (o, &x) in out.iter_mut().zip(row.iter()) {
        *o = (x - max).exp();
        sum += *o;
    }
    out.mapv_inplace(|v| v / sum);
}

fn softmax_rows<T: Real>(x: &Array2<T>) -> Array2<T> {
    let mut out = Array2::zeros(x.raw_dim());
    for (row, o) in x.rows().into_iter().zip(out.rows_mut()) {
        softmax_row(row, o);
    }
    out
}

fn normalize_rows<T: Real>(x: &Array2<T>, eps: T) -> (Array2<T>, Vec<T>) {
    let d = T::c(x.ncols() as f64);
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let mean = row.iter().copied().sum::<T>() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / d;
        let inv = T::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * inv);
        inv_std.push(inv);
    }
    (out, inv_std)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> T {
        let x = self.value(v);
        debug_assert_eq!(x.dim(), (1, 1));
        x[[0, 0]]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn row(&mut self, values: &[T]) -> Var {
        let arr = Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape");
        self.constant(arr)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul shape {:?} x {:?}", va.dim(), vb.dim());
        let out = va.dot(vb);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).dim(),
            self.value(b).dim(),
            "{what}: shape mismatch"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let out = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let out = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// `a + row`, broadcasting a `1×d` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.dim(), (1, va.ncols()), "add_row shape");
        let out = va + vr;
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.dim(), (1, va.ncols()), "mul_row shape");
        let out = va * vr;
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::MulRow(a, row), rg)
    }

    /// `a + col`, broadcasting an `n×1` column over every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        assert_eq!(vc.dim(), (va.nrows(), 1), "add_col shape");
        let out = va + vc;
        let rg = self.rg(a) || self.rg(col);
        self.push(out, Op::AddCol(a, col), rg)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        assert_eq!(vc.dim(), (va.nrows(), 1), "mul_col shape");
        let out = va * vc;
        let rg = self.rg(a) || self.rg(col);
        self.push(out, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).mapv(|v| v * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).mapv(|v| v + c);
        let rg = self.rg(a);
        self.push(out, Op::AddConst(a), rg)
    }

    /// `s · a` for a `1×1` node `s`.
    pub fn mul_scalar(&mut self, s: Var, a: Var) -> Var {
        assert_eq!(self.value(s).dim(), (1, 1), "mul_scalar expects 1x1 scale");
        let k = self.scalar(s);
        let out = self.value(a).mapv(|v| v * k);
        let rg = self.rg(s) || self.rg(a);
        self.push(out, Op::MulScalar(s, a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.exp());
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let out = self.value(a).mapv(|v| v.max(lo).min(hi));
        let rg = self.rg(a);
        self.push(out, Op::Clamp(a, lo, hi), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Zero-mean, unit-variance per row (the affine-free core of layer norm).
    pub fn normalize_rows(&mut self, a: Var, eps: T) -> Var {
        let (out, _) = normalize_rows(self.value(a), eps);
        let rg = self.rg(a);
        self.push(out, Op::NormalizeRows(a, eps), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / T::c(v.len() as f64);
        let rg = self.rg(a);
        self.push(Array2::from_elem((1, 1), s), Op::MeanAll(a), rg)
    }

    /// `n×d → n×1` sum over each row.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(out, Op::RowSums(a), rg)
    }

    /// `n×d → 1×d` mean over rows.
    pub fn col_means(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = T::c(v.nrows() as f64);
        let out = v.sum_axis(Axis(0)).mapv(|x| x / n).insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(out, Op::ColMeans(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols rows differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows cols differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select(Axis(0), idx);
        let rg = self.rg(a);
        self.push(out, Op::GatherRows(a, idx.to_vec()), rg)
    }

    /// Euclidean norm of each row, `n×d → n×1`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map_axis(Axis(1), |r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(out, Op::RowNorm(a), rg)
    }

    /// Mean softmax cross-entropy of `logits` (n×m) against class indices.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), targets.len(), "softmax_xent batch size");
        let p = softmax_rows(x);
        let n = T::c(targets.len() as f64);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -p[[i, t]].max(T::min_positive_value()).ln())
            .sum::<T>()
            / n;
        let rg = self.rg(logits);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::SoftmaxXent(logits, targets.to_vec()),
            rg,
        )
    }

    /// Lower a `C × (H·W)` image to its `(C·k·k) × (Ho·Wo)` patch matrix.
    pub fn im2col(&mut self, a: Var, geom: ConvGeom) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), (geom.channels, geom.height * geom.width), "im2col input shape");
        let (ho, wo, k) = (geom.out_height(), geom.out_width(), geom.kernel);
        let mut out = Array2::zeros((geom.channels * k * k, ho * wo));
        for c in 0..geom.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            if let Some(src) = geom.source(ky, kx, oy, ox) {
                                out[[r, oy * wo + ox]] = x[[c, src]];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Im2Col(a, geom), rg)
    }

    /// Back-propagate from a `1×1` node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward expects a scalar");
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let d = g.dot(&self.value(*b).t());
                        self.acc(&mut grads, *a, d);
                    }
                    if self.rg(*b) {
                        let d = self.value(*a).t().dot(&g);
                        self.acc(&mut grads, *b, d);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        self.acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        self.acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        self.acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        self.acc(&mut grads, *b, g.mapv(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        self.acc(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.rg(*b) {
                        self.acc(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::AddRow(a, r) => {
                    if self.rg(*r) {
                        let d = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut grads, *r, d);
                    }
                    if self.rg(*a) {
                        self.acc(&mut grads, *a, g);
                    }
                }
                Op::MulRow(a, r) => {
                    if self.rg(*r) {
                        let d = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut grads, *r, d);
                    }
                    if self.rg(*a) {
                        self.acc(&mut grads, *a, &g * self.value(*r));
                    }
                }
                Op::AddCol(a, c) => {
                    if self.rg(*c) {
                        let d = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                        self.acc(&mut grads, *c, d);
                    }
                    if self.rg(*a) {
                        self.acc(&mut grads, *a, g);
                    }
                }
                Op::MulCol(a, c) => {
                    if self.rg(*c) {
                        let d = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        self.acc(&mut grads, *c, d);
                    }
                    if self.rg(*a) {
                        self.acc(&mut grads, *a, &g * self.value(*c));
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    self.acc(&mut grads, *a, g.mapv(|v| v * c));
                }
                Op::AddConst(a) => {
                    self.acc(&mut grads, *a, g);
                }
                Op::MulScalar(s, a) => {
                    if self.rg(*s) {
                        let d = (&g * self.value(*a)).sum();
                        self.acc(&mut grads, *s, Array2::from_elem((1, 1), d));
                    }
                    if self.rg(*a) {
                        let k = self.scalar(*s);
                        self.acc(&mut grads, *a, g.mapv(|v| v * k));
                    }
                }
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                        if x <= T::zero() {
                            *d = T::zero();
                        }
                    });
                    self.acc(&mut grads, *a, d);
                }
                Op::Exp(a) => {
                    self.acc(&mut grads, *a, &g * &node.value);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                        if x < lo || x > hi {
                            *d = T::zero();
                        }
                    });
                    self.acc(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let gy = &g * y;
                    let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let d = &gy - &(y * &dot);
                    self.acc(&mut grads, *a, d);
                }
                Op::NormalizeRows(a, eps) => {
                    let (y, inv_std) = normalize_rows(self.value(*a), *eps);
                    let dn = T::c(y.ncols() as f64);
                    let mut d = Array2::zeros(y.raw_dim());
                    for (r, ((mut drow, grow), yrow)) in d
                        .rows_mut()
                        .into_iter()
                        .zip(g.rows())
                        .zip(y.rows())
                        .enumerate()
                    {
                        let gmean = grow.sum() / dn;
                        let gy = grow.iter().zip(yrow.iter()).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for ((dv, &gv), &yv) in drow.iter_mut().zip(grow.iter()).zip(yrow.iter()) {
                            *dv = inv_std[r] * (gv - gmean - yv * gy);
                        }
                    }
                    self.acc(&mut grads, *a, d);
                }
                Op::SumAll(a) => {
                    let k = g[[0, 0]];
                    let d = Array2::from_elem(self.value(*a).raw_dim(), k);
                    self.acc(&mut grads, *a, d);
                }
                Op::MeanAll(a) => {
                    let v = self.value(*a);
                    let k = g[[0, 0]] / T::c(v.len() as f64);
                    self.acc(&mut grads, *a, Array2::from_elem(v.raw_dim(), k));
                }
                Op::RowSums(a) => {
                    let v = self.value(*a);
                    let d = Array2::from_shape_fn(v.raw_dim(), |(r, _)| g[[r, 0]]);
                    self.acc(&mut grads, *a, d);
                }
                Op::ColMeans(a) => {
                    let v = self.value(*a);
                    let n = T::c(v.nrows() as f64);
                    let d = Array2::from_shape_fn(v.raw_dim(), |(_, c)| g[[0, c]] / n);
                    self.acc(&mut grads, *a, d);
                }
                Op::Transpose(a) => {
                    self.acc(&mut grads, *a, g.t().to_owned());
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    self.acc(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        if self.rg(p) {
                            self.acc(&mut grads, p, g.slice(s![.., off..off + w]).to_owned());
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        if self.rg(p) {
                            self.acc(&mut grads, p, g.slice(s![off..off + h, ..]).to_owned());
                        }
                        off += h;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    for (k, &src) in idx.iter().enumerate() {
                        let mut row = d.row_mut(src);
                        row += &g.row(k);
                    }
                    self.acc(&mut grads, *a, d);
                }
                Op::RowNorm(a) => {
                    let x = self.value(*a);
                    let mut d = Array2::zeros(x.raw_dim());
                    for (r, (mut drow, xrow)) in d.rows_mut().into_iter().zip(x.rows()).enumerate() {
                        let n = node.value[[r, 0]];
                        if n > T::zero() {
                            let k = g[[r, 0]] / n;
                            drow.zip_mut_with(&xrow, |dv, &xv| *dv = xv * k);
                        }
                    }
                    self.acc(&mut grads, *a, d);
                }
                Op::SoftmaxXent(a, targets) => {
                    let mut p = softmax_rows(self.value(*a));
                    let k = g[[0, 0]] / T::c(targets.len() as f64);
                    for (i, &t) in targets.iter().enumerate() {
                        p[[i, t]] -= T::one();
                    }
                    p.mapv_inplace(|v| v * k);
                    self.acc(&mut grads, *a, p);
                }
                Op::Im2Col(a, geom) => {
                    let (ho, wo, k) = (geom.out_height(), geom.out_width(), geom.kernel);
                    let mut d = Array2::zeros((geom.channels, geom.height * geom.width));
                    for c in 0..geom.channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let r = (c * k + ky) * k + kx;
                                for oy in 0..ho {
                                    for ox in 0..wo {
                                        if let Some(src) = geom.source(ky, kx, oy, ox) {
                                            d[[c, src]] += g[[r, oy * wo + ox]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.acc(&mut grads, *a, d);
                }
            }
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Array2<T>>], v: Var, d: Array2<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &d,
            slot @ None => *slot = Some(d),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference check of d(sum(f(x) * w))/dx for a unary graph builder.
    fn check_unary(x0: Array2<f64>, build: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let y = build(&mut g, x);
        let w = Array2::from_shape_fn(g.value(y).raw_dim(), |(i, j)| 0.3 + 0.17 * i as f64 - 0.11 * j as f64);
        let wv = g.constant(w.clone());
        let prod = g.mul(y, wv);
        let loss = g.sum_all(prod);
        let grads = g.backward(loss);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Array2::zeros(x0.raw_dim()));

        let eval = |xv: &Array2<f64>| {
            let mut g = Graph::new();
            let x = g.leaf(xv.clone());
            let y = build(&mut g, x);
            (g.value(y) * &w).sum()
        };
        let h = 1e-6;
        for idx in ndarray::indices(x0.raw_dim()) {
            let mut xp = x0.clone();
            xp[idx] += h;
            let mut xm = x0.clone();
            xm[idx] -= h;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let a = analytic[idx];
            assert!(
                (fd - a).abs() <= 1e-6 + 1e-5 * fd.abs().max(a.abs()),
                "grad mismatch at {idx:?}: fd={fd} analytic={a}"
            );
        }
    }

    fn sample() -> Array2<f64> {
        array![[0.5, -1.2, 0.3], [1.1, 0.4, -0.7]]
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(array![[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]]);
        let y = g.softmax_rows(x);
        for row in g.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_gradients() {
        check_unary(sample(), |g, x| g.exp(x));
        check_unary(sample(), |g, x| g.relu(x));
        check_unary(sample(), |g, x| g.softmax_rows(x));
        check_unary(sample(), |g, x| g.normalize_rows(x, 1e-5));
        check_unary(sample(), |g, x| g.row_norm(x));
        check_unary(sample(), |g, x| g.clamp(x, -1.0, 1.0));
        check_unary(sample(), |g, x| g.transpose(x));
        check_unary(sample(), |g, x| g.col_means(x));
        check_unary(sample(), |g, x| g.row_sums(x));
        check_unary(sample(), |g, x| g.slice_cols(x, 1, 2));
        check_unary(sample(), |g, x| g.gather_rows(x, &[1, 0, 1]));
    }

    #[test]
    fn binary_and_broadcast_gradients() {
        let other = array![[0.2, 0.9, -0.4], [0.6, -0.3, 0.8]];
        let bias = array![[0.1, -0.2, 0.3]];
        let col = array![[0.7], [-1.3]];
        let right = array![[0.3, -0.1], [0.2, 0.5], [-0.4, 0.9]];
        check_unary(sample(), |g, x| {
            let o = g.constant(other.clone());
            g.mul(x, o)
        });
        check_unary(sample(), |g, x| {
            let r = g.constant(right.clone());
            g.matmul(x, r)
        });
        check_unary(sample(), |g, x| {
            let r = g.constant(right.clone());
            let rt = g.transpose(r);
            let xt = g.transpose(x);
            g.matmul(xt, rt)
        });
        check_unary(bias.clone(), |g, b| {
            let o = g.constant(other.clone());
            g.mul_row(o, b)
        });
        check_unary(bias.clone(), |g, b| {
            let o = g.constant(other.clone());
            g.add_row(o, b)
        });
        check_unary(col.clone(), |g, c| {
            let o = g.constant(other.clone());
            g.mul_col(o, c)
        });
        check_unary(col, |g, c| {
            let o = g.constant(other.clone());
            g.add_col(o, c)
        });
        check_unary(array![[0.8]], |g, s| {
            let o = g.constant(other.clone());
            g.mul_scalar(s, o)
        });
        check_unary(sample(), |g, x| {
            let o = g.constant(other.clone());
            let c = g.concat_cols(&[x, o]);
            g.concat_rows(&[c, c])
        });
    }

    #[test]
    fn cross_entropy_gradient_and_value() {
        check_unary(sample(), |g, x| g.softmax_xent(x, &[2, 0]));
        let mut g = Graph::<f64>::new();
        let x = g.constant(Array2::zeros((1, 4)));
        let l = g.softmax_xent(x, &[3]);
        assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn im2col_gradient() {
        let geom = ConvGeom {
            channels: 2,
            height: 4,
            width: 4,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x = Array2::from_shape_fn((2, 16), |(c, p)| ((c * 16 + p) as f64 * 0.37).sin());
        check_unary(x, move |g, x| g.im2col(x, geom));
    }

    #[test]
    fn row_norm_of_zero_row_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Array2::zeros((1, 3)));
        let n = g.row_norm(x);
        let l = g.sum_all(n);
        assert_eq!(g.scalar(l), 0.0);
        let grads = g.backward(l);
        assert!(grads.get(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(sample());
        let x = g.leaf(sample());
        let y = g.mul(c, x);
        let l = g.sum_all(y);
        let grads = g.backward(l);
        assert!(grads.get(c).is_none());
        assert!(grads.get(x).is_some());
    }
}
