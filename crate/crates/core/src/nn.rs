//! Minimal reverse-mode autodiff on dense f64 matrices, plus the optimizer
//! and categorical sampling strategies used at inference time.
//!
//! The tape holds every intermediate value; `backward` walks it once in
//! reverse. All shapes are checked at node creation so mismatches fail fast
//! instead of corrupting gradients.

use alloc::vec::Vec;

use rand::Rng;

use crate::math;

/// Dense row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: alloc::vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Gaussian init scaled by `std` (Box-Muller on the provided RNG).
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        Matrix::from_fn(rows, cols, |_, _| std * gaussian(rng))
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scalar(&self) -> f64 {
        debug_assert_eq!((self.rows, self.cols), (1, 1));
        self.data[0]
    }
}

/// Standard normal draw via Box-Muller.
pub fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * core::f64::consts::PI * u2)
}

pub type Id = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Id, Id),
    /// Broadcast-add a (1,c) row to every row of a.
    AddRow(Id, Id),
    /// Broadcast-multiply every row of a by a (1,c) row.
    MulRow(Id, Id),
    Mul(Id, Id),
    /// Multiply every row of a (r,c) by the matching entry of a (r,1) column.
    MulCol(Id, Id),
    Scale(Id, f64),
    MatMul(Id, Id),
    /// a * b^T without materializing the transpose.
    MatMulNT(Id, Id),
    Gelu(Id),
    /// Row softmax; masked-out entries get zero probability. Fully masked
    /// rows produce an all-zero row. The backward pass only needs the
    /// resulting probabilities, so the mask itself is not retained.
    SoftmaxMasked(Id),
    /// x, gain (1,c), bias (1,c), eps.
    LayerNorm(Id, Id, Id, f64),
    /// Row gather; backward scatter-adds, so repeated indices accumulate.
    GatherRows(Id, Vec<usize>),
    /// Sum all rows into a (1,c) row.
    SumRows(Id),
    /// Sum every entry into a scalar.
    SumAll(Id),
    ConcatRows(Vec<Id>),
    SliceCols(Id, usize, usize),
    /// Pairwise dot products scattered into an (n_q, n_k) score matrix:
    /// out[qi, ki] = qp[qi] . r[p] for pairs[p] = (qi, ki), zero elsewhere.
    PairDotScatter(Id, Id, Vec<(usize, usize)>, usize),
    /// Sum of -log softmax(logits[row])[class] over the target list.
    CrossEntropy(Id, Vec<(usize, usize)>),
}

struct Node {
    op: Op,
    value: Matrix,
    grad: Option<Matrix>,
    param: Option<usize>,
}

/// One forward pass worth of computation graph.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Matrix, param: Option<usize>) -> Id {
        self.nodes.push(Node { op, value, grad: None, param });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: Id) -> &Matrix {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: Id) -> Option<&Matrix> {
        self.nodes[id].grad.as_ref()
    }

    pub fn shape(&self, id: Id) -> (usize, usize) {
        (self.nodes[id].value.rows, self.nodes[id].value.cols)
    }

    /// Constant input; receives no parameter gradient.
    pub fn constant(&mut self, value: Matrix) -> Id {
        self.push(Op::Leaf, value, None)
    }

    /// Parameter input tagged with its index in the model parameter list.
    pub fn param(&mut self, value: Matrix, index: usize) -> Id {
        self.push(Op::Leaf, value, Some(index))
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        assert_eq!(self.shape(a), self.shape(b));
        let (r, c) = self.shape(a);
        let mut v = Matrix::zeros(r, c);
        for i in 0..v.data.len() {
            v.data[i] = self.nodes[a].value.data[i] + self.nodes[b].value.data[i];
        }
        self.push(Op::Add(a, b), v, None)
    }

    pub fn add_row(&mut self, a: Id, row: Id) -> Id {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c));
        let mut v = self.nodes[a].value.clone();
        for i in 0..r {
            for j in 0..c {
                v.data[i * c + j] += self.nodes[row].value.data[j];
            }
        }
        self.push(Op::AddRow(a, row), v, None)
    }

    pub fn mul_row(&mut self, a: Id, row: Id) -> Id {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c));
        let mut v = self.nodes[a].value.clone();
        for i in 0..r {
            for j in 0..c {
                v.data[i * c + j] *= self.nodes[row].value.data[j];
            }
        }
        self.push(Op::MulRow(a, row), v, None)
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        assert_eq!(self.shape(a), self.shape(b));
        let mut v = self.nodes[a].value.clone();
        for i in 0..v.data.len() {
            v.data[i] *= self.nodes[b].value.data[i];
        }
        self.push(Op::Mul(a, b), v, None)
    }

    pub fn mul_col(&mut self, a: Id, col: Id) -> Id {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(col), (r, 1));
        let mut v = self.nodes[a].value.clone();
        for i in 0..r {
            let s = self.nodes[col].value.data[i];
            for j in 0..c {
                v.data[i * c + j] *= s;
            }
        }
        self.push(Op::MulCol(a, col), v, None)
    }

    pub fn scale(&mut self, a: Id, s: f64) -> Id {
        let mut v = self.nodes[a].value.clone();
        for x in &mut v.data {
            *x *= s;
        }
        self.push(Op::Scale(a, s), v, None)
    }

    pub fn matmul(&mut self, a: Id, b: Id) -> Id {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul shape mismatch ({ar}x{ac}) * ({br}x{bc})");
        let mut v = Matrix::zeros(ar, bc);
        for i in 0..ar {
            for k in 0..ac {
                let aik = self.nodes[a].value.data[i * ac + k];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..bc {
                    v.data[i * bc + j] += aik * self.nodes[b].value.data[k * bc + j];
                }
            }
        }
        self.push(Op::MatMul(a, b), v, None)
    }

    pub fn matmul_nt(&mut self, a: Id, b: Id) -> Id {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, bc, "matmul_nt shape mismatch ({ar}x{ac}) * ({br}x{bc})^T");
        let mut v = Matrix::zeros(ar, br);
        for i in 0..ar {
            for j in 0..br {
                let mut s = 0.0;
                for k in 0..ac {
                    s += self.nodes[a].value.data[i * ac + k] * self.nodes[b].value.data[j * bc + k];
                }
                v.data[i * br + j] = s;
            }
        }
        self.push(Op::MatMulNT(a, b), v, None)
    }

    pub fn gelu(&mut self, a: Id) -> Id {
        let mut v = self.nodes[a].value.clone();
        for x in &mut v.data {
            *x = gelu(*x);
        }
        self.push(Op::Gelu(a), v, None)
    }

    pub fn softmax_masked(&mut self, a: Id, mask: Vec<bool>) -> Id {
        let (r, c) = self.shape(a);
        assert_eq!(mask.len(), r * c);
        let mut v = Matrix::zeros(r, c);
        for i in 0..r {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..c {
                if mask[i * c + j] {
                    mx = mx.max(self.nodes[a].value.data[i * c + j]);
                }
            }
            if mx == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut z = 0.0;
            for j in 0..c {
                if mask[i * c + j] {
                    let e = math::exp(self.nodes[a].value.data[i * c + j] - mx);
                    v.data[i * c + j] = e;
                    z += e;
                }
            }
            for j in 0..c {
                v.data[i * c + j] /= z;
            }
        }
        self.push(Op::SoftmaxMasked(a), v, None)
    }

    pub fn layer_norm(&mut self, a: Id, gain: Id, bias: Id, eps: f64) -> Id {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(gain), (1, c));
        assert_eq!(self.shape(bias), (1, c));
        let mut v = Matrix::zeros(r, c);
        for i in 0..r {
            let row = &self.nodes[a].value.data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / math::sqrt(var + eps);
            for j in 0..c {
                let xh = (row[j] - mean) * inv;
                v.data[i * c + j] =
                    self.nodes[gain].value.data[j] * xh + self.nodes[bias].value.data[j];
            }
        }
        self.push(Op::LayerNorm(a, gain, bias, eps), v, None)
    }

    pub fn gather_rows(&mut self, a: Id, indices: Vec<usize>) -> Id {
        let (r, c) = self.shape(a);
        let mut v = Matrix::zeros(indices.len(), c);
        for (i, &idx) in indices.iter().enumerate() {
            assert!(idx < r);
            v.data[i * c..(i + 1) * c].copy_from_slice(&self.nodes[a].value.data[idx * c..(idx + 1) * c]);
        }
        self.push(Op::GatherRows(a, indices), v, None)
    }

    pub fn sum_rows(&mut self, a: Id) -> Id {
        let (r, c) = self.shape(a);
        let mut v = Matrix::zeros(1, c);
        for i in 0..r {
            for j in 0..c {
                v.data[j] += self.nodes[a].value.data[i * c + j];
            }
        }
        self.push(Op::SumRows(a), v, None)
    }

    pub fn sum_all(&mut self, a: Id) -> Id {
        let s: f64 = self.nodes[a].value.data.iter().sum();
        self.push(Op::SumAll(a), Matrix::from_vec(1, 1, alloc::vec![s]), None)
    }

    pub fn concat_rows(&mut self, parts: Vec<Id>) -> Id {
        assert!(!parts.is_empty());
        let c = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            assert_eq!(self.shape(p).1, c);
            rows += self.shape(p).0;
            data.extend_from_slice(&self.nodes[p].value.data);
        }
        self.push(Op::ConcatRows(parts), Matrix::from_vec(rows, c, data), None)
    }

    pub fn slice_cols(&mut self, a: Id, start: usize, len: usize) -> Id {
        let (r, c) = self.shape(a);
        assert!(start + len <= c);
        let mut v = Matrix::zeros(r, len);
        for i in 0..r {
            v.data[i * len..(i + 1) * len]
                .copy_from_slice(&self.nodes[a].value.data[i * c + start..i * c + start + len]);
        }
        self.push(Op::SliceCols(a, start, len), v, None)
    }

    pub fn pair_dot_scatter(&mut self, qp: Id, r: Id, pairs: Vec<(usize, usize)>, n_k: usize) -> Id {
        let (nq, d) = self.shape(qp);
        let (np, dr) = self.shape(r);
        assert_eq!(d, dr);
        assert_eq!(np, pairs.len());
        let mut v = Matrix::zeros(nq, n_k);
        for (p, &(qi, ki)) in pairs.iter().enumerate() {
            assert!(qi < nq && ki < n_k);
            let mut s = 0.0;
            for j in 0..d {
                s += self.nodes[qp].value.data[qi * d + j] * self.nodes[r].value.data[p * d + j];
            }
            v.data[qi * n_k + ki] += s;
        }
        self.push(Op::PairDotScatter(qp, r, pairs, n_k), v, None)
    }

    /// Summed negative log-likelihood over `(row, class)` targets.
    pub fn cross_entropy(&mut self, logits: Id, targets: Vec<(usize, usize)>) -> Id {
        let (r, c) = self.shape(logits);
        let mut loss = 0.0;
        for &(row, class) in &targets {
            assert!(row < r && class < c);
            let lr = &self.nodes[logits].value.data[row * c..(row + 1) * c];
            let mx = lr.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = mx + math::ln(lr.iter().map(|&x| math::exp(x - mx)).sum::<f64>());
            loss += lse - lr[class];
        }
        self.push(
            Op::CrossEntropy(logits, targets),
            Matrix::from_vec(1, 1, alloc::vec![loss]),
            None,
        )
    }

    fn grad_buf(&mut self, id: Id) -> &mut Matrix {
        if self.nodes[id].grad.is_none() {
            let (r, c) = (self.nodes[id].value.rows, self.nodes[id].value.cols);
            self.nodes[id].grad = Some(Matrix::zeros(r, c));
        }
        self.nodes[id].grad.as_mut().unwrap()
    }

    fn add_grad(&mut self, id: Id, delta: Matrix) {
        let g = self.grad_buf(id);
        debug_assert_eq!((g.rows, g.cols), (delta.rows, delta.cols));
        for i in 0..g.data.len() {
            g.data[i] += delta.data[i];
        }
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&mut self, root: Id) {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        self.grad_buf(root).data[0] = 1.0;
        for id in (0..=root).rev() {
            let g = match &self.nodes[id].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            match self.nodes[id].op.clone() {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.add_grad(a, g.clone());
                    self.add_grad(b, g);
                }
                Op::AddRow(a, row) => {
                    let c = g.cols;
                    let mut rg = Matrix::zeros(1, c);
                    for i in 0..g.rows {
                        for j in 0..c {
                            rg.data[j] += g.data[i * c + j];
                        }
                    }
                    self.add_grad(a, g);
                    self.add_grad(row, rg);
                }
                Op::MulRow(a, row) => {
                    let (r, c) = (g.rows, g.cols);
                    let mut ag = Matrix::zeros(r, c);
                    let mut rg = Matrix::zeros(1, c);
                    for i in 0..r {
                        for j in 0..c {
                            let gij = g.data[i * c + j];
                            ag.data[i * c + j] = gij * self.nodes[row].value.data[j];
                            rg.data[j] += gij * self.nodes[a].value.data[i * c + j];
                        }
                    }
                    self.add_grad(a, ag);
                    self.add_grad(row, rg);
                }
                Op::Mul(a, b) => {
                    let mut ag = g.clone();
                    let mut bg = g.clone();
                    for i in 0..g.data.len() {
                        ag.data[i] *= self.nodes[b].value.data[i];
                        bg.data[i] *= self.nodes[a].value.data[i];
                    }
                    self.add_grad(a, ag);
                    self.add_grad(b, bg);
                }
                Op::MulCol(a, col) => {
                    let (r, c) = (g.rows, g.cols);
                    let mut ag = Matrix::zeros(r, c);
                    let mut cg = Matrix::zeros(r, 1);
                    for i in 0..r {
                        let s = self.nodes[col].value.data[i];
                        for j in 0..c {
                            let gij = g.data[i * c + j];
                            ag.data[i * c + j] = gij * s;
                            cg.data[i] += gij * self.nodes[a].value.data[i * c + j];
                        }
                    }
                    self.add_grad(a, ag);
                    self.add_grad(col, cg);
                }
                Op::Scale(a, s) => {
                    let mut ag = g;
                    for x in &mut ag.data {
                        *x *= s;
                    }
                    self.add_grad(a, ag);
                }
                Op::MatMul(a, b) => {
                    // dA = G * B^T ; dB = A^T * G
                    let (ar, ac) = self.shape(a);
                    let bc = self.shape(b).1;
                    let mut ag = Matrix::zeros(ar, ac);
                    let mut bg = Matrix::zeros(ac, bc);
                    for i in 0..ar {
                        for k in 0..ac {
                            let mut s = 0.0;
                            for j in 0..bc {
                                s += g.data[i * bc + j] * self.nodes[b].value.data[k * bc + j];
                            }
                            ag.data[i * ac + k] = s;
                        }
                    }
                    for k in 0..ac {
                        for j in 0..bc {
                            let mut s = 0.0;
                            for i in 0..ar {
                                s += self.nodes[a].value.data[i * ac + k] * g.data[i * bc + j];
                            }
                            bg.data[k * bc + j] = s;
                        }
                    }
                    self.add_grad(a, ag);
                    self.add_grad(b, bg);
                }
                Op::MatMulNT(a, b) => {
                    // C = A B^T; dA = G * B ; dB = G^T * A
                    let (ar, ac) = self.shape(a);
                    let br = self.shape(b).0;
                    let mut ag = Matrix::zeros(ar, ac);
                    let mut bg = Matrix::zeros(br, ac);
                    for i in 0..ar {
                        for j in 0..br {
                            let gij = g.data[i * br + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for k in 0..ac {
                                ag.data[i * ac + k] += gij * self.nodes[b].value.data[j * ac + k];
                                bg.data[j * ac + k] += gij * self.nodes[a].value.data[i * ac + k];
                            }
                        }
                    }
                    self.add_grad(a, ag);
                    self.add_grad(b, bg);
                }
                Op::Gelu(a) => {
                    let mut ag = g;
                    for (i, x) in ag.data.iter_mut().enumerate() {
                        *x *= gelu_grad(self.nodes[a].value.data[i]);
                    }
                    self.add_grad(a, ag);
                }
                Op::SoftmaxMasked(a) => {
                    let (r, c) = (g.rows, g.cols);
                    let mut ag = Matrix::zeros(r, c);
                    for i in 0..r {
                        let p = &self.nodes[id].value.data[i * c..(i + 1) * c];
                        let dot: f64 = (0..c).map(|j| g.data[i * c + j] * p[j]).sum();
                        for j in 0..c {
                            ag.data[i * c + j] = p[j] * (g.data[i * c + j] - dot);
                        }
                    }
                    self.add_grad(a, ag);
                }
                Op::LayerNorm(a, gain, bias, eps) => {
                    let (r, c) = (g.rows, g.cols);
                    let mut ag = Matrix::zeros(r, c);
                    let mut gg = Matrix::zeros(1, c);
                    let mut bg = Matrix::zeros(1, c);
                    for i in 0..r {
                        let row = &self.nodes[a].value.data[i * c..(i + 1) * c];
                        let mean = row.iter().sum::<f64>() / c as f64;
                        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
                        let inv = 1.0 / math::sqrt(var + eps);
                        let mut sum_gy = 0.0;
                        let mut sum_gyxh = 0.0;
                        for j in 0..c {
                            let xh = (row[j] - mean) * inv;
                            let gy = g.data[i * c + j] * self.nodes[gain].value.data[j];
                            sum_gy += gy;
                            sum_gyxh += gy * xh;
                            gg.data[j] += g.data[i * c + j] * xh;
                            bg.data[j] += g.data[i * c + j];
                        }
                        for j in 0..c {
                            let xh = (row[j] - mean) * inv;
                            let gy = g.data[i * c + j] * self.nodes[gain].value.data[j];
                            ag.data[i * c + j] =
                                inv * (gy - sum_gy / c as f64 - xh * sum_gyxh / c as f64);
                        }
                    }
                    self.add_grad(a, ag);
                    self.add_grad(gain, gg);
                    self.add_grad(bias, bg);
                }
                Op::GatherRows(a, indices) => {
                    let (ar, c) = self.shape(a);
                    let mut ag = Matrix::zeros(ar, c);
                    for (i, &idx) in indices.iter().enumerate() {
                        for j in 0..c {
                            ag.data[idx * c + j] += g.data[i * c + j];
                        }
                    }
                    self.add_grad(a, ag);
                }
                Op::SumRows(a) => {
                    let (r, c) = self.shape(a);
                    let mut ag = Matrix::zeros(r, c);
                    for i in 0..r {
                        ag.data[i * c..(i + 1) * c].copy_from_slice(&g.data);
                    }
                    self.add_grad(a, ag);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.shape(a);
                    let mut ag = Matrix::zeros(r, c);
                    for x in &mut ag.data {
                        *x = g.data[0];
                    }
                    self.add_grad(a, ag);
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols;
                    let mut offset = 0;
                    for &p in &parts {
                        let pr = self.shape(p).0;
                        let mut pg = Matrix::zeros(pr, c);
                        pg.data
                            .copy_from_slice(&g.data[offset * c..(offset + pr) * c]);
                        offset += pr;
                        self.add_grad(p, pg);
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let (r, c) = self.shape(a);
                    let mut ag = Matrix::zeros(r, c);
                    for i in 0..r {
                        for j in 0..len {
                            ag.data[i * c + start + j] = g.data[i * len + j];
                        }
                    }
                    self.add_grad(a, ag);
                }
                Op::PairDotScatter(qp, r, pairs, n_k) => {
                    let (nq, d) = self.shape(qp);
                    let mut qg = Matrix::zeros(nq, d);
                    let mut rg = Matrix::zeros(pairs.len(), d);
                    for (p, &(qi, ki)) in pairs.iter().enumerate() {
                        let gv = g.data[qi * n_k + ki];
                        if gv == 0.0 {
                            continue;
                        }
                        for j in 0..d {
                            qg.data[qi * d + j] += gv * self.nodes[r].value.data[p * d + j];
                            rg.data[p * d + j] += gv * self.nodes[qp].value.data[qi * d + j];
                        }
                    }
                    self.add_grad(qp, qg);
                    self.add_grad(r, rg);
                }
                Op::CrossEntropy(logits, targets) => {
                    let (lr, lc) = self.shape(logits);
                    let upstream = g.data[0];
                    let mut lg = Matrix::zeros(lr, lc);
                    for &(row, class) in &targets {
                        let rdata = &self.nodes[logits].value.data[row * lc..(row + 1) * lc];
                        let mx = rdata.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                        let z: f64 = rdata.iter().map(|&x| math::exp(x - mx)).sum();
                        for j in 0..lc {
                            let p = math::exp(rdata[j] - mx) / z;
                            lg.data[row * lc + j] += upstream * (p - if j == class { 1.0 } else { 0.0 });
                        }
                    }
                    self.add_grad(logits, lg);
                }
            }
        }
    }

    /// Accumulate parameter-leaf gradients into `grads` (indexed like the
    /// model parameter list).
    pub fn collect_param_grads(&self, grads: &mut [Matrix]) {
        for node in &self.nodes {
            if let (Some(idx), Some(g)) = (node.param, &node.grad) {
                let target = &mut grads[idx];
                debug_assert_eq!((target.rows, target.cols), (g.rows, g.cols));
                for i in 0..g.data.len() {
                    target.data[i] += g.data[i];
                }
            }
        }
    }
}

/// Exact (erf-based) GELU; smooth everywhere, which keeps finite-difference
/// gradient checks honest.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::erf(x / core::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let phi = math::exp(-0.5 * x * x) / math::sqrt(2.0 * core::f64::consts::PI);
    0.5 * (1.0 + math::erf(x / core::f64::consts::SQRT_2)) + x * phi
}

/// AdamW with decoupled weight decay. State is per-parameter moment matrices.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(shapes: &[(usize, usize)], weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn apply(&mut self, params: &mut [Matrix], grads: &[Matrix], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let bc1 = 1.0 - math::powi(self.beta1, self.step as i32);
        let bc2 = 1.0 - math::powi(self.beta2, self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            for j in 0..p.data.len() {
                let g = grads[i].data[j];
                let m = &mut self.m[i].data[j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                let v = &mut self.v[i].data[j];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                p.data[j] -= lr * (mh / (math::sqrt(vh) + self.eps) + self.weight_decay * p.data[j]);
            }
        }
    }
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for &x in &g.data {
            sq += x * x;
        }
    }
    let norm = math::sqrt(sq);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in &mut g.data {
                *x *= s;
            }
        }
    }
    norm
}

/// Numerically stable softmax over raw logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if mx == f64::NEG_INFINITY {
        return alloc::vec![0.0; logits.len()];
    }
    let exps: Vec<f64> = logits.iter().map(|&x| math::exp(x - mx)).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Highest-probability class; ties break to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

/// Draw from a categorical distribution given probabilities summing to ~1.
pub fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding slack: return the last class with nonzero probability
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// Nucleus (top-p) filtering: returns renormalized probabilities restricted
/// to the smallest prefix of descending-probability classes whose cumulative
/// mass reaches `p`. Probability ties order by class index.
pub fn nucleus_probs(logits: &[f64], p: f64) -> Vec<f64> {
    debug_assert!(p > 0.0 && p <= 1.0);
    let probs = softmax(logits);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut out = alloc::vec![0.0; probs.len()];
    let mut acc = 0.0;
    let mut kept = 0.0;
    for &i in &order {
        out[i] = probs[i];
        kept += probs[i];
        acc += probs[i];
        if acc >= p {
            break;
        }
    }
    if kept > 0.0 {
        for x in &mut out {
            *x /= kept;
        }
    }
    out
}

/// Nucleus sampling over raw logits.
pub fn sample_nucleus(logits: &[f64], p: f64, rng: &mut impl Rng) -> usize {
    sample_categorical(&nucleus_probs(logits, p), rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    /// Finite-difference check of d(loss)/d(param 0) for an arbitrary graph.
    fn fd_check(build: impl Fn(&mut Tape, &Matrix) -> Id, p0: Matrix) {
        let mut tape = Tape::new();
        let root = build(&mut tape, &p0);
        tape.backward(root);
        let analytic = {
            let mut grads = vec![Matrix::zeros(p0.rows, p0.cols)];
            tape.collect_param_grads(&mut grads);
            grads.remove(0)
        };
        let h = 1e-6;
        for i in 0..p0.data.len() {
            let mut plus = p0.clone();
            plus.data[i] += h;
            let mut minus = p0.clone();
            minus.data[i] -= h;
            let mut tp = Tape::new();
            let rp = build(&mut tp, &plus);
            let mut tm = Tape::new();
            let rm = build(&mut tm, &minus);
            let fd = (tp.value(rp).scalar() - tm.value(rm).scalar()) / (2.0 * h);
            let a = analytic.data[i];
            if a.abs() < 1e-7 && fd.abs() < 1e-7 {
                continue; // both are zero up to finite-difference noise
            }
            let denom = a.abs().max(fd.abs()).max(1e-8);
            assert!(
                (a - fd).abs() / denom < 1e-5,
                "param {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn grad_matmul_gelu_ce() {
        let mut r = rng();
        let w = Matrix::randn(3, 4, 0.5, &mut r);
        let x = Matrix::randn(2, 3, 1.0, &mut r);
        fd_check(
            move |t, p| {
                let w = t.param(p.clone(), 0);
                let x = t.constant(x.clone());
                let h = t.matmul(x, w);
                let h = t.gelu(h);
                t.cross_entropy(h, vec![(0, 1), (1, 3)])
            },
            w,
        );
    }

    #[test]
    fn grad_layernorm_softmax_chain() {
        let mut r = rng();
        let w = Matrix::randn(4, 4, 0.6, &mut r);
        let x = Matrix::randn(3, 4, 1.0, &mut r);
        let gain = Matrix::from_fn(1, 4, |_, j| 1.0 + 0.1 * j as f64);
        let bias = Matrix::from_fn(1, 4, |_, j| 0.05 * j as f64);
        let mask = vec![true, true, false, true, true, true, true, false, false, true, true, true];
        fd_check(
            move |t, p| {
                let w = t.param(p.clone(), 0);
                let x = t.constant(x.clone());
                let g = t.constant(gain.clone());
                let b = t.constant(bias.clone());
                let h = t.matmul(x, w);
                let h = t.layer_norm(h, g, b, 1e-5);
                let s = t.softmax_masked(h, mask.clone());
                let v = t.constant(Matrix::from_fn(3, 2, |i, j| (i + j) as f64 * 0.3));
                // mask shape is (3,4): scores (3,3)? keep consistent: use v (4,2)
                let v2 = t.constant(Matrix::from_fn(4, 2, |i, j| 0.2 * (i as f64) - 0.1 * j as f64));
                let _ = v;
                let o = t.matmul(s, v2);
                t.cross_entropy(o, vec![(0, 0), (2, 1)])
            },
            w,
        );
    }

    #[test]
    fn grad_gather_slice_concat() {
        let mut r = rng();
        let table = Matrix::randn(5, 6, 0.8, &mut r);
        fd_check(
            move |t, p| {
                let tab = t.param(p.clone(), 0);
                let g = t.gather_rows(tab, vec![1, 3, 1]); // repeated index accumulates
                let left = t.slice_cols(g, 0, 3);
                let right = t.slice_cols(g, 3, 3);
                let both = t.add(left, right);
                let cat = t.concat_rows(vec![both, left]);
                t.cross_entropy(cat, vec![(0, 2), (4, 0)])
            },
            table,
        );
    }

    #[test]
    fn grad_pair_dot_scatter_and_broadcasts() {
        let mut r = rng();
        let qp = Matrix::randn(3, 4, 0.7, &mut r);
        let rel = Matrix::randn(2, 4, 0.7, &mut r);
        let row = Matrix::randn(1, 3, 0.5, &mut r);
        let col = Matrix::randn(3, 1, 0.5, &mut r);
        fd_check(
            move |t, p| {
                let qp = t.param(p.clone(), 0);
                let rel = t.constant(rel.clone());
                let s = t.pair_dot_scatter(qp, rel, vec![(0, 1), (2, 0)], 3);
                let row = t.constant(row.clone());
                let col = t.constant(col.clone());
                let s = t.add_row(s, row);
                let s = t.mul_row(s, row);
                let s = t.mul_col(s, col);
                t.cross_entropy(s, vec![(0, 1), (1, 2), (2, 0)])
            },
            qp,
        );
        // also check the rel-side gradient
        let mut r = rng();
        let qp2 = Matrix::randn(3, 4, 0.7, &mut r);
        let rel2 = Matrix::randn(2, 4, 0.7, &mut r);
        fd_check(
            move |t, p| {
                let rel = t.param(p.clone(), 0);
                let qp = t.constant(qp2.clone());
                let s = t.pair_dot_scatter(qp, rel, vec![(0, 1), (2, 0)], 3);
                t.cross_entropy(s, vec![(0, 1), (2, 0)])
            },
            rel2,
        );
    }

    #[test]
    fn grad_matmul_nt_sum_paths() {
        let mut r = rng();
        let a = Matrix::randn(3, 4, 0.5, &mut r);
        let b = Matrix::randn(2, 4, 0.5, &mut r);
        fd_check(
            move |t, p| {
                let a = t.param(p.clone(), 0);
                let b = t.constant(b.clone());
                let s = t.matmul_nt(a, b);
                let s = t.scale(s, 0.7);
                let sq = t.mul(s, s);
                let row = t.sum_rows(sq);
                t.sum_all(row)
            },
            a,
        );
    }

    #[test]
    fn softmax_fully_masked_row_is_zero() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let s = t.softmax_masked(a, vec![true, true, false, false]);
        assert_eq!(&t.value(s).data[2..], &[0.0, 0.0]);
        let top: f64 = t.value(s).data[..2].iter().sum();
        assert!((top - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adamw_moves_toward_minimum() {
        // minimize (x-3)^2 by hand-fed gradients
        let mut params = vec![Matrix::from_vec(1, 1, vec![0.0])];
        let mut opt = AdamW::new(&[(1, 1)], 0.0);
        for _ in 0..500 {
            let x = params[0].data[0];
            let grads = vec![Matrix::from_vec(1, 1, vec![2.0 * (x - 3.0)])];
            opt.apply(&mut params, &grads, 0.05);
        }
        assert!((params[0].data[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn clip_norm_behavior() {
        let mut grads = vec![Matrix::from_vec(1, 2, vec![3.0, 4.0])];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((grads[0].data[0] - 0.6).abs() < 1e-12);
        // under the cap: untouched
        let mut g2 = vec![Matrix::from_vec(1, 2, vec![0.3, 0.4])];
        clip_global_norm(&mut g2, 1.0);
        assert_eq!(g2[0].data, vec![0.3, 0.4]);
    }

    #[test]
    fn nucleus_prefix_semantics() {
        // probs 0.5, 0.3, 0.2 ; p=0.7 keeps the first two
        let logits: Vec<f64> = [0.5f64, 0.3, 0.2].iter().map(|p| math::ln(*p)).collect();
        let np = nucleus_probs(&logits, 0.7);
        assert!(np[2] == 0.0);
        assert!((np[0] - 0.625).abs() < 1e-9);
        assert!((np[1] - 0.375).abs() < 1e-9);
        // p = 1 keeps everything
        let all = nucleus_probs(&logits, 1.0);
        assert!(all.iter().all(|&x| x > 0.0));
        // tiny p keeps exactly the argmax
        let one = nucleus_probs(&logits, 1e-9);
        assert_eq!(one, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn greedy_tie_breaks_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn categorical_sampling_respects_support() {
        let mut r = rng();
        let probs = vec![0.0, 0.7, 0.3, 0.0];
        for _ in 0..200 {
            let s = sample_categorical(&probs, &mut r);
            assert!(s == 1 || s == 2);
        }
    }
}
