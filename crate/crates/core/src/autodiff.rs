//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Handles into the
//! tape are [`Var`]s; they are cheap `Copy` indices that become invalid once
//! the tape is cleared. Shapes are row-major; most operations work on
//! matrices (`[rows, cols]`) and vectors (`[len]`), and a scalar has the
//! empty shape `[]`.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_tape_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Dense row-major array of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.contains(&0) {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![0.0; len] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.data.len() / self.shape[self.shape.len() - 1],
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u64,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    AddRow { x: usize, bias: usize },
    MulRow { x: usize, gain: usize },
    Relu(usize),
    Ln(usize),
    Sum(usize),
    Mean(usize),
    SoftmaxRows { x: usize, cols: usize },
    ConcatCols { a: usize, b: usize, p: usize, q: usize },
    PoolAvg { x: usize, groups: usize },
    PoolMax { x: usize, argmax: Vec<usize> },
    Normalize { x: usize, inv_std: Vec<f64>, batch: bool },
    GatherRows { x: usize, rows: Vec<usize>, cols: usize },
    Pick { x: usize, cols: usize, idx: Vec<usize> },
    ScaleGroups { x: usize, s: usize, group_len: usize },
    Mix { gs: usize, gt: usize, a: usize, group_len: usize },
    RowDist { a: usize, ia: Vec<usize>, b: usize, ib: Vec<usize>, cols: usize },
    RowNorms { x: usize, cols: usize },
    StdPop { x: usize, eps: f64 },
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode [`Tape::normalize`] call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Recording of one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let cols = shape[shape.len() - 1];
            (shape[..shape.len() - 1].iter().product(), cols)
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: fresh_tape_id(), nodes: Vec::new(), grads: Vec::new() }
    }

    /// Drops every recorded node. All `Var`s issued so far become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.id = fresh_tape_id();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "Var used with a tape it does not belong to (or after clear)");
        v.index
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let index = self.nodes.len();
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var { index, tape: self.id }
    }

    fn rg(&self, parents: &[usize]) -> bool {
        parents.iter().any(|&p| self.nodes[p].requires_grad)
    }

    /// Records a differentiable input (a parameter).
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[self.idx(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[self.idx(v)].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[self.idx(v)];
        Tensor { shape: n.shape.clone(), data: n.value.clone() }
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[self.idx(v)];
        debug_assert_eq!(n.value.len(), 1);
        n.value[0]
    }

    /// Gradient buffer after [`Tape::backward`]; zeros for nodes off the loss path.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        let i = self.idx(v);
        match self.grads.get(i) {
            Some(Some(g)) => g.clone(),
            _ => vec![0.0; self.nodes[i].value.len()],
        }
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::Dimension {
                op,
                left: self.nodes[a].shape.clone(),
                right: self.nodes[b].shape.clone(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, rec: fn(usize, usize) -> Op) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        self.same_shape(op, ai, bi)?;
        let value = self.nodes[ai]
            .value
            .iter()
            .zip(&self.nodes[bi].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[ai].shape.clone();
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(shape, value, rec(ai, bi), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ai = self.idx(a);
        let value = self.nodes[ai].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[ai].shape.clone();
        let rg = self.nodes[ai].requires_grad;
        self.push(shape, value, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ai = self.idx(a);
        self.unary(a, |x| x * s, Op::Scale(ai, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let ai = self.idx(a);
        self.unary(a, |x| x + s, Op::AddScalar(ai))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(ai))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        self.unary(a, libm::log, Op::Ln(ai))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        let s = self.nodes[ai].value.iter().sum();
        let rg = self.nodes[ai].requires_grad;
        self.push(Vec::new(), vec![s], Op::Sum(ai), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        let v = &self.nodes[ai].value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.nodes[ai].requires_grad;
        self.push(Vec::new(), vec![s], Op::Mean(ai), rg)
    }

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (sa, sb) = (&self.nodes[ai].shape, &self.nodes[bi].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension { op: "matmul", left: sa.clone(), right: sb.clone() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a: ai, b: bi, m, k, n }, rg))
    }

    fn row_broadcast(&self, op: &'static str, x: usize, v: usize) -> Result<usize> {
        let (_, cols) = rows_cols(&self.nodes[x].shape);
        if self.nodes[x].shape.len() != 2 || self.nodes[v].shape != [cols] {
            return Err(Error::Dimension {
                op,
                left: self.nodes[x].shape.clone(),
                right: self.nodes[v].shape.clone(),
            });
        }
        Ok(cols)
    }

    /// Adds a `[cols]` vector to every row of a `[rows, cols]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xi, bi) = (self.idx(x), self.idx(bias));
        let cols = self.row_broadcast("add_row", xi, bi)?;
        let b = &self.nodes[bi].value;
        let value = self.nodes[xi].value.iter().enumerate().map(|(i, &v)| v + b[i % cols]).collect();
        let shape = self.nodes[xi].shape.clone();
        let rg = self.rg(&[xi, bi]);
        Ok(self.push(shape, value, Op::AddRow { x: xi, bias: bi }, rg))
    }

    /// Multiplies every row of a `[rows, cols]` matrix by a `[cols]` vector.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (xi, gi) = (self.idx(x), self.idx(gain));
        let cols = self.row_broadcast("mul_row", xi, gi)?;
        let g = &self.nodes[gi].value;
        let value = self.nodes[xi].value.iter().enumerate().map(|(i, &v)| v * g[i % cols]).collect();
        let shape = self.nodes[xi].shape.clone();
        let rg = self.rg(&[xi, gi]);
        Ok(self.push(shape, value, Op::MulRow { x: xi, gain: gi }, rg))
    }

    /// Row-wise softmax, stabilized by subtracting the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let (rows, cols) = rows_cols(&self.nodes[xi].shape);
        let xv = &self.nodes[xi].value;
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for (oj, &v) in o.iter_mut().zip(row) {
                *oj = libm::exp(v - max);
                total += *oj;
            }
            for oj in o.iter_mut() {
                *oj /= total;
            }
        }
        let shape = self.nodes[xi].shape.clone();
        let rg = self.nodes[xi].requires_grad;
        self.push(shape, out, Op::SoftmaxRows { x: xi, cols }, rg)
    }

    /// `[m, p] ++ [m, q] -> [m, p + q]` along the channel (last) axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (sa, sb) = (&self.nodes[ai].shape, &self.nodes[bi].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Dimension { op: "concat_cols", left: sa.clone(), right: sb.clone() });
        }
        let (m, p, q) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            out.extend_from_slice(&self.nodes[ai].value[r * p..(r + 1) * p]);
            out.extend_from_slice(&self.nodes[bi].value[r * q..(r + 1) * q]);
        }
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(vec![m, p + q], out, Op::ConcatCols { a: ai, b: bi, p, q }, rg))
    }

    fn group_shape(&self, op: &'static str, xi: usize, groups: usize) -> Result<(usize, usize)> {
        let shape = &self.nodes[xi].shape;
        if shape.len() != 2 || groups == 0 || !shape[0].is_multiple_of(groups) {
            return Err(Error::Dimension { op, left: shape.clone(), right: vec![groups] });
        }
        Ok((shape[0] / groups, shape[1]))
    }

    /// Mean over each block of `rows / groups` consecutive rows: `[g·s, c] -> [g, c]`.
    pub fn pool_avg(&mut self, x: Var, groups: usize) -> Result<Var> {
        let xi = self.idx(x);
        let (s, c) = self.group_shape("pool_avg", xi, groups)?;
        let xv = &self.nodes[xi].value;
        let mut out = vec![0.0; groups * c];
        for g in 0..groups {
            let o = &mut out[g * c..(g + 1) * c];
            for p in 0..s {
                let row = &xv[(g * s + p) * c..(g * s + p + 1) * c];
                for (oj, &v) in o.iter_mut().zip(row) {
                    *oj += v;
                }
            }
            for oj in o.iter_mut() {
                *oj /= s as f64;
            }
        }
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(vec![groups, c], out, Op::PoolAvg { x: xi, groups }, rg))
    }

    /// Maximum over each row block; ties go to the lowest spatial index.
    pub fn pool_max(&mut self, x: Var, groups: usize) -> Result<Var> {
        let xi = self.idx(x);
        let (s, c) = self.group_shape("pool_max", xi, groups)?;
        let xv = &self.nodes[xi].value;
        let mut out = vec![0.0; groups * c];
        let mut argmax = vec![0usize; groups * c];
        for g in 0..groups {
            for j in 0..c {
                let mut best = g * s * c + j;
                for p in 1..s {
                    let at = (g * s + p) * c + j;
                    if xv[at] > xv[best] {
                        best = at;
                    }
                }
                out[g * c + j] = xv[best];
                argmax[g * c + j] = best;
            }
        }
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(vec![groups, c], out, Op::PoolMax { x: xi, argmax }, rg))
    }

    /// Per-channel standardization of a `[rows, cols]` matrix.
    ///
    /// With `stats = None` the batch mean and biased variance are used and
    /// returned; otherwise the given `(mean, var)` are treated as constants.
    pub fn normalize(&mut self, x: Var, stats: Option<(&[f64], &[f64])>, eps: f64) -> Result<(Var, Option<BatchStats>)> {
        let xi = self.idx(x);
        let shape = self.nodes[xi].shape.clone();
        if shape.len() != 2 {
            return Err(Error::Rank { op: "normalize", shape });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let xv = &self.nodes[xi].value;
        let (mean, var, batch) = match stats {
            Some((m, v)) => {
                if m.len() != cols || v.len() != cols {
                    return Err(Error::Dimension { op: "normalize", left: shape, right: vec![m.len()] });
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                if rows < 2 {
                    return Err(Error::BatchTooSmall { op: "normalize", needed: 2, got: rows });
                }
                let mut mean = vec![0.0; cols];
                for r in 0..rows {
                    for j in 0..cols {
                        mean[j] += xv[r * cols + j];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; cols];
                for r in 0..rows {
                    for j in 0..cols {
                        let d = xv[r * cols + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                let stats = BatchStats { mean: mean.clone(), var: var.clone(), count: rows };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / libm::sqrt(v + eps)).collect();
        let value = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - mean[i % cols]) * inv_std[i % cols])
            .collect();
        let rg = self.nodes[xi].requires_grad;
        let is_batch = batch.is_some();
        let out = self.push(shape, value, Op::Normalize { x: xi, inv_std, batch: is_batch }, rg);
        Ok((out, batch))
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xi = self.idx(x);
        let shape = self.nodes[xi].shape.clone();
        if shape.len() != 2 {
            return Err(Error::Rank { op: "gather_rows", shape });
        }
        let cols = shape[1];
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= shape[0] {
                return Err(Error::Range { what: "row", index: r, len: shape[0] });
            }
            out.extend_from_slice(&self.nodes[xi].value[r * cols..(r + 1) * cols]);
        }
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(vec![rows.len(), cols], out, Op::GatherRows { x: xi, rows: rows.to_vec(), cols }, rg))
    }

    /// `out[i] = x[i, idx[i]]` for a `[n, c]` matrix.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xi = self.idx(x);
        let shape = self.nodes[xi].shape.clone();
        if shape.len() != 2 || shape[0] != idx.len() {
            return Err(Error::Dimension { op: "pick", left: shape, right: vec![idx.len()] });
        }
        let cols = shape[1];
        let mut out = Vec::with_capacity(idx.len());
        for (r, &j) in idx.iter().enumerate() {
            if j >= cols {
                return Err(Error::Range { what: "column", index: j, len: cols });
            }
            out.push(self.nodes[xi].value[r * cols + j]);
        }
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(vec![idx.len()], out, Op::Pick { x: xi, cols, idx: idx.to_vec() }, rg))
    }

    /// Column `col` of a `[n, c]` matrix as a `[n]` vector.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let rows = match self.shape(x) {
            [r, _] => *r,
            s => return Err(Error::Rank { op: "column", shape: s.to_vec() }),
        };
        self.pick(x, &vec![col; rows])
    }

    /// Scales each block of `rows / n` rows of `x` by the matching entry of `s: [n]`.
    pub fn scale_groups(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xi, si) = (self.idx(x), self.idx(s));
        let n = self.nodes[si].value.len();
        if self.nodes[si].shape.len() != 1 {
            return Err(Error::Rank { op: "scale_groups", shape: self.nodes[si].shape.clone() });
        }
        let (g, c) = self.group_shape("scale_groups", xi, n)?;
        let group_len = g * c;
        let sv = &self.nodes[si].value;
        let value = self.nodes[xi].value.iter().enumerate().map(|(i, &v)| v * sv[i / group_len]).collect();
        let shape = self.nodes[xi].shape.clone();
        let rg = self.rg(&[xi, si]);
        Ok(self.push(shape, value, Op::ScaleGroups { x: xi, s: si, group_len }, rg))
    }

    /// Convex combination `a[i,0]·gs + a[i,1]·gt` per row block `i`.
    ///
    /// Each output entry is clamped to the closed interval spanned by its two
    /// inputs, which only ever removes rounding error when `a` sums to one.
    pub fn mix(&mut self, gs: Var, gt: Var, a: Var) -> Result<Var> {
        let (si, ti, ai) = (self.idx(gs), self.idx(gt), self.idx(a));
        self.same_shape("mix", si, ti)?;
        let ashape = &self.nodes[ai].shape;
        if ashape.len() != 2 || ashape[1] != 2 {
            return Err(Error::Dimension { op: "mix", left: self.nodes[si].shape.clone(), right: ashape.clone() });
        }
        let n = ashape[0];
        let (g, c) = self.group_shape("mix", si, n)?;
        let group_len = g * c;
        let (sv, tv, av) = (&self.nodes[si].value, &self.nodes[ti].value, &self.nodes[ai].value);
        let value = sv
            .iter()
            .zip(tv)
            .enumerate()
            .map(|(i, (&x, &y))| {
                let r = i / group_len;
                let v = av[2 * r] * x + av[2 * r + 1] * y;
                v.clamp(x.min(y), x.max(y))
            })
            .collect();
        let shape = self.nodes[si].shape.clone();
        let rg = self.rg(&[si, ti, ai]);
        Ok(self.push(shape, value, Op::Mix { gs: si, gt: ti, a: ai, group_len }, rg))
    }

    /// Euclidean distances `‖a[ia[p]] − b[ib[p]]‖` for each requested pair.
    ///
    /// The gradient at zero distance is taken as zero.
    pub fn row_dist(&mut self, a: Var, ia: &[usize], b: Var, ib: &[usize]) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (sa, sb) = (&self.nodes[ai].shape, &self.nodes[bi].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] || ia.len() != ib.len() {
            return Err(Error::Dimension { op: "row_dist", left: sa.clone(), right: sb.clone() });
        }
        let cols = sa[1];
        if let Some(&bad) = ia.iter().find(|&&r| r >= sa[0]) {
            return Err(Error::Range { what: "row", index: bad, len: sa[0] });
        }
        if let Some(&bad) = ib.iter().find(|&&r| r >= sb[0]) {
            return Err(Error::Range { what: "row", index: bad, len: sb[0] });
        }
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let out = ia
            .iter()
            .zip(ib)
            .map(|(&i, &j)| euclidean(&av[i * cols..(i + 1) * cols], &bv[j * cols..(j + 1) * cols]))
            .collect();
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(
            vec![ia.len()],
            out,
            Op::RowDist { a: ai, ia: ia.to_vec(), b: bi, ib: ib.to_vec(), cols },
            rg,
        ))
    }

    /// L2 norm of every row: `[n, d] -> [n]` (a vector is one row).
    pub fn row_norms(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let (rows, cols) = rows_cols(&self.nodes[xi].shape);
        let xv = &self.nodes[xi].value;
        let out = (0..rows)
            .map(|r| libm::sqrt(xv[r * cols..(r + 1) * cols].iter().map(|v| v * v).sum()))
            .collect();
        let rg = self.nodes[xi].requires_grad;
        self.push(vec![rows], out, Op::RowNorms { x: xi, cols }, rg)
    }

    /// Population standard deviation of all entries.
    ///
    /// The value is exact; the derivative uses `sqrt(var + eps)` in its
    /// denominator so it stays finite when every entry is equal.
    pub fn std_pop(&mut self, x: Var, eps: f64) -> Var {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        let n = xv.len() as f64;
        let mean = xv.iter().sum::<f64>() / n;
        let var = if xv.iter().all(|&v| v == xv[0]) { 0.0 } else { xv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n };
        let rg = self.nodes[xi].requires_grad;
        self.push(Vec::new(), vec![libm::sqrt(var)], Op::StdPop { x: xi, eps }, rg)
    }

    /// Reverse-mode accumulation from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.idx(loss);
        if self.nodes[li].value.len() != 1 {
            return Err(Error::Rank { op: "backward", shape: self.nodes[li].shape.clone() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |p: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[p].requires_grad {
                return;
            }
            let buf = grads[p].get_or_insert_with(|| vec![0.0; nodes[p].value.len()]);
            f(buf);
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, &d)| *x += d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, &d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..gb.len() {
                        gb[k] += g[k] * av[k];
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d * s)),
            Op::AddScalar(a) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d)),
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            for (o, &d) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * d;
                            }
                        }
                    }
                });
            }
            Op::AddRow { x, bias } => {
                let cols = nodes[*bias].value.len();
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, &d)| *o += d));
                acc(*bias, &mut |gb| {
                    for (k, &d) in g.iter().enumerate() {
                        gb[k % cols] += d;
                    }
                });
            }
            Op::MulRow { x, gain } => {
                let cols = nodes[*gain].value.len();
                let (xv, gv) = (&nodes[*x].value, &nodes[*gain].value);
                acc(*x, &mut |gx| {
                    for (k, &d) in g.iter().enumerate() {
                        gx[k] += d * gv[k % cols];
                    }
                });
                acc(*gain, &mut |gg| {
                    for (k, &d) in g.iter().enumerate() {
                        gg[k % cols] += d * xv[k];
                    }
                });
            }
            Op::Relu(a) => {
                let av = &nodes[*a].value;
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        if av[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                });
            }
            Op::Ln(a) => {
                let av = &nodes[*a].value;
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] / av[k];
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = nodes[*a].value.len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::SoftmaxRows { x, cols } => {
                let cols = *cols;
                acc(*x, &mut |gx| {
                    for r in 0..out.len() / cols {
                        let y = &out[r * cols..(r + 1) * cols];
                        let gy = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            gx[r * cols + j] += y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::ConcatCols { a, b, p, q } => {
                let (p, q) = (*p, *q);
                let rows = out.len() / (p + q);
                acc(*a, &mut |ga| {
                    for r in 0..rows {
                        for j in 0..p {
                            ga[r * p + j] += g[r * (p + q) + j];
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..rows {
                        for j in 0..q {
                            gb[r * q + j] += g[r * (p + q) + p + j];
                        }
                    }
                });
            }
            Op::PoolAvg { x, groups } => {
                let c = out.len() / groups;
                let s = nodes[*x].value.len() / (groups * c);
                acc(*x, &mut |gx| {
                    for (k, o) in gx.iter_mut().enumerate() {
                        let gi = k / (s * c);
                        *o += g[gi * c + k % c] / s as f64;
                    }
                });
            }
            Op::PoolMax { x, argmax } => {
                acc(*x, &mut |gx| {
                    for (k, &src) in argmax.iter().enumerate() {
                        gx[src] += g[k];
                    }
                });
            }
            Op::Normalize { x, inv_std, batch } => {
                let cols = inv_std.len();
                let rows = out.len() / cols;
                acc(*x, &mut |gx| {
                    if !*batch {
                        for (k, &d) in g.iter().enumerate() {
                            gx[k] += d * inv_std[k % cols];
                        }
                        return;
                    }
                    let mut sum_g = vec![0.0; cols];
                    let mut sum_gy = vec![0.0; cols];
                    for (k, &d) in g.iter().enumerate() {
                        sum_g[k % cols] += d;
                        sum_gy[k % cols] += d * out[k];
                    }
                    let m = rows as f64;
                    for (k, &d) in g.iter().enumerate() {
                        let j = k % cols;
                        gx[k] += inv_std[j] / m * (m * d - sum_g[j] - out[k] * sum_gy[j]);
                    }
                });
            }
            Op::GatherRows { x, rows, cols } => {
                let cols = *cols;
                acc(*x, &mut |gx| {
                    for (o, &r) in rows.iter().enumerate() {
                        for j in 0..cols {
                            gx[r * cols + j] += g[o * cols + j];
                        }
                    }
                });
            }
            Op::Pick { x, cols, idx } => {
                acc(*x, &mut |gx| {
                    for (r, &j) in idx.iter().enumerate() {
                        gx[r * cols + j] += g[r];
                    }
                });
            }
            Op::ScaleGroups { x, s, group_len } => {
                let (xv, sv) = (&nodes[*x].value, &nodes[*s].value);
                acc(*x, &mut |gx| {
                    for (k, &d) in g.iter().enumerate() {
                        gx[k] += d * sv[k / group_len];
                    }
                });
                acc(*s, &mut |gs| {
                    for (k, &d) in g.iter().enumerate() {
                        gs[k / group_len] += d * xv[k];
                    }
                });
            }
            Op::Mix { gs, gt, a, group_len } => {
                let (sv, tv, av) = (&nodes[*gs].value, &nodes[*gt].value, &nodes[*a].value);
                acc(*gs, &mut |gx| {
                    for (k, &d) in g.iter().enumerate() {
                        gx[k] += d * av[2 * (k / group_len)];
                    }
                });
                acc(*gt, &mut |gx| {
                    for (k, &d) in g.iter().enumerate() {
                        gx[k] += d * av[2 * (k / group_len) + 1];
                    }
                });
                acc(*a, &mut |ga| {
                    for (k, &d) in g.iter().enumerate() {
                        let r = k / group_len;
                        ga[2 * r] += d * sv[k];
                        ga[2 * r + 1] += d * tv[k];
                    }
                });
            }
            Op::RowDist { a, ia, b, ib, cols } => {
                let cols = *cols;
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let unit = |p: usize, k: usize| {
                    let d = out[p];
                    if d > 0.0 {
                        (av[ia[p] * cols + k] - bv[ib[p] * cols + k]) / d
                    } else {
                        0.0
                    }
                };
                acc(*a, &mut |ga| {
                    for p in 0..ia.len() {
                        for k in 0..cols {
                            ga[ia[p] * cols + k] += g[p] * unit(p, k);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for p in 0..ib.len() {
                        for k in 0..cols {
                            gb[ib[p] * cols + k] -= g[p] * unit(p, k);
                        }
                    }
                });
            }
            Op::RowNorms { x, cols } => {
                let cols = *cols;
                let xv = &nodes[*x].value;
                acc(*x, &mut |gx| {
                    for (r, &norm) in out.iter().enumerate() {
                        if norm > 0.0 {
                            for k in r * cols..(r + 1) * cols {
                                gx[k] += g[r] * xv[k] / norm;
                            }
                        }
                    }
                });
            }
            Op::StdPop { x, eps } => {
                let xv = &nodes[*x].value;
                let n = xv.len() as f64;
                let mean = xv.iter().sum::<f64>() / n;
                let sd = out[0];
                let denom = n * libm::sqrt(sd * sd + eps);
                acc(*x, &mut |gx| {
                    for (o, &v) in gx.iter_mut().zip(xv) {
                        *o += g[0] * (v - mean) / denom;
                    }
                });
            }
        }
    }
}

/// Euclidean distance between two equal-length slices.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}
