//! Reverse-mode automatic differentiation over a flat arena tape.
//!
//! Every operation records eagerly: the forward value is computed at call
//! time and the op plus its input indices are appended to the arena. The
//! backward pass walks the arena once in reverse, accumulating vector-
//! Jacobian products into per-node gradient buffers.
//!
//! All tape values are 2-D row-major matrices; scalars are 1×1. There is
//! no broadcasting engine — the few broadcasts the model needs (row bias,
//! scalar temperature/offset) are dedicated ops with dedicated adjoints.
//!
//! A `Var` is an index into one tape and must never be used with another.
//! Independent tapes may run on separate threads against shared read-only
//! parameter data; a single tape is strictly single-threaded.

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::{fp, Scalar};
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Recorded primitive. Fields are input handles plus immediate constants.
#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Matmul { a: Var, b: Var },
    MatmulBt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: S },
    AddScalar { a: Var },
    ScaleByVar { a: Var, s: Var },
    OffsetByVar { a: Var, s: Var },
    AddRow { a: Var, row: Var },
    EmbedLookup { table: Var, ids: Vec<u32> },
    SoftmaxRows { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Gelu { a: Var },
    Sigmoid { a: Var },
    Softplus { a: Var },
    Exp { a: Var },
    L2NormRows { a: Var },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    SumAll { a: Var },
    MeanAll { a: Var },
}

/// Wengert-list tape: ops, values, and (after backward) gradients, stored
/// as parallel arrays indexed by `Var`.
pub struct Tape<S: Scalar> {
    ops: Vec<Op<S>>,
    shapes: Vec<(usize, usize)>,
    values: Vec<Vec<S>>,
    /// Op-specific saved statistics (layer-norm mean/inv-std, row norms).
    aux: Vec<Vec<S>>,
    requires: Vec<bool>,
    grads: Vec<Vec<S>>,
    ran_backward: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
            aux: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            ran_backward: false,
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// (rows, cols) of a recorded value.
    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.shapes[v.idx()]
    }

    /// Forward value of a recorded node.
    pub fn value(&self, v: Var) -> &[S] {
        &self.values[v.idx()]
    }

    /// Gradient of the last backward pass, if `v` participates in it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        let g = &self.grads[v.idx()];
        if g.is_empty() {
            None
        } else {
            Some(g)
        }
    }

    /// Copies a node's value into a standalone tensor.
    pub fn value_tensor(&self, v: Var) -> Tensor<S> {
        let (r, c) = self.shape(v);
        Tensor::new(vec![r, c], self.values[v.idx()].clone()).expect("tape shapes are consistent")
    }

    fn push(&mut self, op: Op<S>, rows: usize, cols: usize, value: Vec<S>, aux: Vec<S>, requires: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.ops.push(op);
        self.shapes.push((rows, cols));
        self.values.push(value);
        self.aux.push(aux);
        self.requires.push(requires);
        self.grads.push(Vec::new());
        Var((self.ops.len() - 1) as u32)
    }

    // ---- leaves ------------------------------------------------------

    /// Constant input; no gradient is tracked through it.
    pub fn leaf(&mut self, data: &[S], rows: usize, cols: usize) -> Result<Var> {
        self.input(data, rows, cols, false)
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, data: &[S], rows: usize, cols: usize) -> Result<Var> {
        self.input(data, rows, cols, true)
    }

    pub fn leaf_tensor(&mut self, t: &Tensor<S>) -> Result<Var> {
        let (r, c) = t.dims2();
        self.leaf(t.data(), r, c)
    }

    pub fn param_tensor(&mut self, t: &Tensor<S>) -> Result<Var> {
        let (r, c) = t.dims2();
        self.param(t.data(), r, c)
    }

    fn input(&mut self, data: &[S], rows: usize, cols: usize, requires: bool) -> Result<Var> {
        if data.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(Error::shape(
                "leaf",
                format!("{} values do not fill {}x{}", data.len(), rows, cols),
            ));
        }
        Ok(self.push(Op::Leaf, rows, cols, data.to_vec(), Vec::new(), requires))
    }

    // ---- linear algebra ----------------------------------------------

    /// a[m×k] · b[k×n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{m}x{k} by {k2}x{n}: inner dimensions disagree"),
            ));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::matmul(self.value(a), self.value(b), m, k, n, &mut out);
        let req = self.requires[a.idx()] || self.requires[b.idx()];
        Ok(self.push(Op::Matmul { a, b }, m, n, out, Vec::new(), req))
    }

    /// a[m×k] · b[n×k]ᵀ — attention-score layout.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul_bt",
                format!("{m}x{k} by transpose of {n}x{k2}: inner dimensions disagree"),
            ));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::matmul_bt(self.value(a), self.value(b), m, k, n, &mut out);
        let req = self.requires[a.idx()] || self.requires[b.idx()];
        Ok(self.push(Op::MatmulBt { a, b }, m, n, out, Vec::new(), req))
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out: Vec<S> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let req = self.requires[a.idx()] || self.requires[b.idx()];
        Ok(self.push(Op::Add { a, b }, r, c, out, Vec::new(), req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out: Vec<S> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let req = self.requires[a.idx()] || self.requires[b.idx()];
        Ok(self.push(Op::Mul { a, b }, r, c, out, Vec::new(), req))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let (r, cs) = self.shape(a);
        let out: Vec<S> = self.value(a).iter().map(|&x| x * c).collect();
        let req = self.requires[a.idx()];
        self.push(Op::Scale { a, c }, r, cs, out, Vec::new(), req)
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let (r, cs) = self.shape(a);
        let out: Vec<S> = self.value(a).iter().map(|&x| x + c).collect();
        let req = self.requires[a.idx()];
        self.push(Op::AddScalar { a }, r, cs, out, Vec::new(), req)
    }

    /// Multiplies every element of `a` by the 1×1 variable `s`.
    pub fn scale_by_var(&mut self, a: Var, s: Var) -> Result<Var> {
        self.expect_scalar("scale_by_var", s)?;
        let (r, c) = self.shape(a);
        let sv = self.value(s)[0];
        let out: Vec<S> = self.value(a).iter().map(|&x| x * sv).collect();
        let req = self.requires[a.idx()] || self.requires[s.idx()];
        Ok(self.push(Op::ScaleByVar { a, s }, r, c, out, Vec::new(), req))
    }

    /// Adds the 1×1 variable `s` to every element of `a`.
    pub fn offset_by_var(&mut self, a: Var, s: Var) -> Result<Var> {
        self.expect_scalar("offset_by_var", s)?;
        let (r, c) = self.shape(a);
        let sv = self.value(s)[0];
        let out: Vec<S> = self.value(a).iter().map(|&x| x + sv).collect();
        let req = self.requires[a.idx()] || self.requires[s.idx()];
        Ok(self.push(Op::OffsetByVar { a, s }, r, c, out, Vec::new(), req))
    }

    /// Adds a 1×n row to every row of a[m×n] (bias broadcast).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != n {
            return Err(Error::shape(
                "add_row",
                format!("row {rr}x{rc} does not broadcast over {m}x{n}"),
            ));
        }
        let rowv = self.value(row);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let arow = &self.value(a)[r * n..(r + 1) * n];
            for c in 0..n {
                out.push(arow[c] + rowv[c]);
            }
        }
        let req = self.requires[a.idx()] || self.requires[row.idx()];
        Ok(self.push(Op::AddRow { a, row }, m, n, out, Vec::new(), req))
    }

    // ---- nonlinearities ----------------------------------------------

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = vec![S::zero(); r * c];
        kernels::softmax_rows(self.value(a), r, c, &mut out);
        let req = self.requires[a.idx()];
        self.push(Op::SoftmaxRows { a }, r, c, out, Vec::new(), req)
    }

    /// Row-wise layer norm; gamma and beta are 1×cols.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        if eps <= S::zero() {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (r, c) = self.shape(x);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let (gr, gc) = self.shape(v);
            if gr != 1 || gc != c {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{name} is {gr}x{gc}, expected 1x{c} for input {r}x{c}"),
                ));
            }
        }
        let mut out = vec![S::zero(); r * c];
        let mut aux = vec![S::zero(); 2 * r]; // means then inverse stddevs
        {
            let (means, inv_stds) = aux.split_at_mut(r);
            kernels::layer_norm_rows(
                self.value(x),
                self.value(gamma),
                self.value(beta),
                eps,
                r,
                c,
                &mut out,
                means,
                inv_stds,
            );
        }
        let req = self.requires[x.idx()] || self.requires[gamma.idx()] || self.requires[beta.idx()];
        Ok(self.push(Op::LayerNorm { x, gamma, beta }, r, c, out, aux, req))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out: Vec<S> = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        let req = self.requires[a.idx()];
        self.push(Op::Gelu { a }, r, c, out, Vec::new(), req)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out: Vec<S> = self.value(a).iter().map(|&x| kernels::sigmoid(x)).collect();
        let req = self.requires[a.idx()];
        self.push(Op::Sigmoid { a }, r, c, out, Vec::new(), req)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out: Vec<S> = self.value(a).iter().map(|&x| kernels::softplus(x)).collect();
        let req = self.requires[a.idx()];
        self.push(Op::Softplus { a }, r, c, out, Vec::new(), req)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out: Vec<S> = self.value(a).iter().map(|&x| x.exp()).collect();
        let req = self.requires[a.idx()];
        self.push(Op::Exp { a }, r, c, out, Vec::new(), req)
    }

    /// Normalizes each row of `a` to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = vec![S::zero(); r * c];
        let mut norms = vec![S::zero(); r];
        kernels::l2_normalize_rows(self.value(a), r, c, &mut out, &mut norms);
        let req = self.requires[a.idx()];
        self.push(Op::L2NormRows { a }, r, c, out, norms, req)
    }

    // ---- indexing and reshuffling --------------------------------------

    /// Gathers rows of a [V×d] table by token id; gradient scatters back.
    pub fn embed_lookup(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = self.shape(table);
        if ids.is_empty() {
            return Err(Error::shape("embed_lookup", "empty id list".to_string()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= v) {
            return Err(Error::Data(format!(
                "embed_lookup: token id {bad} out of range for table with {v} rows"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&self.value(table)[id as usize * d..(id as usize + 1) * d]);
        }
        let req = self.requires[table.idx()];
        Ok(self.push(
            Op::EmbedLookup { table, ids: ids.to_vec() },
            ids.len(),
            d,
            out,
            Vec::new(),
            req,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if len == 0 || start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} out of bounds for {r}x{c}", start + len),
            ));
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        let req = self.requires[a.idx()];
        Ok(self.push(Op::SliceRows { a, start }, len, c, out, Vec::new(), req))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} out of bounds for {r}x{c}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&self.value(a)[row * c + start..row * c + start + len]);
        }
        let req = self.requires[a.idx()];
        Ok(self.push(Op::SliceCols { a, start }, r, len, out, Vec::new(), req))
    }

    /// Concatenates equal-height blocks side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no parts given".to_string()));
        };
        let (r, _) = self.shape(first);
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(Error::shape(
                    "concat_cols",
                    format!("part is {pr}x{pc}, expected {r} rows like the first part"),
                ));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for row in 0..r {
            for &p in parts {
                let (_, pc) = self.shape(p);
                out.extend_from_slice(&self.values[p.idx()][row * pc..(row + 1) * pc]);
            }
        }
        let req = parts.iter().any(|p| self.requires[p.idx()]);
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec() }, r, total, out, Vec::new(), req))
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = kernels::pairwise_sum(self.value(a));
        let req = self.requires[a.idx()];
        self.push(Op::SumAll { a }, 1, 1, vec![s], Vec::new(), req)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.idx()].len();
        let s = kernels::pairwise_sum(self.value(a)) / fp::<S>(n as f64);
        let req = self.requires[a.idx()];
        self.push(Op::MeanAll { a }, 1, 1, vec![s], Vec::new(), req)
    }

    // ---- backward ------------------------------------------------------

    /// Runs the backward pass from a scalar loss, seeding with 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be a 1x1 scalar, got {r}x{c}"),
            ));
        }
        self.backward_seeded(loss, &[S::one()])
    }

    /// Runs the backward pass from `out` with an externally supplied
    /// output gradient — used when the loss lives on a different tape.
    pub fn backward_seeded(&mut self, out: Var, seed: &[S]) -> Result<()> {
        if self.ran_backward {
            return Err(Error::State(
                "backward already run on this tape; call zero_grads before running it again".to_string(),
            ));
        }
        let (r, c) = self.shape(out);
        if seed.len() != r * c {
            return Err(Error::shape(
                "backward",
                format!("seed has {} values, output is {r}x{c}", seed.len()),
            ));
        }
        self.ran_backward = true;
        if !self.requires[out.idx()] {
            return Ok(()); // nothing on the tape depends on a parameter
        }
        self.grads[out.idx()] = seed.to_vec();
        for i in (0..self.ops.len()).rev() {
            if !self.requires[i] || self.grads[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            self.apply_vjp(i, &g);
            self.grads[i] = g;
        }
        Ok(())
    }

    /// Clears all gradient buffers and re-arms backward.
    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.clear();
        }
        self.ran_backward = false;
    }

    fn ensure_grad(&mut self, v: Var) -> &mut [S] {
        if self.grads[v.idx()].is_empty() {
            let (r, c) = self.shapes[v.idx()];
            self.grads[v.idx()] = vec![S::zero(); r * c];
        }
        &mut self.grads[v.idx()]
    }

    fn apply_vjp(&mut self, i: usize, g: &[S]) {
        let op = self.ops[i].clone();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.shape(a);
                let (_, n) = self.shape(b);
                if self.requires[a.idx()] {
                    let bv = std::mem::take(&mut self.values[b.idx()]);
                    kernels::matmul_bt(g, &bv, m, n, k, self.ensure_grad(a));
                    self.values[b.idx()] = bv;
                }
                if self.requires[b.idx()] {
                    let av = std::mem::take(&mut self.values[a.idx()]);
                    kernels::matmul_at(&av, g, m, k, n, self.ensure_grad(b));
                    self.values[a.idx()] = av;
                }
            }
            Op::MatmulBt { a, b } => {
                let (m, k) = self.shape(a);
                let (n, _) = self.shape(b);
                if self.requires[a.idx()] {
                    let bv = std::mem::take(&mut self.values[b.idx()]);
                    kernels::matmul(g, &bv, m, n, k, self.ensure_grad(a));
                    self.values[b.idx()] = bv;
                }
                if self.requires[b.idx()] {
                    let av = std::mem::take(&mut self.values[a.idx()]);
                    kernels::matmul_at(g, &av, m, n, k, self.ensure_grad(b));
                    self.values[a.idx()] = av;
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.requires[v.idx()] {
                        for (gv, &gi) in self.ensure_grad(v).iter_mut().zip(g) {
                            *gv += gi;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.requires[a.idx()] {
                    let bv = std::mem::take(&mut self.values[b.idx()]);
                    for ((gv, &gi), &bi) in self.ensure_grad(a).iter_mut().zip(g).zip(&bv) {
                        *gv += gi * bi;
                    }
                    self.values[b.idx()] = bv;
                }
                if self.requires[b.idx()] {
                    let av = std::mem::take(&mut self.values[a.idx()]);
                    for ((gv, &gi), &ai) in self.ensure_grad(b).iter_mut().zip(g).zip(&av) {
                        *gv += gi * ai;
                    }
                    self.values[a.idx()] = av;
                }
            }
            Op::Scale { a, c } => {
                if self.requires[a.idx()] {
                    for (gv, &gi) in self.ensure_grad(a).iter_mut().zip(g) {
                        *gv += gi * c;
                    }
                }
            }
            Op::AddScalar { a } => {
                if self.requires[a.idx()] {
                    for (gv, &gi) in self.ensure_grad(a).iter_mut().zip(g) {
                        *gv += gi;
                    }
                }
            }
            Op::ScaleByVar { a, s } => {
                let sv = self.values[s.idx()][0];
                if self.requires[a.idx()] {
                    for (gv, &gi) in self.ensure_grad(a).iter_mut().zip(g) {
                        *gv += gi * sv;
                    }
                }
                if self.requires[s.idx()] {
                    let av = std::mem::take(&mut self.values[a.idx()]);
                    let mut acc = S::zero();
                    for (&gi, &ai) in g.iter().zip(&av) {
                        acc += gi * ai;
                    }
                    self.values[a.idx()] = av;
                    self.ensure_grad(s)[0] += acc;
                }
            }
            Op::OffsetByVar { a, s } => {
                if self.requires[a.idx()] {
                    for (gv, &gi) in self.ensure_grad(a).iter_mut().zip(g) {
                        *gv += gi;
                    }
                }
                if self.requires[s.idx()] {
                    self.ensure_grad(s)[0] += kernels::pairwise_sum(g);
                }
            }
            Op::AddRow { a, row } => {
                let (m, n) = self.shape(a);
                if self.requires[a.idx()] {
                    for (gv, &gi) in self.ensure_grad(a).iter_mut().zip(g) {
                        *gv += gi;
                    }
                }
                if self.requires[row.idx()] {
                    let grow = self.ensure_grad(row);
                    for r in 0..m {
                        for c in 0..n {
                            grow[c] += g[r * n + c];
                        }
                    }
                }
            }
            Op::EmbedLookup { table, ids } => {
                if self.requires[table.idx()] {
                    let (_, d) = self.shape(table);
                    let gt = self.ensure_grad(table);
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                        for (dv, &gi) in dst.iter_mut().zip(&g[i * d..(i + 1) * d]) {
                            *dv += gi;
                        }
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                if self.requires[a.idx()] {
                    let (r, c) = self.shape(a);
                    let y = std::mem::take(&mut self.values[i]);
                    let ga = self.ensure_grad(a);
                    for row in 0..r {
                        let yr = &y[row * c..(row + 1) * c];
                        let gr = &g[row * c..(row + 1) * c];
                        let mut dot = S::zero();
                        for (&yi, &gi) in yr.iter().zip(gr) {
                            dot += yi * gi;
                        }
                        let gar = &mut ga[row * c..(row + 1) * c];
                        for ((gv, &yi), &gi) in gar.iter_mut().zip(yr).zip(gr) {
                            *gv += yi * (gi - dot);
                        }
                    }
                    self.values[i] = y;
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (r, c) = self.shape(x);
                let n = fp::<S>(c as f64);
                let aux = std::mem::take(&mut self.aux[i]);
                let (means, inv_stds) = aux.split_at(r);
                let xv = std::mem::take(&mut self.values[x.idx()]);
                let gv = std::mem::take(&mut self.values[gamma.idx()]);
                for row in 0..r {
                    let xr = &xv[row * c..(row + 1) * c];
                    let gr = &g[row * c..(row + 1) * c];
                    let (mu, istd) = (means[row], inv_stds[row]);
                    if self.requires[gamma.idx()] || self.requires[beta.idx()] {
                        if self.requires[gamma.idx()] {
                            let gg = self.ensure_grad(gamma);
                            for cc in 0..c {
                                gg[cc] += gr[cc] * (xr[cc] - mu) * istd;
                            }
                        }
                        if self.requires[beta.idx()] {
                            let gb = self.ensure_grad(beta);
                            for cc in 0..c {
                                gb[cc] += gr[cc];
                            }
                        }
                    }
                    if self.requires[x.idx()] {
                        // dxhat = g * gamma; dx = istd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for cc in 0..c {
                            let dxh = gr[cc] * gv[cc];
                            let xh = (xr[cc] - mu) * istd;
                            m1 += dxh;
                            m2 += dxh * xh;
                        }
                        m1 /= n;
                        m2 /= n;
                        let gx = self.ensure_grad(x);
                        let gxr = &mut gx[row * c..(row + 1) * c];
                        for cc in 0..c {
                            let dxh = gr[cc] * gv[cc];
                            let xh = (xr[cc] - mu) * istd;
                            gxr[cc] += istd * (dxh - m1 - xh * m2);
                        }
                    }
                }
                self.values[x.idx()] = xv;
                self.values[gamma.idx()] = gv;
                self.aux[i] = aux;
            }
            Op::Gelu { a } => {
                if self.requires[a.idx()] {
                    let av = std::mem::take(&mut self.values[a.idx()]);
                    for ((gv, &gi), &ai) in self.ensure_grad(a).iter_mut().zip(g).zip(&av) {
                        *gv += gi * kernels::gelu_grad(ai);
                    }
                    self.values[a.idx()] = av;
                }
            }
            Op::Sigmoid { a } => {
                if self.requires[a.idx()] {
                    let y = std::mem::take(&mut self.values[i]);
                    for ((gv, &gi), &yi) in self.ensure_grad(a).iter_mut().zip(g).zip(&y) {
                        *gv += gi * yi * (S::one() - yi);
                    }
                    self.values[i] = y;
                }
            }
            Op::Softplus { a } => {
                if self.requires[a.idx()] {
                    let av = std::mem::take(&mut self.values[a.idx()]);
                    for ((gv, &gi), &ai) in self.ensure_grad(a).iter_mut().zip(g).zip(&av) {
                        *gv += gi * kernels::sigmoid(ai);
                    }
                    self.values[a.idx()] = av;
                }
            }
            Op::Exp { a } => {
                if self.requires[a.idx()] {
                    let y = std::mem::take(&mut self.values[i]);
                    for ((gv, &gi), &yi) in self.ensure_grad(a).iter_mut().zip(g).zip(&y) {
                        *gv += gi * yi;
                    }
                    self.values[i] = y;
                }
            }
            Op::L2NormRows { a } => {
                if self.requires[a.idx()] {
                    let (r, c) = self.shape(a);
                    let y = std::mem::take(&mut self.values[i]);
                    let norms = std::mem::take(&mut self.aux[i]);
                    let ga = self.ensure_grad(a);
                    for row in 0..r {
                        let yr = &y[row * c..(row + 1) * c];
                        let gr = &g[row * c..(row + 1) * c];
                        let mut dot = S::zero();
                        for (&yi, &gi) in yr.iter().zip(gr) {
                            dot += yi * gi;
                        }
                        let inv_norm = norms[row].recip();
                        let gar = &mut ga[row * c..(row + 1) * c];
                        for ((gv, &gi), &yi) in gar.iter_mut().zip(gr).zip(yr) {
                            *gv += (gi - yi * dot) * inv_norm;
                        }
                    }
                    self.values[i] = y;
                    self.aux[i] = norms;
                }
            }
            Op::SliceRows { a, start } => {
                if self.requires[a.idx()] {
                    let (rows, c) = self.shapes[i];
                    let ga = self.ensure_grad(a);
                    let dst = &mut ga[start * c..(start + rows) * c];
                    for (gv, &gi) in dst.iter_mut().zip(g) {
                        *gv += gi;
                    }
                }
            }
            Op::SliceCols { a, start } => {
                if self.requires[a.idx()] {
                    let (rows, len) = self.shapes[i];
                    let (_, ac) = self.shape(a);
                    let ga = self.ensure_grad(a);
                    for row in 0..rows {
                        let dst = &mut ga[row * ac + start..row * ac + start + len];
                        for (gv, &gi) in dst.iter_mut().zip(&g[row * len..(row + 1) * len]) {
                            *gv += gi;
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let (rows, total) = self.shapes[i];
                let mut offset = 0;
                for &p in &parts {
                    let (_, pc) = self.shape(p);
                    if self.requires[p.idx()] {
                        let gp = self.ensure_grad(p);
                        for row in 0..rows {
                            let src = &g[row * total + offset..row * total + offset + pc];
                            for (gv, &gi) in gp[row * pc..(row + 1) * pc].iter_mut().zip(src) {
                                *gv += gi;
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::SumAll { a } => {
                if self.requires[a.idx()] {
                    let gi = g[0];
                    for gv in self.ensure_grad(a).iter_mut() {
                        *gv += gi;
                    }
                }
            }
            Op::MeanAll { a } => {
                if self.requires[a.idx()] {
                    let n = self.values[a.idx()].len();
                    let gi = g[0] / fp::<S>(n as f64);
                    for gv in self.ensure_grad(a).iter_mut() {
                        *gv += gi;
                    }
                }
            }
        }
    }

    // ---- helpers -------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if (ar, ac) != (br, bc) {
            return Err(Error::shape(op, format!("{ar}x{ac} vs {br}x{bc}")));
        }
        Ok((ar, ac))
    }

    fn expect_scalar(&self, op: &'static str, s: Var) -> Result<()> {
        let (r, c) = self.shape(s);
        if (r, c) != (1, 1) {
            return Err(Error::shape(op, format!("expected a 1x1 scalar, got {r}x{c}")));
        }
        Ok(())
    }
}

/// Compares the tape gradient of `f` at `x` against central finite
/// differences with step `h`, returning the worst elementwise relative
/// error. Denominators are clamped at 1e-8.
///
/// `f` receives a fresh tape and the variable for `x` and must return a
/// scalar (1×1) output; it is re-invoked 2·numel(x) times for the
/// perturbed evaluations.
pub fn finite_diff_check<S, F>(f: F, x: &Tensor<S>, h: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> Result<Var>,
{
    if h <= S::zero() {
        return Err(Error::Config(format!("finite_diff_check step must be > 0, got {h}")));
    }
    let (rows, cols) = x.dims2();

    let mut tape = Tape::new();
    let xv = tape.param_tensor(x)?;
    let out = f(&mut tape, xv)?;
    let (or, oc) = tape.shape(out);
    if (or, oc) != (1, 1) {
        return Err(Error::shape(
            "finite_diff_check",
            format!("f must produce a 1x1 scalar, got {or}x{oc}"),
        ));
    }
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .ok_or_else(|| Error::Numeric("finite_diff_check: no gradient reached x".to_string()))?
        .to_vec();

    let eval = |data: &[S]| -> Result<S> {
        let mut t = Tape::new();
        let v = t.leaf(data, rows, cols)?;
        let o = f(&mut t, v)?;
        Ok(t.value(o)[0])
    };

    let clamp: S = fp(1e-8);
    let two: S = fp(2.0);
    let mut worst = S::zero();
    let mut perturbed = x.data().to_vec();
    for i in 0..perturbed.len() {
        let orig = perturbed[i];
        perturbed[i] = orig + h;
        let f_plus = eval(&perturbed)?;
        perturbed[i] = orig - h;
        let f_minus = eval(&perturbed)?;
        perturbed[i] = orig;
        let fd = (f_plus - f_minus) / (two * h);
        let denom = analytic[i].abs().max(fd.abs()).max(clamp);
        let rel = (analytic[i] - fd).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor_f32(shape: Vec<usize>, data: Vec<f32>) -> Tensor<f32> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut t = Tape::<f32>::new();
        let a_data: Vec<f32> = (0..12).map(|i| (i as f32 * 0.37).sin()).collect();
        let b_data: Vec<f32> = (0..8).map(|i| (i as f32 * 0.61).cos()).collect();
        let a = t.leaf(&a_data, 3, 4).unwrap();
        let b = t.leaf(&b_data, 4, 2).unwrap();
        let c = t.matmul(a, b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut want = 0.0f32;
                for k in 0..4 {
                    want += a_data[i * 4 + k] * b_data[k * 2 + j];
                }
                assert!((t.value(c)[i * 2 + j] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut t = Tape::<f32>::new();
        let a = t.leaf(&[1.0, 2.0], 1, 2).unwrap();
        let b = t.leaf(&[1.0, 2.0, 3.0], 3, 1).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("1x2") && msg.contains("3x1"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_single_element() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(&[0.0, 0.0], 1, 2).unwrap();
        let y = t.softmax_rows(x);
        assert_eq!(t.value(y), &[0.5, 0.5]);

        let lone = t.leaf(&[-7.25], 1, 1).unwrap();
        let ly = t.softmax_rows(lone);
        assert_eq!(t.value(ly), &[1.0]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(&[3.0; 5], 1, 5).unwrap();
        let gamma = t.leaf(&[1.0; 5], 1, 5).unwrap();
        let beta = t.leaf(&[0.0; 5], 1, 5).unwrap();
        let y = t.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for &v in t.value(y) {
            assert!(v.abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_two_point_standardization() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(&[1.0, 3.0], 1, 2).unwrap();
        let gamma = t.leaf(&[1.0, 1.0], 1, 2).unwrap();
        let beta = t.leaf(&[0.0, 0.0], 1, 2).unwrap();
        let y = t.layer_norm(x, gamma, beta, 1e-12).unwrap();
        assert!((t.value(y)[0] + 1.0).abs() < 1e-5);
        assert!((t.value(y)[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::<f32>::new();
        let x = t.param(&[0.3, -1.2, 4.0, 0.0], 2, 2).unwrap();
        let s = t.sum_all(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_dot_is_twice_x() {
        let mut t = Tape::<f32>::new();
        let data = [0.5f32, -2.0, 3.25];
        let x = t.param(&data, 1, 3).unwrap();
        let xx = t.mul(x, x).unwrap();
        let s = t.sum_all(xx);
        t.backward(s).unwrap();
        let g = t.grad(x).unwrap();
        for (gi, xi) in g.iter().zip(&data) {
            assert_eq!(*gi, 2.0 * xi);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::<f32>::new();
        let x = t.param(&[1.0, 2.0], 1, 2).unwrap();
        let y = t.scale(x, 2.0);
        assert!(matches!(t.backward(y), Err(Error::Shape { .. })));
    }

    #[test]
    fn double_backward_without_reset_is_an_error() {
        let mut t = Tape::<f32>::new();
        let x = t.param(&[1.0], 1, 1).unwrap();
        let s = t.sum_all(x);
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(Error::State(_))));
        t.zero_grads();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn gradients_accumulate_across_shared_subexpressions() {
        // y = sum(x + x) → dy/dx = 2 everywhere.
        let mut t = Tape::<f32>::new();
        let x = t.param(&[1.0, -1.0], 1, 2).unwrap();
        let two_x = t.add(x, x).unwrap();
        let s = t.sum_all(two_x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn finite_diff_on_sum_is_near_zero() {
        let x = tensor_f32(vec![1, 4], vec![0.1, -0.2, 0.3, 1.5]);
        let err = finite_diff_check(|t, v| Ok(t.sum_all(v)), &x, 1e-2).unwrap();
        assert!(err < 1e-5, "err={err}");
    }

    #[test]
    fn finite_diff_on_half_norm_squared() {
        // f = 0.5‖x‖², analytic gradient x itself; quadratics are exact
        // for central differences up to rounding.
        let x = tensor_f32(vec![1, 3], vec![1.0, 2.0, 3.0]);
        let err = finite_diff_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                let s = t.sum_all(sq);
                Ok(t.scale(s, 0.5))
            },
            &x,
            1e-2,
        )
        .unwrap();
        assert!(err <= 1e-4, "err={err}");
    }

    #[test]
    fn seeded_backward_matches_scaled_loss() {
        // Seeding with 3.0 must equal differentiating 3·f.
        let mut t = Tape::<f32>::new();
        let x = t.param(&[0.4, 0.6], 1, 2).unwrap();
        let y = t.sigmoid(x);
        let seed = [3.0f32, 3.0];
        t.backward_seeded(y, &seed).unwrap();
        let got = t.grad(x).unwrap().to_vec();

        let mut t2 = Tape::<f32>::new();
        let x2 = t2.param(&[0.4, 0.6], 1, 2).unwrap();
        let y2 = t2.sigmoid(x2);
        let s2 = t2.scale(y2, 3.0);
        let tot = t2.sum_all(s2);
        t2.backward(tot).unwrap();
        assert_eq!(got, t2.grad(x2).unwrap());
    }
}
