//! Wengert tape for the handful of layers the captioner needs.
//!
//! Every primitive is recorded with the activations its reverse pass needs.
//! Values are stored as flat slices; matrices are row-major `[rows, cols]`.
//! Leaves may borrow their storage (model parameters) for the lifetime of
//! the tape.

use std::borrow::Cow;

use crate::error::{dim_err, Error, Result};
use crate::numerics::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weights of one gated recurrent cell, already placed on the tape.
///
/// Gate rows are stacked `[reset; update; candidate]`, each `hidden` rows.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_input: Var,
    pub w_hidden: Var,
    pub b_input: Var,
    pub b_hidden: Var,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Tanh(Var),
    Affine {
        x: Var,
        scale: f64,
        shift: f64,
    },
    Concat(Var, Var),
    Embed {
        table: Var,
        row: usize,
    },
    Gru {
        x: Var,
        h: Var,
        cell: GruVars,
        cache: GruCache,
    },
    LogSoftmax(Var),
}

#[derive(Clone, Debug)]
struct GruCache {
    reset: Vec<f64>,
    update: Vec<f64>,
    candidate: Vec<f64>,
    /// `U_n h + b_n`, needed for the reset-gate derivative.
    hidden_candidate: Vec<f64>,
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward pass.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Reverse-mode result: one optional gradient buffer per recorded value.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `var`, or `None` when it does not influence the seeds.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `var`, zero-filled when absent.
    pub fn dense(&self, tape: &Tape<'_>, var: Var) -> Vec<f64> {
        self.get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tape.value(var).len()])
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [f64]>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that borrows `tensor`.
    pub fn leaf(&mut self, tensor: &'a Tensor, requires_grad: bool) -> Var {
        self.push(
            Cow::Borrowed(tensor.data()),
            tensor.shape().to_vec(),
            Op::Leaf,
            requires_grad,
        )
    }

    pub fn leaf_owned(&mut self, tensor: Tensor, requires_grad: bool) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(
            Cow::Owned(tensor.into_data()),
            shape,
            Op::Leaf,
            requires_grad,
        )
    }

    pub fn value(&self, var: Var) -> &[f64] {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("variable {} not on tape", var.0)));
        }
        Ok(())
    }

    fn matrix_dims(&self, w: Var) -> Result<(usize, usize)> {
        match self.shape(w) {
            [r, c] => Ok((*r, *c)),
            s => dim_err(format!("expected matrix, got shape {s:?}")),
        }
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// `y = W x + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        for v in [x, w, b] {
            self.check(v)?;
        }
        let (rows, cols) = self.matrix_dims(w)?;
        if self.value(x).len() != cols || self.value(b).len() != rows {
            return dim_err(format!(
                "dense: W {rows}x{cols}, x {}, b {}",
                self.value(x).len(),
                self.value(b).len()
            ));
        }
        let y = dense_forward(self.value(x), self.value(w), self.value(b), rows, cols);
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(Cow::Owned(y), vec![rows], Op::Dense { x, w, b }, needs))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let y = self.value(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(Cow::Owned(y), shape, Op::Tanh(x), needs))
    }

    /// `y = scale * x + shift`, elementwise with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.check(x)?;
        let y = self.value(x).iter().map(|v| scale * v + shift).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(Cow::Owned(y), shape, Op::Affine { x, scale, shift }, needs))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let mut y = self.value(a).to_vec();
        y.extend_from_slice(self.value(b));
        let n = y.len();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Cow::Owned(y), vec![n], Op::Concat(a, b), needs))
    }

    /// Row `row` of a `[rows, cols]` table.
    pub fn embed(&mut self, table: Var, row: usize) -> Result<Var> {
        self.check(table)?;
        let (rows, cols) = self.matrix_dims(table)?;
        if row >= rows {
            return Err(Error::Input(format!(
                "row {row} outside table of {rows} rows"
            )));
        }
        let y = self.value(table)[row * cols..(row + 1) * cols].to_vec();
        let needs = self.needs(&[table]);
        Ok(self.push(Cow::Owned(y), vec![cols], Op::Embed { table, row }, needs))
    }

    /// One gated-recurrent-unit update `h' = (1 - z) * n + z * h`.
    pub fn gru_step(&mut self, x: Var, h: Var, cell: GruVars) -> Result<Var> {
        for v in [
            x,
            h,
            cell.w_input,
            cell.w_hidden,
            cell.b_input,
            cell.b_hidden,
        ] {
            self.check(v)?;
        }
        let (rows_w, cols_w) = self.matrix_dims(cell.w_input)?;
        let (rows_u, cols_u) = self.matrix_dims(cell.w_hidden)?;
        let hidden = self.value(h).len();
        if rows_w != 3 * hidden
            || rows_u != 3 * hidden
            || cols_u != hidden
            || cols_w != self.value(x).len()
            || self.value(cell.b_input).len() != 3 * hidden
            || self.value(cell.b_hidden).len() != 3 * hidden
        {
            return dim_err(format!(
                "gru: W {rows_w}x{cols_w}, U {rows_u}x{cols_u}, x {}, h {hidden}",
                self.value(x).len()
            ));
        }
        let (out, cache) = gru_forward(
            self.value(x),
            self.value(h),
            self.value(cell.w_input),
            self.value(cell.w_hidden),
            self.value(cell.b_input),
            self.value(cell.b_hidden),
        );
        let needs = self.needs(&[
            x,
            h,
            cell.w_input,
            cell.w_hidden,
            cell.b_input,
            cell.b_hidden,
        ]);
        Ok(self.push(
            Cow::Owned(out),
            vec![hidden],
            Op::Gru { x, h, cell, cache },
            needs,
        ))
    }

    pub fn log_softmax(&mut self, z: Var) -> Result<Var> {
        self.check(z)?;
        let y = log_softmax(self.value(z))?;
        let shape = self.shape(z).to_vec();
        let needs = self.needs(&[z]);
        Ok(self.push(Cow::Owned(y), shape, Op::LogSoftmax(z), needs))
    }

    /// Recomputes every non-leaf node from its recorded inputs and reports
    /// whether all outputs match bit for bit.
    pub fn replay_matches(&self) -> bool {
        self.nodes.iter().all(|node| {
            let recomputed = match &node.op {
                Op::Leaf => return true,
                Op::Dense { x, w, b } => {
                    let (r, c) = (node.shape[0], self.value(*x).len());
                    dense_forward(self.value(*x), self.value(*w), self.value(*b), r, c)
                }
                Op::Tanh(x) => self.value(*x).iter().map(|v| v.tanh()).collect(),
                Op::Affine { x, scale, shift } => {
                    self.value(*x).iter().map(|v| scale * v + shift).collect()
                }
                Op::Concat(a, b) => [self.value(*a), self.value(*b)].concat(),
                Op::Embed { table, row } => {
                    let c = node.shape[0];
                    self.value(*table)[row * c..(row + 1) * c].to_vec()
                }
                Op::Gru { x, h, cell, .. } => {
                    gru_forward(
                        self.value(*x),
                        self.value(*h),
                        self.value(cell.w_input),
                        self.value(cell.w_hidden),
                        self.value(cell.b_input),
                        self.value(cell.b_hidden),
                    )
                    .0
                }
                Op::LogSoftmax(z) => match log_softmax(self.value(*z)) {
                    Ok(v) => v,
                    Err(_) => return false,
                },
            };
            recomputed
                .iter()
                .zip(node.value.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }

    /// Exact gradients of `Σ weight · value(var)[index]` over `seeds`.
    pub fn backward(&self, seeds: &[(Var, usize, f64)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for &(var, index, weight) in seeds {
            self.check(var)?;
            let len = self.value(var).len();
            if index >= len {
                return Err(Error::Contract(format!(
                    "seed index {index} outside output {} of length {len}",
                    var.0
                )));
            }
            if weight == 0.0 {
                continue;
            }
            grads[var.0].get_or_insert_with(|| vec![0.0; len])[index] += weight;
        }

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Dense { x, w, b } => {
                    let rows = node.shape[0];
                    let cols = self.value(*x).len();
                    let wv = self.value(*w);
                    if self.nodes[x.0].needs_grad {
                        let gx = accum(&mut grads, *x, cols);
                        for r in 0..rows {
                            let gr = g[r];
                            if gr == 0.0 {
                                continue;
                            }
                            let row = &wv[r * cols..(r + 1) * cols];
                            for (acc, wrc) in gx.iter_mut().zip(row) {
                                *acc += gr * wrc;
                            }
                        }
                    }
                    if self.nodes[w.0].needs_grad {
                        let xv = self.value(*x).to_vec();
                        let gw = accum(&mut grads, *w, rows * cols);
                        for r in 0..rows {
                            let gr = g[r];
                            if gr == 0.0 {
                                continue;
                            }
                            for (acc, xc) in gw[r * cols..(r + 1) * cols].iter_mut().zip(&xv) {
                                *acc += gr * xc;
                            }
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = accum(&mut grads, *b, rows);
                        for (acc, gr) in gb.iter_mut().zip(&g) {
                            *acc += gr;
                        }
                    }
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    let gx = accum(&mut grads, *x, y.len());
                    for ((acc, gi), yi) in gx.iter_mut().zip(&g).zip(y.iter()) {
                        *acc += gi * (1.0 - yi * yi);
                    }
                }
                Op::Affine { x, scale, .. } => {
                    let gx = accum(&mut grads, *x, g.len());
                    for (acc, gi) in gx.iter_mut().zip(&g) {
                        *acc += scale * gi;
                    }
                }
                Op::Concat(a, b) => {
                    let na = self.value(*a).len();
                    let nb = self.value(*b).len();
                    if self.nodes[a.0].needs_grad {
                        let ga = accum(&mut grads, *a, na);
                        for (acc, gi) in ga.iter_mut().zip(&g[..na]) {
                            *acc += gi;
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = accum(&mut grads, *b, nb);
                        for (acc, gi) in gb.iter_mut().zip(&g[na..]) {
                            *acc += gi;
                        }
                    }
                }
                Op::Embed { table, row } => {
                    let cols = node.shape[0];
                    let total = self.value(*table).len();
                    let gt = accum(&mut grads, *table, total);
                    for (acc, gi) in gt[row * cols..(row + 1) * cols].iter_mut().zip(&g) {
                        *acc += gi;
                    }
                }
                Op::Gru { x, h, cell, cache } => {
                    self.gru_backward(&mut grads, &g, *x, *h, cell, cache);
                }
                Op::LogSoftmax(z) => {
                    // d/dz_j Σ_i g_i o_i = g_j - softmax_j Σ_i g_i
                    let total: f64 = g.iter().sum();
                    let gz = accum(&mut grads, *z, g.len());
                    for ((acc, gi), oi) in gz.iter_mut().zip(&g).zip(node.value.iter()) {
                        *acc += gi - oi.exp() * total;
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn gru_backward(
        &self,
        grads: &mut [Option<Vec<f64>>],
        g: &[f64],
        x: Var,
        h: Var,
        cell: &GruVars,
        cache: &GruCache,
    ) {
        let hidden = g.len();
        let xv = self.value(x);
        let hv = self.value(h);
        let in_dim = xv.len();

        // Pre-activation gradients for the input-side (gi) and hidden-side (gh) affine maps.
        let mut gi = vec![0.0; 3 * hidden];
        let mut gh = vec![0.0; 3 * hidden];
        let mut dh_direct = vec![0.0; hidden];
        for j in 0..hidden {
            let (r, z, n) = (cache.reset[j], cache.update[j], cache.candidate[j]);
            let dz = g[j] * (hv[j] - n);
            let dn = g[j] * (1.0 - z);
            dh_direct[j] = g[j] * z;
            let dn_pre = dn * (1.0 - n * n);
            let dr = dn_pre * cache.hidden_candidate[j];
            let dr_pre = dr * r * (1.0 - r);
            let dz_pre = dz * z * (1.0 - z);
            gi[j] = dr_pre;
            gi[hidden + j] = dz_pre;
            gi[2 * hidden + j] = dn_pre;
            gh[j] = dr_pre;
            gh[hidden + j] = dz_pre;
            gh[2 * hidden + j] = dn_pre * r;
        }

        let wv = self.value(cell.w_input);
        let uv = self.value(cell.w_hidden);
        if self.nodes[x.0].needs_grad {
            let gx = accum(grads, x, in_dim);
            for (row, gr) in gi.iter().enumerate() {
                if *gr == 0.0 {
                    continue;
                }
                for (acc, w) in gx.iter_mut().zip(&wv[row * in_dim..(row + 1) * in_dim]) {
                    *acc += gr * w;
                }
            }
        }
        if self.nodes[h.0].needs_grad {
            let ghv = accum(grads, h, hidden);
            for (acc, d) in ghv.iter_mut().zip(&dh_direct) {
                *acc += d;
            }
            for (row, gr) in gh.iter().enumerate() {
                if *gr == 0.0 {
                    continue;
                }
                for (acc, u) in ghv.iter_mut().zip(&uv[row * hidden..(row + 1) * hidden]) {
                    *acc += gr * u;
                }
            }
        }
        if self.nodes[cell.w_input.0].needs_grad {
            let gw = accum(grads, cell.w_input, 3 * hidden * in_dim);
            for (row, gr) in gi.iter().enumerate() {
                for (acc, xc) in gw[row * in_dim..(row + 1) * in_dim].iter_mut().zip(xv) {
                    *acc += gr * xc;
                }
            }
        }
        if self.nodes[cell.w_hidden.0].needs_grad {
            let gu = accum(grads, cell.w_hidden, 3 * hidden * hidden);
            for (row, gr) in gh.iter().enumerate() {
                for (acc, hc) in gu[row * hidden..(row + 1) * hidden].iter_mut().zip(hv) {
                    *acc += gr * hc;
                }
            }
        }
        if self.nodes[cell.b_input.0].needs_grad {
            let gb = accum(grads, cell.b_input, 3 * hidden);
            for (acc, d) in gb.iter_mut().zip(&gi) {
                *acc += d;
            }
        }
        if self.nodes[cell.b_hidden.0].needs_grad {
            let gb = accum(grads, cell.b_hidden, 3 * hidden);
            for (acc, d) in gb.iter_mut().zip(&gh) {
                *acc += d;
            }
        }
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut Vec<f64> {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn dense_forward(x: &[f64], w: &[f64], b: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            w[r * cols..(r + 1) * cols]
                .iter()
                .zip(x)
                .fold(b[r], |acc, (wi, xi)| acc + wi * xi)
        })
        .collect()
}

fn gru_forward(
    x: &[f64],
    h: &[f64],
    w: &[f64],
    u: &[f64],
    bw: &[f64],
    bu: &[f64],
) -> (Vec<f64>, GruCache) {
    let hidden = h.len();
    let gi = dense_forward(x, w, bw, 3 * hidden, x.len());
    let gh = dense_forward(h, u, bu, 3 * hidden, hidden);
    let mut cache = GruCache {
        reset: Vec::with_capacity(hidden),
        update: Vec::with_capacity(hidden),
        candidate: Vec::with_capacity(hidden),
        hidden_candidate: gh[2 * hidden..].to_vec(),
    };
    let mut out = Vec::with_capacity(hidden);
    for j in 0..hidden {
        let r = sigmoid(gi[j] + gh[j]);
        let z = sigmoid(gi[hidden + j] + gh[hidden + j]);
        let n = (gi[2 * hidden + j] + r * gh[2 * hidden + j]).tanh();
        out.push((1.0 - z) * n + z * h[j]);
        cache.reset.push(r);
        cache.update.push(z);
        cache.candidate.push(n);
    }
    (out, cache)
}

/// Numerically stable `z - logsumexp(z)`.
pub fn log_softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return dim_err("log_softmax of empty vector");
    }
    let lse = logsumexp(z);
    Ok(z.iter().map(|v| v - lse).collect())
}

/// `ln Σ exp(z)` with max subtraction; `-inf` for an empty slice.
pub fn logsumexp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
