//! Wengert tape for reverse-mode differentiation.
//!
//! Every primitive appends one node holding its forward value and the ids of
//! its inputs. Inputs always precede the node that consumes them, so the
//! backward sweep is a single pass over the node list in reverse order.
//! Constants (and anything computed only from constants) carry no gradient.

use super::{NumericsError, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Affine { w: Var, x: Var, b: Var },
    MatVec { m: Var, x: Var },
    Relu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    OuterAug(Var, Var),
    Cosine(Var, Var),
    CosineRows { m: Var, x: Var },
    WeightedSum { weights: Var, rows: Var },
    Dot(Var, Var),
    Softmax(Var),
    LogSumExp(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Sum(Var),
    Mean(Var),
    Gather(Var, Vec<usize>),
    Pick(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Recording of primitive applications for one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn vec_len(t: &Tensor, op: &'static str) -> Result<usize, NumericsError> {
    t.vector_len()
        .ok_or_else(|| NumericsError::shape(op, format!("expected vector, got {:?}", t.shape())))
}

fn norm(xs: &[f64]) -> f64 {
    xs.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl Tape {
    /// Tape that rejects non-finite intermediate values.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
        }
    }

    /// Tape that skips the per-node finiteness scan.
    pub fn unchecked() -> Self {
        Self {
            nodes: Vec::new(),
            checked: false,
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input: gradients flow into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Detached input: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        op: &'static str,
        kind: Op,
        inputs: &[Var],
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> Result<Var, NumericsError> {
        if self.checked {
            if let Some(index) = data.iter().position(|v| !v.is_finite()) {
                return Err(NumericsError::NonFinite { op, index });
            }
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op: kind,
            value: Tensor::from_parts(shape, data),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `W x + b` with `W: [n, m]`, `x: [m]`, `b: [n]`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var, NumericsError> {
        let (n, m) = self.value(w).matrix_dims().ok_or_else(|| {
            NumericsError::shape(
                "affine",
                format!("weight must be a matrix, got {:?}", self.value(w).shape()),
            )
        })?;
        let (xv, bv, wv) = (self.value(x), self.value(b), self.value(w));
        if xv.shape() != [m] || bv.shape() != [n] {
            return Err(NumericsError::shape(
                "affine",
                format!("W {:?}, x {:?}, b {:?}", wv.shape(), xv.shape(), bv.shape()),
            ));
        }
        let (wd, xd) = (wv.data(), xv.data());
        let out: Vec<f64> = (0..n)
            .map(|i| dot(&wd[i * m..(i + 1) * m], xd) + bv.data()[i])
            .collect();
        self.push("affine", Op::Affine { w, x, b }, &[w, x, b], vec![n], out)
    }

    /// `M x` with `M: [n, m]`, `x: [m]`.
    pub fn matvec(&mut self, m: Var, x: Var) -> Result<Var, NumericsError> {
        let (mv, xv) = (self.value(m), self.value(x));
        let (rows, cols) = match mv.matrix_dims() {
            Some(d) if xv.shape() == [d.1] => d,
            _ => {
                return Err(NumericsError::shape(
                    "matvec",
                    format!("M {:?}, x {:?}", mv.shape(), xv.shape()),
                ))
            }
        };
        let (md, xd) = (mv.data(), xv.data());
        let out = (0..rows).map(|i| dot(&md[i * cols..(i + 1) * cols], xd)).collect();
        self.push("matvec", Op::MatVec { m, x }, &[m, x], vec![rows], out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let out = xv.data().iter().map(|v| v.max(0.0)).collect();
        self.push("relu", Op::Relu(x), &[x], shape, out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let out = xv.data().iter().map(|&v| stable_sigmoid(v)).collect();
        self.push("sigmoid", Op::Sigmoid(x), &[x], shape, out)
    }

    /// Concatenates vectors (scalars count as length-1 vectors).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::Empty { op: "concat" });
        }
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            vec_len(t, "concat")?;
            out.extend_from_slice(t.data());
        }
        let n = out.len();
        self.push("concat", Op::Concat(parts.to_vec()), parts, vec![n], out)
    }

    /// Stacks equal-length vectors into a `[rows, dim]` matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var, NumericsError> {
        let first = rows.first().ok_or(NumericsError::Empty { op: "stack" })?;
        let dim = self.value(*first).shape().to_vec();
        if dim.len() != 1 {
            return Err(NumericsError::shape(
                "stack",
                format!("rows must be vectors, got {dim:?}"),
            ));
        }
        let mut out = Vec::with_capacity(rows.len() * dim[0]);
        for &r in rows {
            let t = self.value(r);
            if t.shape() != dim.as_slice() {
                return Err(NumericsError::shape(
                    "stack",
                    format!("row {:?} vs {:?}", t.shape(), dim),
                ));
            }
            out.extend_from_slice(t.data());
        }
        self.push("stack", Op::Stack(rows.to_vec()), rows, vec![rows.len(), dim[0]], out)
    }

    /// Row-major flatten of `[a; 1] ⊗ [b; 1]`.
    ///
    /// Index map: output position `i * (d2 + 1) + j` holds `a'[i] * b'[j]`,
    /// where `a' = [a; 1]` and `b' = [b; 1]`. Column `d2` of rows `0..d1`
    /// reproduces `a`, row `d1` reproduces `b`, and the last entry is `1`.
    pub fn outer_aug(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        match (av.shape(), bv.shape()) {
            ([_], [_]) => {}
            (sa, sb) => {
                return Err(NumericsError::shape(
                    "outer_product_augmented",
                    format!("{sa:?} and {sb:?}"),
                ))
            }
        }
        let out = outer_aug_values(av.data(), bv.data());
        let n = out.len();
        self.push("outer_product_augmented", Op::OuterAug(a, b), &[a, b], vec![n], out)
    }

    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 1 || av.shape() != bv.shape() {
            return Err(NumericsError::shape(
                "cosine",
                format!("{:?} and {:?}", av.shape(), bv.shape()),
            ));
        }
        let (na, nb) = (norm(av.data()), norm(bv.data()));
        if na == 0.0 {
            return Err(NumericsError::ZeroNorm {
                op: "cosine",
                which: "left".into(),
            });
        }
        if nb == 0.0 {
            return Err(NumericsError::ZeroNorm {
                op: "cosine",
                which: "right".into(),
            });
        }
        let c = dot(av.data(), bv.data()) / (na * nb);
        self.push("cosine", Op::Cosine(a, b), &[a, b], Vec::new(), vec![c])
    }

    /// Cosine of every row of `m: [rows, d]` against `x: [d]`.
    pub fn cosine_rows(&mut self, m: Var, x: Var) -> Result<Var, NumericsError> {
        let (mv, xv) = (self.value(m), self.value(x));
        let (rows, cols) = match mv.matrix_dims() {
            Some(d) if xv.shape() == [d.1] => d,
            _ => {
                return Err(NumericsError::shape(
                    "cosine_rows",
                    format!("M {:?}, x {:?}", mv.shape(), xv.shape()),
                ))
            }
        };
        let nx = norm(xv.data());
        if nx == 0.0 {
            return Err(NumericsError::ZeroNorm {
                op: "cosine_rows",
                which: "query".into(),
            });
        }
        let md = mv.data();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &md[r * cols..(r + 1) * cols];
            let nr = norm(row);
            if nr == 0.0 {
                return Err(NumericsError::ZeroNorm {
                    op: "cosine_rows",
                    which: format!("row {r}"),
                });
            }
            out.push(dot(row, xv.data()) / (nr * nx));
        }
        self.push("cosine_rows", Op::CosineRows { m, x }, &[m, x], vec![rows], out)
    }

    /// `Σ_r weights[r] · rows[r]` for `weights: [l]`, `rows: [l, d]`.
    pub fn weighted_sum(&mut self, weights: Var, rows: Var) -> Result<Var, NumericsError> {
        let (wv, mv) = (self.value(weights), self.value(rows));
        let (l, d) = match mv.matrix_dims() {
            Some(dims) if wv.shape() == [dims.0] => dims,
            _ => {
                return Err(NumericsError::shape(
                    "weighted_sum",
                    format!("weights {:?}, rows {:?}", wv.shape(), mv.shape()),
                ))
            }
        };
        let mut out = vec![0.0; d];
        for (r, &w) in wv.data().iter().enumerate().take(l) {
            for (o, m) in out.iter_mut().zip(&mv.data()[r * d..(r + 1) * d]) {
                *o += w * m;
            }
        }
        self.push(
            "weighted_sum",
            Op::WeightedSum { weights, rows },
            &[weights, rows],
            vec![d],
            out,
        )
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 1 || av.shape() != bv.shape() {
            return Err(NumericsError::shape(
                "dot",
                format!("{:?} and {:?}", av.shape(), bv.shape()),
            ));
        }
        let v = dot(av.data(), bv.data());
        self.push("dot", Op::Dot(a, b), &[a, b], Vec::new(), vec![v])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let n = vec_len(xv, "softmax")?;
        if n == 0 {
            return Err(NumericsError::Empty { op: "softmax" });
        }
        let shape = xv.shape().to_vec();
        let out = softmax(xv.data());
        self.push("softmax", Op::Softmax(x), &[x], shape, out)
    }

    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        if vec_len(xv, "log_sum_exp")? == 0 {
            return Err(NumericsError::Empty { op: "log_sum_exp" });
        }
        let v = log_sum_exp(xv.data());
        self.push("log_sum_exp", Op::LogSumExp(x), &[x], Vec::new(), vec![v])
    }

    fn elementwise(
        &mut self,
        op: &'static str,
        kind: Op,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NumericsError::shape(
                op,
                format!("{:?} and {:?}", av.shape(), bv.shape()),
            ));
        }
        let shape = av.shape().to_vec();
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        self.push(op, kind, &[a, b], shape, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise("add", Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise("sub", Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise("mul", Op::Mul(a, b), a, b, |x, y| x * y)
    }

    /// Multiplies every element by a fixed scalar.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let out = xv.data().iter().map(|v| v * factor).collect();
        self.push("scale", Op::Scale(x, factor), &[x], shape, out)
    }

    /// Adds a fixed scalar to every element.
    pub fn shift(&mut self, x: Var, offset: f64) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let out = xv.data().iter().map(|v| v + offset).collect();
        self.push("shift", Op::Shift(x), &[x], shape, out)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let v = self.value(x).data().iter().sum();
        self.push("sum", Op::Sum(x), &[x], Vec::new(), vec![v])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(NumericsError::Empty { op: "mean" });
        }
        let v = xv.data().iter().sum::<f64>() / xv.len() as f64;
        self.push("mean", Op::Mean(x), &[x], Vec::new(), vec![v])
    }

    /// Selects vector entries by index (repeats allowed).
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let n = vec_len(xv, "gather")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(NumericsError::IndexOutOfRange {
                op: "gather",
                index: bad,
                len: n,
            });
        }
        let out = indices.iter().map(|&i| xv.data()[i]).collect();
        self.push(
            "gather",
            Op::Gather(x, indices.to_vec()),
            &[x],
            vec![indices.len()],
            out,
        )
    }

    /// Selects a single vector entry as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let n = vec_len(xv, "pick")?;
        if index >= n {
            return Err(NumericsError::IndexOutOfRange {
                op: "pick",
                index,
                len: n,
            });
        }
        let v = xv.data()[index];
        self.push("pick", Op::Pick(x, index), &[x], Vec::new(), vec![v])
    }

    /// Reverse sweep from `output`, seeded with `seed` (same shape as the output).
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients, NumericsError> {
        let out_shape = self.value(output).shape();
        if seed.shape() != out_shape {
            return Err(NumericsError::SeedShape {
                expected: out_shape.to_vec(),
                got: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.to_vec());

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad)
                    .map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Affine { w, x, b } => {
                self.matvec_backward(*w, *x, g, grads);
                if let Some(gb) = self.slot(*b, grads) {
                    add_into(gb, g);
                }
            }
            Op::MatVec { m, x } => self.matvec_backward(*m, *x, g, grads),
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.slot(*x, grads) {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xd) {
                        if xi > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    for ((o, &gi), &y) in gx.iter_mut().zip(g).zip(val) {
                        *o += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Concat(parts) | Op::Stack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.slot(p, grads) {
                        add_into(gp, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::OuterAug(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let (d1, d2) = (ad.len(), bd.len());
                let cols = d2 + 1;
                if let Some(ga) = self.slot(*a, grads) {
                    for (i, o) in ga.iter_mut().enumerate() {
                        let row = &g[i * cols..(i + 1) * cols];
                        *o += dot(&row[..d2], bd) + row[d2];
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for (j, o) in gb.iter_mut().enumerate() {
                        let mut s = g[d1 * cols + j];
                        for (i, &ai) in ad.iter().enumerate() {
                            s += g[i * cols + j] * ai;
                        }
                        *o += s;
                    }
                }
            }
            Op::Cosine(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let (na, nb) = (norm(ad), norm(bd));
                let c = val[0];
                let gs = g[0];
                if let Some(ga) = self.slot(*a, grads) {
                    for ((o, &ai), &bi) in ga.iter_mut().zip(ad).zip(bd) {
                        *o += gs * (bi / (na * nb) - c * ai / (na * na));
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for ((o, &ai), &bi) in gb.iter_mut().zip(ad).zip(bd) {
                        *o += gs * (ai / (na * nb) - c * bi / (nb * nb));
                    }
                }
            }
            Op::CosineRows { m, x } => {
                let (md, xd) = (self.value(*m).data(), self.value(*x).data());
                let d = xd.len();
                let nx = norm(xd);
                let row_norms: Vec<f64> = md.chunks(d).map(norm).collect();
                if let Some(gm) = self.slot(*m, grads) {
                    for (r, (grow, row)) in gm.chunks_mut(d).zip(md.chunks(d)).enumerate() {
                        let (nr, c, gr) = (row_norms[r], val[r], g[r]);
                        if gr == 0.0 {
                            continue;
                        }
                        for ((o, &mi), &xi) in grow.iter_mut().zip(row).zip(xd) {
                            *o += gr * (xi / (nr * nx) - c * mi / (nr * nr));
                        }
                    }
                }
                if let Some(gx) = self.slot(*x, grads) {
                    for (r, row) in md.chunks(d).enumerate() {
                        let (nr, c, gr) = (row_norms[r], val[r], g[r]);
                        if gr == 0.0 {
                            continue;
                        }
                        for ((o, &mi), &xi) in gx.iter_mut().zip(row).zip(xd) {
                            *o += gr * (mi / (nr * nx) - c * xi / (nx * nx));
                        }
                    }
                }
            }
            Op::WeightedSum { weights, rows } => {
                let (wd, md) = (self.value(*weights).data(), self.value(*rows).data());
                let d = g.len();
                if let Some(gw) = self.slot(*weights, grads) {
                    for (o, row) in gw.iter_mut().zip(md.chunks(d)) {
                        *o += dot(row, g);
                    }
                }
                if let Some(gm) = self.slot(*rows, grads) {
                    for (grow, &w) in gm.chunks_mut(d).zip(wd) {
                        for (o, &gi) in grow.iter_mut().zip(g) {
                            *o += w * gi;
                        }
                    }
                }
            }
            Op::Dot(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(*a, grads) {
                    for (o, &bi) in ga.iter_mut().zip(bd) {
                        *o += g[0] * bi;
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for (o, &ai) in gb.iter_mut().zip(ad) {
                        *o += g[0] * ai;
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    let inner = dot(g, val);
                    for ((o, &gi), &y) in gx.iter_mut().zip(g).zip(val) {
                        *o += y * (gi - inner);
                    }
                }
            }
            Op::LogSumExp(x) => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.slot(*x, grads) {
                    for (o, p) in gx.iter_mut().zip(softmax(xd)) {
                        *o += g[0] * p;
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(*a, grads) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(*a, grads) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for (o, &gi) in gb.iter_mut().zip(g) {
                        *o -= gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(*a, grads) {
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(x, factor) => {
                if let Some(gx) = self.slot(*x, grads) {
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o += gi * factor;
                    }
                }
            }
            Op::Shift(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    add_into(gx, g);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    let n = gx.len() as f64;
                    gx.iter_mut().for_each(|o| *o += g[0] / n);
                }
            }
            Op::Gather(x, indices) => {
                if let Some(gx) = self.slot(*x, grads) {
                    for (&i, &gi) in indices.iter().zip(g) {
                        gx[i] += gi;
                    }
                }
            }
            Op::Pick(x, index) => {
                if let Some(gx) = self.slot(*x, grads) {
                    gx[*index] += g[0];
                }
            }
        }
    }

    fn matvec_backward(&self, m: Var, x: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (md, xd) = (self.value(m).data(), self.value(x).data());
        let cols = xd.len();
        if let Some(gm) = self.slot(m, grads) {
            for (row, &gi) in gm.chunks_mut(cols).zip(g) {
                if gi == 0.0 {
                    continue;
                }
                for (o, &xj) in row.iter_mut().zip(xd) {
                    *o += gi * xj;
                }
            }
        }
        if let Some(gx) = self.slot(x, grads) {
            for (row, &gi) in md.chunks(cols).zip(g) {
                if gi == 0.0 {
                    continue;
                }
                for (o, &mij) in gx.iter_mut().zip(row) {
                    *o += gi * mij;
                }
            }
        }
    }

    /// Gradient accumulator for `v`, allocated on first use; `None` for detached nodes.
    fn slot<'a>(&self, v: Var, grads: &'a mut [Option<Vec<f64>>]) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn stable_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn outer_aug_values(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity((a.len() + 1) * (b.len() + 1));
    for &ai in a.iter().chain(std::iter::once(&1.0)) {
        out.extend(b.iter().map(|&bj| ai * bj));
        out.push(ai);
    }
    out
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if no gradient reached it (or it is detached).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled (with the node's shape) when absent.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Tensor {
        Tensor::vector(xs.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(v(&[-1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
        let g = tape.backward(y, &v(&[1.0, 1.0])).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(v(&[0.0]));
        let y = tape.relu(x).unwrap();
        let g = tape.backward(y, &v(&[1.0])).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn cosine_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(v(&[1.0, 0.0]));
        let b = tape.leaf(v(&[1.0, 0.0]));
        let c = tape.leaf(v(&[1.0, 1.0]));
        let ab = tape.cosine(a, b).unwrap();
        let ca = tape.cosine(c, a).unwrap();
        assert_eq!(tape.value(ab).item(), 1.0);
        assert!((tape.value(ca).item() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn cosine_gradient_vanishes_at_identical_inputs() {
        let mut tape = Tape::new();
        let a = tape.leaf(v(&[0.3, -1.2, 2.0]));
        let b = tape.leaf(v(&[0.3, -1.2, 2.0]));
        let c = tape.cosine(a, b).unwrap();
        let g = tape.backward(c, &Tensor::scalar(1.0).unwrap()).unwrap();
        for x in g.get(a).unwrap().data().iter().chain(g.get(b).unwrap().data()) {
            assert!(x.abs() < 1e-15, "{x}");
        }
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        let mut tape = Tape::new();
        let a = tape.leaf(v(&[0.0, 0.0]));
        let b = tape.leaf(v(&[1.0, 0.0]));
        let err = tape.cosine(a, b).unwrap_err();
        assert!(matches!(err, NumericsError::ZeroNorm { ref which, .. } if which == "left"));
    }

    #[test]
    fn affine_shape_error_names_primitive() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(vec![2, 3]));
        let x = tape.leaf(Tensor::zeros(vec![2]));
        let b = tape.leaf(Tensor::zeros(vec![2]));
        let err = tape.affine(w, x, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("affine"), "{msg}");
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn seed_shape_is_checked() {
        let mut tape = Tape::new();
        let x = tape.leaf(v(&[1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert!(matches!(
            tape.backward(y, &v(&[1.0])),
            Err(NumericsError::SeedShape { .. })
        ));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(v(&[1.0, 2.0]));
        let c = tape.constant(v(&[3.0, 4.0]));
        let d = tape.dot(a, c).unwrap();
        let g = tape.backward(d, &Tensor::scalar(1.0).unwrap()).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(&tape, c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn outer_aug_small_case() {
        let mut tape = Tape::new();
        let a = tape.leaf(v(&[2.0]));
        let b = tape.leaf(v(&[3.0]));
        let o = tape.outer_aug(a, b).unwrap();
        assert_eq!(tape.value(o).data(), &[6.0, 2.0, 3.0, 1.0]);
    }

    #[test]
    fn non_finite_intermediate_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(v(&[1e308]));
        let err = tape.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { op: "scale", .. }));
        let mut loose = Tape::unchecked();
        let x = loose.leaf(v(&[1e308]));
        assert!(loose.scale(x, 10.0).is_ok());
    }
}
