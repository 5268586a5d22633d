use super::{AutodiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, start: usize, len: usize },
    Sum(Var),
    BlockMatVec {
        weight: Var,
        block: usize,
        terms: Vec<(usize, Var)>,
    },
    BivariateNll { params: Var, target: [f64; 2] },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of operations for reverse-mode differentiation.
///
/// Nodes are pushed in evaluation order, so the node list is already a
/// topological order and the backward pass is a single reverse sweep.
/// A tape created with [`Tape::inference`] computes the same values but keeps
/// no backward rules.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every leaf that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: &Tensor) -> Var {
        let rec = self.recording;
        self.push_leaf(value.detached(), rec)
    }

    fn push_leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        if value.grad().is_some() {
            value = value.detached();
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, AutodiffError> {
        if let Some(index) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: op_name, index });
        }
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_forward(self.data(a), self.data(b), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let name = match op {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::Shape {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let f: fn(f64, f64) -> f64 = match op {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
        };
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(name, t, Op::Binary(op, a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, op: Unary, x: Var) -> Result<Var, AutodiffError> {
        let name = match op {
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Relu => "relu",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Softplus => "softplus",
        };
        let input = self.data(x);
        if op == Unary::Log {
            if let Some((index, &value)) = input.iter().enumerate().find(|(_, v)| **v <= 0.0) {
                return Err(AutodiffError::Domain {
                    op: name,
                    index,
                    value,
                });
            }
        }
        let out = input.iter().map(|&v| unary_forward(op, v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(name, t, Op::Unary(op, x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Log, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Softplus, x)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, AutodiffError> {
        let out = self.data(x).iter().map(|v| v * factor).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("scale", t, Op::Scale(x, factor), &[x])
    }

    /// Joins tensors whose shapes agree everywhere except on `axis`.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = inputs.first().ok_or(AutodiffError::EmptyConcat)?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::Axis {
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(AutodiffError::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let chunk = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.data(*v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        self.push(
            "concat",
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(AutodiffError::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![start, len],
            });
        }
        let row: usize = shape[1..].iter().product();
        let out = self.data(x)[start * row..(start + len) * row].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let t = Tensor::new(out_shape, out)?;
        self.push("slice", t, Op::Slice { input: x, start, len }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.data(x).iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// `Σ weight[:, b·block .. (b+1)·block] · h` over the `(b, h)` terms.
    ///
    /// Equivalent to multiplying `weight` by a mostly-zero input made of
    /// stacked blocks, without materializing that input. Each `h` must be a
    /// `[block, 1]` column; the result is `[rows, 1]`.
    pub fn block_matvec(&mut self, weight: Var, block: usize, terms: &[(usize, Var)]) -> Result<Var, AutodiffError> {
        let ws = self.shape(weight).to_vec();
        if ws.len() != 2 || block == 0 || ws[1] % block != 0 {
            return Err(AutodiffError::Shape {
                op: "block_matvec",
                lhs: ws,
                rhs: vec![block],
            });
        }
        let (rows, cols) = (ws[0], ws[1]);
        let n_blocks = cols / block;
        let mut out = vec![0.0; rows];
        for &(b, h) in terms {
            let hs = self.shape(h);
            if b >= n_blocks || hs != [block, 1] {
                return Err(AutodiffError::Shape {
                    op: "block_matvec",
                    lhs: ws,
                    rhs: hs.to_vec(),
                });
            }
            let w = self.data(weight);
            let hv = self.data(h);
            for (r, o) in out.iter_mut().enumerate() {
                let row = &w[r * cols + b * block..r * cols + (b + 1) * block];
                *o += dot(row, hv);
            }
        }
        let t = Tensor::new(vec![rows, 1], out)?;
        let mut inputs = vec![weight];
        inputs.extend(terms.iter().map(|t| t.1));
        self.push(
            "block_matvec",
            t,
            Op::BlockMatVec {
                weight,
                block,
                terms: terms.to_vec(),
            },
            &inputs,
        )
    }

    /// Negative log-density of `target` under a bivariate normal.
    ///
    /// `params` holds `[μx, μy, σx, σy, ρ]` and must satisfy `σ > 0`,
    /// `|ρ| < 1`. The log is assembled from `ln σ` and the quadratic form,
    /// never from an exponentiated density.
    pub fn bivariate_nll(&mut self, params: Var, target: [f64; 2]) -> Result<Var, AutodiffError> {
        let p = self.data(params);
        if p.len() != 5 {
            return Err(AutodiffError::Shape {
                op: "bivariate_nll",
                lhs: self.shape(params).to_vec(),
                rhs: vec![5],
            });
        }
        for (index, &value) in p.iter().enumerate().skip(2) {
            let bad = if index == 4 { !(value.abs() < 1.0) } else { !(value > 0.0) };
            if bad {
                return Err(AutodiffError::Domain {
                    op: "bivariate_nll",
                    index,
                    value,
                });
            }
        }
        let v = bivariate_nll_value(p, target);
        self.push(
            "bivariate_nll",
            Tensor::scalar(v),
            Op::BivariateNll { params, target },
            &[params],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(AutodiffError::NonScalar(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(AutodiffError::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    let ga = slot(grads, *a, m * k);
                    if n == 1 {
                        for (p, &x) in bv.iter().enumerate() {
                            if x == 0.0 {
                                continue;
                            }
                            for r in 0..m {
                                ga[r * k + p] += g[r] * x;
                            }
                        }
                    } else {
                        for r in 0..m {
                            for p in 0..k {
                                ga[r * k + p] += dot(&g[r * n..(r + 1) * n], &bv[p * n..(p + 1) * n]);
                            }
                        }
                    }
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, k * n);
                    for r in 0..m {
                        let arow = &av[r * k..(r + 1) * k];
                        for j in 0..n {
                            let gr = g[r * n + j];
                            if gr == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                gb[p * n + j] += arow[p] * gr;
                            }
                        }
                    }
                }
            }
            Op::Binary(op, a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                let len = g.len();
                if self.wants(*a) {
                    let ga = slot(grads, *a, len);
                    match op {
                        Binary::Add | Binary::Sub => add_into(ga, g),
                        Binary::Mul => {
                            for j in 0..len {
                                ga[j] += g[j] * bv[j];
                            }
                        }
                    }
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, len);
                    match op {
                        Binary::Add => add_into(gb, g),
                        Binary::Sub => {
                            for j in 0..len {
                                gb[j] -= g[j];
                            }
                        }
                        Binary::Mul => {
                            for j in 0..len {
                                gb[j] += g[j] * av[j];
                            }
                        }
                    }
                }
            }
            Op::Unary(op, x) => {
                let xv = self.data(*x);
                let gx = slot(grads, *x, g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * unary_derivative(*op, xv[j], out[j]);
                }
            }
            Op::Scale(x, factor) => {
                let gx = slot(grads, *x, g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * factor;
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.shape(*v)[*axis] * inner;
                    if self.wants(*v) {
                        let gv = slot(grads, *v, outer * chunk);
                        for o in 0..outer {
                            add_into(
                                &mut gv[o * chunk..(o + 1) * chunk],
                                &g[o * row + offset..o * row + offset + chunk],
                            );
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { input, start, len } => {
                let shape = self.shape(*input);
                let row: usize = shape[1..].iter().product();
                let total = shape[0] * row;
                let gx = slot(grads, *input, total);
                add_into(&mut gx[start * row..(start + len) * row], g);
            }
            Op::Sum(x) => {
                let n = self.data(*x).len();
                let gx = slot(grads, *x, n);
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::BlockMatVec { weight, block, terms } => {
                let cols = self.shape(*weight)[1];
                let rows = g.len();
                let w = self.data(*weight);
                let want_w = self.wants(*weight);
                for &(b, h) in terms {
                    let hv = self.data(h);
                    if want_w {
                        let gw = slot(grads, *weight, rows * cols);
                        for r in 0..rows {
                            if g[r] == 0.0 {
                                continue;
                            }
                            let dst = &mut gw[r * cols + b * block..r * cols + (b + 1) * block];
                            for (d, x) in dst.iter_mut().zip(hv) {
                                *d += g[r] * x;
                            }
                        }
                    }
                    if self.wants(h) {
                        let gh = slot(grads, h, *block);
                        for r in 0..rows {
                            if g[r] == 0.0 {
                                continue;
                            }
                            let src = &w[r * cols + b * block..r * cols + (b + 1) * block];
                            for (d, x) in gh.iter_mut().zip(src) {
                                *d += g[r] * x;
                            }
                        }
                    }
                }
            }
            Op::BivariateNll { params, target } => {
                let d = bivariate_nll_grad(self.data(*params), *target);
                let gp = slot(grads, *params, 5);
                for j in 0..5 {
                    gp[j] += g[0] * d[j];
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_forward(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    if n == 1 {
        let nz: Vec<usize> = (0..k).filter(|&p| b[p] != 0.0).collect();
        if nz.len() == k {
            return (0..m).map(|r| dot(&a[r * k..(r + 1) * k], b)).collect();
        }
        return (0..m)
            .map(|r| {
                let row = &a[r * k..(r + 1) * k];
                nz.iter().map(|&p| row[p] * b[p]).sum()
            })
            .collect();
    }
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for p in 0..k {
            let x = a[r * k + p];
            if x == 0.0 {
                continue;
            }
            let dst = &mut out[r * n..(r + 1) * n];
            for (d, y) in dst.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *d += x * y;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_forward(op: Unary, x: f64) -> f64 {
    match op {
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Relu => x.max(0.0),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Softplus => {
            if x > 0.0 {
                x + (-x).exp().ln_1p()
            } else {
                x.exp().ln_1p()
            }
        }
    }
}

fn unary_derivative(op: Unary, x: f64, y: f64) -> f64 {
    match op {
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Tanh => 1.0 - y * y,
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Softplus => sigmoid(x),
    }
}

/// `ln 2π`, the loss of one perfectly centred unit Gaussian term.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub(crate) fn bivariate_nll_value(p: &[f64], target: [f64; 2]) -> f64 {
    let (mx, my, sx, sy, rho) = (p[0], p[1], p[2], p[3], p[4]);
    let zx = (target[0] - mx) / sx;
    let zy = (target[1] - my) / sy;
    let one_m = 1.0 - rho * rho;
    let q = zx * zx + zy * zy - 2.0 * rho * zx * zy;
    LN_2PI + sx.ln() + sy.ln() + 0.5 * one_m.ln() + q / (2.0 * one_m)
}

fn bivariate_nll_grad(p: &[f64], target: [f64; 2]) -> [f64; 5] {
    let (mx, my, sx, sy, rho) = (p[0], p[1], p[2], p[3], p[4]);
    let zx = (target[0] - mx) / sx;
    let zy = (target[1] - my) / sy;
    let one_m = 1.0 - rho * rho;
    let q = zx * zx + zy * zy - 2.0 * rho * zx * zy;
    let ax = zx - rho * zy;
    let ay = zy - rho * zx;
    [
        -ax / (sx * one_m),
        -ay / (sy * one_m),
        1.0 / sx - zx * ax / (sx * one_m),
        1.0 / sy - zy * ay / (sy * one_m),
        -rho / one_m - zx * zy / one_m + rho * q / (one_m * one_m),
    ]
}
