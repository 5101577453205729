//! Reverse-mode automatic differentiation over tensors.
//!
//! Coordinate derivatives are carried forward as jet channels (see
//! [`JetLayout`]); every jet operation has an exact adjoint, so losses built
//! from second spatial derivatives differentiate with respect to parameters
//! and design inputs like any other expression.

use std::rc::Rc;

use super::kernels::{dense_forward, gemm, tanh_jet_forward, JetLayout, Tensor};
use super::mlp::{Activation, Mlp};
use crate::error::{Error, Result};
use crate::material::{cure_rate_partials_unchecked, cure_rate_unchecked, KineticsConstants};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Dense {
        x: Var,
        w: Var,
        b: Var,
        bias_rows: usize,
    },
    TanhJet {
        x: Var,
        layout: JetLayout,
    },
    /// `y[c·n + p, :] = table[index[p], :] ⊙ x[c·n + p, :]`.
    GatherMul {
        table: Var,
        x: Var,
        index: Rc<[usize]>,
    },
    Rows {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MulConst(Var, Rc<[f64]>),
    AddConst(Var),
    Square(Var),
    Abs(Var),
    Relu(Var),
    CureRate {
        alpha: Var,
        temp: Var,
        d_alpha: Vec<f64>,
        d_temp: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    /// Max or min reduction; gradient goes to the first extreme element.
    Pick(Var, usize),
    /// Value supplied by the caller with its Jacobian (`len × u.len()`)
    /// with respect to `u`.
    Linearized {
        u: Var,
        jac: Rc<[f64]>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v`, zeros if the root does not depend on it.
    pub fn of(&self, tape: &Tape, v: Var) -> Vec<f64> {
        self.get(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
    }
}

/// An MLP whose parameters are leaves of a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    pub activations: Vec<Activation>,
}

impl BoundMlp {
    /// Parameter gradients in [`Mlp::params`] order.
    pub fn grads(&self, tape: &Tape, g: &Gradients) -> Vec<Vec<f64>> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(&w, &b)| [g.of(tape, w), g.of(tape, b)])
            .collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Dense { x, w, b, .. } => vec![*x, *w, *b],
            Op::GatherMul { table, x, .. } => vec![*table, *x],
            Op::CureRate { alpha, temp, .. } => vec![*alpha, *temp],
            Op::Concat(parts) => parts.clone(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::TanhJet { x, .. } | Op::Rows { x, .. } => vec![*x],
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::MulConst(a, _)
            | Op::AddConst(a)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Pick(a, _) => vec![*a],
            Op::Linearized { u, .. } => vec![*u],
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Independent input whose gradient is wanted (parameter or design vector).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input treated as a constant; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn bind(&mut self, mlp: &Mlp) -> BoundMlp {
        self.bind_with(mlp, true)
    }

    /// Binds a network whose parameters are held fixed.
    pub fn bind_frozen(&mut self, mlp: &Mlp) -> BoundMlp {
        self.bind_with(mlp, false)
    }

    fn bind_with(&mut self, mlp: &Mlp, trainable: bool) -> BoundMlp {
        let mut weights = Vec::with_capacity(mlp.layers.len());
        let mut biases = Vec::with_capacity(mlp.layers.len());
        for l in &mlp.layers {
            let w = l.weight.clone();
            let b = Tensor::new(1, l.bias.len(), l.bias.clone());
            if trainable {
                weights.push(self.leaf(w));
                biases.push(self.leaf(b));
            } else {
                weights.push(self.constant(w));
                biases.push(self.constant(b));
            }
        }
        BoundMlp {
            weights,
            biases,
            activations: mlp.activations.clone(),
        }
    }

    /// Evaluates a bound network on a stacked jet.
    pub fn mlp(&mut self, net: &BoundMlp, x: Var, layout: &JetLayout) -> Var {
        let mut h = self.dense(x, net.weights[0], net.biases[0], layout.points);
        for i in 1..net.weights.len() {
            if net.activations[i - 1] == Activation::Tanh {
                h = self.tanh_jet(h, *layout);
            }
            h = self.dense(h, net.weights[i], net.biases[i], layout.points);
        }
        h
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var, bias_rows: usize) -> Var {
        let value = dense_forward(self.value(x), self.value(w), &self.value(b).data, bias_rows);
        self.push(value, Op::Dense { x, w, b, bias_rows })
    }

    pub fn tanh_jet(&mut self, x: Var, layout: JetLayout) -> Var {
        let value = tanh_jet_forward(self.value(x), &layout);
        self.push(value, Op::TanhJet { x, layout })
    }

    pub fn gather_mul(&mut self, table: Var, x: Var, index: Rc<[usize]>) -> Var {
        let (t, xv) = (self.value(table), self.value(x));
        assert_eq!(t.cols, xv.cols, "gather_mul width mismatch");
        let n = index.len();
        assert!(n > 0 && xv.rows % n == 0, "gather_mul rows not a multiple of the index length");
        let mut out = xv.clone();
        for r in 0..xv.rows {
            let tr = t.row(index[r % n]);
            for (o, tv) in out.data[r * xv.cols..(r + 1) * xv.cols].iter_mut().zip(tr) {
                *o *= tv;
            }
        }
        self.push(out, Op::GatherMul { table, x, index })
    }

    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let data = xv.data[start * xv.cols..(start + len) * xv.cols].to_vec();
        let value = Tensor::new(len, xv.cols, data);
        self.push(value, Op::Rows { x, start })
    }

    /// Channel `c` of a jet with `points` rows per channel.
    pub fn channel(&mut self, x: Var, c: usize, points: usize) -> Var {
        self.rows(x, c * points, points)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat width mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        self.push(Tensor::new(rows, cols, data), Op::Concat(parts.to_vec()))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.data.len(), bv.data.len(), "elementwise shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.rows, av.cols, data);
        self.push(value, op)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let value = Tensor::new(av.rows, av.cols, av.data.iter().map(|&x| f(x)).collect());
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| s * x, Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::Offset(a))
    }

    pub fn mul_const(&mut self, a: Var, c: Rc<[f64]>) -> Var {
        let av = self.value(a);
        assert_eq!(av.data.len(), c.len(), "mul_const shape mismatch");
        let data = av.data.iter().zip(c.iter()).map(|(&x, &k)| x * k).collect();
        let value = Tensor::new(av.rows, av.cols, data);
        self.push(value, Op::MulConst(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Var {
        let av = self.value(a);
        assert_eq!(av.data.len(), c.len(), "add_const shape mismatch");
        let data = av.data.iter().zip(c).map(|(&x, &k)| x + k).collect();
        let value = Tensor::new(av.rows, av.cols, data);
        self.push(value, Op::AddConst(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Cure rate at degree of cure `alpha` and absolute temperature `temp`
    /// (elementwise). Outside `(0, 1)` the rate is identically zero.
    pub fn cure_rate(&mut self, alpha: Var, temp: Var, k: &KineticsConstants) -> Var {
        let (av, tv) = (self.value(alpha), self.value(temp));
        assert_eq!(av.data.len(), tv.data.len(), "cure_rate shape mismatch");
        let n = av.data.len();
        let mut rate = Vec::with_capacity(n);
        let mut d_alpha = Vec::with_capacity(n);
        let mut d_temp = Vec::with_capacity(n);
        for (&a, &t) in av.data.iter().zip(&tv.data) {
            rate.push(cure_rate_unchecked(a, t, k));
            if a > 0.0 && a < 1.0 {
                let (da, dt) = cure_rate_partials_unchecked(a, t, k);
                d_alpha.push(da);
                d_temp.push(dt);
            } else {
                d_alpha.push(0.0);
                d_temp.push(0.0);
            }
        }
        let value = Tensor::new(av.rows, av.cols, rate);
        self.push(
            value,
            Op::CureRate {
                alpha,
                temp,
                d_alpha,
                d_temp,
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data.iter().sum::<f64>() / v.data.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    pub fn mean_square(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        self.mean(sq)
    }

    fn pick(&mut self, a: Var, better: impl Fn(f64, f64) -> bool) -> Var {
        let v = self.value(a);
        let mut best = 0;
        for (i, &x) in v.data.iter().enumerate() {
            if better(x, v.data[best]) {
                best = i;
            }
        }
        let value = Tensor::scalar(v.data[best]);
        self.push(value, Op::Pick(a, best))
    }

    pub fn max(&mut self, a: Var) -> Var {
        self.pick(a, |x, b| x > b)
    }

    pub fn min(&mut self, a: Var) -> Var {
        self.pick(a, |x, b| x < b)
    }

    /// Records externally computed values `value` whose Jacobian with respect
    /// to `u` is `jac` (row-major, one row per value).
    pub fn linearized(&mut self, u: Var, value: Tensor, jac: Rc<[f64]>) -> Var {
        assert_eq!(jac.len(), value.len() * self.value(u).len(), "jacobian shape mismatch");
        self.push(value, Op::Linearized { u, jac })
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {} elements",
                self.value(root).len()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Dense { x, w, b, bias_rows } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (m, k, n) = (xv.rows, xv.cols, wv.cols);
                    if self.requires_grad(*x) {
                        let gx = acc(&mut grads, *x, m * k);
                        gemm(m, n, k, &gy, false, &wv.data, true, gx, true);
                    }
                    if self.requires_grad(*w) {
                        let gw = acc(&mut grads, *w, k * n);
                        gemm(k, m, n, &xv.data, true, &gy, false, gw, true);
                    }
                    let gb = acc(&mut grads, *b, n);
                    for r in 0..(*bias_rows).min(m) {
                        for (g, &v) in gb.iter_mut().zip(&gy[r * n..(r + 1) * n]) {
                            *g += v;
                        }
                    }
                }
                Op::TanhJet { x, layout } => {
                    let xv = self.value(*x);
                    let y = &node.value.data;
                    let block = layout.points * xv.cols;
                    let gx = acc(&mut grads, *x, xv.len());
                    let mut g0 = vec![0.0; block];
                    for i in 0..block {
                        let y0 = y[i];
                        let s = 1.0 - y0 * y0;
                        g0[i] = s * gy[i];
                    }
                    for c in 1..=layout.firsts {
                        let off = c * block;
                        for i in 0..block {
                            let y0 = y[i];
                            let s = 1.0 - y0 * y0;
                            gx[off + i] += s * gy[off + i];
                            // ds/dx0 = -2 y0 s
                            g0[i] += -2.0 * y0 * s * xv.data[off + i] * gy[off + i];
                        }
                    }
                    if let (Some(j), Some(sc)) = (layout.second_of, layout.second_channel()) {
                        let (oz, ozz) = (j * block, sc * block);
                        for i in 0..block {
                            let y0 = y[i];
                            let s = 1.0 - y0 * y0;
                            let g = gy[ozz + i];
                            let xz = xv.data[oz + i];
                            let xzz = xv.data[ozz + i];
                            gx[ozz + i] += s * g;
                            gx[oz + i] += -4.0 * y0 * s * xz * g;
                            // d/dx0 of s·xzz − 2 y0 s xz²
                            g0[i] += (-2.0 * y0 * s * xzz - 2.0 * s * (s - 2.0 * y0 * y0) * xz * xz) * g;
                        }
                    }
                    for i in 0..block {
                        gx[i] += g0[i];
                    }
                }
                Op::GatherMul { table, x, index } => {
                    let (tv, xv) = (self.value(*table), self.value(*x));
                    let cols = xv.cols;
                    let n = index.len();
                    {
                        let gx = acc(&mut grads, *x, xv.len());
                        for r in 0..xv.rows {
                            let tr = tv.row(index[r % n]);
                            for c in 0..cols {
                                gx[r * cols + c] += tr[c] * gy[r * cols + c];
                            }
                        }
                    }
                    let gt = acc(&mut grads, *table, tv.len());
                    for r in 0..xv.rows {
                        let base = index[r % n] * cols;
                        for c in 0..cols {
                            gt[base + c] += xv.data[r * cols + c] * gy[r * cols + c];
                        }
                    }
                }
                Op::Rows { x, start } => {
                    let xv = self.value(*x);
                    let gx = acc(&mut grads, *x, xv.len());
                    let off = start * xv.cols;
                    for (g, &v) in gx[off..off + gy.len()].iter_mut().zip(&gy) {
                        *g += v;
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        let gp = acc(&mut grads, p, len);
                        for (g, &v) in gp.iter_mut().zip(&gy[off..off + len]) {
                            *g += v;
                        }
                        off += len;
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, gy.len()), &gy, 1.0);
                    add_into(acc(&mut grads, *b, gy.len()), &gy, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads, *a, gy.len()), &gy, 1.0);
                    add_into(acc(&mut grads, *b, gy.len()), &gy, -1.0);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                    let ga = acc(&mut grads, *a, gy.len());
                    for i in 0..gy.len() {
                        ga[i] += bv[i] * gy[i];
                    }
                    let gb = acc(&mut grads, *b, gy.len());
                    for i in 0..gy.len() {
                        gb[i] += av[i] * gy[i];
                    }
                }
                Op::Scale(a, s) => add_into(acc(&mut grads, *a, gy.len()), &gy, *s),
                Op::Offset(a) | Op::AddConst(a) => add_into(acc(&mut grads, *a, gy.len()), &gy, 1.0),
                Op::MulConst(a, c) => {
                    let ga = acc(&mut grads, *a, gy.len());
                    for i in 0..gy.len() {
                        ga[i] += c[i] * gy[i];
                    }
                }
                Op::Square(a) => {
                    let av = &self.value(*a).data;
                    let ga = acc(&mut grads, *a, gy.len());
                    for i in 0..gy.len() {
                        ga[i] += 2.0 * av[i] * gy[i];
                    }
                }
                Op::Abs(a) => {
                    let av = &self.value(*a).data;
                    let ga = acc(&mut grads, *a, gy.len());
                    for i in 0..gy.len() {
                        let s = if av[i] > 0.0 {
                            1.0
                        } else if av[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        ga[i] += s * gy[i];
                    }
                }
                Op::Relu(a) => {
                    let av = &self.value(*a).data;
                    let ga = acc(&mut grads, *a, gy.len());
                    for i in 0..gy.len() {
                        if av[i] > 0.0 {
                            ga[i] += gy[i];
                        }
                    }
                }
                Op::CureRate {
                    alpha,
                    temp,
                    d_alpha,
                    d_temp,
                } => {
                    let ga = acc(&mut grads, *alpha, gy.len());
                    for i in 0..gy.len() {
                        ga[i] += d_alpha[i] * gy[i];
                    }
                    let gt = acc(&mut grads, *temp, gy.len());
                    for i in 0..gy.len() {
                        gt[i] += d_temp[i] * gy[i];
                    }
                }
                Op::Sum(a) => {
                    let len = self.value(*a).len();
                    acc(&mut grads, *a, len).iter_mut().for_each(|g| *g += gy[0]);
                }
                Op::Mean(a) => {
                    let len = self.value(*a).len();
                    let s = gy[0] / len as f64;
                    acc(&mut grads, *a, len).iter_mut().for_each(|g| *g += s);
                }
                Op::Pick(a, idx) => {
                    let len = self.value(*a).len();
                    acc(&mut grads, *a, len)[*idx] += gy[0];
                }
                Op::Linearized { u, jac } => {
                    let ul = self.value(*u).len();
                    let gu = acc(&mut grads, *u, ul);
                    for (r, &g) in gy.iter().enumerate() {
                        for c in 0..ul {
                            gu[c] += jac[r * ul + c] * g;
                        }
                    }
                }
            }
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }
}

fn add_into(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_norm_gradient_is_identity() {
        let theta = vec![0.5, -1.25, 3.0];
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::column(theta.clone()));
        let sq = tape.square(p);
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.of(&tape, p), theta);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::column(vec![1.0, 2.0]));
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn reductions_route_gradients() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::column(vec![1.0, 5.0, 5.0, -2.0]));
        let mx = tape.max(p);
        let mn = tape.min(p);
        let both = tape.add(mx, mn);
        let g = tape.backward(both).unwrap();
        assert_eq!(tape.value(mx).item(), 5.0);
        assert_eq!(g.of(&tape, p), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn linearized_applies_transpose_jacobian() {
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::new(1, 2, vec![0.0, 0.0]));
        let jac: Rc<[f64]> = vec![1.0, 2.0, 3.0, 4.0].into();
        let v = tape.linearized(u, Tensor::column(vec![7.0, 8.0]), jac);
        let s = tape.sum(v);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.of(&tape, u), vec![4.0, 6.0]);
    }
}
