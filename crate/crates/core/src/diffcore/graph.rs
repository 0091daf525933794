//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node holding its forward value. [`Graph::backward`]
//! walks the tape once in reverse and accumulates parameter gradients into a
//! [`Grads`] buffer. All reductions use a fixed order that depends only on the
//! shape of the operands, so a row of a batched computation carries the same
//! bits as the same row computed alone.

use super::matrix::{axpy_slice, dot};
use super::{Grads, Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScaled(Var, Var, f64),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    HConcat(Vec<Var>),
    SliceCols { a: Var, start: usize },
    SelectRows { a: Var, rows: Vec<usize> },
    PickRows(Vec<(Var, usize)>),
    SegmentMean { a: Var, segments: Vec<Vec<usize>> },
    Sum(Var),
    Rk4Combine { l: Var, k: [Var; 4], dt: f64 },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// A single-use computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// `l + dt/6 (k1 + 2 k2 + 2 k3 + k4)` for one scalar component.
#[inline]
pub fn rk4_combine_scalar(l: f64, k1: f64, k2: f64, k3: f64, k4: f64, dt: f64) -> f64 {
    l + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on a non-scalar node");
        m.data()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Binds a parameter tensor; gradients flow back to `id`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    /// `x Wᵀ + b` with `x: n × in`, `W: out × in`, `b: 1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xm, wm, bm) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xm.cols(), wm.cols(), "linear: input width mismatch");
        assert_eq!(bm.shape(), (1, wm.rows()), "linear: bias shape mismatch");
        let (n, out) = (xm.rows(), wm.rows());
        let mut y = Matrix::zeros(n, out);
        for i in 0..n {
            let xr = xm.row(i);
            let yr = y.row_mut(i);
            for (o, yo) in yr.iter_mut().enumerate() {
                *yo = bm.data()[o] + dot(xr, wm.row(o));
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(y, Op::Linear { x, w, b }, ng)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.shape(), bm.shape(), "{name}: shape mismatch");
        am.zip_map(bm, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.binary(a, b, "add", |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.binary(a, b, "sub", |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.binary(a, b, "mul", |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let y = self.binary(a, b, "div", |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::Div(a, b), ng)
    }

    /// `a + c·b`.
    pub fn add_scaled(&mut self, a: Var, b: Var, c: f64) -> Var {
        let y = self.binary(a, b, "add_scaled", |x, y| x + c * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::AddScaled(a, b, c), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a).map(|x| c * x);
        let ng = self.ng(a);
        self.push(y, Op::Scale(a, c), ng)
    }

    /// `a + c` elementwise.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(y, Op::Offset(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.ng(a);
        self.push(y, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(y, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(y, Op::Sigmoid(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(y, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let y = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(y, Op::Log(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(y, Op::Square(a), ng)
    }

    /// Column-wise concatenation of equally tall nodes.
    pub fn hconcat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "hconcat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut y = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "hconcat: row count mismatch");
            let c = m.cols();
            for i in 0..rows {
                y.row_mut(i)[offset..offset + c].copy_from_slice(m.row(i));
            }
            offset += c;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(y, Op::HConcat(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols(), "slice_cols out of range");
        let mut y = Matrix::zeros(m.rows(), len);
        for i in 0..m.rows() {
            y.row_mut(i).copy_from_slice(&m.row(i)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(y, Op::SliceCols { a, start }, ng)
    }

    /// Gathers rows of `a` (repeats allowed).
    pub fn select_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let m = self.value(a);
        let mut y = Matrix::zeros(rows.len(), m.cols());
        for (i, &r) in rows.iter().enumerate() {
            y.row_mut(i).copy_from_slice(m.row(r));
        }
        let ng = self.ng(a);
        self.push(y, Op::SelectRows { a, rows }, ng)
    }

    /// Stacks row `r` of node `v` for each `(v, r)` in order.
    pub fn pick_rows(&mut self, picks: Vec<(Var, usize)>) -> Var {
        assert!(!picks.is_empty(), "pick_rows of nothing");
        let cols = self.value(picks[0].0).cols();
        let mut y = Matrix::zeros(picks.len(), cols);
        for (i, &(v, r)) in picks.iter().enumerate() {
            let m = self.value(v);
            assert_eq!(m.cols(), cols, "pick_rows: width mismatch");
            y.row_mut(i).copy_from_slice(m.row(r));
        }
        let ng = picks.iter().any(|&(v, _)| self.ng(v));
        self.push(y, Op::PickRows(picks), ng)
    }

    /// Row means over index segments. Each column is summed in ascending
    /// value order, so the result is independent of the order of rows
    /// within a segment, bit for bit.
    pub fn segment_mean(&mut self, a: Var, segments: Vec<Vec<usize>>) -> Var {
        let m = self.value(a);
        let cols = m.cols();
        let mut y = Matrix::zeros(segments.len(), cols);
        let mut buf = Vec::new();
        for (s, seg) in segments.iter().enumerate() {
            assert!(!seg.is_empty(), "segment_mean: empty segment");
            for j in 0..cols {
                buf.clear();
                buf.extend(seg.iter().map(|&r| m.get(r, j)));
                buf.sort_by(f64::total_cmp);
                let total: f64 = buf.iter().sum();
                y.set(s, j, total / seg.len() as f64);
            }
        }
        let ng = self.ng(a);
        self.push(y, Op::SegmentMean { a, segments }, ng)
    }

    /// Sum of all entries, as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Matrix::filled(1, 1, total), Op::Sum(a), ng)
    }

    /// Final classic Runge-Kutta update `l + dt/6 (k1 + 2k2 + 2k3 + k4)`.
    pub fn rk4_combine(&mut self, l: Var, k: [Var; 4], dt: f64) -> Var {
        let lm = self.value(l);
        let km: Vec<&Matrix> = k.iter().map(|&v| self.value(v)).collect();
        for m in &km {
            assert_eq!(m.shape(), lm.shape(), "rk4_combine: shape mismatch");
        }
        let mut y = Matrix::zeros(lm.rows(), lm.cols());
        for (idx, out) in y.data_mut().iter_mut().enumerate() {
            *out = rk4_combine_scalar(
                lm.data()[idx],
                km[0].data()[idx],
                km[1].data()[idx],
                km[2].data()[idx],
                km[3].data()[idx],
                dt,
            );
        }
        let ng = self.ng(l) || k.iter().any(|&v| self.ng(v));
        self.push(y, Op::Rk4Combine { l, k, dt }, ng)
    }

    /// Reverse pass from a scalar `loss`, returning gradients for every
    /// parameter in `store`. Consumes the tape.
    pub fn backward(&mut self, loss: Var, store: &ParamStore) -> Result<Grads> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let lv = self.scalar(loss);
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss(lv));
        }
        self.consumed = true;
        let mut grads = Grads::zeros_like(store);
        let mut adj: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut send = |v: Var, m: Matrix| {
                if nodes[v.0].needs_grad {
                    match &mut adj[v.0] {
                        Some(e) => e.add_assign(&m),
                        slot @ None => *slot = Some(m),
                    }
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => grads.accumulate(*id, &g),
                Op::Linear { x, w, b } => {
                    let (xm, wm) = (&nodes[x.0].value, &nodes[w.0].value);
                    if nodes[x.0].needs_grad {
                        let mut gx = Matrix::zeros(xm.rows(), xm.cols());
                        for r in 0..g.rows() {
                            let gxr = gx.row_mut(r);
                            for (o, &go) in g.row(r).iter().enumerate() {
                                if go != 0.0 {
                                    axpy_slice(gxr, go, wm.row(o));
                                }
                            }
                        }
                        send(*x, gx);
                    }
                    if nodes[w.0].needs_grad {
                        let mut gw = Matrix::zeros(wm.rows(), wm.cols());
                        for r in 0..g.rows() {
                            let xr = xm.row(r);
                            for (o, &go) in g.row(r).iter().enumerate() {
                                if go != 0.0 {
                                    axpy_slice(gw.row_mut(o), go, xr);
                                }
                            }
                        }
                        send(*w, gw);
                    }
                    if nodes[b.0].needs_grad {
                        let mut gb = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            axpy_slice(gb.data_mut(), 1.0, g.row(r));
                        }
                        send(*b, gb);
                    }
                }
                Op::Add(a, b) => {
                    send(*b, g.clone());
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|x| -x));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (am, bm) = (&nodes[a.0].value, &nodes[b.0].value);
                    send(*a, g.zip_map(bm, |gi, bi| gi * bi));
                    send(*b, g.zip_map(am, |gi, ai| gi * ai));
                }
                Op::Div(a, b) => {
                    let (am, bm) = (&nodes[a.0].value, &nodes[b.0].value);
                    send(*a, g.zip_map(bm, |gi, bi| gi / bi));
                    let ga = g.zip_map(am, |gi, ai| gi * ai);
                    send(*b, ga.zip_map(bm, |x, bi| -x / (bi * bi)));
                }
                Op::AddScaled(a, b, c) => {
                    let c = *c;
                    send(*b, g.map(|x| c * x));
                    send(*a, g);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    send(*a, g.map(|x| c * x));
                }
                Op::Offset(a) => send(*a, g),
                Op::Relu(a) => {
                    let am = &nodes[a.0].value;
                    send(*a, g.zip_map(am, |gi, x| if x > 0.0 { gi } else { 0.0 }));
                }
                Op::Tanh(a) => send(*a, g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y))),
                Op::Sigmoid(a) => send(*a, g.zip_map(&node.value, |gi, y| gi * y * (1.0 - y))),
                Op::Exp(a) => send(*a, g.zip_map(&node.value, |gi, y| gi * y)),
                Op::Log(a) => {
                    let am = &nodes[a.0].value;
                    send(*a, g.zip_map(am, |gi, x| gi / x));
                }
                Op::Square(a) => {
                    let am = &nodes[a.0].value;
                    send(*a, g.zip_map(am, |gi, x| 2.0 * x * gi));
                }
                Op::HConcat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let c = nodes[p.0].value.cols();
                        if nodes[p.0].needs_grad {
                            let mut gp = Matrix::zeros(g.rows(), c);
                            for r in 0..g.rows() {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + c]);
                            }
                            send(p, gp);
                        }
                        offset += c;
                    }
                }
                Op::SliceCols { a, start } => {
                    let am = &nodes[a.0].value;
                    let mut ga = Matrix::zeros(am.rows(), am.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    send(*a, ga);
                }
                Op::SelectRows { a, rows } => {
                    let am = &nodes[a.0].value;
                    let mut ga = Matrix::zeros(am.rows(), am.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        axpy_slice(ga.row_mut(r), 1.0, g.row(i));
                    }
                    send(*a, ga);
                }
                Op::PickRows(picks) => {
                    // Group by source node so each source receives one matrix.
                    let mut order: Vec<usize> = (0..picks.len()).collect();
                    order.sort_by_key(|&i| picks[i].0 .0);
                    let mut k = 0;
                    while k < order.len() {
                        let v = picks[order[k]].0;
                        let vm = &nodes[v.0].value;
                        let mut gv = Matrix::zeros(vm.rows(), vm.cols());
                        while k < order.len() && picks[order[k]].0 == v {
                            let i = order[k];
                            axpy_slice(gv.row_mut(picks[i].1), 1.0, g.row(i));
                            k += 1;
                        }
                        send(v, gv);
                    }
                }
                Op::SegmentMean { a, segments } => {
                    let am = &nodes[a.0].value;
                    let mut ga = Matrix::zeros(am.rows(), am.cols());
                    for (s, seg) in segments.iter().enumerate() {
                        let c = 1.0 / seg.len() as f64;
                        for &r in seg {
                            axpy_slice(ga.row_mut(r), c, g.row(s));
                        }
                    }
                    send(*a, ga);
                }
                Op::Sum(a) => {
                    let am = &nodes[a.0].value;
                    send(*a, Matrix::filled(am.rows(), am.cols(), g.data()[0]));
                }
                Op::Rk4Combine { l, k, dt } => {
                    let dt = *dt;
                    send(k[0], g.map(|x| dt / 6.0 * x));
                    send(k[1], g.map(|x| dt / 6.0 * 2.0 * x));
                    send(k[2], g.map(|x| dt / 6.0 * 2.0 * x));
                    send(k[3], g.map(|x| dt / 6.0 * x));
                    send(*l, g);
                }
            }
        }
        Ok(grads)
    }
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

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("p", Matrix::filled(1, 1, v));
        (store, id)
    }

    #[test]
    fn square_gradient_is_two_p() {
        let (store, id) = scalar_store(3.0);
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let loss = g.square(p);
        let grads = g.backward(loss, &store).unwrap();
        assert_eq!(grads.get(id).data()[0], 6.0);
    }

    #[test]
    fn independent_loss_has_zero_gradient() {
        let (store, id) = scalar_store(3.0);
        let mut g = Graph::new();
        let _p = g.param(&store, id);
        let c = g.constant(Matrix::filled(1, 1, 5.0));
        let loss = g.square(c);
        let grads = g.backward(loss, &store).unwrap();
        assert_eq!(grads.get(id).data()[0], 0.0);
    }

    #[test]
    fn second_backward_is_a_state_error() {
        let (store, id) = scalar_store(1.0);
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let loss = g.square(p);
        g.backward(loss, &store).unwrap();
        assert!(matches!(g.backward(loss, &store), Err(Error::GraphConsumed)));
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let (store, id) = scalar_store(0.0);
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let loss = g.log(p);
        assert!(matches!(
            g.backward(loss, &store),
            Err(Error::NonFiniteLoss(_))
        ));
    }

    #[test]
    fn segment_mean_ignores_row_order() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::column(vec![0.1, 0.7, 1e16, -1e16, 0.3]));
        let b = g.constant(Matrix::column(vec![-1e16, 0.3, 0.1, 1e16, 0.7]));
        let ma = g.segment_mean(a, vec![vec![0, 1, 2, 3, 4]]);
        let mb = g.segment_mean(b, vec![vec![0, 1, 2, 3, 4]]);
        assert_eq!(g.value(ma), g.value(mb));
    }

    #[test]
    fn sigmoid_is_stable_in_both_tails() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
