//! Reverse-mode differentiation over vector-valued nodes.
//!
//! A [`Tape`] records every intermediate value of a loss as it is built. Each
//! node holds a dense `Vec<f64>`; scalars are length-one vectors. Network
//! parameters enter as a single leaf per network (the flat parameter vector),
//! and [`Op::Dense`] nodes read their weights out of that leaf by offset, so a
//! whole network contributes exactly one gradient slot.
//!
//! Non-smooth nodes (`abs`, `max`, `min`, `clamp`, hinge) use the almost-everywhere
//! derivative; on ties the gradient is routed to the first argument.

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Tanh,
    Sigmoid,
    Exp,
    Abs,
    Neg,
    Square,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Dense {
        params: Var,
        offset: usize,
        n_in: usize,
        n_out: usize,
        x: Var,
    },
    Unary(Unary, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Sum(Var),
    Prod(Var),
    MaxReduce(Var),
    Max2(Var, Var),
    Min2(Var, Var),
    MaxConst(Var, f64),
    Clamp(Var, f64, f64),
    Norm2(Var),
    AddMany(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node with respect to one scalar output.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> &[f64] {
        &self.adjoints[v.0]
    }

    pub fn take(&mut self, v: Var) -> Vec<f64> {
        std::mem::take(&mut self.adjoints[v.0])
    }
}

/// Broadcasting rule shared by the binary elementwise ops: either equal
/// lengths or one side of length one.
fn broadcast_len(a: usize, b: usize) -> usize {
    if a == b || b == 1 {
        a
    } else if a == 1 {
        b
    } else {
        panic!("elementwise op on incompatible lengths {a} and {b}")
    }
}

#[inline]
fn at(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a length-one node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1);
        val[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, x: f64) -> Var {
        self.push(vec![x], Op::Leaf)
    }

    /// `y = W x + b` with `W` (row-major `n_out × n_in`) followed by `b`,
    /// both read from `params` starting at `offset`.
    pub fn dense(&mut self, params: Var, offset: usize, n_in: usize, n_out: usize, x: Var) -> Var {
        let p = &self.nodes[params.0].value;
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), n_in, "dense input length");
        assert!(offset + n_in * n_out + n_out <= p.len(), "dense parameter range");
        let w = &p[offset..offset + n_in * n_out];
        let b = &p[offset + n_in * n_out..offset + n_in * n_out + n_out];
        let mut y = b.to_vec();
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &w[o * n_in..(o + 1) * n_in];
            *yo += row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
        }
        self.push(
            y,
            Op::Dense {
                params,
                offset,
                n_in,
                n_out,
                x,
            },
        )
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Exp => f64::exp,
            Unary::Abs => f64::abs,
            Unary::Neg => |x| -x,
            Unary::Square => |x| x * x,
        };
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        self.push(value, Op::Unary(kind, a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let n = broadcast_len(av.len(), bv.len());
        (0..n).map(|i| f(at(av, i), at(bv, i))).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    /// Elementwise maximum, ties resolved to `a`.
    pub fn max2(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| if x >= y { x } else { y });
        self.push(v, Op::Max2(a, b))
    }

    /// Elementwise minimum, ties resolved to `a`.
    pub fn min2(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| if x <= y { x } else { y });
        self.push(v, Op::Min2(a, b))
    }

    /// `a + c` for a constant vector (or scalar) `c`.
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Var {
        let av = &self.nodes[a.0].value;
        let n = broadcast_len(av.len(), c.len());
        let v = (0..n).map(|i| at(av, i) + at(c, i)).collect();
        self.push(v, Op::AddConst(a))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.add_const(a, &[c])
    }

    /// Elementwise product with a constant vector of the same length.
    pub fn mul_const(&mut self, a: Var, c: &[f64]) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.len(), c.len(), "mul_const length");
        let v = av.iter().zip(c).map(|(x, y)| x * y).collect();
        self.push(v, Op::MulConst(a, c.to_vec()))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        self.push(v, Op::Scale(a, c))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut v = Vec::new();
        for p in parts {
            v.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[a.0].value[start..start + len].to_vec();
        self.push(v, Op::Slice(a, start))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn prod(&mut self, a: Var) -> Var {
        let p = self.nodes[a.0].value.iter().product();
        self.push(vec![p], Op::Prod(a))
    }

    /// Largest element; the first maximiser receives the gradient.
    pub fn max_reduce(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        assert!(!v.is_empty(), "max of empty vector");
        let m = v[argmax(v)];
        self.push(vec![m], Op::MaxReduce(a))
    }

    /// `max(a, c)` elementwise against a constant.
    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.iter().map(|&x| x.max(c)).collect();
        self.push(v, Op::MaxConst(a, c))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.nodes[a.0].value.iter().map(|&x| x.clamp(lo, hi)).collect();
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Euclidean norm; the subgradient at the origin is zero.
    pub fn norm2(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push(vec![n], Op::Norm2(a))
    }

    /// Sum of equally sized nodes.
    pub fn add_many(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "add_many of nothing");
        let mut v = self.nodes[parts[0].0].value.clone();
        for p in &parts[1..] {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.len(), v.len(), "add_many lengths");
            for (a, b) in v.iter_mut().zip(pv) {
                *a += b;
            }
        }
        self.push(v, Op::AddMany(parts.to_vec()))
    }

    pub fn dot_const(&mut self, a: Var, c: &[f64]) -> Var {
        let m = self.mul_const(a, c);
        self.sum(m)
    }

    /// Gradient of the scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let len = self.nodes[loss.0].value.len();
        if len != 1 {
            return Err(Error::NonScalarLoss(len));
        }
        let mut adj: Vec<Vec<f64>> = Vec::with_capacity(loss.0 + 1);
        for node in &self.nodes[..=loss.0] {
            adj.push(vec![0.0; node.value.len()]);
        }
        adj[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            if adj[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut adj[i]);
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Dense {
                    params,
                    offset,
                    n_in,
                    n_out,
                    x,
                } => {
                    let (n_in, n_out, offset) = (*n_in, *n_out, *offset);
                    let p = &self.nodes[params.0].value;
                    let xv = &self.nodes[x.0].value;
                    {
                        let gp = &mut adj[params.0];
                        for o in 0..n_out {
                            let go = g[o];
                            if go == 0.0 {
                                continue;
                            }
                            let row = &mut gp[offset + o * n_in..offset + (o + 1) * n_in];
                            for (r, xi) in row.iter_mut().zip(xv) {
                                *r += go * xi;
                            }
                            gp[offset + n_in * n_out + o] += go;
                        }
                    }
                    let gx = &mut adj[x.0];
                    for o in 0..n_out {
                        let go = g[o];
                        if go == 0.0 {
                            continue;
                        }
                        let row = &p[offset + o * n_in..offset + (o + 1) * n_in];
                        for (gxi, w) in gx.iter_mut().zip(row) {
                            *gxi += go * w;
                        }
                    }
                }
                Op::Unary(kind, a) => {
                    let av = &self.nodes[a.0].value;
                    let yv = &node.value;
                    let ga = &mut adj[a.0];
                    for k in 0..g.len() {
                        let d = match kind {
                            Unary::Tanh => 1.0 - yv[k] * yv[k],
                            Unary::Sigmoid => yv[k] * (1.0 - yv[k]),
                            Unary::Exp => yv[k],
                            Unary::Abs => {
                                if av[k] >= 0.0 {
                                    1.0
                                } else {
                                    -1.0
                                }
                            }
                            Unary::Neg => -1.0,
                            Unary::Square => 2.0 * av[k],
                        };
                        ga[k] += g[k] * d;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, &g, |_| 1.0);
                    accumulate(&mut adj, *b, &g, |_| 1.0);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, &g, |_| 1.0);
                    accumulate(&mut adj, *b, &g, |_| -1.0);
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    accumulate(&mut adj, *a, &g, |k| at(bv, k));
                    accumulate(&mut adj, *b, &g, |k| at(av, k));
                }
                Op::Div(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    accumulate(&mut adj, *a, &g, |k| 1.0 / at(bv, k));
                    accumulate(&mut adj, *b, &g, |k| {
                        let d = at(bv, k);
                        -at(av, k) / (d * d)
                    });
                }
                Op::Max2(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    accumulate(&mut adj, *a, &g, |k| (at(av, k) >= at(bv, k)) as u8 as f64);
                    accumulate(&mut adj, *b, &g, |k| (at(av, k) < at(bv, k)) as u8 as f64);
                }
                Op::Min2(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    accumulate(&mut adj, *a, &g, |k| (at(av, k) <= at(bv, k)) as u8 as f64);
                    accumulate(&mut adj, *b, &g, |k| (at(av, k) > at(bv, k)) as u8 as f64);
                }
                Op::AddConst(a) => accumulate(&mut adj, *a, &g, |_| 1.0),
                Op::MulConst(a, c) => accumulate(&mut adj, *a, &g, |k| c[k]),
                Op::Scale(a, c) => accumulate(&mut adj, *a, &g, |_| *c),
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let ga = &mut adj[p.0];
                        let n = ga.len();
                        for (x, y) in ga.iter_mut().zip(&g[start..start + n]) {
                            *x += y;
                        }
                        start += n;
                    }
                }
                Op::Slice(a, start) => {
                    let ga = &mut adj[a.0];
                    for (k, gk) in g.iter().enumerate() {
                        ga[start + k] += gk;
                    }
                }
                Op::Sum(a) => {
                    for x in adj[a.0].iter_mut() {
                        *x += g[0];
                    }
                }
                Op::Prod(a) => {
                    let av = &self.nodes[a.0].value;
                    let ga = &mut adj[a.0];
                    for k in 0..av.len() {
                        let others: f64 = av
                            .iter()
                            .enumerate()
                            .filter(|(j, _)| *j != k)
                            .map(|(_, v)| v)
                            .product();
                        ga[k] += g[0] * others;
                    }
                }
                Op::MaxReduce(a) => {
                    let k = argmax(&self.nodes[a.0].value);
                    adj[a.0][k] += g[0];
                }
                Op::MaxConst(a, c) => {
                    let av = &self.nodes[a.0].value;
                    accumulate(&mut adj, *a, &g, |k| (av[k] >= *c) as u8 as f64);
                }
                Op::Clamp(a, lo, hi) => {
                    let av = &self.nodes[a.0].value;
                    accumulate(&mut adj, *a, &g, |k| (av[k] >= *lo && av[k] <= *hi) as u8 as f64);
                }
                Op::Norm2(a) => {
                    let n = node.value[0];
                    if n > 0.0 {
                        let av = &self.nodes[a.0].value;
                        for (x, v) in adj[a.0].iter_mut().zip(av) {
                            *x += g[0] * v / n;
                        }
                    }
                }
                Op::AddMany(parts) => {
                    for p in parts {
                        for (x, y) in adj[p.0].iter_mut().zip(&g) {
                            *x += y;
                        }
                    }
                }
            }
            adj[i] = g;
        }
        // Nodes recorded after `loss` cannot influence it.
        adj.resize_with(self.nodes.len(), Vec::new);
        for (a, node) in adj.iter_mut().zip(&self.nodes).skip(loss.0 + 1) {
            *a = vec![0.0; node.value.len()];
        }
        Ok(Gradients { adjoints: adj })
    }
}

/// Adds `g[k] * d(k)` into the adjoint of `target`, folding broadcast
/// (length-one) operands by summation.
fn accumulate(adj: &mut [Vec<f64>], target: Var, g: &[f64], d: impl Fn(usize) -> f64) {
    let ga = &mut adj[target.0];
    if ga.len() == 1 && g.len() > 1 {
        let s: f64 = (0..g.len()).map(|k| g[k] * d(k)).sum();
        ga[0] += s;
    } else {
        for k in 0..g.len() {
            ga[k] += g[k] * d(k);
        }
    }
}

/// Index of the first maximal element.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let p = t.leaf(vec![3.0]);
        let y = t.square(p);
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(p), &[6.0]);
    }

    #[test]
    fn tanh_derivative_at_zero() {
        let mut t = Tape::new();
        let p = t.leaf(vec![0.0]);
        let y = t.tanh(p);
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(p), &[1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let p = t.leaf(vec![1.0, 2.0]);
        let y = t.tanh(p);
        assert!(matches!(t.backward(y), Err(Error::NonScalarLoss(2))));
    }

    #[test]
    fn max_ties_route_to_first_argument() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0]);
        let b = t.leaf(vec![1.0]);
        let m = t.max2(a, b);
        let g = t.backward(m).unwrap();
        assert_eq!(g.wrt(a), &[1.0]);
        assert_eq!(g.wrt(b), &[0.0]);

        let mut t = Tape::new();
        let v = t.leaf(vec![2.0, 5.0, 5.0]);
        let m = t.max_reduce(v);
        let g = t.backward(m).unwrap();
        assert_eq!(g.wrt(v), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn broadcast_scalar_operand() {
        let mut t = Tape::new();
        let v = t.leaf(vec![1.0, 2.0, 3.0]);
        let s = t.leaf(vec![2.0]);
        let d = t.div(v, s);
        let total = t.sum(d);
        let g = t.backward(total).unwrap();
        assert_eq!(t.value(d), &[0.5, 1.0, 1.5]);
        assert_eq!(g.wrt(v), &[0.5, 0.5, 0.5]);
        assert!((g.wrt(s)[0] - (-6.0 / 4.0)).abs() < 1e-15);
    }

    #[test]
    fn product_and_norm_gradients() {
        let mut t = Tape::new();
        let v = t.leaf(vec![2.0, 3.0, 4.0]);
        let p = t.prod(v);
        let g = t.backward(p).unwrap();
        assert_eq!(g.wrt(v), &[12.0, 8.0, 6.0]);

        let mut t = Tape::new();
        let v = t.leaf(vec![3.0, 4.0]);
        let n = t.norm2(v);
        let g = t.backward(n).unwrap();
        assert_eq!(t.scalar(n), 5.0);
        assert_eq!(g.wrt(v), &[0.6, 0.8]);
    }
}
