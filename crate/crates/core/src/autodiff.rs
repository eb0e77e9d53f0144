//! Minimal reverse-mode automatic differentiation over 2-D tensors.
//!
//! The graph evaluates eagerly: every op appends a node holding its value.
//! `backward` emits the adjoint computation as ordinary graph nodes, so
//! gradients are themselves differentiable — differentiating an expression
//! that contains a gradient (the WGAN-GP penalty) is just a second
//! `backward` over the extended graph.
//!
//! Batches live in rows; time is handled by the caller as one matrix per
//! timestep. Scalars are 1x1 matrices.

use ndarray::Array2;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// Elementwise with the second operand broadcast from (1,n), (m,1) or (1,1).
    AddB(usize, usize),
    SubB(usize, usize),
    MulB(usize, usize),
    DivB(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Abs(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Sum(usize),
    SliceCols(usize, usize, usize),
    PadCols(usize, usize, usize),
    SliceRows(usize, usize, usize),
    PadRows(usize, usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Detach(usize),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddB(a, b) | SubB(a, b)
            | MulB(a, b) | DivB(a, b) | MatMul(a, b) => vec![*a, *b],
            Transpose(a) | Sigmoid(a) | Tanh(a) | Relu(a) | Abs(a) | Exp(a) | Ln(a) | Sqrt(a)
            | Neg(a) | Scale(a, _) | AddScalar(a, _) | Sum(a) | SliceCols(a, _, _)
            | PadCols(a, _, _) | SliceRows(a, _, _) | PadRows(a, _, _) | Detach(a) => vec![*a],
            ConcatCols(parts) | ConcatRows(parts) => parts.clone(),
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn broadcast_apply(
    a: &Array2<f64>,
    b: &Array2<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> Array2<f64> {
    let (m, n) = a.dim();
    let (bm, bn) = b.dim();
    assert!(
        (bm == 1 || bm == m) && (bn == 1 || bn == n),
        "broadcast shape ({bm},{bn}) incompatible with ({m},{n})"
    );
    let mut out = Array2::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            let bv = b[[if bm == 1 { 0 } else { i }, if bn == 1 { 0 } else { j }]];
            out[[i, j]] = f(a[[i, j]], bv);
        }
    }
    out
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        debug_assert!(value.iter().all(|x| !x.is_nan()), "NaN produced by {op:?}");
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Detach(_) => false,
            other => other.parents().iter().any(|&p| self.nodes[p].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on non-1x1 node");
        val[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        let value = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(value, Op::Div(a.0, b.0))
    }

    pub fn add_b(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_apply(self.value(a), self.value(b), |x, y| x + y);
        self.push(value, Op::AddB(a.0, b.0))
    }

    pub fn sub_b(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_apply(self.value(a), self.value(b), |x, y| x - y);
        self.push(value, Op::SubB(a.0, b.0))
    }

    pub fn mul_b(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_apply(self.value(a), self.value(b), |x, y| x * y);
        self.push(value, Op::MulB(a.0, b.0))
    }

    pub fn div_b(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_apply(self.value(a), self.value(b), |x, y| x / y);
        self.push(value, Op::DivB(a.0, b.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (am, an) = self.shape(a);
        let (bm, bn) = self.shape(b);
        assert_eq!(an, bm, "matmul: ({am},{an}) x ({bm},{bn})");
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(value, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.t().to_owned();
        self.push(value, Op::Transpose(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(value, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(value, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::abs);
        self.push(value, Op::Abs(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::exp);
        self.push(value, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::ln);
        self.push(value, Op::Ln(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::sqrt);
        self.push(value, Op::Sqrt(a.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| -x);
        self.push(value, Op::Neg(a.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| c * x);
        self.push(value, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(value, Op::AddScalar(a.0, c))
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(value, Op::Sum(a.0))
    }

    /// Mean of all entries as a 1x1 node.
    pub fn mean(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let s = self.sum(a);
        self.scale(s, 1.0 / (m * n) as f64)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (_, n) = self.shape(a);
        assert!(start + len <= n, "slice_cols out of range");
        let value = self
            .nodes[a.0]
            .value
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(value, Op::SliceCols(a.0, start, len))
    }

    /// Embeds `a` into a zero matrix of `total` columns at `start`.
    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start + n <= total, "pad_cols out of range");
        let mut value = Array2::zeros((m, total));
        value
            .slice_mut(ndarray::s![.., start..start + n])
            .assign(&self.nodes[a.0].value);
        self.push(value, Op::PadCols(a.0, start, total))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, _) = self.shape(a);
        assert!(start + len <= m, "slice_rows out of range");
        let value = self
            .nodes[a.0]
            .value
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        self.push(value, Op::SliceRows(a.0, start, len))
    }

    pub fn pad_rows(&mut self, a: Var, start: usize, total: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start + m <= total, "pad_rows out of range");
        let mut value = Array2::zeros((total, n));
        value
            .slice_mut(ndarray::s![start..start + m, ..])
            .assign(&self.nodes[a.0].value);
        self.push(value, Op::PadRows(a.0, start, total))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Array2::zeros((m, total));
        let mut offset = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            assert_eq!(pm, m, "concat_cols: row mismatch");
            value
                .slice_mut(ndarray::s![.., offset..offset + pn])
                .assign(&self.nodes[p.0].value);
            offset += pn;
        }
        self.push(value, Op::ConcatCols(parts.iter().map(|v| v.0).collect()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0]).1;
        let total: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut value = Array2::zeros((total, n));
        let mut offset = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            assert_eq!(pn, n, "concat_rows: col mismatch");
            value
                .slice_mut(ndarray::s![offset..offset + pm, ..])
                .assign(&self.nodes[p.0].value);
            offset += pm;
        }
        self.push(value, Op::ConcatRows(parts.iter().map(|v| v.0).collect()))
    }

    /// Identity in value, constant for differentiation.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        self.push(value, Op::Detach(a.0))
    }

    /// Row-wise softmax over all columns (callers slice blocks first).
    /// The row-max shift is detached; softmax is invariant to it.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (m, _) = self.shape(a);
        let mut rowmax = Array2::zeros((m, 1));
        for (i, row) in self.value(a).outer_iter().enumerate() {
            rowmax[[i, 0]] = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
        let shift = self.constant(rowmax);
        let centered = self.sub_b(a, shift);
        let e = self.exp(centered);
        let totals = self.row_sum(e);
        self.div_b(e, totals)
    }

    /// Sum along each row as a (m,1) node.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (_, n) = self.shape(a);
        let ones = self.constant(Array2::ones((n, 1)));
        self.matmul(a, ones)
    }

    /// Reduces a full-shape gradient back to a broadcast operand's shape.
    fn reduce_to(&mut self, g: Var, target: (usize, usize)) -> Var {
        let (m, n) = self.shape(g);
        match target {
            (tm, tn) if tm == m && tn == n => g,
            (1, 1) => self.sum(g),
            (1, tn) => {
                assert_eq!(tn, n);
                let ones = self.constant(Array2::ones((1, m)));
                self.matmul(ones, g)
            }
            (tm, 1) => {
                assert_eq!(tm, m);
                self.row_sum(g)
            }
            other => panic!("cannot reduce ({m},{n}) to {other:?}"),
        }
    }

    /// Reverse-mode differentiation of a 1x1 `loss` with respect to `wrt`.
    /// Adjoints are emitted as graph nodes, so the returned gradients can be
    /// differentiated again. Leaves unreachable from `loss` get `None`.
    pub fn backward(&mut self, loss: Var, wrt: &[Var]) -> Vec<Option<Var>> {
        assert_eq!(self.shape(loss), (1, 1), "loss must be scalar");
        let upper = loss.0 + 1;

        // relevant[i]: node i depends on at least one wrt leaf.
        let mut relevant = vec![false; upper];
        for &w in wrt {
            assert!(w.0 < upper, "wrt leaf created after loss");
            relevant[w.0] = true;
        }
        for i in 0..upper {
            if relevant[i] {
                continue;
            }
            // Detach blocks gradient flow.
            if matches!(self.nodes[i].op, Op::Detach(_)) {
                continue;
            }
            relevant[i] = self.nodes[i].op.parents().iter().any(|&p| relevant[p]);
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; upper];
        if relevant[loss.0] {
            adjoint[loss.0] = Some(self.constant(Array2::ones((1, 1))));
        }

        for i in (0..upper).rev() {
            let g = match adjoint[i] {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            let this = Var(i);
            let accumulate = |graph: &mut Graph,
                                  adjoint: &mut Vec<Option<Var>>,
                                  parent: usize,
                                  contribution: Var| {
                adjoint[parent] = Some(match adjoint[parent] {
                    Some(existing) => graph.add(existing, contribution),
                    None => contribution,
                });
            };
            macro_rules! push_grad {
                ($parent:expr, $contribution:expr) => {
                    if relevant[$parent] {
                        let c = $contribution;
                        accumulate(self, &mut adjoint, $parent, c);
                    }
                };
            }
            match op {
                Op::Leaf | Op::Detach(_) => {}
                Op::Add(a, b) => {
                    push_grad!(a, g);
                    push_grad!(b, g);
                }
                Op::Sub(a, b) => {
                    push_grad!(a, g);
                    push_grad!(b, self.neg(g));
                }
                Op::Mul(a, b) => {
                    push_grad!(a, self.mul(g, Var(b)));
                    push_grad!(b, self.mul(g, Var(a)));
                }
                Op::Div(a, b) => {
                    push_grad!(a, self.div(g, Var(b)));
                    push_grad!(b, {
                        let gy = self.mul(g, this);
                        let q = self.div(gy, Var(b));
                        self.neg(q)
                    });
                }
                Op::AddB(a, b) => {
                    push_grad!(a, g);
                    push_grad!(b, {
                        let target = self.shape(Var(b));
                        self.reduce_to(g, target)
                    });
                }
                Op::SubB(a, b) => {
                    push_grad!(a, g);
                    push_grad!(b, {
                        let target = self.shape(Var(b));
                        let r = self.reduce_to(g, target);
                        self.neg(r)
                    });
                }
                Op::MulB(a, b) => {
                    push_grad!(a, self.mul_b(g, Var(b)));
                    push_grad!(b, {
                        let full = self.mul(g, Var(a));
                        let target = self.shape(Var(b));
                        self.reduce_to(full, target)
                    });
                }
                Op::DivB(a, b) => {
                    push_grad!(a, self.div_b(g, Var(b)));
                    push_grad!(b, {
                        let gy = self.mul(g, this);
                        let full = self.div_b(gy, Var(b));
                        let target = self.shape(Var(b));
                        let r = self.reduce_to(full, target);
                        self.neg(r)
                    });
                }
                Op::MatMul(a, b) => {
                    push_grad!(a, {
                        let bt = self.transpose(Var(b));
                        self.matmul(g, bt)
                    });
                    push_grad!(b, {
                        let at = self.transpose(Var(a));
                        self.matmul(at, g)
                    });
                }
                Op::Transpose(a) => {
                    push_grad!(a, self.transpose(g));
                }
                Op::Sigmoid(a) => {
                    push_grad!(a, {
                        let ny = self.neg(this);
                        let one_minus = self.add_scalar(ny, 1.0);
                        let gy = self.mul(g, this);
                        self.mul(gy, one_minus)
                    });
                }
                Op::Tanh(a) => {
                    push_grad!(a, {
                        let y2 = self.mul(this, this);
                        let ny2 = self.neg(y2);
                        let d = self.add_scalar(ny2, 1.0);
                        self.mul(g, d)
                    });
                }
                Op::Relu(a) => {
                    push_grad!(a, {
                        let step = self.nodes[a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                        let step = self.constant(step);
                        self.mul(g, step)
                    });
                }
                Op::Abs(a) => {
                    push_grad!(a, {
                        let sign = self.nodes[a].value.mapv(|x| {
                            if x > 0.0 {
                                1.0
                            } else if x < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        });
                        let sign = self.constant(sign);
                        self.mul(g, sign)
                    });
                }
                Op::Exp(a) => {
                    push_grad!(a, self.mul(g, this));
                }
                Op::Ln(a) => {
                    push_grad!(a, self.div(g, Var(a)));
                }
                Op::Sqrt(a) => {
                    push_grad!(a, {
                        let q = self.div(g, this);
                        self.scale(q, 0.5)
                    });
                }
                Op::Neg(a) => {
                    push_grad!(a, self.neg(g));
                }
                Op::Scale(a, c) => {
                    push_grad!(a, self.scale(g, c));
                }
                Op::AddScalar(a, _) => {
                    push_grad!(a, g);
                }
                Op::Sum(a) => {
                    push_grad!(a, {
                        let (m, n) = self.shape(Var(a));
                        let ones = self.constant(Array2::ones((m, n)));
                        self.mul_b(ones, g)
                    });
                }
                Op::SliceCols(a, start, _) => {
                    push_grad!(a, {
                        let total = self.shape(Var(a)).1;
                        self.pad_cols(g, start, total)
                    });
                }
                Op::PadCols(a, start, _) => {
                    push_grad!(a, {
                        let len = self.shape(Var(a)).1;
                        self.slice_cols(g, start, len)
                    });
                }
                Op::SliceRows(a, start, _) => {
                    push_grad!(a, {
                        let total = self.shape(Var(a)).0;
                        self.pad_rows(g, start, total)
                    });
                }
                Op::PadRows(a, start, _) => {
                    push_grad!(a, {
                        let len = self.shape(Var(a)).0;
                        self.slice_rows(g, start, len)
                    });
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.shape(Var(p)).1;
                        push_grad!(p, self.slice_cols(g, offset, len));
                        offset += len;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.shape(Var(p)).0;
                        push_grad!(p, self.slice_rows(g, offset, len));
                        offset += len;
                    }
                }
            }
        }

        wrt.iter().map(|w| adjoint[w.0]).collect()
    }

    /// Gradient values with respect to `wrt`, zeros where unreachable.
    pub fn grad_values(&mut self, loss: Var, wrt: &[Var]) -> Vec<Array2<f64>> {
        let shapes: Vec<_> = wrt.iter().map(|&w| self.shape(w)).collect();
        self.backward(loss, wrt)
            .into_iter()
            .zip(shapes)
            .map(|(g, shape)| match g {
                Some(v) => self.value(v).clone(),
                None => Array2::zeros(shape),
            })
            .collect()
    }
}
