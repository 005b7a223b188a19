//! A small reverse-mode tape over dense `f64` vectors.
//!
//! Every node holds its forward value eagerly, so the tape doubles as an
//! evaluator. Gradients are obtained with [`Tape::backward`]. Quantities that
//! are themselves gradients (input gradients for integrated gradients,
//! DeepLIFT multipliers) are expressed as ordinary tape nodes, which is what
//! lets the attribution loss be differentiated with respect to parameters.

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Elementwise nonlinearities with closed-form first and second derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Tanh,
    Exp,
    Recip,
}

impl Nonlinearity {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Exp => x.exp(),
            Nonlinearity::Recip => 1.0 / x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Nonlinearity::Exp => x.exp(),
            Nonlinearity::Recip => -1.0 / (x * x),
        }
    }

    pub fn second_derivative(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Nonlinearity::Exp => x.exp(),
            Nonlinearity::Recip => 2.0 / (x * x * x),
        }
    }
}

/// Below this input gap the secant slope falls back to the derivative at the
/// midpoint (the two agree to O(gap^2)).
pub const SECANT_EPS: f64 = 1e-6;

fn secant(f: Nonlinearity, a: f64, a0: f64) -> f64 {
    let gap = a - a0;
    if gap.abs() < SECANT_EPS {
        f.derivative(0.5 * (a + a0))
    } else {
        (f.apply(a) - f.apply(a0)) / gap
    }
}

/// Partial derivatives of the secant slope with respect to `a` and `a0`.
fn secant_partials(f: Nonlinearity, a: f64, a0: f64) -> (f64, f64) {
    let gap = a - a0;
    if gap.abs() < SECANT_EPS {
        let half = 0.5 * f.second_derivative(0.5 * (a + a0));
        (half, half)
    } else {
        let s = (f.apply(a) - f.apply(a0)) / gap;
        ((f.derivative(a) - s) / gap, (s - f.derivative(a0)) / gap)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MatVec { m: Var, x: Var, rows: usize, cols: usize },
    MatTVec { m: Var, x: Var, rows: usize, cols: usize },
    Unary(Nonlinearity, Var),
    Log(Var),
    Square(Var),
    Dot(Var, Var),
    Sum(Var),
    Stack(Vec<Var>),
    Index(Var, usize),
    Slice { v: Var, start: usize, len: usize },
    Secant { f: Nonlinearity, a: Var, a0: Var },
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Append-only computation record.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a length-1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1, "scalar() on a vector node");
        val[0]
    }

    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.leaf(vec![value])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = zip_with(self.value(a), self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = zip_with(self.value(a), self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = zip_with(self.value(a), self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    /// Vector `a` times the length-1 node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let value = self.value(a).iter().map(|x| x * k).collect();
        self.push(value, Op::MulScalar(a, s))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * k).collect();
        self.push(value, Op::Scale(a, k))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|x| x + c).collect();
        self.push(value, Op::AddConst(a))
    }

    /// `m` is a row-major `rows x cols` matrix; computes `m x`.
    pub fn matvec(&mut self, m: Var, x: Var, rows: usize, cols: usize) -> Var {
        let mv = self.value(m);
        let xv = self.value(x);
        assert_eq!(mv.len(), rows * cols, "matvec: matrix shape");
        assert_eq!(xv.len(), cols, "matvec: vector length");
        let value = (0..rows)
            .map(|r| dot(&mv[r * cols..(r + 1) * cols], xv))
            .collect();
        self.push(value, Op::MatVec { m, x, rows, cols })
    }

    /// `m` is a row-major `rows x cols` matrix; computes `m^T x`.
    pub fn mat_t_vec(&mut self, m: Var, x: Var, rows: usize, cols: usize) -> Var {
        let mv = self.value(m);
        let xv = self.value(x);
        assert_eq!(mv.len(), rows * cols, "mat_t_vec: matrix shape");
        assert_eq!(xv.len(), rows, "mat_t_vec: vector length");
        let mut value = vec![0.0; cols];
        for r in 0..rows {
            let row = &mv[r * cols..(r + 1) * cols];
            for (out, w) in value.iter_mut().zip(row) {
                *out += w * xv[r];
            }
        }
        self.push(value, Op::MatTVec { m, x, rows, cols })
    }

    pub fn unary(&mut self, f: Nonlinearity, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| f.apply(x)).collect();
        self.push(value, Op::Unary(f, a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Nonlinearity::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Nonlinearity::Exp, a)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(Nonlinearity::Recip, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| x.ln()).collect();
        self.push(value, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| x * x).collect();
        self.push(value, Op::Square(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let value = vec![dot(self.value(a), self.value(b))];
        self.push(value, Op::Dot(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = vec![self.value(a).iter().sum()];
        self.push(value, Op::Sum(a))
    }

    /// Sum of several nodes of equal length.
    pub fn add_all(&mut self, vars: &[Var]) -> Var {
        let (first, rest) = vars.split_first().expect("add_all of nothing");
        rest.iter().fold(*first, |acc, &v| self.add(acc, v))
    }

    /// Concatenates length-1 nodes into a vector.
    pub fn stack(&mut self, scalars: Vec<Var>) -> Var {
        let value = scalars.iter().map(|&s| self.scalar(s)).collect();
        self.push(value, Op::Stack(scalars))
    }

    pub fn index(&mut self, a: Var, i: usize) -> Var {
        let value = vec![self.value(a)[i]];
        self.push(value, Op::Index(a, i))
    }

    pub fn slice(&mut self, v: Var, start: usize, len: usize) -> Var {
        let value = self.value(v)[start..start + len].to_vec();
        self.push(value, Op::Slice { v, start, len })
    }

    /// Elementwise secant slope `(f(a) - f(a0)) / (a - a0)`, the DeepLIFT
    /// Rescale multiplier.
    pub fn secant(&mut self, f: Nonlinearity, a: Var, a0: Var) -> Var {
        let value = zip_with(self.value(a), self.value(a0), |x, y| secant(f, x, y));
        self.push(value, Op::Secant { f, a, a0 })
    }

    /// Reverse sweep from a length-1 output node.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    accumulate(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let ga = zip_with(&g, self.value(*b), |x, y| x * y);
                    let gb = zip_with(&g, self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::MulScalar(a, s) => {
                    let k = self.scalar(*s);
                    let ga: Vec<f64> = g.iter().map(|x| x * k).collect();
                    let gs = dot(&g, self.value(*a));
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *s, &[gs]);
                }
                Op::Scale(a, k) => {
                    let ga: Vec<f64> = g.iter().map(|x| x * k).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::AddConst(a) => accumulate(&mut grads, *a, &g),
                Op::MatVec { m, x, rows, cols } => {
                    let mv = self.value(*m);
                    let xv = self.value(*x);
                    let mut gm = vec![0.0; rows * cols];
                    let mut gx = vec![0.0; *cols];
                    for r in 0..*rows {
                        let row = &mv[r * cols..(r + 1) * cols];
                        for c in 0..*cols {
                            gm[r * cols + c] = g[r] * xv[c];
                            gx[c] += g[r] * row[c];
                        }
                    }
                    accumulate(&mut grads, *m, &gm);
                    accumulate(&mut grads, *x, &gx);
                }
                Op::MatTVec { m, x, rows, cols } => {
                    // y_c = sum_r m[r,c] x_r
                    let mv = self.value(*m);
                    let xv = self.value(*x);
                    let mut gm = vec![0.0; rows * cols];
                    let mut gx = vec![0.0; *rows];
                    for r in 0..*rows {
                        let row = &mv[r * cols..(r + 1) * cols];
                        for c in 0..*cols {
                            gm[r * cols + c] = g[c] * xv[r];
                            gx[r] += g[c] * row[c];
                        }
                    }
                    accumulate(&mut grads, *m, &gm);
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Unary(f, a) => {
                    let ga = match f {
                        Nonlinearity::Tanh => zip_with(&g, &node.value, |x, t| x * (1.0 - t * t)),
                        Nonlinearity::Exp => zip_with(&g, &node.value, |x, e| x * e),
                        Nonlinearity::Recip => zip_with(&g, &node.value, |x, r| -x * r * r),
                    };
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Log(a) => {
                    let ga = zip_with(&g, self.value(*a), |x, v| x / v);
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Square(a) => {
                    let ga = zip_with(&g, self.value(*a), |x, v| 2.0 * x * v);
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Dot(a, b) => {
                    let ga: Vec<f64> = self.value(*b).iter().map(|v| g[0] * v).collect();
                    let gb: Vec<f64> = self.value(*a).iter().map(|v| g[0] * v).collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Sum(a) => {
                    let ga = vec![g[0]; self.value(*a).len()];
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Stack(scalars) => {
                    for (s, gv) in scalars.iter().zip(&g) {
                        accumulate(&mut grads, *s, &[*gv]);
                    }
                }
                Op::Index(a, i) => {
                    let mut ga = vec![0.0; self.value(*a).len()];
                    ga[*i] = g[0];
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Slice { v, start, len } => {
                    let mut gv = vec![0.0; self.value(*v).len()];
                    gv[*start..start + len].copy_from_slice(&g);
                    accumulate(&mut grads, *v, &gv);
                }
                Op::Secant { f, a, a0 } => {
                    let av = self.value(*a);
                    let a0v = self.value(*a0);
                    let mut ga = vec![0.0; av.len()];
                    let mut ga0 = vec![0.0; av.len()];
                    for i in 0..av.len() {
                        let (pa, pa0) = secant_partials(*f, av[i], a0v[i]);
                        ga[i] = g[i] * pa;
                        ga0[i] = g[i] * pa0;
                    }
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *a0, &ga0);
                }
            }
            // Leaf gradients are the only ones callers read back.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads }
    }
}

/// Result of a reverse sweep; only leaf gradients are retained.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf, zero-filled to `len` when absent.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn zip_with(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "length mismatch on the tape");
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
