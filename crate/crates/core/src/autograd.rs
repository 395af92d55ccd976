//! A small reverse-mode autodiff tape over dense `f64` matrices.
//!
//! Only the operations the built-in models need are provided. Every value is
//! a 2-D row-major matrix; row vectors are `1 × n`.

use ndarray::{s, Array1, Array2, Axis};

pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `a · bᵀ`
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    /// `a (n × d) + b (1 × d)` broadcast over rows.
    AddRow(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Matrix,
        inv_std: Array1<f64>,
    },
    Gather(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize, usize),
    MeanRows(usize),
    SumSquares(usize),
    /// Mean over rows of soft-target cross entropy; holds targets and softmax.
    SoftCrossEntropy {
        logits: usize,
        targets: Matrix,
        probs: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a.0, b.0))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a.0, b.0))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + &self.value(row).row(0);
        self.push(value, Op::AddRow(a.0, row.0))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a.0, factor))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a.0))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        self.push(value, Op::SoftmaxRows(a.0))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let input = self.value(x);
        let d = input.ncols() as f64;
        let mut xhat = input.clone();
        let mut inv_std = Array1::zeros(input.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.dot(&row) / d;
            *inv = 1.0 / (var + LN_EPS).sqrt();
            row *= *inv;
        }
        let value = &xhat * &self.value(gamma).row(0) + self.value(beta).row(0);
        self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Var {
        let src = self.value(table);
        let mut value = Matrix::zeros((rows.len(), src.ncols()));
        for (mut out, &r) in value.rows_mut().into_iter().zip(rows) {
            out.assign(&src.row(r));
        }
        self.push(value, Op::Gather(table.0, rows.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).ncols();
        let total: usize = parts.iter().map(|p| self.value(*p).nrows()).sum();
        let mut value = Matrix::zeros((total, cols));
        let mut at = 0;
        for p in parts {
            let v = self.value(*p);
            value.slice_mut(s![at..at + v.nrows(), ..]).assign(v);
            at += v.nrows();
        }
        self.push(value, Op::ConcatRows(parts.iter().map(|p| p.0).collect()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(value, Op::SliceRows(a.0, start, end))
    }

    pub fn row(&mut self, a: Var, index: usize) -> Var {
        self.slice_rows(a, index, index + 1)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        self.push(value, Op::MeanRows(a.0))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Matrix::from_elem((1, 1), v.iter().map(|x| x * x).sum());
        self.push(value, Op::SumSquares(a.0))
    }

    /// Mean over rows of `-Σ_c t_c log softmax(z)_c`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Matrix) -> Var {
        let z = self.value(logits);
        assert_eq!(z.dim(), targets.dim(), "target shape mismatch");
        let mut probs = z.clone();
        let mut loss = 0.0;
        for (mut row, t) in probs.rows_mut().into_iter().zip(targets.rows()) {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let log_sum = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            for (p, &tc) in row.iter_mut().zip(t) {
                let log_p = *p - log_sum;
                if tc != 0.0 {
                    loss -= tc * log_p;
                }
                *p = log_p.exp();
            }
        }
        let n = z.nrows() as f64;
        self.push(
            Matrix::from_elem((1, 1), loss / n),
            Op::SoftCrossEntropy {
                logits: logits.0,
                targets,
                probs,
            },
        )
    }

    /// Back-propagates from a `1 × 1` output. Returns gradients indexed by node.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::ones(self.nodes[output.0].value.dim()));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[*b].value.t());
                    let db = self.nodes[*a].value.t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.dot(&self.nodes[*b].value);
                    let db = g.t().dot(&self.nodes[*a].value);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g * *f),
                Op::Gelu(a) => {
                    let dx = &g * &self.nodes[*a].value.mapv(gelu_grad);
                    accumulate(&mut grads, *a, dx);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut dx = g;
                    for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = drow.dot(&yrow);
                        drow -= dot;
                        drow *= &yrow;
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dgamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let mut dxhat = &g * &self.nodes[*gamma].value.row(0);
                    let d = xhat.ncols() as f64;
                    for ((mut row, xh), inv) in
                        dxhat.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std)
                    {
                        let mean_d = row.sum() / d;
                        let mean_dx = row.dot(&xh) / d;
                        for (r, &h) in row.iter_mut().zip(xh) {
                            *r = inv * (*r - mean_d - h * mean_dx);
                        }
                    }
                    accumulate(&mut grads, *beta, dbeta);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *x, dxhat);
                }
                Op::Gather(table, rows) => {
                    let src = &self.nodes[*table].value;
                    let slot = grads[*table].get_or_insert_with(|| Matrix::zeros(src.dim()));
                    for (grow, &r) in g.rows().into_iter().zip(rows) {
                        let mut target = slot.row_mut(r);
                        target += &grow;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let n = self.nodes[*p].value.nrows();
                        accumulate(&mut grads, *p, g.slice(s![at..at + n, ..]).to_owned());
                        at += n;
                    }
                }
                Op::SliceRows(a, start, end) => {
                    let src = &self.nodes[*a].value;
                    let slot = grads[*a].get_or_insert_with(|| Matrix::zeros(src.dim()));
                    let mut target = slot.slice_mut(s![*start..*end, ..]);
                    target += &g;
                }
                Op::MeanRows(a) => {
                    let n = self.nodes[*a].value.nrows();
                    let dx = Matrix::from_shape_fn(self.nodes[*a].value.dim(), |(_, c)| {
                        g[[0, c]] / n as f64
                    });
                    accumulate(&mut grads, *a, dx);
                }
                Op::SumSquares(a) => {
                    let dx = &self.nodes[*a].value * (2.0 * g[[0, 0]]);
                    accumulate(&mut grads, *a, dx);
                }
                Op::SoftCrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let n = probs.nrows() as f64;
                    // Targets need not sum to one exactly; scale p by the row mass.
                    let mut dx = probs.clone();
                    for (mut row, t) in dx.rows_mut().into_iter().zip(targets.rows()) {
                        let mass = t.sum();
                        row *= mass;
                        row -= &t;
                    }
                    dx *= g[[0, 0]] / n;
                    accumulate(&mut grads, *logits, dx);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], index: usize, delta: Matrix) {
    match &mut grads[index] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Adam with decoupled weight decay over a fixed list of parameter matrices.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &[Matrix], learning_rate: f64, weight_decay: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| Matrix::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Matrix::zeros(p.dim())).collect(),
        }
    }

    /// `grads[i] == None` leaves parameter `i` and its moments untouched.
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Option<Matrix>]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let Some(g) = g else { continue };
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                    *p -= self.learning_rate * (update + self.weight_decay * *p);
                });
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Option<Matrix>], max_norm: f64) {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g *= f;
        }
    }
}
