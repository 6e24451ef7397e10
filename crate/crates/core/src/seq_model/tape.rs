//! Reverse-mode differentiation over dense 2-D `f64` matrices.
//!
//! A [`Tape`] records one forward pass. Parameters are borrowed, never
//! copied; [`Tape::backward`] returns gradients for every parameter slot.

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Adds a `1 × n` row to every row.
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Mat,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Rows {
        table: Var,
        ids: Vec<usize>,
    },
    PickLogSoftmax {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
    Unlikelihood {
        logp: Var,
        eps: f64,
    },
    Sum(Var),
}

struct Node {
    op: Op,
    value: Option<Mat>,
}

pub struct Tape<'p> {
    params: &'p [Mat],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Mat]) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(i), _) => &self.params[*i],
            (_, Some(value)) => value,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn param(&mut self, id: usize) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), value)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(Op::MatMulT(a, b), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), value)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + &self.value(row).row(0);
        self.push(Op::AddRow(a, row), value)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(Op::Scale(a, factor), value)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()));
        self.push(Op::Gelu(a), value)
    }

    /// Row-wise layer normalization with learned `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let input = self.value(x);
        let n = input.ncols() as f64;
        let mut normed = input.clone();
        let mut inv_std = Vec::with_capacity(input.nrows());
        for mut row in normed.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let (g, b) = (self.value(gain).row(0), self.value(bias).row(0));
        let value = &normed * &g + b;
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            value,
        )
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is
    /// excluded (probability exactly zero).
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let mut value = self.value(x).clone();
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            let limit = if causal {
                (i + 1).min(row.len())
            } else {
                row.len()
            };
            let max = row
                .slice(s![..limit])
                .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if j < limit {
                    *v = (*v - max).exp();
                    total += *v;
                } else {
                    *v = 0.0;
                }
            }
            row.mapv_inplace(|v| v / total);
        }
        self.push(Op::Softmax { x }, value)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + width]).to_owned();
        self.push(Op::SliceCols { x, start }, value)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(Op::ConcatCols(parts.to_vec()), value)
    }

    /// Gathers rows of `table` (embedding lookup).
    pub fn rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let value = self.value(table).select(Axis(0), ids);
        self.push(
            Op::Rows {
                table,
                ids: ids.to_vec(),
            },
            value,
        )
    }

    /// Column vector whose entry `t` is `log softmax(logits[t])[targets[t]]`.
    pub fn pick_log_softmax(&mut self, logits: Var, targets: &[usize]) -> Var {
        let input = self.value(logits);
        assert_eq!(input.nrows(), targets.len());
        let mut probs = input.clone();
        let mut picked = Mat::zeros((targets.len(), 1));
        for (t, mut row) in probs.rows_mut().into_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let log_z = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            picked[[t, 0]] = row[targets[t]] - log_z;
            row.mapv_inplace(|v| (v - log_z).exp());
        }
        self.push(
            Op::PickLogSoftmax {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            picked,
        )
    }

    /// Elementwise `-ln(1 - min(exp(logp), 1 - eps))`.
    pub fn unlikelihood(&mut self, logp: Var, eps: f64) -> Var {
        let value = self
            .value(logp)
            .mapv(|lp| -(1.0 - lp.exp().min(1.0 - eps)).ln());
        self.push(Op::Unlikelihood { logp, eps }, value)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(x).sum());
        self.push(Op::Sum(x), value)
    }

    /// Gradients of the `1 × 1` node `out` with respect to every parameter.
    pub fn backward(&self, out: Var) -> Vec<Mat> {
        let mut param_grads: Vec<Mat> = self
            .params
            .iter()
            .map(|p| Mat::zeros(p.raw_dim()))
            .collect();
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::ones(self.value(out).raw_dim()));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Param(id) => param_grads[*id] += &g,
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, factor) => acc(&mut grads, *a, g * *factor),
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                        let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + th)
                            + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        *gv *= d;
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    let gain_row = self.value(*gain).row(0).to_owned();
                    let g_gain = (&g * normed).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let g_bias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let n = g.ncols() as f64;
                    let mut gx = &g * &gain_row;
                    for ((mut row, xhat), &inv) in
                        gx.rows_mut().into_iter().zip(normed.rows()).zip(inv_std)
                    {
                        let mean_g = row.sum() / n;
                        let mean_gx = row.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                        Zip::from(&mut row)
                            .and(&xhat)
                            .for_each(|v, &xh| *v = inv * (*v - mean_g - xh * mean_gx));
                    }
                    acc(&mut grads, *gain, g_gain);
                    acc(&mut grads, *bias, g_bias);
                    acc(&mut grads, *x, gx);
                }
                Op::Softmax { x } => {
                    let y = self.nodes[idx].value.as_ref().expect("softmax value");
                    let mut gx = &g * y;
                    for (mut row, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row)
                            .and(&yrow)
                            .for_each(|v, &p| *v -= p * dot);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let mut gx = Mat::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let width = self.value(p).ncols();
                        acc(
                            &mut grads,
                            p,
                            g.slice(s![.., offset..offset + width]).to_owned(),
                        );
                        offset += width;
                    }
                }
                Op::Rows { table, ids } => {
                    let mut gt = Mat::zeros(self.value(*table).raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = gt.row_mut(id);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::PickLogSoftmax {
                    logits,
                    targets,
                    probs,
                } => {
                    let mut gl = probs.clone();
                    for (t, mut row) in gl.rows_mut().into_iter().enumerate() {
                        row[targets[t]] -= 1.0;
                        row *= -g[[t, 0]];
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::Unlikelihood { logp, eps } => {
                    let mut gl = g;
                    Zip::from(&mut gl)
                        .and(self.value(*logp))
                        .for_each(|gv, &lp| {
                            let p = lp.exp();
                            *gv *= if p < 1.0 - eps { p / (1.0 - p) } else { 0.0 };
                        });
                    acc(&mut grads, *logp, gl);
                }
                Op::Sum(x) => {
                    let gx = Mat::from_elem(self.value(*x).raw_dim(), g[[0, 0]]);
                    acc(&mut grads, *x, gx);
                }
            }
        }
        param_grads
    }
}
