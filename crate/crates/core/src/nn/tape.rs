use ndarray::{s, Array2, ArrayView2, Axis};

use super::params::{GradStore, ParamId, Params};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e9;

enum Value {
    Owned(Array2<f64>),
    Param { set: usize, id: ParamId },
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    AddBroadcastRow(NodeId, NodeId),
    AddConst(NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    MatmulNT(NodeId, NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    Dropout {
        x: NodeId,
        mask: Array2<f64>,
    },
    Embed {
        set: usize,
        id: ParamId,
        ids: Vec<usize>,
    },
    CeLossSum {
        logits: NodeId,
        targets: Vec<usize>,
        smoothing: f64,
    },
    SqDistSum {
        x: NodeId,
        target: Array2<f64>,
    },
}

struct Node {
    value: Value,
    op: Op,
}

/// Append-only computation tape over 2-D f64 tensors with reverse-mode
/// differentiation. Parameter leaves reference one of the borrowed parameter
/// sets; `backward` accumulates into one `GradStore` per set.
pub struct Tape<'p> {
    sets: Vec<&'p Params>,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(sets: Vec<&'p Params>) -> Self {
        Tape {
            sets,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, n: NodeId) -> ArrayView2<'_, f64> {
        match &self.nodes[n].value {
            Value::Owned(a) => a.view(),
            Value::Param { set, id } => self.sets[*set].get(*id).view(),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, v: Array2<f64>) -> NodeId {
        self.push(v, Op::Leaf)
    }

    pub fn param(&mut self, set: usize, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            value: Value::Param { set, id },
            op: Op::Leaf,
        });
        self.nodes.len() - 1
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.value(a) + &self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a 1 x d row vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = &self.value(a) + &self.value(row);
        self.push(v, Op::AddBroadcastRow(a, row))
    }

    /// Adds a constant tensor (positional encodings, attention masks).
    pub fn add_const(&mut self, a: NodeId, c: &Array2<f64>) -> NodeId {
        let v = &self.value(a) + c;
        self.push(v, Op::AddConst(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).to_owned() * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b));
        self.push(v, Op::Matmul(a, b))
    }

    /// a . b^T
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatmulNT(a, b))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(&self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (norm, _, _) = ln_forward(&self.value(x));
        let v = &norm * &self.value(gain) + &self.value(bias);
        self.push(v, Op::LayerNorm { x, gain, bias })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat shape mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    /// Dropout with a precomputed mask whose kept entries carry 1/(1-p).
    pub fn dropout(&mut self, x: NodeId, mask: Array2<f64>) -> NodeId {
        let v = &self.value(x) * &mask;
        self.push(v, Op::Dropout { x, mask })
    }

    /// Gathers embedding rows for `ids` from a parameter table.
    pub fn embed(&mut self, set: usize, id: ParamId, ids: &[usize]) -> NodeId {
        let table = self.sets[set].get(id);
        let d = table.ncols();
        let mut v = Array2::zeros((ids.len(), d));
        for (r, &tok) in ids.iter().enumerate() {
            v.row_mut(r).assign(&table.row(tok));
        }
        self.push(
            v,
            Op::Embed {
                set,
                id,
                ids: ids.to_vec(),
            },
        )
    }

    /// Sum over rows of label-smoothed cross-entropy. Returns a 1 x 1 node.
    pub fn ce_loss_sum(&mut self, logits: NodeId, targets: &[usize], smoothing: f64) -> NodeId {
        let logp = log_softmax_rows(&self.value(logits));
        let vocab = logp.ncols() as f64;
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = logp.row(r);
            let uniform: f64 = row.sum() / vocab;
            loss += -(1.0 - smoothing) * row[t] - smoothing * uniform;
        }
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CeLossSum {
                logits,
                targets: targets.to_vec(),
                smoothing,
            },
        )
    }

    /// Sum of squared elementwise differences against a constant target.
    /// Returns a 1 x 1 node.
    pub fn sq_dist_sum(&mut self, x: NodeId, target: Array2<f64>) -> NodeId {
        let diff = &self.value(x) - &target;
        let loss = diff.iter().map(|d| d * d).sum::<f64>();
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::SqDistSum { x, target },
        )
    }

    /// Builds an additive causal mask (upper triangle set to -1e9).
    pub fn causal_mask(len: usize) -> Array2<f64> {
        Array2::from_shape_fn((len, len), |(i, j)| if j > i { MASK_NEG } else { 0.0 })
    }

    /// Reverse-mode pass from a 1 x 1 root. Parameter gradients are scaled by
    /// `seed` and accumulated into `sinks` (one store per parameter set).
    pub fn backward(&self, root: NodeId, seed: f64, sinks: &mut [GradStore]) {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Array2::from_elem((1, 1), seed));
        for n in (0..self.nodes.len()).rev() {
            let g = match grads[n].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[n].op {
                Op::Leaf => {
                    if let Value::Param { set, id } = &self.nodes[n].value {
                        sinks[*set].accumulate(*id, &g);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddBroadcastRow(a, row) => {
                    let rsum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *row, rsum);
                }
                Op::AddConst(a) => acc(&mut grads, *a, g),
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Matmul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatmulNT(a, b) => {
                    let da = g.dot(&self.value(*b));
                    let db = g.t().dot(&self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Relu(a) => {
                    let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads, *a, g * mask);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value(n);
                    let gy = &g * &y;
                    let rowsum = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let dx = &gy - &(&y * &rowsum);
                    acc(&mut grads, *a, dx);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (norm, _, sigma) = ln_forward(&self.value(*x));
                    let gain_v = self.value(*gain).to_owned();
                    let d = norm.ncols() as f64;
                    let dnorm = &g * &gain_v;
                    let m1 = dnorm.sum_axis(Axis(1)).insert_axis(Axis(1)) / d;
                    let m2 = (&dnorm * &norm).sum_axis(Axis(1)).insert_axis(Axis(1)) / d;
                    let dx = (&dnorm - &m1 - &(&norm * &m2)) / &sigma;
                    let dgain = (&g * &norm).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gain, dgain);
                    acc(&mut grads, *bias, dbias);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        let gp = g.slice(s![.., start..start + w]).to_owned();
                        acc(&mut grads, p, gp);
                        start += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let full = self.value(*a).raw_dim();
                    let mut da = Array2::zeros(full);
                    da.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, da);
                }
                Op::Dropout { x, mask } => {
                    acc(&mut grads, *x, g * mask);
                }
                Op::Embed { set, id, ids } => {
                    if sinks[*set].enabled() {
                        let table = self.sets[*set].get(*id);
                        let mut dt = Array2::zeros(table.raw_dim());
                        for (r, &tok) in ids.iter().enumerate() {
                            let mut row = dt.row_mut(tok);
                            row += &g.row(r);
                        }
                        sinks[*set].accumulate(*id, &dt);
                    }
                }
                Op::CeLossSum {
                    logits,
                    targets,
                    smoothing,
                } => {
                    let p = softmax_rows(&self.value(*logits));
                    let vocab = p.ncols() as f64;
                    let scale = g[(0, 0)];
                    let mut dl = p;
                    dl -= *smoothing / vocab;
                    for (r, &t) in targets.iter().enumerate() {
                        dl[(r, t)] -= 1.0 - *smoothing;
                    }
                    acc(&mut grads, *logits, dl * scale);
                }
                Op::SqDistSum { x, target } => {
                    let scale = 2.0 * g[(0, 0)];
                    let dx = (&self.value(*x) - target) * scale;
                    acc(&mut grads, *x, dx);
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], n: NodeId, g: Array2<f64>) {
    match &mut grads[n] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

/// Row-wise layer norm statistics: returns (normalized, mean, sigma) where
/// sigma = sqrt(biased variance + eps), mean/sigma as column vectors.
fn ln_forward(x: &ArrayView2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)).insert_axis(Axis(1)) / d;
    let centered = x - &mean;
    let var = centered.mapv(|c| c * c).sum_axis(Axis(1)).insert_axis(Axis(1)) / d;
    let sigma = var.mapv(|v| (v + LN_EPS).sqrt());
    let norm = &centered / &sigma;
    (norm, mean, sigma)
}

pub fn softmax_rows(x: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub fn log_softmax_rows(x: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}
