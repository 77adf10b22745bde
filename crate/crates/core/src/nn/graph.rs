//! Minimal reverse-mode autodiff over `ndarray` matrices.
//!
//! A [`Graph`] is built eagerly (each op computes its value on creation)
//! and borrows the model's parameter tensors rather than copying them;
//! `backward` walks the tape in reverse and harvests per-parameter
//! gradients. Everything is `f64`, which keeps finite-difference checks
//! tight.

use ndarray::{s, Array2, Axis};

use super::model::Param;

pub type NodeId = usize;

enum Slot {
    Stored(Array2<f64>),
    Param(usize),
}

enum Op {
    Leaf,
    /// a · b
    Matmul(NodeId, NodeId),
    /// a · bᵀ
    MatmulTB(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// matrix + broadcast row vector (1×D)
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    /// matrix + constant (positional encodings, attention masks)
    AddConst(NodeId),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    GatherRows { table: NodeId, rows: Vec<usize> },
    Dropout { x: NodeId, mask: Array2<f64> },
    /// Sum over rows of `logsumexp(row) − logsumexp(row[targets])`; the
    /// marginal negative log-likelihood of the allowed-action sets.
    MarginalNll { logits: NodeId, targets: Vec<Vec<usize>> },
    /// Sum of 1×1 scalars.
    AddN(Vec<NodeId>),
}

struct Node {
    slot: Slot,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p [Param],
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Param]) -> Self {
        Graph { params, nodes: Vec::with_capacity(1024) }
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        match &self.nodes[id].slot {
            Slot::Stored(v) => v,
            Slot::Param(p) => &self.params[*p].value,
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { slot: Slot::Stored(value), op });
        self.nodes.len() - 1
    }

    /// Leaf referencing a model parameter; gradients are harvested for it.
    pub fn param(&mut self, index: usize) -> NodeId {
        self.nodes.push(Node { slot: Slot::Param(index), op: Op::Leaf });
        self.nodes.len() - 1
    }

    /// Leaf holding a constant with no gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::Matmul(a, b))
    }

    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatmulTB(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, constant: &Array2<f64>) -> NodeId {
        let value = self.value(a) + constant;
        self.push(value, Op::AddConst(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut value = Array2::zeros(xv.raw_dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (j, &v) in row.iter().enumerate() {
                value[[i, j]] = (v - mean) * inv;
            }
        }
        let gv = self.value(gain);
        let bv = self.value(bias);
        for mut row in value.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * gv[[0, j]] + bv[[0, j]];
            }
        }
        self.push(value, Op::LayerNorm { x, gain, bias })
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut value = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in &parts {
            let v = self.value(p);
            value.slice_mut(s![.., at..at + v.ncols()]).assign(v);
            at += v.ncols();
        }
        self.push(value, Op::ConcatCols(parts))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        let cols = self.value(parts[0]).ncols();
        let rows: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut value = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in &parts {
            let v = self.value(p);
            value.slice_mut(s![at..at + v.nrows(), ..]).assign(v);
            at += v.nrows();
        }
        self.push(value, Op::ConcatRows(parts))
    }

    pub fn slice_rows(&mut self, a: NodeId, from: usize, to: usize) -> NodeId {
        let value = self.value(a).slice(s![from..to, ..]).to_owned();
        self.push(value, Op::SliceRows(a, from, to))
    }

    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> NodeId {
        let value = self.value(a).slice(s![.., from..to]).to_owned();
        self.push(value, Op::SliceCols(a, from, to))
    }

    pub fn gather_rows(&mut self, table: NodeId, rows: Vec<usize>) -> NodeId {
        let tv = self.value(table);
        let mut value = Array2::zeros((rows.len(), tv.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).assign(&tv.row(r));
        }
        self.push(value, Op::GatherRows { table, rows })
    }

    pub fn dropout(&mut self, x: NodeId, mask: Array2<f64>) -> NodeId {
        let value = self.value(x) * &mask;
        self.push(value, Op::Dropout { x, mask })
    }

    /// Sum over rows of the negative log marginal probability of each
    /// row's allowed target set. Returns a 1×1 node.
    pub fn marginal_nll(&mut self, logits: NodeId, targets: Vec<Vec<usize>>) -> NodeId {
        let lv = self.value(logits);
        debug_assert_eq!(lv.nrows(), targets.len());
        let mut total = 0.0;
        for (row, target) in lv.rows().into_iter().zip(&targets) {
            let all = logsumexp(row.iter().cloned());
            let hit = logsumexp(target.iter().map(|&t| row[t]));
            total += all - hit;
        }
        let value = Array2::from_elem((1, 1), total);
        self.push(value, Op::MarginalNll { logits, targets })
    }

    pub fn add_n(&mut self, parts: Vec<NodeId>) -> NodeId {
        let total: f64 = parts.iter().map(|&p| self.value(p)[[0, 0]]).sum();
        let value = Array2::from_elem((1, 1), total);
        self.push(value, Op::AddN(parts))
    }

    /// Reverse pass from a 1×1 loss node; returns gradients indexed like
    /// the parameter slice.
    pub fn backward(&self, loss: NodeId) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=loss).rev() {
            let Some(grad) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(grad); // put back for harvesting
                    continue;
                }
                Op::Matmul(a, b) => {
                    let ga = grad.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&grad);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatmulTB(a, b) => {
                    let ga = grad.dot(self.value(*b));
                    let gb = grad.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, grad.clone());
                    accumulate(&mut grads, *b, grad);
                }
                Op::AddRow(a, row) => {
                    let grow = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, grad);
                    accumulate(&mut grads, *row, grow);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, &grad * *c),
                Op::AddConst(a) => accumulate(&mut grads, *a, grad),
                Op::Gelu(a) => {
                    let ga = self.value(*a).mapv(gelu_grad) * &grad;
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let sv = self.value(id);
                    let mut ga = Array2::zeros(sv.raw_dim());
                    for ((mut out, s_row), g_row) in
                        ga.rows_mut().into_iter().zip(sv.rows()).zip(grad.rows())
                    {
                        let dot: f64 = s_row.iter().zip(g_row.iter()).map(|(s, g)| s * g).sum();
                        for ((o, &s), &g) in out.iter_mut().zip(s_row.iter()).zip(g_row.iter()) {
                            *o = s * (g - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let d = xv.ncols() as f64;
                    let mut gx = Array2::zeros(xv.raw_dim());
                    let mut ggain = Array2::zeros((1, xv.ncols()));
                    let mut gbias = Array2::zeros((1, xv.ncols()));
                    for (i, row) in xv.rows().into_iter().enumerate() {
                        let mean = row.mean().unwrap();
                        let var = row.mapv(|v| (v - mean).powi(2)).mean().unwrap();
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                        let gy: Vec<f64> = grad.row(i).to_vec();
                        let mut gxhat = vec![0.0; xhat.len()];
                        for j in 0..xhat.len() {
                            ggain[[0, j]] += gy[j] * xhat[j];
                            gbias[[0, j]] += gy[j];
                            gxhat[j] = gy[j] * gv[[0, j]];
                        }
                        let mean_gxhat: f64 = gxhat.iter().sum::<f64>() / d;
                        let mean_gxhat_xhat: f64 =
                            gxhat.iter().zip(&xhat).map(|(g, h)| g * h).sum::<f64>() / d;
                        for j in 0..xhat.len() {
                            gx[[i, j]] =
                                inv * (gxhat[j] - mean_gxhat - xhat[j] * mean_gxhat_xhat);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, ggain);
                    accumulate(&mut grads, *bias, gbias);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        let gp = grad.slice(s![.., at..at + w]).to_owned();
                        accumulate(&mut grads, p, gp);
                        at += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        let gp = grad.slice(s![at..at + h, ..]).to_owned();
                        accumulate(&mut grads, p, gp);
                        at += h;
                    }
                }
                Op::SliceRows(a, from, to) => {
                    let av = self.value(*a);
                    let mut ga = Array2::zeros(av.raw_dim());
                    ga.slice_mut(s![*from..*to, ..]).assign(&grad);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, from, to) => {
                    let av = self.value(*a);
                    let mut ga = Array2::zeros(av.raw_dim());
                    ga.slice_mut(s![.., *from..*to]).assign(&grad);
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows { table, rows } => {
                    let tv = self.value(*table);
                    let mut gt = Array2::zeros(tv.raw_dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = gt.row_mut(r);
                        dst += &grad.row(i);
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::Dropout { x, mask } => {
                    accumulate(&mut grads, *x, &grad * mask);
                }
                Op::MarginalNll { logits, targets } => {
                    let upstream = grad[[0, 0]];
                    let lv = self.value(*logits);
                    let mut gl = Array2::zeros(lv.raw_dim());
                    for (i, (row, target)) in lv.rows().into_iter().zip(targets).enumerate() {
                        let all = logsumexp(row.iter().cloned());
                        let hit = logsumexp(target.iter().map(|&t| row[t]));
                        for (j, &z) in row.iter().enumerate() {
                            gl[[i, j]] = upstream * (z - all).exp();
                        }
                        for &t in target {
                            gl[[i, t]] -= upstream * (row[t] - hit).exp();
                        }
                    }
                    accumulate(&mut grads, *logits, gl);
                }
                Op::AddN(parts) => {
                    for &p in parts {
                        accumulate(&mut grads, p, grad.clone());
                    }
                }
            }
        }

        let mut out: Vec<Option<Array2<f64>>> =
            (0..self.params.len()).map(|_| None).collect();
        for (node, grad) in self.nodes.iter().zip(grads.into_iter()) {
            if let (Slot::Param(p), Some(g)) = (&node.slot, grad) {
                match &mut out[*p] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, grad: Array2<f64>) {
    match &mut grads[id] {
        Some(acc) => *acc += &grad,
        slot => *slot = Some(grad),
    }
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// tanh-approximation GELU; smooth everywhere, which keeps the
/// finite-difference gradient check honest.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x.powi(3))).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x.powi(3));
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise stable softmax of a plain matrix (no graph).
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise stable log-softmax of a plain slice.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let lse = logsumexp(row.iter().cloned());
    row.iter().map(|&v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::ParamGroup;
    use ndarray::array;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn params_from(values: Vec<Array2<f64>>) -> Vec<Param> {
        values
            .into_iter()
            .enumerate()
            .map(|(i, value)| Param {
                name: format!("p{i}"),
                group: ParamGroup::Decoder,
                value,
            })
            .collect()
    }

    /// Central-difference check of an arbitrary scalar graph function.
    fn gradcheck(
        params: &mut Vec<Param>,
        build: impl Fn(&mut Graph) -> NodeId,
    ) {
        let loss = |params: &Vec<Param>| {
            let mut g = Graph::new(params);
            let node = build(&mut g);
            g.value(node)[[0, 0]]
        };
        let analytic = {
            let mut g = Graph::new(params);
            let node = build(&mut g);
            g.backward(node)
        };
        let h = 1e-6;
        for p in 0..params.len() {
            let shape = params[p].value.raw_dim();
            for i in 0..shape[0] {
                for j in 0..shape[1] {
                    let orig = params[p].value[[i, j]];
                    params[p].value[[i, j]] = orig + h;
                    let up = loss(params);
                    params[p].value[[i, j]] = orig - h;
                    let down = loss(params);
                    params[p].value[[i, j]] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let a = analytic[p].as_ref().map_or(0.0, |g| g[[i, j]]);
                    let denom = a.abs().max(numeric.abs()).max(1e-6);
                    assert!(
                        ((a - numeric) / denom).abs() < 1e-5,
                        "param {p} [{i},{j}]: analytic {a} vs numeric {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn matmul_chain_gradients() {
        let mut rng = StdRng::seed_from_u64(1);
        let mut params = params_from(vec![
            Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0)),
            Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0)),
            Array2::from_shape_fn((1, 2), |_| rng.gen_range(-1.0..1.0)),
        ]);
        gradcheck(&mut params, |g| {
            let a = g.param(0);
            let b = g.param(1);
            let bias = g.param(2);
            let x = g.matmul(a, b);
            let x = g.add_row(x, bias);
            let x = g.gelu(x);
            let sm = g.softmax_rows(x);
            g.marginal_nll(sm, vec![vec![0], vec![1], vec![0, 1]])
        });
    }

    #[test]
    fn layernorm_and_attention_style_gradients() {
        let mut rng = StdRng::seed_from_u64(2);
        let mut params = params_from(vec![
            Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0)), // x
            Array2::from_shape_fn((1, 6), |_| rng.gen_range(0.5..1.5)),  // gain
            Array2::from_shape_fn((1, 6), |_| rng.gen_range(-0.1..0.1)), // bias
            Array2::from_shape_fn((6, 6), |_| rng.gen_range(-0.5..0.5)), // wq
            Array2::from_shape_fn((6, 6), |_| rng.gen_range(-0.5..0.5)), // wk
        ]);
        gradcheck(&mut params, |g| {
            let x = g.param(0);
            let gain = g.param(1);
            let bias = g.param(2);
            let wq = g.param(3);
            let wk = g.param(4);
            let normed = g.layer_norm(x, gain, bias);
            let q = g.matmul(normed, wq);
            let k = g.matmul(normed, wk);
            let scores = g.matmul_tb(q, k);
            let scores = g.scale(scores, 1.0 / 6.0f64.sqrt());
            let attn = g.softmax_rows(scores);
            let mixed = g.matmul(attn, normed);
            let top = g.slice_rows(mixed, 1, 3);
            g.marginal_nll(top, vec![vec![2], vec![0, 3]])
        });
    }

    #[test]
    fn gather_concat_gradients() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut params = params_from(vec![
            Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0)), // table
            Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0)),
        ]);
        gradcheck(&mut params, |g| {
            let table = g.param(0);
            let w = g.param(1);
            let gathered = g.gather_rows(table, vec![0, 2, 2, 4]);
            let projected = g.matmul(gathered, w);
            let a = g.slice_rows(projected, 0, 2);
            let b = g.slice_rows(projected, 2, 4);
            let joined = g.concat_rows(vec![a, b]);
            let head0 = g.slice_cols(joined, 0, 2);
            let head1 = g.slice_cols(joined, 2, 3);
            let wide = g.concat_cols(vec![head0, head1, projected]);
            g.marginal_nll(wide, vec![vec![0], vec![3], vec![5], vec![1, 2]])
        });
    }

    #[test]
    fn dropout_masks_gradients() {
        let params = params_from(vec![array![[1.0, 2.0], [3.0, 4.0]]]);
        let mask = array![[2.0, 0.0], [0.0, 2.0]];
        let mut g = Graph::new(&params);
        let x = g.param(0);
        let dropped = g.dropout(x, mask);
        let loss = g.marginal_nll(dropped, vec![vec![0], vec![1]]);
        let grads = g.backward(loss);
        let gx = grads[0].as_ref().unwrap();
        assert_eq!(gx[[0, 1]], 0.0);
        assert_eq!(gx[[1, 0]], 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let params = params_from(vec![array![[1.0, -2.0, 0.5], [100.0, 100.0, -100.0]]]);
        let mut g = Graph::new(&params);
        let x = g.param(0);
        let sm = g.softmax_rows(x);
        for row in g.value(sm).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn marginal_nll_matches_manual_value() {
        // Single row, logits [a, b], target {0}: loss = log(e^a+e^b) − a.
        let params = params_from(vec![array![[1.0, 2.0]]]);
        let mut g = Graph::new(&params);
        let x = g.param(0);
        let loss = g.marginal_nll(x, vec![vec![0]]);
        let expected = (1.0f64.exp() + 2.0f64.exp()).ln() - 1.0;
        assert!((g.value(loss)[[0, 0]] - expected).abs() < 1e-12);
        // Full target set is a free ride.
        let mut g2 = Graph::new(&params);
        let x2 = g2.param(0);
        let loss2 = g2.marginal_nll(x2, vec![vec![0, 1]]);
        assert!(g2.value(loss2)[[0, 0]].abs() < 1e-12);
    }
}
