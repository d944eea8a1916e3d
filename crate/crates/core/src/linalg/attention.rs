use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Query/key/value projections of one attention head, each `D_l×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

impl AttentionWeights {
    pub fn zeros(dim: usize, head_dim: usize) -> Self {
        Self {
            wq: Tensor::zeros(&[dim, head_dim]),
            wk: Tensor::zeros(&[dim, head_dim]),
            wv: Tensor::zeros(&[dim, head_dim]),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.wq.cols()
    }

    pub fn bind(&self, g: &mut Graph) -> AttentionVars {
        AttentionVars {
            wq: g.param(self.wq.clone()),
            wk: g.param(self.wk.clone()),
            wv: g.param(self.wv.clone()),
        }
    }

    pub(crate) fn bind_const(&self, g: &mut Graph) -> AttentionVars {
        AttentionVars {
            wq: g.constant(self.wq.clone()),
            wk: g.constant(self.wk.clone()),
            wv: g.constant(self.wv.clone()),
        }
    }
}

/// Graph handles of an [`AttentionWeights`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// `sigmoid((X W_q)(Y W_k)ᵀ / √d) · (Y W_v)` with an elementwise sigmoid and no
/// row normalization. `queries` is `A×D_l`, `keys_values` is `B×D_l`.
pub fn sigmoid_attention_graph(
    g: &mut Graph,
    queries: Var,
    keys_values: Var,
    w: &AttentionVars,
) -> Result<Var> {
    let d = g.value(w.wq).cols();
    let q = g.matmul(queries, w.wq)?;
    let k = g.matmul(keys_values, w.wk)?;
    let v = g.matmul(keys_values, w.wv)?;
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    let gate = g.sigmoid(logits);
    g.matmul(gate, v)
}

pub fn sigmoid_attention(queries: &Tensor, keys_values: &Tensor, w: &AttentionWeights) -> Result<Tensor> {
    if queries.rank() != 2 || keys_values.rank() != 2 {
        return Err(Error::dims("sigmoid_attention", "queries and keys must be matrices"));
    }
    let dl = queries.cols();
    if keys_values.cols() != dl || w.wq.rows() != dl || w.wk.rows() != dl || w.wv.rows() != dl {
        return Err(Error::dims(
            "sigmoid_attention",
            format!(
                "queries {:?}, keys {:?}, W_q {:?}",
                queries.dims(),
                keys_values.dims(),
                w.wq.dims()
            ),
        ));
    }
    let mut g = Graph::new();
    let q = g.constant(queries.clone());
    let kv = g.constant(keys_values.clone());
    let vars = w.bind_const(&mut g);
    let out = sigmoid_attention_graph(&mut g, q, kv, &vars)?;
    Ok(g.value(out).clone())
}

/// Multi-head attention: one [`sigmoid_attention_graph`] per head, concatenated
/// along the feature axis in head order.
pub fn multi_head_graph(
    g: &mut Graph,
    queries: Var,
    keys_values: Var,
    heads: &[AttentionVars],
) -> Result<Var> {
    let outs = heads
        .iter()
        .map(|h| sigmoid_attention_graph(g, queries, keys_values, h))
        .collect::<Result<Vec<_>>>()?;
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    g.concat_cols(&outs)
}

pub fn multi_head_concat(heads: &[Tensor]) -> Result<Tensor> {
    if heads.is_empty() {
        return Err(Error::dims("multi_head_concat", "no heads"));
    }
    if heads.iter().any(|h| h.rank() != 2 || h.rows() != heads[0].rows()) {
        return Err(Error::dims("multi_head_concat", "heads differ in row count"));
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    Tensor::concat_cols(&refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_t(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(&[r, c], |_| rng.range(-1.0, 1.0))
    }

    /// Straight-line loops over the attention formula.
    fn loop_oracle(x: &Tensor, y: &Tensor, w: &AttentionWeights) -> Tensor {
        let (a, b, dl, d) = (x.rows(), y.rows(), x.cols(), w.wq.cols());
        let proj = |m: &Tensor, i: usize, wt: &Tensor, j: usize| (0..dl).map(|t| m.at(i, t) * wt.at(t, j)).sum::<f64>();
        Tensor::from_fn(&[a, d], |idx| {
            let (i, j) = (idx / d, idx % d);
            let mut s = 0.0;
            for kk in 0..b {
                let logit: f64 = (0..d).map(|e| proj(x, i, &w.wq, e) * proj(y, kk, &w.wk, e)).sum::<f64>() / (d as f64).sqrt();
                let sig = 1.0 / (1.0 + (-logit).exp());
                s += sig * proj(y, kk, &w.wv, j);
            }
            s
        })
    }

    #[test]
    fn zero_weights_give_zero() {
        let mut rng = Rng::new(1);
        let x = rand_t(&mut rng, 3, 4);
        let out = sigmoid_attention(&x, &x, &AttentionWeights::zeros(4, 2)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_hand_evaluation() {
        let one = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let w = AttentionWeights { wq: one.clone(), wk: one.clone(), wv: one };
        let q = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let out = sigmoid_attention(&q, &q, &w).unwrap();
        let want = 2.0 / (1.0 + (-4.0f64).exp());
        assert!((out.data()[0] - want).abs() < 1e-15);
        assert!((out.data()[0] - 1.9640).abs() < 1e-4);
    }

    #[test]
    fn random_matches_loop_oracle() {
        let mut rng = Rng::new(2);
        let x = rand_t(&mut rng, 3, 5);
        let y = rand_t(&mut rng, 4, 5);
        let w = AttentionWeights { wq: rand_t(&mut rng, 5, 2), wk: rand_t(&mut rng, 5, 2), wv: rand_t(&mut rng, 5, 2) };
        let got = sigmoid_attention(&x, &y, &w).unwrap();
        assert!(got.max_abs_diff(&loop_oracle(&x, &y, &w)) < 1e-12);
    }

    #[test]
    fn output_bounded_by_value_row_sums() {
        let mut rng = Rng::new(3);
        let x = rand_t(&mut rng, 4, 3);
        let y = rand_t(&mut rng, 6, 3);
        let w = AttentionWeights { wq: rand_t(&mut rng, 3, 2), wk: rand_t(&mut rng, 3, 2), wv: rand_t(&mut rng, 3, 2) };
        let out = sigmoid_attention(&x, &y, &w).unwrap();
        let v = y.matmul(&w.wv).unwrap();
        for j in 0..2 {
            let bound: f64 = (0..6).map(|k| v.at(k, j).abs()).sum();
            for i in 0..4 {
                assert!(out.at(i, j).abs() <= bound);
            }
        }
    }

    #[test]
    fn dim_mismatch() {
        let x = Tensor::zeros(&[2, 3]);
        let y = Tensor::zeros(&[2, 4]);
        assert!(sigmoid_attention(&x, &y, &AttentionWeights::zeros(3, 1)).is_err());
    }

    #[test]
    fn concat_heads() {
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(multi_head_concat(&[a.clone()]).unwrap(), a);
        assert_eq!(multi_head_concat(&[a, b]).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn concat_three_heads_index_oracle() {
        let mut rng = Rng::new(4);
        let heads: Vec<Tensor> = (0..3).map(|_| rand_t(&mut rng, 5, 2)).collect();
        let cat = multi_head_concat(&heads).unwrap();
        for i in 0..5 {
            for h in 0..3 {
                for j in 0..2 {
                    assert_eq!(cat.at(i, h * 2 + j), heads[h].at(i, j));
                }
            }
        }
    }
}
