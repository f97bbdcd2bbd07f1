//! Network building blocks composed from graph primitives.
//!
//! These stay out of the op set on purpose: their gradients fall out of the
//! chain rule, so only the primitives need hand-written reverse rules.

use super::{Graph, NodeId, TensorError};

/// Epsilon added to row-axis variance before the square root.
pub const STD_EPS: f64 = 1e-8;

/// Epsilon inside the batch-style normalization denominator.
pub const BN_EPS: f64 = 1e-5;

/// `x w + b` with `w: [in, out]`, `b: [1, out]`.
pub fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
    let y = g.matmul(x, w)?;
    g.add_rowvec(y, b)
}

/// Column-wise standard deviation over the row axis: `[n, m] -> [1, m]`,
/// computed as `sqrt(mean((x - mean)^2) + eps)`.
pub fn std_rows(g: &mut Graph, x: NodeId) -> Result<NodeId, TensorError> {
    let mu = g.mean_rows(x);
    let neg_mu = g.neg(mu);
    let centered = g.add_rowvec(x, neg_mu)?;
    let sq = g.mul(centered, centered)?;
    let var = g.mean_rows(sq);
    let var_eps = g.add_scalar(var, STD_EPS);
    Ok(g.sqrt(var_eps))
}

/// Batch-style normalization over the row (token) axis with affine output.
/// Statistics always come from the current rows; there is no running average.
pub fn batchnorm_rows(
    g: &mut Graph,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
) -> Result<NodeId, TensorError> {
    let mu = g.mean_rows(x);
    let neg_mu = g.neg(mu);
    let centered = g.add_rowvec(x, neg_mu)?;
    let sq = g.mul(centered, centered)?;
    let var = g.mean_rows(sq);
    let var_eps = g.add_scalar(var, BN_EPS);
    let std = g.sqrt(var_eps);
    let inv_std = g.recip(std);
    let normed = g.mul_rowvec(centered, inv_std)?;
    let scaled = g.mul_rowvec(normed, gamma)?;
    g.add_rowvec(scaled, beta)
}

/// Scaled dot-product attention: `softmax(q k^T / sqrt(d)) v`.
pub fn attention(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<NodeId, TensorError> {
    let d = g.value(q).cols();
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = g.softmax_rows(scaled);
    g.matmul(attn, v)
}

/// Projection weights for one multi-head attention block.
pub struct MhaNodes {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

/// Multi-head attention over already-projected token rows. Queries attend to
/// `kv`; heads split the feature axis evenly.
pub fn multihead_attention(
    g: &mut Graph,
    x_q: NodeId,
    x_kv: NodeId,
    p: &MhaNodes,
    heads: usize,
) -> Result<NodeId, TensorError> {
    let m = g.value(x_q).cols();
    assert_eq!(m % heads, 0, "feature dim {} not divisible by {}", m, heads);
    let dh = m / heads;
    let q = linear(g, x_q, p.wq, p.bq)?;
    let k = linear(g, x_kv, p.wk, p.bk)?;
    let v = linear(g, x_kv, p.wv, p.bv)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, s, e)?;
        let kh = g.slice_cols(k, s, e)?;
        let vh = g.slice_cols(v, s, e)?;
        outs.push(attention(g, qh, kh, vh)?);
    }
    let cat = g.concat_cols(&outs)?;
    linear(g, cat, p.wo, p.bo)
}

/// Draw an inverted-dropout mask: entries are `0` with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn dropout_mask<R: rand::Rng>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
    let keep = 1.0 - rate;
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / keep })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn std_of_constant_rows_is_sqrt_eps() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![2.0, -1.0], vec![2.0, -1.0]]));
        let s = std_rows(&mut g, x).unwrap();
        for v in g.value(s).data() {
            assert!((v - STD_EPS.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn single_row_std_stays_finite() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.3, 0.7, -0.1]]));
        let s = std_rows(&mut g, x).unwrap();
        assert!(g.value(s).all_finite());
    }

    #[test]
    fn batchnorm_output_is_standardized() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[
            vec![1.0, 10.0],
            vec![2.0, 20.0],
            vec![3.0, 30.0],
            vec![4.0, 40.0],
        ]));
        let gamma = g.constant(Tensor::from_rows(&[vec![1.0, 1.0]]));
        let beta = g.constant(Tensor::from_rows(&[vec![0.0, 0.0]]));
        let y = batchnorm_rows(&mut g, x, gamma, beta).unwrap();
        let t = g.value(y);
        for j in 0..2 {
            let mean: f64 = (0..4).map(|i| t.at(i, j)).sum::<f64>() / 4.0;
            let var: f64 = (0..4).map(|i| (t.at(i, j) - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn dropout_mask_is_seeded_and_inverted() {
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut b = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let ma = dropout_mask(100, 0.1, &mut a);
        let mb = dropout_mask(100, 0.1, &mut b);
        assert_eq!(ma, mb);
        for v in &ma {
            assert!(*v == 0.0 || (*v - 1.0 / 0.9).abs() < 1e-15);
        }
    }
}
