//! Multi-head cross-attention between pre-event queries and post-event keys/values.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub struct CrossAttentionOutput {
    /// `[B, N, D]`, heads concatenated along the last axis (no output projection).
    pub output: Var,
    /// `[B * heads, N, M]` attention weights; every row sums to one.
    pub weights: Var,
}

fn split_heads<T: Float>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let [b, n, d] = <[usize; 3]>::try_from(g.shape(x)).expect("rank 3");
    let x = g.reshape(x, &[b, n, heads, d / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, n, d / heads])
}

/// `softmax(Q K^T / sqrt(d_k)) V` with `Q = F_pre W_q`, `K = F_post W_k`,
/// `V = F_post W_v` and `d_k = D / heads`.
pub fn cross_attention<T: Float>(
    g: &mut Graph<T>,
    f_pre: Var,
    f_post: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    heads: usize,
) -> Result<CrossAttentionOutput> {
    let (ps, qs) = (g.shape(f_pre).to_vec(), g.shape(f_post).to_vec());
    let (&[b, n, d], &[b2, _, d2]) = (ps.as_slice(), qs.as_slice()) else {
        return Err(Error::Shape(format!(
            "cross-attention expects [batch, tokens, dim] inputs, got {ps:?} and {qs:?}"
        )));
    };
    if b != b2 || d != d2 {
        return Err(Error::Shape(format!("cross-attention inputs {ps:?} and {qs:?} disagree")));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("dimension {d} is not divisible by {heads} heads")));
    }
    let dk = d / heads;
    let q = g.linear(f_pre, w_q, None)?;
    let k = g.linear(f_post, w_k, None)?;
    let v = g.linear(f_post, w_v, None)?;
    let q = split_heads(g, q, heads)?;
    let q = g.scale(q, 1.0 / (dk as f64).sqrt());
    let k = split_heads(g, k, heads)?;
    let v = split_heads(g, v, heads)?;
    let logits = g.batch_matmul(q, k, true)?;
    let weights = g.softmax(logits);
    let out = g.batch_matmul(weights, v, false)?;
    let out = g.reshape(out, &[b, heads, n, dk])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let output = g.reshape(out, &[b, n, d])?;
    Ok(CrossAttentionOutput { output, weights })
}

/// Cross-attention with a residual connection from the pre-event tokens.
pub fn dual_swin_fuse<T: Float>(
    g: &mut Graph<T>,
    f_pre: Var,
    f_post: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    heads: usize,
) -> Result<CrossAttentionOutput> {
    let att = cross_attention(g, f_pre, f_post, w_q, w_k, w_v, heads)?;
    let output = g.add(f_pre, att.output)?;
    Ok(CrossAttentionOutput { output, weights: att.weights })
}

/// Evaluate [`cross_attention`] (or [`dual_swin_fuse`] when `residual`) on
/// plain tensors, returning `(output, weights)`.
pub fn cross_attention_values<T: Float>(
    f_pre: &Tensor<T>,
    f_post: &Tensor<T>,
    w: [&Tensor<T>; 3],
    heads: usize,
    residual: bool,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let a = g.constant(f_pre.clone());
    let b = g.constant(f_post.clone());
    let [q, k, v] = w.map(|t| g.constant(t.clone()));
    let out = if residual {
        dual_swin_fuse(&mut g, a, b, q, k, v, heads)?
    } else {
        cross_attention(&mut g, a, b, q, k, v, heads)?
    };
    Ok((g.value(out.output).clone(), g.value(out.weights).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(d: usize) -> Tensor<f64> {
        Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 })
    }

    #[test]
    fn two_token_closed_form() {
        let pre = Tensor::from_vec(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let post = Tensor::from_vec(&[1, 2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let i = eye(2);
        let (out, w) = cross_attention_values(&pre, &post, [&i, &i, &i], 1, false).unwrap();
        // Logits are diag(2/sqrt 2) and off-diagonal 0.
        let s = 2.0 / 2f64.sqrt();
        let p = s.exp() / (s.exp() + 1.0);
        let expect_w = [p, 1.0 - p, 1.0 - p, p];
        for (a, b) in w.data().iter().zip(expect_w) {
            assert!((a - b).abs() < 1e-15);
        }
        let expect_out = [2.0 * p, 2.0 * (1.0 - p), 2.0 * (1.0 - p), 2.0 * p];
        for (a, b) in out.data().iter().zip(expect_out) {
            assert!((a - b).abs() < 1e-14);
        }
        let (res, _) = cross_attention_values(&pre, &post, [&i, &i, &i], 1, true).unwrap();
        for ((r, o), p0) in res.data().iter().zip(out.data()).zip(pre.data()) {
            assert!((r - (o + p0)).abs() < 1e-15);
        }
    }

    #[test]
    fn single_token_returns_value_projection() {
        let pre = Tensor::from_vec(&[1, 1, 2], vec![0.3, -0.4]).unwrap();
        let post = Tensor::from_vec(&[1, 1, 2], vec![1.5, 2.5]).unwrap();
        let wv = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i = eye(2);
        let (out, w) = cross_attention_values(&pre, &post, [&i, &i, &wv], 2, false).unwrap();
        assert!(w.data().iter().all(|&v| v == 1.0));
        assert_eq!(out.data(), [1.5 + 7.5, 3.0 + 10.0]);
        let (res, _) = cross_attention_values(&pre, &post, [&i, &i, &wv], 1, true).unwrap();
        assert_eq!(res.data(), [9.0 + 0.3, 13.0 - 0.4]);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let pre = Tensor::from_fn(&[1, 3, 4], |i| (i as f64).sin());
        let post = Tensor::from_fn(&[1, 3, 4], |i| (i % 4) as f64);
        let i = eye(4);
        let (out, w) = cross_attention_values(&pre, &post, [&i, &i, &i], 2, false).unwrap();
        assert!(w.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        for row in out.data().chunks(4) {
            for (c, &v) in row.iter().enumerate() {
                assert!((v - c as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads_must_divide_dimension() {
        let x = Tensor::<f64>::zeros(&[1, 2, 6]);
        let i = eye(6);
        assert!(cross_attention_values(&x, &x, [&i, &i, &i], 4, false).is_err());
        assert!(cross_attention_values(&x, &x, [&i, &i, &i], 3, false).is_ok());
    }
}
