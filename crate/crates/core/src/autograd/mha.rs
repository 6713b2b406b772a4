use crate::autograd::{Tape, TensorError, Var};
use crate::scalar::Scalar;

/// Projection matrices of one multi-head attention block, each `[d_model, d_model]`.
///
/// Column block `i` (width `d_model / heads`) of `w_q`, `w_k` and `w_v` is the
/// per-head projection of head `i`.
#[derive(Clone, Copy, Debug)]
pub struct MhaWeights {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct MhaOutput {
    /// Same leading shape as the queries, last axis `d_model`.
    pub output: Var,
    /// Attention weights `[batch, heads, t_q, t_k]`; rows sum to one.
    pub attention: Var,
}

fn split_heads<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    batch: usize,
    t: usize,
    heads: usize,
    dk: usize,
) -> Result<Var, TensorError> {
    let x = tape.reshape(x, &[batch, t, heads, dk])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[batch * heads, t, dk])
}

/// Scaled dot-product multi-head attention.
///
/// Queries are `[t_q, d]` or `[batch, t_q, d]`; keys and values share their
/// sequence length. Every head attends with `softmax(q kᵀ / √d_k) v`; heads are
/// concatenated and mapped through `w_o`.
pub fn mha<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    weights: &MhaWeights,
    heads: usize,
) -> Result<MhaOutput, TensorError> {
    let sq = tape.shape(q).to_vec();
    let sk = tape.shape(k).to_vec();
    let sv = tape.shape(v).to_vec();
    let unbatched = sq.len() == 2;
    let (batch, tq, d) = match sq.as_slice() {
        [t, d] => (1, *t, *d),
        [b, t, d] => (*b, *t, *d),
        _ => {
            return Err(TensorError::Shape {
                op: "mha",
                detail: format!("queries {sq:?}"),
            })
        }
    };
    let tk = sk[sk.len() - 2];
    let kv_ok = sk.len() == sq.len() && sk == sv && sk[sk.len() - 1] == d && (unbatched || sk[0] == batch);
    if heads == 0 || d % heads != 0 || !kv_ok {
        return Err(TensorError::Shape {
            op: "mha",
            detail: format!("q {sq:?}, k {sk:?}, v {sv:?}, heads {heads}"),
        });
    }
    for w in [weights.w_q, weights.w_k, weights.w_v, weights.w_o] {
        if tape.shape(w) != [d, d] {
            return Err(TensorError::Shape {
                op: "mha",
                detail: format!("projection {:?}, expected [{d}, {d}]", tape.shape(w)),
            });
        }
    }
    let dk = d / heads;
    let qp = tape.linear(q, weights.w_q, None)?;
    let kp = tape.linear(k, weights.w_k, None)?;
    let vp = tape.linear(v, weights.w_v, None)?;
    let qh = split_heads(tape, qp, batch, tq, heads, dk)?;
    let kh = split_heads(tape, kp, batch, tk, heads, dk)?;
    let vh = split_heads(tape, vp, batch, tk, heads, dk)?;
    let scores = tape.batch_matmul(qh, kh, true)?;
    let scores = tape.scale(scores, T::one() / T::lit(dk as f64).sqrt())?;
    let attn = tape.softmax(scores, 2)?;
    let ctx = tape.batch_matmul(attn, vh, false)?;
    let ctx = tape.reshape(ctx, &[batch, heads, tq, dk])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[batch, tq, d])?;
    let mut output = tape.linear(ctx, weights.w_o, None)?;
    if unbatched {
        output = tape.reshape(output, &[tq, d])?;
    }
    let attention = tape.reshape(attn, &[batch, heads, tq, tk])?;
    Ok(MhaOutput { output, attention })
}
