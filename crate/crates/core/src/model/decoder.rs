//! Cross-attention decoder blocks.

use super::params::BlockParams;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Var};

/// Runs `blocks` in order. Each block is
/// `q ← LN(q + Attn(q, f)·W_oᵀ)` then `q ← LN(q + GELU(q·W_inᵀ)·W_outᵀ)`.
/// Queries attend only to `f_tilde`; there is no self-attention.
pub fn decode_context(
    tape: &mut Tape,
    store: &ParamStore,
    queries: Var,
    f_tilde: Var,
    blocks: &[BlockParams],
    heads: usize,
) -> Result<Var> {
    let d = tape.value(queries).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
    }
    let d_head = d / heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut q = queries;
    for b in blocks {
        let p = |tape: &mut Tape, id| tape.param(store, id);
        let (w_q, w_k, w_v, w_o) = (p(tape, b.w_q)?, p(tape, b.w_k)?, p(tape, b.w_v)?, p(tape, b.w_o)?);
        let qq = tape.matmul_t(q, w_q)?;
        let kk = tape.matmul_t(f_tilde, w_k)?;
        let vv = tape.matmul_t(f_tilde, w_v)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (qq, kk, vv)
            } else {
                let (s, e) = (h * d_head, (h + 1) * d_head);
                (
                    tape.slice_cols(qq, s, e)?,
                    tape.slice_cols(kk, s, e)?,
                    tape.slice_cols(vv, s, e)?,
                )
            };
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax_rows(scores)?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let o = tape.matmul_t(o, w_o)?;
        let r = tape.add(q, o)?;
        let (g1, b1) = (p(tape, b.ln1_gain)?, p(tape, b.ln1_bias)?);
        q = tape.layer_norm(r, g1, b1)?;

        let (w_in, w_out) = (p(tape, b.ffn_in)?, p(tape, b.ffn_out)?);
        let hdn = tape.matmul_t(q, w_in)?;
        let hdn = tape.gelu(hdn)?;
        let ffn = tape.matmul_t(hdn, w_out)?;
        let r = tape.add(q, ffn)?;
        let (g2, b2) = (p(tape, b.ln2_gain)?, p(tape, b.ln2_bias)?);
        q = tape.layer_norm(r, g2, b2)?;
    }
    Ok(q)
}

/// Attention weights of the first block, exposed for inspection.
pub fn first_block_attention(
    tape: &mut Tape,
    store: &ParamStore,
    queries: Var,
    f_tilde: Var,
    block: &BlockParams,
) -> Result<Var> {
    let d = tape.value(queries).cols();
    let w_q = tape.param(store, block.w_q)?;
    let w_k = tape.param(store, block.w_k)?;
    let qq = tape.matmul_t(queries, w_q)?;
    let kk = tape.matmul_t(f_tilde, w_k)?;
    let s = tape.matmul_t(qq, kk)?;
    let s = tape.scale(s, 1.0 / (d as f64).sqrt())?;
    tape.softmax_rows(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradients, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize, d_ff: usize, tag: usize) -> BlockParams {
        let mut u = |n: &str, r, c| store.insert_uniform(format!("b{tag}.{n}"), r, c, rng).unwrap();
        let (w_q, w_k, w_v, w_o) = (u("w_q", d, d), u("w_k", d, d), u("w_v", d, d), u("w_o", d, d));
        let (ffn_in, ffn_out) = (u("ffn_in", d_ff, d), u("ffn_out", d, d_ff));
        // perturbed away from 1/0 so the gradient check exercises them
        let mut ln = |n: &str, base: f64| {
            let v = (0..d).map(|_| base + rng.random_range(-0.3..0.3)).collect();
            store.insert(format!("b{tag}.{n}"), Tensor::vector(v)).unwrap()
        };
        BlockParams {
            w_q,
            w_k,
            w_v,
            w_o,
            ffn_in,
            ffn_out,
            ln1_gain: ln("ln1_gain", 1.0),
            ln1_bias: ln("ln1_bias", 0.0),
            ln2_gain: ln("ln2_gain", 1.0),
            ln2_bias: ln("ln2_bias", 0.0),
        }
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_key_gets_full_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let b = block(&mut store, &mut rng, 4, 8, 0);
        for seed in 0..3 {
            let mut r2 = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let q = tape.constant(rand_mat(&mut r2, 3, 4)).unwrap();
            let f = tape.constant(rand_mat(&mut r2, 1, 4)).unwrap();
            let a = first_block_attention(&mut tape, &store, q, f, &b).unwrap();
            assert!(tape.value(a).data().iter().all(|&w| w == 1.0));
        }
    }

    #[test]
    fn identical_keys_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let b = block(&mut store, &mut rng, 4, 8, 0);
        let row: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let q = tape.constant(rand_mat(&mut rng, 2, 4)).unwrap();
        let f = tape.constant(Tensor::from_rows(&[row.clone(), row]).unwrap()).unwrap();
        let a = first_block_attention(&mut tape, &store, q, f, &b).unwrap();
        for &w in tape.value(a).data() {
            assert!((w - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        for heads in [1, 2] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut store = ParamStore::new();
            let blocks: Vec<_> = (0..2).map(|t| block(&mut store, &mut rng, 4, 6, t)).collect();
            let q0 = rand_mat(&mut rng, 3, 4);
            let f0 = rand_mat(&mut rng, 5, 4);
            let weights = rand_mat(&mut rng, 3, 4);
            let report = check_gradients(&mut store, 1e-5, 1e-4, |s| {
                let mut tape = Tape::new();
                let q = tape.constant(q0.clone())?;
                let f = tape.constant(f0.clone())?;
                let out = decode_context(&mut tape, s, q, f, &blocks, heads)?;
                let w = tape.constant(weights.clone())?;
                let m = tape.mul(out, w)?;
                let loss = tape.sum(m)?;
                Ok((tape, loss))
            })
            .unwrap();
            assert!(report.passed, "heads={heads}: {report:?}");
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let b = block(&mut store, &mut rng, 4, 8, 0);
        let mut tape = Tape::new();
        let q = tape.constant(rand_mat(&mut rng, 2, 4)).unwrap();
        let f = tape.constant(rand_mat(&mut rng, 2, 4)).unwrap();
        assert!(decode_context(&mut tape, &store, q, f, &[b], 3).is_err());
    }
}
