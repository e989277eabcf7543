//! Constant decoder inputs derived from frozen tensors: the pooled visual
//! vector, query seeds and the masked feature map.

use serde::{Deserialize, Serialize};

use crate::data::RleMask;
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

/// How `ẑ` is reduced to a single visual vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Mean,
    Max,
    /// Row with the highest inner product with the object embedding.
    Obj,
    /// Row with the highest mean inner product with the attribute embeddings.
    Att,
    /// Average of the `obj` and `att` rows.
    AttObj,
}

/// Index of the first row maximising `score`.
fn argmax_row(z_hat: &Tensor, score: impl Fn(&[f64]) -> f64) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for k in 0..z_hat.rows() {
        let s = score(z_hat.row(k));
        if s > best_score {
            best_score = s;
            best = k;
        }
    }
    best
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn obj_row(z_hat: &Tensor, obj_emb: &[f64]) -> usize {
    argmax_row(z_hat, |r| dot(r, obj_emb))
}

pub fn att_row(z_hat: &Tensor, attr_embs: &Tensor) -> usize {
    // mean_i <t_i, z_k> = <mean_i t_i, z_k>
    let n = attr_embs.rows().max(1) as f64;
    let mut mean = vec![0.0; attr_embs.cols()];
    for i in 0..attr_embs.rows() {
        for (m, v) in mean.iter_mut().zip(attr_embs.row(i)) {
            *m += v / n;
        }
    }
    argmax_row(z_hat, |r| dot(r, &mean))
}

pub fn pool_qformer(
    z_hat: &Tensor,
    obj_emb: &[f64],
    attr_embs: &Tensor,
    mode: PoolMode,
) -> Result<Vec<f64>> {
    let (n_z, d_q) = z_hat.expect_matrix("pool_qformer")?;
    if n_z == 0 {
        return Err(Error::shape("pool_qformer", "z_hat has no rows"));
    }
    if obj_emb.len() != d_q || attr_embs.cols() != d_q {
        return Err(Error::shape(
            "pool_qformer",
            format!(
                "z_hat dim {d_q}, object dim {}, attribute dim {}",
                obj_emb.len(),
                attr_embs.cols()
            ),
        ));
    }
    Ok(match mode {
        PoolMode::Mean => (0..d_q)
            .map(|c| (0..n_z).map(|k| z_hat.get2(k, c)).sum::<f64>() / n_z as f64)
            .collect(),
        PoolMode::Max => (0..d_q)
            .map(|c| {
                (0..n_z)
                    .map(|k| z_hat.get2(k, c))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect(),
        PoolMode::Obj => z_hat.row(obj_row(z_hat, obj_emb)).to_vec(),
        PoolMode::Att => z_hat.row(att_row(z_hat, attr_embs)).to_vec(),
        PoolMode::AttObj => {
            let (a, o) = (att_row(z_hat, attr_embs), obj_row(z_hat, obj_emb));
            z_hat
                .row(a)
                .iter()
                .zip(z_hat.row(o))
                .map(|(x, y)| 0.5 * (x + y))
                .collect()
        }
    })
}

/// `[seed_i ; v]` for every seed row.
pub fn query_inputs(seeds: &Tensor, v: &[f64]) -> Result<Tensor> {
    let (n, d_q) = seeds.expect_matrix("query_inputs")?;
    if v.len() != d_q {
        return Err(Error::shape(
            "init_queries",
            format!("visual vector has {} dims, seeds have {d_q}", v.len()),
        ));
    }
    let tiled = Tensor::matrix(n, d_q, v.repeat(n))?;
    seeds.concat_cols(&tiled)
}

/// Projects `[seed_i ; v]` through `query_proj` (`[d × 2·d_q]`) on the tape.
pub fn init_queries(
    tape: &mut Tape,
    store: &ParamStore,
    seeds: &Tensor,
    v: &[f64],
    query_proj: ParamId,
) -> Result<Var> {
    let x = tape.constant(query_inputs(seeds, v)?)?;
    let w = tape.param(store, query_proj)?;
    tape.matmul_t(x, w)
}

/// Query matrix without recording, for inspection and allocation checks.
pub fn init_queries_tensor(seeds: &Tensor, v: &[f64], query_proj: &Tensor) -> Result<Tensor> {
    query_inputs(seeds, v)?.matmul_t(query_proj)
}

/// Area-average resize of a binary grid to `h × w`, thresholded at 0.5
/// (exact halves become 1). Row-major output.
pub fn resize_mask(bits: &[bool], src_h: usize, src_w: usize, h: usize, w: usize) -> Result<Vec<bool>> {
    if bits.len() != src_h * src_w || src_h == 0 || src_w == 0 {
        return Err(Error::shape(
            "resize_mask",
            format!("{} bits for a {src_h}x{src_w} grid", bits.len()),
        ));
    }
    // Work in units where a source pixel spans h (rows) or w (cols) and a
    // target cell spans src_h or src_w, so overlaps are integers.
    let overlap = |src: usize, dst: usize, src_len: usize, dst_len: usize| -> usize {
        let (s0, s1) = (src * dst_len, (src + 1) * dst_len);
        let (d0, d1) = (dst * src_len, (dst + 1) * src_len);
        s1.min(d1).saturating_sub(s0.max(d0))
    };
    let mut out = Vec::with_capacity(h * w);
    for a in 0..h {
        let rows: Vec<(usize, usize)> = (0..src_h)
            .map(|r| (r, overlap(r, a, src_h, h)))
            .filter(|&(_, o)| o > 0)
            .collect();
        for b in 0..w {
            let mut covered = 0usize;
            for c in 0..src_w {
                let oc = overlap(c, b, src_w, w);
                if oc == 0 {
                    continue;
                }
                for &(r, or) in &rows {
                    if bits[r * src_w + c] {
                        covered += or * oc;
                    }
                }
            }
            // cell area is src_h * src_w in these units
            out.push(2 * covered >= src_h * src_w);
        }
    }
    Ok(out)
}

/// `f_crop ⊙ resize(m)`: zeroes feature rows whose cell falls outside the mask.
pub fn mask_feature_map(f_crop: &Tensor, mask: &RleMask, h: usize, w: usize) -> Result<Tensor> {
    let (rows, cols) = f_crop.expect_matrix("mask_feature_map")?;
    if rows != h * w {
        return Err(Error::shape(
            "mask_feature_map",
            format!("{rows} feature rows for a {h}x{w} grid"),
        ));
    }
    let bits = mask.decode()?;
    let keep = resize_mask(&bits, mask.height, mask.width, h, w)?;
    let mut out = f_crop.clone();
    for (cell, &k) in keep.iter().enumerate() {
        if !k {
            out.row_mut(cell).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    debug_assert_eq!(out.cols(), cols);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn mean_and_max_pool() {
        let z = Tensor::from_rows(&[vec![1.0, 1.0], vec![3.0, 3.0]]).unwrap();
        let attrs = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(pool_qformer(&z, &[1.0, 0.0], &attrs, PoolMode::Mean).unwrap(), vec![2.0, 2.0]);
        let z = Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, -3.0]]).unwrap();
        assert_eq!(pool_qformer(&z, &[1.0, 0.0], &attrs, PoolMode::Max).unwrap(), vec![3.0, 5.0]);
    }

    #[test]
    fn obj_pool_selects_argmax_row() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let attrs = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(pool_qformer(&z, &[0.0, 1.0], &attrs, PoolMode::Obj).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn att_obj_matches_exhaustive_row_scoring() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let z = rand_mat(&mut rng, 4, 8);
            let attrs = rand_mat(&mut rng, 5, 8);
            let obj: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            // score every row directly with explicit loops
            let mut best_o = (0, f64::NEG_INFINITY);
            let mut best_a = (0, f64::NEG_INFINITY);
            for k in 0..4 {
                let mut so = 0.0;
                for c in 0..8 {
                    so += obj[c] * z.get2(k, c);
                }
                let mut sa = 0.0;
                for i in 0..5 {
                    let mut s = 0.0;
                    for c in 0..8 {
                        s += attrs.get2(i, c) * z.get2(k, c);
                    }
                    sa += s / 5.0;
                }
                if so > best_o.1 {
                    best_o = (k, so);
                }
                if sa > best_a.1 {
                    best_a = (k, sa);
                }
            }
            let expect: Vec<f64> = (0..8)
                .map(|c| 0.5 * (z.get2(best_a.0, c) + z.get2(best_o.0, c)))
                .collect();
            let got = pool_qformer(&z, &obj, &attrs, PoolMode::AttObj).unwrap();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn selector_projection_copies_seed() {
        let seeds = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let v = [9.0, 9.0, 9.0];
        // [I_2 | 0]: first two entries of the seed
        let mut proj = Tensor::zeros(&[2, 6]);
        proj.data_mut()[0] = 1.0;
        proj.data_mut()[7] = 1.0;
        let q = init_queries_tensor(&seeds, &v, &proj).unwrap();
        assert_eq!(q.data(), &[1.0, 2.0, 4.0, 5.0]);
        let zero = init_queries_tensor(&seeds, &v, &Tensor::zeros(&[2, 6])).unwrap();
        assert!(zero.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn queries_match_concat_then_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seeds = rand_mat(&mut rng, 3, 4);
        let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let proj = rand_mat(&mut rng, 5, 8);
        let got = init_queries_tensor(&seeds, &v, &proj).unwrap();
        for j in 0..3 {
            let mut cat = seeds.row(j).to_vec();
            cat.extend(&v);
            for r in 0..5 {
                let e: f64 = (0..8).map(|c| proj.get2(r, c) * cat[c]).sum();
                assert!((got.get2(j, r) - e).abs() < 1e-14);
            }
        }
        assert!(init_queries_tensor(&seeds, &v[..3], &proj).is_err());
    }

    #[test]
    fn quadrant_mask_resizes_by_area() {
        let mut bits = vec![false; 16];
        for r in 0..2 {
            for c in 0..2 {
                bits[r * 4 + c] = true;
            }
        }
        assert_eq!(resize_mask(&bits, 4, 4, 2, 2).unwrap(), vec![true, false, false, false]);
    }

    #[test]
    fn half_covered_cell_rounds_up() {
        // 2x2 -> 1x1 with exactly two pixels set
        assert_eq!(resize_mask(&[true, false, false, true], 2, 2, 1, 1).unwrap(), vec![true]);
        assert_eq!(resize_mask(&[true, false, false, false], 2, 2, 1, 1).unwrap(), vec![false]);
        // upsampling copies the source pixel
        assert_eq!(resize_mask(&[true, false], 1, 2, 2, 4).unwrap(), vec![
            true, true, false, false, true, true, false, false
        ]);
    }

    #[test]
    fn mask_extremes() {
        let f = Tensor::matrix(4, 2, (0..8).map(|v| v as f64 + 1.0).collect()).unwrap();
        let ones = RleMask::full(3, 5);
        assert_eq!(mask_feature_map(&f, &ones, 2, 2).unwrap(), f);
        let zeros = RleMask::encode(&[false; 15], 3, 5);
        assert!(mask_feature_map(&f, &zeros, 2, 2).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(mask_feature_map(&f, &ones, 3, 2).is_err());
    }
}
