//! Retrieval-based score enhancement at inference.

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Tensor};

/// `r̂` plus the attributes it selects.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalScores {
    pub r: Vec<f64>,
    pub topk: Vec<usize>,
}

/// `r̂_i = max_k ⟨t_i, ẑ_k⟩`.
pub fn retrieval_scores(attr_text_emb: &Tensor, z_hat: &Tensor) -> Result<Vec<f64>> {
    if z_hat.rows() == 0 {
        return Err(Error::shape("retrieval_scores", "z_hat has no rows"));
    }
    let sims = attr_text_emb.matmul_t(z_hat)?;
    Ok((0..sims.rows())
        .map(|i| sims.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Indices of the `k` largest values among `candidates` (all indices when
/// `None`), larger first, ties to the lower index. `k` is clamped.
pub fn top_k(r: &[f64], k: usize, candidates: Option<&[usize]>) -> Vec<usize> {
    let mut idx: Vec<usize> = match candidates {
        Some(c) => c.to_vec(),
        None => (0..r.len()).collect(),
    };
    idx.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn select(r: Vec<f64>, k: usize, candidates: Option<&[usize]>) -> RetrievalScores {
    let topk = top_k(&r, k, candidates);
    RetrievalScores { r, topk }
}

/// `σ(c̄_i + r̂_i)` for selected `i`, `σ(c̄_i)` elsewhere.
pub fn enhance(c_bar: &[f64], scores: &RetrievalScores) -> Result<Vec<f64>> {
    if c_bar.len() != scores.r.len() {
        return Err(Error::shape(
            "enhance",
            format!("{} logits, {} retrieval scores", c_bar.len(), scores.r.len()),
        ));
    }
    let mut logits = c_bar.to_vec();
    for &i in &scores.topk {
        logits[i] += scores.r[i];
    }
    Ok(logits.into_iter().map(sigmoid).collect())
}

/// `enhance` after selecting the top `k` of all attributes.
pub fn enhance_topk(c_bar: &[f64], r: &[f64], k: usize) -> Result<Vec<f64>> {
    enhance(c_bar, &select(r.to_vec(), k, None))
}
