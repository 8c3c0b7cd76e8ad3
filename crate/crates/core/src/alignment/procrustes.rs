use super::{svd, LinearMap};
use crate::embeddings::{build_frequency_dictionary, gather, EmbeddingTable, FrequencyDictionary, Side};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Orthogonal `W*` minimizing `‖S_r Wᵀ − T_r‖_F` for paired rows.
///
/// With `T_rᵀ S_r = U Σ Vᵀ` the minimizer is `U Vᵀ`.
pub fn procrustes_refine(speech_rows: &Tensor, text_rows: &Tensor) -> Result<LinearMap> {
    if speech_rows.rank() != 2 || text_rows.rank() != 2 {
        return Err(Error::Argument("procrustes expects two matrices".into()));
    }
    if speech_rows.rows() != text_rows.rows() {
        return Err(Error::Argument(format!(
            "paired row counts differ: {:?} vs {:?}",
            speech_rows.shape(),
            text_rows.shape()
        )));
    }
    if speech_rows.cols() != text_rows.cols() {
        return Err(Error::Argument(format!(
            "refinement needs equal dimensions, got speech {} and text {}",
            speech_rows.cols(),
            text_rows.cols()
        )));
    }
    let cross = text_rows.transpose()?.matmul(speech_rows)?;
    let s = svd(&cross)?;
    LinearMap::new(s.u.matmul(&s.v.transpose()?)?)
}

/// Procrustes over the `k` most frequent tokens shared by both tables.
pub fn refine_from_frequent(
    speech: &EmbeddingTable,
    text: &EmbeddingTable,
    k: usize,
) -> Result<(LinearMap, FrequencyDictionary)> {
    let dict = build_frequency_dictionary(speech, text, k)?;
    if dict.dictionary.is_empty() {
        return Err(Error::Data("speech and text vocabularies share no tokens".into()));
    }
    let s = gather(speech, &dict.dictionary, Side::Speech)?;
    let t = gather(text, &dict.dictionary, Side::Text)?;
    Ok((procrustes_refine(&s, &t)?, dict))
}

/// `‖S_r Wᵀ − T_r‖_F`.
pub fn procrustes_objective(map: &LinearMap, speech_rows: &Tensor, text_rows: &Tensor) -> Result<f64> {
    Ok(map.apply_rows(speech_rows)?.sub(text_rows)?.frobenius_norm())
}
