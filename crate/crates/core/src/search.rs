//! Exact inner-product search over an [`EmbeddingStore`].
//!
//! Ordering is total: descending score, then ascending id. `rank_of` uses the
//! same order, so `rank_of(t) <= k` exactly when `t` appears in `top_k(.., k)`.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};
use crate::store::{EmbeddingStore, ItemId};
use crate::vector::EmbeddingVector;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredId {
    pub id: ItemId,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankResult {
    /// 1-based.
    pub rank: usize,
    pub pool_size: usize,
}

#[derive(Debug, Clone, Copy)]
pub enum Candidates<'a> {
    All,
    Subset(&'a [ItemId]),
}

/// Descending score, ascending id.
#[inline]
pub fn compare_scored(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

fn check_dim<T: Scalar>(store: &EmbeddingStore, q: &EmbeddingVector<T>) -> Result<()> {
    if q.dim() != store.dim() {
        return Err(Error::DimMismatch { expected: store.dim(), actual: q.dim() });
    }
    Ok(())
}

fn score_candidates<T: Scalar>(
    store: &EmbeddingStore,
    candidates: Candidates<'_>,
    q: &EmbeddingVector<T>,
) -> Result<Vec<(usize, f64)>> {
    check_dim(store, q)?;
    let q = q.as_slice();
    match candidates {
        Candidates::All => Ok((0..store.len()).map(|p| (p, dot(store.row(p), q))).collect()),
        Candidates::Subset(ids) => ids
            .iter()
            .map(|id| {
                let p = store.position(id.as_str()).ok_or_else(|| Error::UnknownId(id.to_string()))?;
                Ok((p, dot(store.row(p), q)))
            })
            .collect(),
    }
}

/// The `min(k, |candidates|)` best candidates by inner product with `q`.
pub fn top_k<T: Scalar>(
    store: &EmbeddingStore,
    candidates: Candidates<'_>,
    q: &EmbeddingVector<T>,
    k: usize,
) -> Result<Vec<ScoredId>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut scored = score_candidates(store, candidates, q)?;
    let ids = store.ids();
    let cmp = |a: &(usize, f64), b: &(usize, f64)| {
        compare_scored(a.1, ids[a.0].as_str(), b.1, ids[b.0].as_str())
    };
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    Ok(scored.into_iter().map(|(p, score)| ScoredId { id: ids[p].clone(), score }).collect())
}

/// Position of `target` among `candidates` under the `top_k` ordering.
pub fn rank_of<T: Scalar>(
    store: &EmbeddingStore,
    candidates: &[ItemId],
    q: &EmbeddingVector<T>,
    target: &ItemId,
) -> Result<RankResult> {
    check_dim(store, q)?;
    if !candidates.contains(target) {
        return Err(Error::UnknownId(format!("target {target} is not among the candidates")));
    }
    let scored = score_candidates(store, Candidates::Subset(candidates), q)?;
    Ok(rank_from_scores(
        scored.iter().map(|&(p, s)| (store.ids()[p].as_str(), s)),
        target.as_str(),
        store.row_by_id(target.as_str()).map(|row| dot(row, q.as_slice()))?,
    ))
}

/// Rank of `target` given `(id, score)` for every candidate (target included).
pub fn rank_from_scores<'a>(
    scores: impl IntoIterator<Item = (&'a str, f64)>,
    target: &str,
    target_score: f64,
) -> RankResult {
    let mut ahead = 0usize;
    let mut pool = 0usize;
    for (id, score) in scores {
        pool += 1;
        if id != target && compare_scored(score, id, target_score, target) == Ordering::Less {
            ahead += 1;
        }
    }
    RankResult { rank: ahead + 1, pool_size: pool }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn id(s: &str) -> ItemId {
        ItemId::new(s).unwrap()
    }

    fn random_store(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> EmbeddingStore {
        let mut s = EmbeddingStore::new(dim, "t").unwrap();
        for i in 0..n {
            let raw: Vec<f32> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            s.push(id(&format!("r{i:04}")), &EmbeddingVector::normalize(&raw).unwrap()).unwrap();
        }
        s
    }

    fn random_query(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector<f32> {
        let raw: Vec<f32> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        EmbeddingVector::normalize(&raw).unwrap()
    }

    /// Full sort with independently computed scores.
    fn oracle(store: &EmbeddingStore, q: &EmbeddingVector<f32>) -> Vec<(String, f64)> {
        let mut all: Vec<(String, f64)> = store
            .iter()
            .map(|(i, row)| {
                let mut acc = 0.0f64;
                for j in 0..row.len() {
                    acc += q.as_slice()[j] as f64 * row[j] as f64;
                }
                (i.to_string(), acc)
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all
    }

    #[test]
    fn basis_rows() {
        let mut s = EmbeddingStore::new(3, "t").unwrap();
        for (i, name) in ["e1", "e2", "e3"].iter().enumerate() {
            let mut v = vec![0.0f32; 3];
            v[i] = 1.0;
            s.push(id(name), &EmbeddingVector::normalize(&v).unwrap()).unwrap();
        }
        let q = EmbeddingVector::<f32>::normalize(&[0.0, 1.0, 0.0]).unwrap();
        let hits = top_k(&s, Candidates::All, &q, 1).unwrap();
        assert_eq!(hits, vec![ScoredId { id: id("e2"), score: 1.0 }]);
    }

    #[test]
    fn matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = random_store(&mut rng, 50, 16);
        let q = random_query(&mut rng, 16);
        let got: Vec<String> = top_k(&s, Candidates::All, &q, 5).unwrap().into_iter().map(|h| h.id.to_string()).collect();
        let want: Vec<String> = oracle(&s, &q).into_iter().take(5).map(|x| x.0).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let mut s = EmbeddingStore::new(2, "t").unwrap();
        let v = EmbeddingVector::<f32>::normalize(&[1.0, 1.0]).unwrap();
        s.push(id("zeta"), &v).unwrap();
        s.push(id("alpha"), &v).unwrap();
        let hits = top_k(&s, Candidates::All, &v, 2).unwrap();
        assert_eq!(hits[0].id.as_str(), "alpha");
        assert_eq!(hits[1].id.as_str(), "zeta");
    }

    #[test]
    fn k_larger_than_pool_returns_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_store(&mut rng, 4, 8);
        let q = random_query(&mut rng, 8);
        assert_eq!(top_k(&s, Candidates::All, &q, 10).unwrap().len(), 4);
        assert!(top_k(&s, Candidates::All, &q, 0).is_err());
    }

    #[test]
    fn errors_for_unknown_ids_and_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_store(&mut rng, 4, 8);
        let q = random_query(&mut rng, 8);
        let missing = [id("nope")];
        assert!(matches!(top_k(&s, Candidates::Subset(&missing), &q, 1), Err(Error::UnknownId(_))));
        let wrong = random_query(&mut rng, 5);
        assert!(matches!(top_k(&s, Candidates::All, &wrong, 1), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn unique_max_has_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_store(&mut rng, 20, 8);
        let q = s.get("r0007").unwrap();
        let r = rank_of(&s, s.ids(), &q, &id("r0007")).unwrap();
        assert_eq!(r, RankResult { rank: 1, pool_size: 20 });
    }

    #[test]
    fn rank_matches_sorted_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random_store(&mut rng, 100, 32);
        let q = random_query(&mut rng, 32);
        let sorted = oracle(&s, &q);
        for (pos, (name, _)) in sorted.iter().enumerate() {
            let r = rank_of(&s, s.ids(), &q, &id(name)).unwrap();
            assert_eq!(r.rank, pos + 1);
        }
    }

    #[test]
    fn all_equal_scores_rank_by_id() {
        let mut s = EmbeddingStore::new(2, "t").unwrap();
        let v = EmbeddingVector::<f32>::normalize(&[0.0, 1.0]).unwrap();
        for i in 0..100 {
            s.push(id(&format!("c{i:03}")), &v).unwrap();
        }
        assert_eq!(rank_of(&s, s.ids(), &v, &id("c000")).unwrap().rank, 1);
        assert_eq!(rank_of(&s, s.ids(), &v, &id("c042")).unwrap().rank, 43);
    }

    #[test]
    fn target_outside_candidates_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_store(&mut rng, 5, 4);
        let q = random_query(&mut rng, 4);
        let subset = [id("r0000"), id("r0001")];
        assert!(rank_of(&s, &subset, &q, &id("r0003")).is_err());
    }

    #[test]
    fn rank_and_top_k_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = random_store(&mut rng, 60, 8);
        for _ in 0..10 {
            let q = random_query(&mut rng, 8);
            for k in [1, 5, 17] {
                let hits = top_k(&s, Candidates::All, &q, k).unwrap();
                for target in s.ids() {
                    let in_top = hits.iter().any(|h| &h.id == target);
                    let r = rank_of(&s, s.ids(), &q, target).unwrap();
                    assert_eq!(r.rank <= k, in_top);
                }
            }
        }
    }

    #[test]
    fn positive_scaling_of_query_keeps_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_store(&mut rng, 80, 8);
        let q = random_query(&mut rng, 8);
        let scaled: Vec<f64> = q.as_slice().iter().map(|x| *x as f64 * 4.0).collect();
        let q64 = EmbeddingVector::<f64>::normalize_f64(&scaled).unwrap();
        let a: Vec<_> = top_k(&s, Candidates::All, &q, 80).unwrap().into_iter().map(|h| h.id).collect();
        let b: Vec<_> = top_k(&s, Candidates::All, &q64, 80).unwrap().into_iter().map(|h| h.id).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn search_score_is_symmetric_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = random_store(&mut rng, 30, 64);
        let q = random_query(&mut rng, 64);
        for h in top_k(&s, Candidates::All, &q, 30).unwrap() {
            let row = s.row_by_id(h.id.as_str()).unwrap();
            let back = dot(q.as_slice(), row);
            assert!((h.score - back).abs() < 1e-9);
        }
    }
}
