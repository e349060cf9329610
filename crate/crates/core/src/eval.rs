//! Ranking metrics over held-out positives.
//!
//! Evaluation scores every catalog item for a user, drops the user's own
//! training positives from the candidate pool, takes the top k, and reports
//! Recall@k and NDCG@k macro-averaged over users that have at least one
//! test positive.

use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::model::{ItemScoreCache, ModelParams};

/// Macro-averaged metrics at a fixed cutoff.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankingMetrics {
    pub recall: f64,
    pub ndcg: f64,
    /// Users that contributed to the average.
    pub users: usize,
}

/// Indices of the `k` highest-scoring candidates, best first. Ties break
/// toward the lower index; `excluded` entries are skipped.
pub fn topk_candidates(
    scores: &[f64],
    excluded: &[usize],
    k: usize,
) -> Result<Vec<usize>> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score while ranking".into()));
    }
    let mut skip = vec![false; scores.len()];
    for &i in excluded {
        if i < skip.len() {
            skip[i] = true;
        }
    }
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| !skip[i]).collect();
    let by_score_then_index = |&a: &usize, &b: &usize| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| a.cmp(&b))
    };
    if k < order.len() {
        order.select_nth_unstable_by(k, by_score_then_index);
        order.truncate(k);
    }
    order.sort_unstable_by(by_score_then_index);
    Ok(order)
}

/// Fraction of the user's test positives that appear in the ranked list.
pub fn recall_at_k(ranked: &[usize], test_positives: &[usize]) -> f64 {
    if test_positives.is_empty() {
        return 0.0;
    }
    let hits = ranked
        .iter()
        .filter(|i| test_positives.binary_search(i).is_ok())
        .count();
    hits as f64 / test_positives.len() as f64
}

/// Binary-gain NDCG: DCG sums 1/log2(rank + 1) over hits, normalized by the
/// ideal list that front-loads min(|test|, k) hits.
pub fn ndcg_at_k(ranked: &[usize], test_positives: &[usize], k: usize) -> f64 {
    if test_positives.is_empty() {
        return 0.0;
    }
    let mut dcg = 0.0;
    for (pos, item) in ranked.iter().take(k).enumerate() {
        if test_positives.binary_search(item).is_ok() {
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let ideal_hits = test_positives.len().min(k);
    let idcg: f64 = (0..ideal_hits).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
    dcg / idcg
}

/// Evaluate a model over every user with a nonempty test set.
pub fn evaluate_all(
    params: &ModelParams,
    dataset: &InteractionDataset,
    k: usize,
) -> Result<RankingMetrics> {
    if k == 0 {
        return Err(Error::Config("eval cutoff k must be positive".into()));
    }
    params.validate()?;
    if params.num_users() != dataset.num_users || params.public.num_items() != dataset.num_items {
        return Err(Error::Shape(format!(
            "model is {}x{} but dataset is {}x{}",
            params.num_users(),
            params.public.num_items(),
            dataset.num_users,
            dataset.num_items
        )));
    }

    let cache = ItemScoreCache::new(&params.public);
    let mut recall_sum = 0.0;
    let mut ndcg_sum = 0.0;
    let mut users = 0usize;
    for user in 0..dataset.num_users {
        let test = &dataset.test_positives[user];
        if test.is_empty() {
            continue;
        }
        let scores = cache.score_all(&params.public, params.user_emb.row(user));
        let ranked = topk_candidates(
            scores.as_slice().expect("contiguous scores"),
            &dataset.user_positive_sets[user],
            k,
        )?;
        recall_sum += recall_at_k(&ranked, test);
        ndcg_sum += ndcg_at_k(&ranked, test, k);
        users += 1;
    }
    if users == 0 {
        return Err(Error::Invalid(
            "no user has held-out positives to evaluate".into(),
        ));
    }
    Ok(RankingMetrics {
        recall: recall_sum / users as f64,
        ndcg: ndcg_sum / users as f64,
        users,
    })
}
