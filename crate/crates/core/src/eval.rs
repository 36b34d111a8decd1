//! Sampled ranking evaluation: the held-out positive is ranked against 99
//! sampled negatives and NDCG@K / HR@K are averaged over users.

use serde::{Deserialize, Serialize};

use crate::data::{pad_sequence, sample_negatives, TestCase, EVAL_NEGATIVES};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{self, ModelParams};
use crate::rng;
use crate::ttt::TttConfig;

/// Anything that can score candidate items for a click history.
pub trait CandidateScorer: Sync {
    fn score_candidates(&self, history: &[u32], candidates: &[u32]) -> Result<Vec<f64>>;
}

/// Scores with a trained model, feeding it the most recent `max_seq_len` items.
pub struct ModelScorer<'a> {
    pub params: &'a ModelParams,
    pub ttt: &'a TttConfig,
    pub max_seq_len: usize,
}

impl CandidateScorer for ModelScorer<'_> {
    fn score_candidates(&self, history: &[u32], candidates: &[u32]) -> Result<Vec<f64>> {
        let seq = pad_sequence(history, self.max_seq_len);
        model::score_candidates(self.params, &seq, candidates, self.ttt)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub user: u32,
    /// 1-based rank of the positive among all candidates.
    pub rank: usize,
    /// Positive first, then negatives in sampling order.
    pub scores: Option<Vec<f64>>,
}

/// Rank of `scores[0]` among `scores`; ties count against it.
pub fn rank_of_first(scores: &[f64]) -> Result<usize> {
    let (&pos, rest) = scores
        .split_first()
        .ok_or_else(|| Error::Input("no scores".into()))?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN candidate score".into()));
    }
    Ok(1 + rest.iter().filter(|&&s| s >= pos).count())
}

pub fn rank_candidates(
    scorer: &impl CandidateScorer,
    user: u32,
    history: &[u32],
    positive: u32,
    negatives: &[u32],
    keep_scores: bool,
) -> Result<RankingResult> {
    let mut candidates = Vec::with_capacity(negatives.len() + 1);
    candidates.push(positive);
    candidates.extend_from_slice(negatives);
    let mut sorted = candidates.clone();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Input(format!(
            "duplicate candidates for user {user}"
        )));
    }
    if let Some(&bad) = negatives.iter().find(|n| history.contains(n)) {
        return Err(Error::Input(format!(
            "negative {bad} appears in the history of user {user}"
        )));
    }
    let scores = scorer.score_candidates(history, &candidates)?;
    if scores.len() != candidates.len() {
        return Err(Error::Input(format!(
            "scorer returned {} scores for {} candidates",
            scores.len(),
            candidates.len()
        )));
    }
    Ok(RankingResult {
        user,
        rank: rank_of_first(&scores)?,
        scores: keep_scores.then_some(scores),
    })
}

/// Single-relevant-item NDCG: `1/log2(rank+1)` inside the cutoff.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub hr5: f64,
    pub hr10: f64,
    pub count: usize,
}

impl MetricsReport {
    /// Means over `ranks`, accumulated in the given order.
    pub fn from_ranks(ranks: &[usize]) -> Self {
        let n = ranks.len();
        if n == 0 {
            return MetricsReport::default();
        }
        let mean = |f: &dyn Fn(usize) -> f64| ranks.iter().map(|&r| f(r)).sum::<f64>() / n as f64;
        MetricsReport {
            ndcg5: mean(&|r| ndcg_at_k(r, 5)),
            ndcg10: mean(&|r| ndcg_at_k(r, 10)),
            hr5: mean(&|r| hr_at_k(r, 5)),
            hr10: mean(&|r| hr_at_k(r, 10)),
            count: n,
        }
    }
}

/// The 99 evaluation negatives of a test case; fixed per `(seed, user)`.
pub fn eval_negatives(case: &TestCase, vocab_size: usize, seed: u64) -> Result<Vec<u32>> {
    let mut r = rng::stream(&[rng::TAG_EVAL_NEG, seed, case.user as u64]);
    sample_negatives(&case.seen, EVAL_NEGATIVES, vocab_size, &mut r)
}

pub fn rank_all(
    scorer: &impl CandidateScorer,
    test: &[TestCase],
    vocab_size: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<RankingResult>> {
    exec.map(test, |case| {
        let negatives = eval_negatives(case, vocab_size, seed)?;
        rank_candidates(
            scorer,
            case.user,
            &case.history,
            case.positive,
            &negatives,
            false,
        )
    })
    .into_iter()
    .collect()
}

pub fn evaluate(
    scorer: &impl CandidateScorer,
    test: &[TestCase],
    vocab_size: usize,
    seed: u64,
    exec: Execution,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    let ranks: Vec<usize> = rank_all(scorer, test, vocab_size, seed, exec)?
        .into_iter()
        .map(|r| r.rank)
        .collect();
    Ok(MetricsReport::from_ranks(&ranks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_cases() {
        assert_eq!(ndcg_at_k(1, 5), 1.0);
        assert_eq!(ndcg_at_k(3, 5), 0.5);
        assert_eq!(ndcg_at_k(11, 10), 0.0);
        assert_eq!(hr_at_k(10, 10), 1.0);
        assert_eq!(hr_at_k(11, 10), 0.0);
    }

    #[test]
    fn ties_are_pessimistic() {
        assert_eq!(rank_of_first(&[1.0; 100]).unwrap(), 100);
        assert_eq!(rank_of_first(&[2.0, 1.0, 1.0]).unwrap(), 1);
        assert!(rank_of_first(&[f64::NAN, 1.0]).is_err());
    }

    struct ById;
    impl CandidateScorer for ById {
        fn score_candidates(&self, _: &[u32], c: &[u32]) -> Result<Vec<f64>> {
            Ok(c.iter().map(|&i| i as f64).collect())
        }
    }

    #[test]
    fn duplicate_candidates_rejected() {
        assert!(rank_candidates(&ById, 1, &[1], 5, &[6, 6], false).is_err());
        assert!(rank_candidates(&ById, 1, &[1], 5, &[5, 6], false).is_err());
        let r = rank_candidates(&ById, 1, &[1], 9, &[2, 3], true).unwrap();
        assert_eq!(r.rank, 1);
        assert_eq!(r.scores.unwrap(), vec![9.0, 2.0, 3.0]);
    }
}
