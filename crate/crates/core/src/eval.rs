//! Filtered ranking metrics.
//!
//! Every query is a tail query `(h, r, ?)`; on a reciprocal store head queries
//! arrive as tail queries over inverse relations.

use serde::{Deserialize, Serialize};

use crate::data::{FilterIndex, Triple};
use crate::error::{KgError, Result};
use crate::model::ModelParams;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    /// Ties rank below the target.
    Optimistic,
    /// Ties rank above the target.
    Pessimistic,
    /// Each tie counts half.
    #[default]
    Mean,
}

impl TiePolicy {
    pub fn rank(self, greater: usize, ties: usize) -> f64 {
        let g = greater as f64;
        match self {
            TiePolicy::Optimistic => 1.0 + g,
            TiePolicy::Pessimistic => 1.0 + g + ties as f64,
            TiePolicy::Mean => 1.0 + g + 0.5 * ties as f64,
        }
    }
}

/// Rank of `target` among `scores` after removing the `filtered` entities
/// (sorted) other than the target itself.
pub fn rank_from_scores(scores: &[f64], target: usize, filtered: &[usize], policy: TiePolicy) -> Result<f64> {
    let s = scores[target];
    if !s.is_finite() {
        return Err(KgError::NonFinite(format!("target score {s} for entity {target}")));
    }
    let mut greater = 0;
    let mut ties = 0;
    let mut skip = filtered.iter().peekable();
    for (e, &v) in scores.iter().enumerate() {
        while skip.next_if(|&&f| f < e).is_some() {}
        if skip.next_if(|&&f| f == e).is_some() || e == target {
            continue;
        }
        if v.is_nan() {
            return Err(KgError::NonFinite(format!("score for entity {e}")));
        }
        if v > s {
            greater += 1;
        } else if v == s {
            ties += 1;
        }
    }
    Ok(policy.rank(greater, ties))
}

/// Filtered rank of `triple.tail` for the query `(head, relation, ?)`.
pub fn filtered_rank(params: &ModelParams, triple: &Triple, filter: &FilterIndex, policy: TiePolicy) -> Result<f64> {
    let scores = params.score_all_tails(triple.head, triple.relation)?;
    if triple.tail >= scores.len() {
        return Err(KgError::Index {
            what: "entity",
            id: triple.tail,
            size: scores.len(),
        });
    }
    rank_from_scores(
        &scores,
        triple.tail,
        filter.true_tails(triple.head, triple.relation),
        policy,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub n_queries: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_query_ranks: Option<Vec<f64>>,
}

impl RankingReport {
    pub fn from_ranks(ranks: &[f64]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(KgError::Empty("evaluation set"));
        }
        let n = ranks.len() as f64;
        let hits = |k: f64| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Ok(RankingReport {
            mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n,
            hits1: hits(1.0),
            hits3: hits(3.0),
            hits10: hits(10.0),
            n_queries: ranks.len(),
            per_query_ranks: None,
        })
    }

    pub fn with_ranks(mut self, ranks: Vec<f64>) -> Self {
        self.per_query_ranks = Some(ranks);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Per-query filtered ranks in input order.
pub fn rank_all(params: &ModelParams, queries: &[Triple], filter: &FilterIndex, policy: TiePolicy) -> Result<Vec<f64>> {
    let mut ranks = Vec::with_capacity(queries.len());
    let mut scores = vec![0.0; params.n_entities()];
    for t in queries {
        if t.head >= params.n_entities() || t.tail >= params.n_entities() || t.relation >= params.n_relations() {
            return Err(KgError::Index {
                what: "triple",
                id: t.head.max(t.tail),
                size: params.n_entities(),
            });
        }
        let q = params.query(t.head, t.relation);
        params.scores_from_query(&q, &mut scores);
        ranks.push(rank_from_scores(&scores, t.tail, filter.true_tails(t.head, t.relation), policy)?);
    }
    Ok(ranks)
}

pub fn evaluate(params: &ModelParams, queries: &[Triple], filter: &FilterIndex, policy: TiePolicy) -> Result<RankingReport> {
    if queries.is_empty() {
        return Err(KgError::Empty("evaluation set"));
    }
    RankingReport::from_ranks(&rank_all(params, queries, filter, policy)?)
}
