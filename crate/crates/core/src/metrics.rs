//! Retrieval metrics over scored candidate lists.
//!
//! Ranks sort by descending score with ties going to the lower index. NDCG
//! uses linear gains and a `log2(r + 1)` discount, truncated at the number of
//! positively relevant candidates.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::error::{dim_err, Error, Result};

/// Candidate indices ordered best first.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// 1-based rank of candidate `i`.
pub fn rank_of(scores: &[f64], i: usize) -> usize {
    let s = scores[i];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &t)| t > s || (t == s && j < i))
        .count()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GoldRank {
    pub rank: usize,
    pub mrr: f64,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankingMetrics {
    pub gold: Option<GoldRank>,
    pub ndcg: Option<f64>,
}

impl RankingMetrics {
    /// `(name, value)` pairs in report order.
    pub fn values(&self) -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        if let Some(g) = self.gold {
            out.extend([
                ("mrr", g.mrr),
                ("r@1", g.r_at_1),
                ("r@5", g.r_at_5),
                ("r@10", g.r_at_10),
                ("mean_rank", g.rank as f64),
            ]);
        }
        if let Some(n) = self.ndcg {
            out.push(("ndcg", n));
        }
        out
    }
}

pub fn ranking_metrics(
    scores: &[f64],
    gold: Option<usize>,
    relevance: Option<&[f64]>,
) -> Result<RankingMetrics> {
    if scores.is_empty() {
        return Err(dim_err!("no candidates to rank"));
    }
    if gold.is_none() && relevance.is_none() {
        return Err(Error::Usage(
            "ranking needs a gold index or relevance scores".into(),
        ));
    }
    let gold = match gold {
        Some(i) if i >= scores.len() => {
            return Err(Error::Data(format!(
                "gold index {i} outside {} candidates",
                scores.len()
            )))
        }
        Some(i) => {
            let rank = rank_of(scores, i);
            let hit = |k: usize| if rank <= k { 1.0 } else { 0.0 };
            Some(GoldRank {
                rank,
                mrr: 1.0 / rank as f64,
                r_at_1: hit(1),
                r_at_5: hit(5),
                r_at_10: hit(10),
            })
        }
        None => None,
    };
    let ndcg = relevance.map(|r| ndcg(scores, r)).transpose()?;
    Ok(RankingMetrics { gold, ndcg })
}

pub fn ndcg(scores: &[f64], relevance: &[f64]) -> Result<f64> {
    if relevance.len() != scores.len() {
        return Err(dim_err!(
            "{} scores but {} relevance values",
            scores.len(),
            relevance.len()
        ));
    }
    let k = relevance.iter().filter(|&&r| r > 0.0).count();
    if k == 0 {
        return Err(Error::Data("no positively relevant candidate".into()));
    }
    let dcg_of = |order: &[usize]| -> f64 {
        order
            .iter()
            .take(k)
            .enumerate()
            .map(|(r, &i)| relevance[i] / ((r + 2) as f64).log2())
            .sum()
    };
    let dcg = dcg_of(&ranking(scores));
    let idcg = dcg_of(&ranking(relevance));
    Ok(dcg / idcg)
}

/// Running means of named metrics across a split.
#[derive(Clone, Debug, Default)]
pub struct MetricMeans {
    sums: BTreeMap<String, (f64, usize)>,
    order: Vec<String>,
}

impl MetricMeans {
    pub fn add(&mut self, name: &str, value: f64) {
        if !self.sums.contains_key(name) {
            self.order.push(name.to_string());
        }
        let e = self.sums.entry(name.to_string()).or_insert((0.0, 0));
        e.0 += value;
        e.1 += 1;
    }

    pub fn add_all(&mut self, m: &RankingMetrics) {
        for (n, v) in m.values() {
            self.add(n, v);
        }
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        self.sums.get(name).map(|(s, n)| s / *n as f64)
    }

    /// `metric=<name> value=<float>` lines in insertion order.
    pub fn report(&self) -> String {
        let mut out = String::new();
        for n in &self.order {
            let _ = writeln!(out, "metric={n} value={}", self.mean(n).unwrap_or(f64::NAN));
        }
        out
    }
}
