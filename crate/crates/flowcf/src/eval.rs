//! All-ranking evaluation: truncated Recall@K and binary-gain NDCG@K,
//! averaged uniformly over users with a non-empty held-out set.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::Serialize;

use crate::data::InteractionMatrix;
use crate::error::{Error, Result};
use crate::infer::{infer, recommend_topk, InferConfig, Predictor};

/// Users per inference chunk. Fixed so the parallel split never depends on
/// the worker count, keeping results identical across thread settings.
const EVAL_CHUNK: usize = 512;

/// Hits in the top K over min(K, |relevant|); the truncated denominator
/// lets a user with fewer than K held-out items still reach 1.
pub fn recall_at_k(ranked: &[u32], relevant: &HashSet<u32>, k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::Data("recall needs a non-empty relevant set".into()));
    }
    let hits = ranked.iter().take(k).filter(|i| relevant.contains(i)).count();
    Ok(hits as f64 / k.min(relevant.len()) as f64)
}

/// Binary-gain NDCG: DCG sums 1/log2(pos+1) over hit positions (1-based),
/// IDCG packs min(K, |relevant|) hits at the top.
pub fn ndcg_at_k(ranked: &[u32], relevant: &HashSet<u32>, k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::Data("ndcg needs a non-empty relevant set".into()));
    }
    let mut dcg = 0.0;
    for (pos, item) in ranked.iter().take(k).enumerate() {
        if relevant.contains(item) {
            dcg += 1.0 / ((pos as f64 + 2.0).log2());
        }
    }
    let ideal = k.min(relevant.len());
    let idcg: f64 = (1..=ideal).map(|p| 1.0 / ((p as f64 + 1.0).log2())).sum();
    Ok(dcg / idcg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    #[serde(rename = "n_users")]
    pub n_users_evaluated: usize,
}

impl MetricReport {
    /// Aligned text table; "n/a" when no user was evaluable.
    pub fn to_table(&self) -> String {
        let mut out = String::from("      K    Recall      NDCG\n");
        let ks: Vec<usize> = self.recall.keys().copied().collect();
        if ks.is_empty() {
            out.push_str("    n/a       n/a       n/a\n");
        }
        for k in ks {
            out.push_str(&format!(
                "{:>7}  {:>8.4}  {:>8.4}\n",
                k, self.recall[&k], self.ndcg[&k]
            ));
        }
        out.push_str(&format!("users evaluated: {}\n", self.n_users_evaluated));
        out
    }
}

/// Runs inference for every user with held-out items and averages the
/// ranking metrics. `input` provides both the rows fed to the sampler and
/// the observed-item mask; `held_out` provides the relevance sets.
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    config: &InferConfig,
    input: &InteractionMatrix,
    held_out: &InteractionMatrix,
    ks: &[usize],
) -> Result<MetricReport> {
    if input.n_users != held_out.n_users || input.n_items != held_out.n_items {
        return Err(Error::Shape(
            "input and held-out matrices must share dimensions".into(),
        ));
    }
    if input.n_items != predictor.n_items() {
        return Err(Error::Shape(format!(
            "{}-item matrix fed to a {}-item predictor",
            input.n_items,
            predictor.n_items()
        )));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("cutoff list must be positive".into()));
    }
    let users: Vec<usize> = (0..input.n_users)
        .filter(|&u| !held_out.row(u).is_empty())
        .collect();
    if users.is_empty() {
        return Ok(MetricReport {
            recall: BTreeMap::new(),
            ndcg: BTreeMap::new(),
            n_users_evaluated: 0,
        });
    }
    let max_k = ks.iter().copied().max().unwrap();

    // Each chunk yields per-user metric vectors in user order; chunk order
    // is preserved by collect, so the reduction is deterministic.
    let per_chunk: Vec<Vec<(Vec<f64>, Vec<f64>)>> = users
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
            let x = input.to_dense_rows::<f32>(chunk);
            let scores = infer(predictor, &x.view(), config)?;
            let topk = recommend_topk(&scores, input, chunk, max_k)?;
            let mut rows = Vec::with_capacity(chunk.len());
            for (slot, &u) in chunk.iter().enumerate() {
                let ranked: Vec<u32> = topk[slot].iter().map(|p| p.0).collect();
                let relevant: HashSet<u32> = held_out.row(u).iter().copied().collect();
                let mut recalls = Vec::with_capacity(ks.len());
                let mut ndcgs = Vec::with_capacity(ks.len());
                for &k in ks {
                    recalls.push(recall_at_k(&ranked, &relevant, k)?);
                    ndcgs.push(ndcg_at_k(&ranked, &relevant, k)?);
                }
                rows.push((recalls, ndcgs));
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;

    let n = users.len() as f64;
    let mut recall_sums = vec![0.0; ks.len()];
    let mut ndcg_sums = vec![0.0; ks.len()];
    for rows in &per_chunk {
        for (recalls, ndcgs) in rows {
            for (j, v) in recalls.iter().enumerate() {
                recall_sums[j] += v;
            }
            for (j, v) in ndcgs.iter().enumerate() {
                ndcg_sums[j] += v;
            }
        }
    }
    let mut recall = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for (j, &k) in ks.iter().enumerate() {
        recall.insert(k, recall_sums[j] / n);
        ndcg.insert(k, ndcg_sums[j] / n);
    }
    Ok(MetricReport {
        recall,
        ndcg,
        n_users_evaluated: users.len(),
    })
}
