//! Ranking metrics and evaluation reports.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::air::{retrieve, AirTriple, ImageRetriever};
use crate::encoder::EncoderProvider;
use crate::error::{Error, Result};
use crate::ltr::{average_precision, LtrModel, QueryList};

/// Default metric cutoffs.
pub const DEFAULT_KS: [usize; 3] = [3, 5, 10];

fn hits_at_k<S: AsRef<str>>(ranking: &[S], relevant: &BTreeSet<String>, k: usize) -> usize {
    let top: BTreeSet<&str> = ranking.iter().take(k).map(AsRef::as_ref).collect();
    top.into_iter().filter(|id| relevant.contains(*id)).count()
}

/// `|top-k ∩ relevant| / |relevant|`.
pub fn recall_at_k<S: AsRef<str>>(ranking: &[S], relevant: &BTreeSet<String>, k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::data("recall is undefined for an empty relevant set"));
    }
    Ok(hits_at_k(ranking, relevant, k) as f64 / relevant.len() as f64)
}

/// `|top-k ∩ relevant| / k`.
pub fn precision_at_k<S: AsRef<str>>(ranking: &[S], relevant: &BTreeSet<String>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::usage("precision cutoff must be at least 1"));
    }
    Ok(hits_at_k(ranking, relevant, k) as f64 / k as f64)
}

fn ranking_ap<S: AsRef<str>>(ranking: &[S], relevant: &BTreeSet<String>) -> Result<f64> {
    let n = ranking.len();
    let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
    let labels: Vec<u8> = ranking
        .iter()
        .map(|id| u8::from(relevant.contains(id.as_ref())))
        .collect();
    if !labels.contains(&1) {
        return Ok(0.0);
    }
    // Relevant items missing from the ranking count as never retrieved.
    let ap = average_precision(&scores, &labels)?;
    let found = labels.iter().filter(|&&l| l == 1).count();
    Ok(ap * found as f64 / relevant.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub ap: f64,
    pub recall_at: BTreeMap<usize, f64>,
    pub precision_at: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub map: f64,
    pub recall_at: BTreeMap<usize, f64>,
    pub precision_at: BTreeMap<usize, f64>,
    pub n_queries: usize,
}

pub fn query_metrics<S: AsRef<str>>(
    query_id: &str,
    ranking: &[S],
    relevant: &BTreeSet<String>,
    ks: &[usize],
) -> Result<QueryMetrics> {
    if relevant.is_empty() {
        return Err(Error::data(format!("query `{query_id}` has no relevant items")));
    }
    let mut recall_at = BTreeMap::new();
    let mut precision_at = BTreeMap::new();
    for &k in ks {
        recall_at.insert(k, recall_at_k(ranking, relevant, k)?);
        precision_at.insert(k, precision_at_k(ranking, relevant, k)?);
    }
    Ok(QueryMetrics {
        query_id: query_id.to_string(),
        ap: ranking_ap(ranking, relevant)?,
        recall_at,
        precision_at,
    })
}

/// Means over queries, summed in query-id order.
pub fn aggregate(per_query: &[QueryMetrics]) -> Result<MetricReport> {
    if per_query.is_empty() {
        return Err(Error::usage("evaluation set is empty"));
    }
    let mut sorted: Vec<&QueryMetrics> = per_query.iter().collect();
    sorted.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    let n = sorted.len() as f64;
    let mean_map = |get: &dyn Fn(&QueryMetrics) -> &BTreeMap<usize, f64>| {
        let mut out: BTreeMap<usize, f64> = BTreeMap::new();
        for q in &sorted {
            for (k, v) in get(q) {
                *out.entry(*k).or_default() += v;
            }
        }
        out.values_mut().for_each(|v| *v /= n);
        out
    };
    Ok(MetricReport {
        map: sorted.iter().map(|q| q.ap).sum::<f64>() / n,
        recall_at: mean_map(&|q| &q.recall_at),
        precision_at: mean_map(&|q| &q.precision_at),
        n_queries: sorted.len(),
    })
}

/// Ranks every query list with `model`; the positives are the relevant set.
pub fn eval_eal(model: &LtrModel, lists: &[QueryList], ks: &[usize]) -> Result<(MetricReport, Vec<QueryMetrics>)> {
    let per_query = lists
        .par_iter()
        .map(|list| {
            let ranked = model.rank(&list.rows)?;
            let ranking: Vec<&str> = ranked.iter().map(|r| r.aspect_id.as_str()).collect();
            let relevant: BTreeSet<String> = list
                .rows
                .iter()
                .filter(|r| r.label == 1)
                .map(|r| r.aspect_id.clone())
                .collect();
            query_metrics(&list.query_id, &ranking, &relevant, ks)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((aggregate(&per_query)?, per_query))
}

/// One query per (entity, aspect) in `test`. Candidates are all positive
/// images of the entity's test triples; relevant are the aspect's own.
pub fn eval_air(
    retriever: &dyn ImageRetriever,
    test: &[AirTriple],
    provider: &dyn EncoderProvider,
    ks: &[usize],
) -> Result<(MetricReport, Vec<QueryMetrics>)> {
    let mut candidates: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut groups: BTreeMap<(&str, &str), (&str, BTreeSet<String>)> = BTreeMap::new();
    for t in test {
        candidates.entry(&t.entity_id).or_default().insert(&t.positive_image_id);
        groups
            .entry((&t.entity_id, &t.aspect_label))
            .or_insert_with(|| (&t.overall_image_id, BTreeSet::new()))
            .1
            .insert(t.positive_image_id.clone());
    }
    let groups: Vec<_> = groups.into_iter().collect();
    let per_query = groups
        .par_iter()
        .map(|((entity, label), (overall, relevant))| {
            let cands: Vec<&str> = candidates[entity].iter().copied().collect();
            let result = retrieve(retriever, provider, overall, label, &cands)?;
            query_metrics(&format!("{entity}/{label}"), &result.ids(), relevant, ks)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((aggregate(&per_query)?, per_query))
}

/// Tab-separated per-query metrics with a header row.
pub fn write_query_tsv(path: &Path, per_query: &[QueryMetrics], ks: &[usize]) -> Result<()> {
    let mut out = String::from("query_id\tap");
    for k in ks {
        out.push_str(&format!("\trecall@{k}"));
    }
    for k in ks {
        out.push_str(&format!("\tprecision@{k}"));
    }
    out.push('\n');
    for q in per_query {
        out.push_str(&format!("{}\t{}", q.query_id, q.ap));
        for k in ks {
            out.push_str(&format!("\t{}", q.recall_at.get(k).copied().unwrap_or(0.0)));
        }
        for k in ks {
            out.push_str(&format!("\t{}", q.precision_at.get(k).copied().unwrap_or(0.0)));
        }
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
