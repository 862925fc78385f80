//! List-wise learning to rank: a linear scorer trained by coordinate ascent
//! on mean average precision, with z-score normalization, mini-batches of
//! query lists and random restarts.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub query_id: String,
    pub aspect_id: String,
    pub features: Vec<f64>,
    /// 1 for the gold aspect.
    pub label: u8,
}

/// Candidate rows of one query, stored in ascending `aspect_id` order so
/// that score ties resolve by position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryList {
    pub query_id: String,
    pub rows: Vec<FeatureRow>,
}

impl QueryList {
    pub fn new(query_id: &str, mut rows: Vec<FeatureRow>) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::data(format!(
                "query `{query_id}` has {} rows, need at least 2",
                rows.len()
            )));
        }
        let width = rows[0].features.len();
        let mut seen = BTreeSet::new();
        for row in &rows {
            if row.query_id != query_id {
                return Err(Error::data(format!(
                    "row for `{}` filed under query `{query_id}`",
                    row.query_id
                )));
            }
            if row.features.len() != width {
                return Err(Error::data(format!(
                    "query `{query_id}`: rows have different feature counts"
                )));
            }
            if row.features.iter().any(|f| !f.is_finite()) {
                return Err(Error::numeric(format!(
                    "query `{query_id}`, aspect `{}`: non-finite feature",
                    row.aspect_id
                )));
            }
            if row.label > 1 {
                return Err(Error::data(format!("query `{query_id}`: label must be 0 or 1")));
            }
            if !seen.insert(row.aspect_id.as_str()) {
                return Err(Error::data(format!(
                    "query `{query_id}`: duplicate aspect `{}`",
                    row.aspect_id
                )));
            }
        }
        if !rows.iter().any(|r| r.label == 1) {
            return Err(Error::data(format!("query `{query_id}` has no positive row")));
        }
        rows.sort_by(|a, b| a.aspect_id.cmp(&b.aspect_id));
        Ok(Self {
            query_id: query_id.to_string(),
            rows,
        })
    }

    pub fn n_features(&self) -> usize {
        self.rows[0].features.len()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn scores(&self, weights: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| dot(weights, &r.features)).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Identity normalization.
    pub fn identity(n_features: usize) -> Self {
        Self {
            mean: vec![0.0; n_features],
            std: vec![1.0; n_features],
        }
    }

    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_one(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| if *s > 0.0 { (x - m) / s } else { 0.0 })
            .collect()
    }
}

/// Per-feature mean and population standard deviation.
pub fn zscore_fit<'a>(rows: impl IntoIterator<Item = &'a FeatureRow>) -> Result<NormStats> {
    let rows: Vec<&FeatureRow> = rows.into_iter().collect();
    let Some(first) = rows.first() else {
        return Err(Error::usage("cannot fit normalization on zero rows"));
    };
    let width = first.features.len();
    if rows.iter().any(|r| r.features.len() != width) {
        return Err(Error::data("rows have different feature counts"));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; width];
    for r in &rows {
        for (m, x) in mean.iter_mut().zip(&r.features) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; width];
    for r in &rows {
        for ((v, x), m) in var.iter_mut().zip(&r.features).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
    Ok(NormStats { mean, std })
}

pub fn zscore_apply(stats: &NormStats, rows: &[FeatureRow]) -> Result<Vec<FeatureRow>> {
    rows.iter()
        .map(|r| {
            if r.features.len() != stats.n_features() {
                return Err(Error::usage(format!(
                    "row has {} features, normalization expects {}",
                    r.features.len(),
                    stats.n_features()
                )));
            }
            Ok(FeatureRow {
                features: stats.apply_one(&r.features),
                ..r.clone()
            })
        })
        .collect()
}

fn normalize_lists(stats: &NormStats, lists: &[QueryList]) -> Result<Vec<QueryList>> {
    lists
        .iter()
        .map(|l| {
            Ok(QueryList {
                query_id: l.query_id.clone(),
                rows: zscore_apply(stats, &l.rows)?,
            })
        })
        .collect()
}

/// AP of a ranking by descending score, ties broken by input position.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::usage("scores and labels differ in length"));
    }
    let n_rel = labels.iter().filter(|&&l| l == 1).count();
    if n_rel == 0 {
        return Err(Error::data("average precision is undefined without a positive"));
    }
    if n_rel == 1 {
        let p = labels.iter().position(|&l| l == 1).expect("one positive");
        let sp = scores[p];
        let ahead = scores
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > sp || (s == sp && j < p))
            .count();
        return Ok(1.0 / (ahead + 1) as f64);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            total += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(total / n_rel as f64)
}

/// Unweighted mean of per-query AP under `weights · features`.
pub fn mean_ap(lists: &[QueryList], weights: &[f64]) -> Result<f64> {
    if lists.is_empty() {
        return Err(Error::usage("mean AP over zero queries"));
    }
    let mut total = 0.0;
    for l in lists {
        if l.n_features() != weights.len() {
            return Err(Error::usage(format!(
                "query `{}` has {} features, weights have {}",
                l.query_id,
                l.n_features(),
                weights.len()
            )));
        }
        total += average_precision(&l.scores(weights), &l.labels())?;
    }
    Ok(total / lists.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Query lists per mini-batch.
    pub minibatch_size: usize,
    /// Stop once full-train MAP changes by less than this fraction.
    pub rel_tol: f64,
    pub restarts: usize,
    /// Each scale `s` proposes `w ± s` and `w · (1 ± s)`.
    pub step_scales: Vec<f64>,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            minibatch_size: 1000,
            rel_tol: 0.01,
            restarts: 20,
            step_scales: vec![0.05, 0.1, 0.2, 0.5, 1.0, 2.0],
            max_epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.minibatch_size == 0 {
            return Err(Error::usage("minibatch_size must be at least 1"));
        }
        if self.restarts == 0 {
            return Err(Error::usage("restarts must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::usage("max_epochs must be at least 1"));
        }
        if self.rel_tol.is_nan() || self.rel_tol < 0.0 {
            return Err(Error::usage("rel_tol must be non-negative"));
        }
        if self.step_scales.is_empty() || self.step_scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::usage("step_scales must be non-empty and positive"));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        crate::manifest::json_digest(self)
    }
}

/// One accepted coordinate move and the batch MAP on either side of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptedStep {
    pub epoch: usize,
    pub batch: usize,
    pub feature: usize,
    pub from: f64,
    pub to: f64,
    pub batch_map_before: f64,
    pub batch_map_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartTrace {
    pub restart: usize,
    pub initial_weights: Vec<f64>,
    pub weights: Vec<f64>,
    /// Full-train MAP before the first epoch, then after each epoch.
    pub train_map_by_epoch: Vec<f64>,
    pub accepted: Vec<AcceptedStep>,
}

impl RestartTrace {
    pub fn epochs(&self) -> usize {
        self.train_map_by_epoch.len() - 1
    }

    pub fn train_map(&self) -> f64 {
        *self.train_map_by_epoch.last().expect("initial MAP is always recorded")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Weights over z-scored features.
    pub weights: Vec<f64>,
    pub norm: NormStats,
    pub train_map: f64,
    pub best_restart: usize,
    pub restarts: Vec<RestartTrace>,
}

/// Rows of one list flattened for fast rescoring.
struct Dense {
    n_features: usize,
    x: Vec<f64>,
    labels: Vec<u8>,
}

impl Dense {
    fn new(list: &QueryList) -> Self {
        Self {
            n_features: list.n_features(),
            x: list.rows.iter().flat_map(|r| r.features.iter().copied()).collect(),
            labels: list.labels(),
        }
    }

    fn scores(&self, w: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.x.chunks_exact(self.n_features).map(|row| dot(w, row)));
    }
}

fn dense_map(lists: &[&Dense], w: &[f64], buf: &mut Vec<f64>) -> f64 {
    let mut total = 0.0;
    for l in lists {
        l.scores(w, buf);
        total += average_precision(buf, &l.labels).expect("lists are validated");
    }
    total / lists.len() as f64
}

fn candidates(w: f64, scales: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(scales.len() * 4);
    for s in scales {
        out.extend([w + s, w - s, w * (1.0 + s), w * (1.0 - s)]);
    }
    out
}

fn random_unit(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn run_restart(lists: &[Dense], n_features: usize, config: &TrainConfig, restart: usize) -> RestartTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(restart as u64));
    let initial_weights = random_unit(n_features, &mut rng);
    let mut w = initial_weights.clone();
    let mut buf = Vec::new();
    let all: Vec<&Dense> = lists.iter().collect();
    let mut train_map_by_epoch = vec![dense_map(&all, &w, &mut buf)];
    let mut accepted = Vec::new();
    let mut order: Vec<usize> = (0..lists.len()).collect();

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        for (batch_idx, chunk) in order.chunks(config.minibatch_size).enumerate() {
            let batch: Vec<&Dense> = chunk.iter().map(|&i| &lists[i]).collect();
            let mut current = dense_map(&batch, &w, &mut buf);
            for f in 0..n_features {
                let original = w[f];
                let mut best: Option<(f64, f64)> = None;
                for value in candidates(original, &config.step_scales) {
                    if value == original || !value.is_finite() {
                        continue;
                    }
                    w[f] = value;
                    let m = dense_map(&batch, &w, &mut buf);
                    if best.is_none_or(|(_, bm)| m > bm) {
                        best = Some((value, m));
                    }
                }
                match best {
                    Some((value, m)) if m > current => {
                        w[f] = value;
                        accepted.push(AcceptedStep {
                            epoch,
                            batch: batch_idx,
                            feature: f,
                            from: original,
                            to: value,
                            batch_map_before: current,
                            batch_map_after: m,
                        });
                        current = m;
                    }
                    _ => w[f] = original,
                }
            }
        }
        let prev = *train_map_by_epoch.last().expect("non-empty");
        let now = dense_map(&all, &w, &mut buf);
        train_map_by_epoch.push(now);
        let change = if prev > 0.0 {
            (now - prev).abs() / prev
        } else {
            (now - prev).abs()
        };
        if change < config.rel_tol {
            break;
        }
    }
    RestartTrace {
        restart,
        initial_weights,
        weights: w,
        train_map_by_epoch,
        accepted,
    }
}

/// Fits z-score statistics on all training rows, then runs the restarts in
/// parallel and keeps the best training MAP (ties to the lowest restart).
pub fn coordinate_ascent_train(lists: &[QueryList], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if lists.is_empty() {
        return Err(Error::usage("training set is empty"));
    }
    let n_features = lists[0].n_features();
    if n_features == 0 {
        return Err(Error::usage("query lists have no features"));
    }
    if let Some(l) = lists.iter().find(|l| l.n_features() != n_features) {
        return Err(Error::data(format!(
            "query `{}` has {} features, expected {n_features}",
            l.query_id,
            l.n_features()
        )));
    }
    let norm = zscore_fit(lists.iter().flat_map(|l| &l.rows))?;
    let normalized = normalize_lists(&norm, lists)?;
    let dense: Vec<Dense> = normalized.iter().map(Dense::new).collect();

    let restarts: Vec<RestartTrace> = (0..config.restarts)
        .into_par_iter()
        .map(|r| run_restart(&dense, n_features, config, r))
        .collect();
    let best = restarts.iter().enumerate().fold(0, |best, (i, r)| {
        if r.train_map() > restarts[best].train_map() {
            i
        } else {
            best
        }
    });
    for r in &restarts {
        log::debug!(
            "restart {}: MAP {:.4} after {} epochs",
            r.restart,
            r.train_map(),
            r.epochs()
        );
    }
    Ok(TrainOutcome {
        weights: restarts[best].weights.clone(),
        norm,
        train_map: restarts[best].train_map(),
        best_restart: best,
        restarts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedAspect {
    pub aspect_id: String,
    pub score: f64,
    pub probability: f64,
}

/// Rows ordered by `weights · zscore(features)`, ties by aspect id, with
/// softmax probabilities over the scores.
pub fn rank(weights: &[f64], stats: &NormStats, rows: &[FeatureRow]) -> Result<Vec<RankedAspect>> {
    if weights.len() != stats.n_features() {
        return Err(Error::usage("weights and normalization disagree on feature count"));
    }
    let mut ranked = zscore_apply(stats, rows)?
        .into_iter()
        .map(|r| RankedAspect {
            score: dot(weights, &r.features),
            aspect_id: r.aspect_id,
            probability: 0.0,
        })
        .collect::<Vec<_>>();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.aspect_id.cmp(&b.aspect_id)));
    if let Some(max) = ranked.first().map(|r| r.score) {
        let z: f64 = ranked.iter().map(|r| (r.score - max).exp()).sum();
        for r in &mut ranked {
            r.probability = (r.score - max).exp() / z;
        }
    }
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtrModel {
    pub weights: Vec<f64>,
    pub norm: NormStats,
    pub feature_order: Vec<String>,
    pub config_digest: String,
}

impl LtrModel {
    pub fn new(outcome: &TrainOutcome, feature_order: Vec<String>, config: &TrainConfig) -> Result<Self> {
        if feature_order.len() != outcome.weights.len() {
            return Err(Error::usage(format!(
                "{} feature names for {} weights",
                feature_order.len(),
                outcome.weights.len()
            )));
        }
        Ok(Self {
            weights: outcome.weights.clone(),
            norm: outcome.norm.clone(),
            feature_order,
            config_digest: config.digest(),
        })
    }

    pub fn rank(&self, rows: &[FeatureRow]) -> Result<Vec<RankedAspect>> {
        rank(&self.weights, &self.norm, rows)
    }

    /// MAP of the model on raw (unnormalized) query lists.
    pub fn mean_ap(&self, lists: &[QueryList]) -> Result<f64> {
        mean_ap(&normalize_lists(&self.norm, lists)?, &self.weights)
    }

    /// Per-query AP in input order.
    pub fn average_precisions(&self, lists: &[QueryList]) -> Result<Vec<f64>> {
        normalize_lists(&self.norm, lists)?
            .iter()
            .map(|l| average_precision(&l.scores(&self.weights), &l.labels()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::jsonl::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: Self = crate::jsonl::read_json(path)?;
        let n = model.weights.len();
        if model.norm.mean.len() != n || model.norm.std.len() != n || model.feature_order.len() != n {
            return Err(Error::data(format!(
                "{}: inconsistent model dimensions",
                path.display()
            )));
        }
        if model
            .weights
            .iter()
            .chain(&model.norm.mean)
            .chain(&model.norm.std)
            .any(|x| !x.is_finite())
        {
            return Err(Error::numeric(format!(
                "{}: non-finite model parameter",
                path.display()
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(q: &str, a: &str, features: Vec<f64>, label: u8) -> FeatureRow {
        FeatureRow {
            query_id: q.into(),
            aspect_id: a.into(),
            features,
            label,
        }
    }

    #[test]
    fn zscore_examples() {
        let rows = vec![row("q", "a", vec![1.0, 5.0], 0), row("q", "b", vec![3.0, 5.0], 1)];
        let stats = zscore_fit(&rows).unwrap();
        let out = zscore_apply(&stats, &rows).unwrap();
        assert_eq!(out[0].features, [-1.0, 0.0]);
        assert_eq!(out[1].features, [1.0, 0.0]);
        assert!(zscore_fit(&[]).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(average_precision(&[4.0, 3.0, 2.0, 1.0], &[0, 1, 0, 0]).unwrap(), 0.5);
        let ap = average_precision(&[3.0, 2.0, 1.0], &[1, 0, 1]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        // Ties go to the earlier position.
        assert_eq!(average_precision(&[1.0, 1.0], &[0, 1]).unwrap(), 0.5);
        assert!(matches!(average_precision(&[1.0], &[0]), Err(Error::Data(_))));
    }

    #[test]
    fn query_list_validation() {
        assert!(QueryList::new("q", vec![row("q", "a", vec![1.0], 1)]).is_err());
        assert!(QueryList::new("q", vec![row("q", "a", vec![1.0], 0), row("q", "b", vec![1.0], 0)]).is_err());
        assert!(QueryList::new("q", vec![row("q", "a", vec![1.0], 1), row("q", "a", vec![1.0], 0)]).is_err());
        let l = QueryList::new("q", vec![row("q", "b", vec![1.0], 1), row("q", "a", vec![2.0], 0)]).unwrap();
        assert_eq!(l.rows[0].aspect_id, "a");
    }

    #[test]
    fn mean_of_two_queries() {
        let l1 = QueryList::new("1", vec![row("1", "a", vec![2.0], 1), row("1", "b", vec![1.0], 0)]).unwrap();
        let l2 = QueryList::new("2", vec![row("2", "a", vec![2.0], 0), row("2", "b", vec![1.0], 1)]).unwrap();
        assert_eq!(mean_ap(&[l1, l2], &[1.0]).unwrap(), 0.75);
    }

    fn planted(n: usize, flip: bool) -> Vec<QueryList> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..n)
            .map(|q| {
                let qid = format!("q{q}");
                let gold = (q * 7) % 5;
                let rows = (0..5)
                    .map(|a| {
                        let label = u8::from(a == gold);
                        let signal = if flip { 1.0 - label as f64 } else { label as f64 };
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        row(&qid, &format!("a{a}"), vec![noise, signal], label)
                    })
                    .collect();
                QueryList::new(&qid, rows).unwrap()
            })
            .collect()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            restarts: 3,
            max_epochs: 50,
            ..Default::default()
        }
    }

    #[test]
    fn learns_planted_signal_and_sign_flip() {
        let out = coordinate_ascent_train(&planted(40, false), &quick()).unwrap();
        assert_eq!(out.train_map, 1.0);
        let out = coordinate_ascent_train(&planted(40, true), &quick()).unwrap();
        assert_eq!(out.train_map, 1.0);
        assert!(out.weights[1] < 0.0);
    }

    #[test]
    fn zero_features_fall_back_to_tie_order() {
        let lists = vec![
            QueryList::new("1", vec![row("1", "a", vec![0.0], 0), row("1", "b", vec![0.0], 1)]).unwrap(),
            QueryList::new("2", vec![row("2", "a", vec![0.0], 1), row("2", "b", vec![0.0], 0)]).unwrap(),
        ];
        let out = coordinate_ascent_train(&lists, &quick()).unwrap();
        assert_eq!(out.train_map, 0.75);
    }

    #[test]
    fn training_is_deterministic_and_monotone() {
        let lists = planted(30, false);
        let a = coordinate_ascent_train(&lists, &quick()).unwrap();
        let b = coordinate_ascent_train(&lists, &quick()).unwrap();
        assert_eq!(a, b);
        for r in &a.restarts {
            assert!(r.accepted.iter().all(|s| s.batch_map_after > s.batch_map_before));
        }
        assert!(coordinate_ascent_train(&[], &quick()).is_err());
    }

    #[test]
    fn rank_orders_and_breaks_ties() {
        let rows = vec![
            row("q", "b", vec![1.0], 0),
            row("q", "a", vec![1.0], 0),
            row("q", "c", vec![3.0], 1),
        ];
        let ranked = rank(&[1.0], &NormStats::identity(1), &rows).unwrap();
        let ids: Vec<_> = ranked.iter().map(|r| r.aspect_id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
        assert!((ranked.iter().map(|r| r.probability).sum::<f64>() - 1.0).abs() < 1e-12);
        let scaled = rank(&[5.0], &NormStats::identity(1), &rows).unwrap();
        assert_eq!(ids, scaled.iter().map(|r| r.aspect_id.as_str()).collect::<Vec<_>>());
        assert!(matches!(
            rank(&[1.0, 2.0], &NormStats::identity(2), &rows),
            Err(Error::Usage(_))
        ));
    }
}
