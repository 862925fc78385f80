//! Aspect-related image retrieval.
//!
//! A linear projection maps the concatenation of an entity's overall image
//! embedding and an aspect label's text embedding into image space. It is
//! trained with an in-batch InfoNCE loss on (overall image, aspect, positive
//! image) triples, then used to rank, prune and assign aspect images.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::{cosine, cosine_slices, dot, sort_by_score_then_id, EncoderProvider, Vector};
use crate::error::{Error, Result};
use crate::features::{image_feature_with, ContextSentence, ImageSelection};
use crate::kg::{AspectImageLink, AspectKg, KgParts};

/// Positives kept per (entity, first-level aspect).
pub const POSITIVES_PER_ASPECT: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AirTriple {
    pub entity_id: String,
    pub overall_image_id: String,
    pub aspect_label: String,
    pub positive_image_id: String,
}

/// The entity image closest to the entity name's text embedding, ties to the
/// lowest image id.
pub fn overall_image(kg: &AspectKg, provider: &dyn EncoderProvider, entity_id: &str) -> Result<String> {
    let entity = kg
        .entity(entity_id)
        .ok_or_else(|| Error::Lookup(format!("entity `{entity_id}`")))?;
    let images = kg.entity_images(entity_id);
    if images.is_empty() {
        return Err(Error::data(format!("entity `{entity_id}` has no images")));
    }
    let name = provider.encode_text(&entity.name)?;
    let mut scored = images
        .into_iter()
        .map(|id| Ok((id.to_string(), cosine(&name, &provider.encode_image(id)?)?)))
        .collect::<Result<Vec<_>>>()?;
    sort_by_score_then_id(&mut scored);
    Ok(scored.swap_remove(0).0)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleReport {
    pub n_triples: usize,
    pub n_entities: usize,
    /// Entities without any linked image.
    pub skipped_entities: Vec<String>,
}

/// One triple per (entity, first-level aspect, positive), positives being the
/// aspect's top images by similarity to the aspect label.
pub fn build_triples(kg: &AspectKg, provider: &dyn EncoderProvider) -> Result<(Vec<AirTriple>, TripleReport)> {
    let mut triples = Vec::new();
    let mut report = TripleReport::default();
    for entity in kg.entities() {
        if kg.entity_images(&entity.id).is_empty() {
            log::info!("skipping entity `{}`: no images", entity.id);
            report.skipped_entities.push(entity.id.clone());
            continue;
        }
        report.n_entities += 1;
        let overall = overall_image(kg, provider, &entity.id)?;
        for label in kg.first_level_labels(&entity.id) {
            let images = kg.aspect_images(&entity.id, label);
            if images.is_empty() {
                continue;
            }
            let query = provider.encode_text(label)?;
            let mut scored = images
                .into_iter()
                .map(|id| Ok((id.to_string(), cosine(&query, &provider.encode_image(id)?)?)))
                .collect::<Result<Vec<_>>>()?;
            sort_by_score_then_id(&mut scored);
            for (id, _) in scored.into_iter().take(POSITIVES_PER_ASPECT) {
                triples.push(AirTriple {
                    entity_id: entity.id.clone(),
                    overall_image_id: overall.clone(),
                    aspect_label: label.to_string(),
                    positive_image_id: id,
                });
            }
        }
    }
    report.n_triples = triples.len();
    Ok((triples, report))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<AirTriple>,
    pub validation: Vec<AirTriple>,
    pub test: Vec<AirTriple>,
}

/// Validation and test each get `round(n · 4663 / 46779)` triples, the
/// proportion of the reference 37,453 / 4,663 / 4,663 split of 46,779
/// samples; train gets the rest. Small `n` behaves like 8:1:1.
pub const HOLDOUT: (usize, usize) = (4_663, 46_779);

pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let (num, den) = HOLDOUT;
    let holdout = (2 * n * num + den) / (2 * den);
    (n - 2 * holdout, holdout, holdout)
}

/// Seeded shuffle, then train / validation / test in 8:1:1 proportion.
pub fn split_triples(triples: &[AirTriple], seed: u64) -> DatasetSplit {
    let mut shuffled = triples.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (n_train, n_val, _) = split_sizes(shuffled.len());
    let test = shuffled.split_off(n_train + n_val);
    let validation = shuffled.split_off(n_train);
    DatasetSplit {
        train: shuffled,
        validation,
        test,
    }
}

/// `W` of shape `image_dim × (image_dim + text_dim)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModel {
    w: Vec<f64>,
    image_dim: usize,
    text_dim: usize,
    tau: f64,
}

impl ProjectionModel {
    pub fn new(w: Vec<f64>, image_dim: usize, text_dim: usize, tau: f64) -> Result<Self> {
        if image_dim == 0 || text_dim == 0 {
            return Err(Error::usage("projection dimensions must be positive"));
        }
        if w.len() != image_dim * (image_dim + text_dim) {
            return Err(Error::usage(format!(
                "W has {} entries, expected {image_dim} x {}",
                w.len(),
                image_dim + text_dim
            )));
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::usage(format!("tau must be positive, got {tau}")));
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric("W has non-finite entries"));
        }
        Ok(Self {
            w,
            image_dim,
            text_dim,
            tau,
        })
    }

    pub fn zeros(image_dim: usize, text_dim: usize, tau: f64) -> Result<Self> {
        Self::new(vec![0.0; image_dim * (image_dim + text_dim)], image_dim, text_dim, tau)
    }

    /// `[I | 0]`: the output is the overall image embedding.
    pub fn overall_identity(image_dim: usize, text_dim: usize, tau: f64) -> Result<Self> {
        let mut m = Self::zeros(image_dim, text_dim, tau)?;
        for i in 0..image_dim {
            m.set(i, i, 1.0);
        }
        Ok(m)
    }

    /// `[0 | I]`: the output is the aspect text embedding. Needs equal dims.
    pub fn aspect_identity(dim: usize, tau: f64) -> Result<Self> {
        let mut m = Self::zeros(dim, dim, tau)?;
        for i in 0..dim {
            m.set(i, dim + i, 1.0);
        }
        Ok(m)
    }

    /// Gaussian entries with standard deviation `scale`.
    pub fn random(image_dim: usize, text_dim: usize, tau: f64, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = image_dim * (image_dim + text_dim);
        let w = (0..n)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                scale * g
            })
            .collect();
        Self::new(w, image_dim, text_dim, tau)
    }

    pub fn image_dim(&self) -> usize {
        self.image_dim
    }

    pub fn text_dim(&self) -> usize {
        self.text_dim
    }

    pub fn input_dim(&self) -> usize {
        self.image_dim + self.text_dim
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.w
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.w[row * self.input_dim() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let cols = self.input_dim();
        self.w[row * cols + col] = value;
    }

    /// `W x` for an already concatenated input.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::usage(format!(
                "input has dim {}, projection expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(self.w.chunks_exact(self.input_dim()).map(|row| dot(row, x)).collect())
    }

    /// `W (overall ⊕ aspect)`.
    pub fn forward(&self, overall: &Vector, aspect: &Vector) -> Result<Vector> {
        if overall.dim() != self.image_dim || aspect.dim() != self.text_dim {
            return Err(Error::usage(format!(
                "forward got dims ({}, {}), model expects ({}, {})",
                overall.dim(),
                aspect.dim(),
                self.image_dim,
                self.text_dim
            )));
        }
        Ok(Vector::new(self.project(overall.concat(aspect).values())?)
            .unwrap_or_else(|_| Vector::zeros(self.image_dim)))
    }

    pub fn save(&self, path: &Path, config_digest: &str) -> Result<()> {
        crate::jsonl::write_json(
            path,
            &ProjectionFile {
                w: self.w.clone(),
                image_dim: self.image_dim,
                text_dim: self.text_dim,
                tau: self.tau,
                config_digest: config_digest.to_string(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let file: ProjectionFile = crate::jsonl::read_json(path)?;
        let model = Self::new(file.w, file.image_dim, file.text_dim, file.tau)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        Ok((model, file.config_digest))
    }
}

#[derive(Serialize, Deserialize)]
struct ProjectionFile {
    w: Vec<f64>,
    image_dim: usize,
    text_dim: usize,
    tau: f64,
    config_digest: String,
}

/// Row-wise softmax of `sims / tau` with max subtraction.
fn softmax_rows(sims: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
    sims.iter()
        .map(|row| {
            let max = row.iter().map(|s| s / tau).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|s| (s / tau - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / z).collect()
        })
        .collect()
}

fn check_batch(projected_len: usize, positives_len: usize, tau: f64) -> Result<()> {
    if projected_len != positives_len {
        return Err(Error::usage("projected and positive batches differ in size"));
    }
    if projected_len < 2 {
        return Err(Error::usage("InfoNCE needs a batch of at least 2"));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::usage(format!("tau must be positive, got {tau}")));
    }
    Ok(())
}

fn similarity_matrix(projected: &[&[f64]], positives: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let sims: Vec<Vec<f64>> = projected
        .iter()
        .map(|p| positives.iter().map(|c| cosine_slices(p, c)).collect())
        .collect();
    if sims.iter().flatten().any(|s| !s.is_finite()) {
        return Err(Error::numeric("non-finite similarity in InfoNCE"));
    }
    Ok(sims)
}

/// Mean in-batch InfoNCE: row `i` scores its own positive against all `N`
/// positives of the batch by cosine over `tau`.
pub fn info_nce_loss(projected: &[Vector], positives: &[Vector], tau: f64) -> Result<f64> {
    check_batch(projected.len(), positives.len(), tau)?;
    let p: Vec<&[f64]> = projected.iter().map(Vector::values).collect();
    let c: Vec<&[f64]> = positives.iter().map(Vector::values).collect();
    loss_from_sims(&similarity_matrix(&p, &c)?, tau)
}

fn loss_from_sims(sims: &[Vec<f64>], tau: f64) -> Result<f64> {
    let n = sims.len() as f64;
    let mut total = 0.0;
    for (i, row) in sims.iter().enumerate() {
        let max = row.iter().map(|s| s / tau).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|s| (s / tau - max).exp()).sum::<f64>().ln();
        total += lse - row[i] / tau;
    }
    let loss = total / n;
    if !loss.is_finite() {
        return Err(Error::numeric("non-finite InfoNCE loss"));
    }
    Ok(loss.max(0.0))
}

/// Loss of `model` on concatenated inputs and their positives.
pub fn batch_loss(model: &ProjectionModel, inputs: &[Vec<f64>], positives: &[Vec<f64>]) -> Result<f64> {
    check_batch(inputs.len(), positives.len(), model.tau)?;
    let projected = inputs.iter().map(|x| model.project(x)).collect::<Result<Vec<_>>>()?;
    let p: Vec<&[f64]> = projected.iter().map(Vec::as_slice).collect();
    let c: Vec<&[f64]> = positives.iter().map(Vec::as_slice).collect();
    loss_from_sims(&similarity_matrix(&p, &c)?, model.tau)
}

/// Loss and its gradient with respect to `W` (row-major, same shape).
///
/// With `s_ij = cos(p_i, c_j)`, `p_i = W x_i` and `q` the row softmax:
/// `g_i = (1/N) Σ_j (q_ij − δ_ij)/τ · (ĉ_j − s_ij p̂_i)/‖p_i‖` and
/// `∂L/∂W = Σ_i g_i x_iᵀ`. Rows with `p_i = 0` contribute no gradient.
pub fn batch_loss_and_gradient(
    model: &ProjectionModel,
    inputs: &[Vec<f64>],
    positives: &[Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    check_batch(inputs.len(), positives.len(), model.tau)?;
    let n = inputs.len();
    let tau = model.tau;
    let projected = inputs.iter().map(|x| model.project(x)).collect::<Result<Vec<_>>>()?;
    let p: Vec<&[f64]> = projected.iter().map(Vec::as_slice).collect();
    let c: Vec<&[f64]> = positives.iter().map(Vec::as_slice).collect();
    let sims = similarity_matrix(&p, &c)?;
    let loss = loss_from_sims(&sims, tau)?;
    let q = softmax_rows(&sims, tau);

    let unit = |v: &[f64]| -> (Vec<f64>, f64) {
        let norm = dot(v, v).sqrt();
        if norm == 0.0 {
            (vec![0.0; v.len()], 0.0)
        } else {
            (v.iter().map(|x| x / norm).collect(), norm)
        }
    };
    let c_hat: Vec<Vec<f64>> = c.iter().map(|v| unit(v).0).collect();

    let rows = model.image_dim;
    let cols = model.input_dim();
    let mut grad = vec![0.0; rows * cols];
    for i in 0..n {
        let (p_hat, p_norm) = unit(p[i]);
        if p_norm == 0.0 {
            continue;
        }
        let mut g = vec![0.0; rows];
        for j in 0..n {
            let coef = (q[i][j] - if i == j { 1.0 } else { 0.0 }) / (tau * n as f64);
            if coef == 0.0 {
                continue;
            }
            for d in 0..rows {
                g[d] += coef * (c_hat[j][d] - sims[i][j] * p_hat[d]) / p_norm;
            }
        }
        let x = &inputs[i];
        for (d, gd) in g.iter().enumerate() {
            let row = &mut grad[d * cols..(d + 1) * cols];
            for (r, xk) in row.iter_mut().zip(x) {
                *r += gd * xk;
            }
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AirTrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub tau: f64,
}

impl Default for AirTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 0.05,
            epochs: 20,
            seed: 0,
            tau: 0.07,
        }
    }
}

impl AirTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::usage("batch_size must be at least 2"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::usage("learning_rate must be finite and non-negative"));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::usage("tau must be positive"));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        crate::manifest::json_digest(self)
    }
}

/// Concatenated `(overall ⊕ aspect)` inputs and positive image vectors.
#[derive(Debug, Clone, Default)]
pub struct EncodedTriples {
    pub inputs: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
}

impl EncodedTriples {
    pub fn encode(triples: &[AirTriple], provider: &dyn EncoderProvider) -> Result<Self> {
        let mut text_cache: BTreeMap<&str, Vector> = BTreeMap::new();
        let mut image_cache: BTreeMap<&str, Vector> = BTreeMap::new();
        let mut out = Self::default();
        for t in triples {
            if !text_cache.contains_key(t.aspect_label.as_str()) {
                text_cache.insert(&t.aspect_label, provider.encode_text(&t.aspect_label)?);
            }
            for id in [&t.overall_image_id, &t.positive_image_id] {
                if !image_cache.contains_key(id.as_str()) {
                    image_cache.insert(id, provider.encode_image(id)?);
                }
            }
            let overall = &image_cache[t.overall_image_id.as_str()];
            out.inputs
                .push(overall.concat(&text_cache[t.aspect_label.as_str()]).into_values());
            out.positives
                .push(image_cache[t.positive_image_id.as_str()].values().to_vec());
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (
            idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            idx.iter().map(|&i| self.positives[i].clone()).collect(),
        )
    }

    /// Mean loss over consecutive batches in stored order.
    pub fn mean_loss(&self, model: &ProjectionModel, batch_size: usize) -> Result<f64> {
        let order: Vec<usize> = (0..self.len()).collect();
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(batch_size).filter(|c| c.len() >= 2) {
            let (x, c) = self.batch(chunk);
            total += batch_loss(model, &x, &c)?;
            count += 1;
        }
        if count == 0 {
            return Err(Error::usage("need at least 2 triples to evaluate the loss"));
        }
        Ok(total / count as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AirTrainOutcome {
    pub model: ProjectionModel,
    /// Training loss before the first epoch.
    pub initial_loss: f64,
    /// Training loss after each epoch.
    pub loss_curve: Vec<f64>,
    pub validation_curve: Vec<f64>,
}

/// Mini-batch SGD on `W`. Each epoch reshuffles the training triples; a
/// trailing batch smaller than 2 is dropped. Losses in the curves use a fixed
/// batching so they are comparable across epochs.
pub fn train(
    model: &ProjectionModel,
    split: &DatasetSplit,
    provider: &dyn EncoderProvider,
    config: &AirTrainConfig,
) -> Result<AirTrainOutcome> {
    config.validate()?;
    let train_set = EncodedTriples::encode(&split.train, provider)?;
    let val_set = EncodedTriples::encode(&split.validation, provider)?;
    train_encoded(model, &train_set, &val_set, config)
}

pub fn train_encoded(
    model: &ProjectionModel,
    train_set: &EncodedTriples,
    val_set: &EncodedTriples,
    config: &AirTrainConfig,
) -> Result<AirTrainOutcome> {
    config.validate()?;
    if train_set.len() < 2 {
        return Err(Error::usage("training needs at least 2 triples"));
    }
    let mut model = ProjectionModel::new(model.w.clone(), model.image_dim, model.text_dim, config.tau)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let initial_loss = train_set.mean_loss(&model, config.batch_size)?;
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut validation_curve = Vec::new();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size).filter(|c| c.len() >= 2) {
            let (x, c) = train_set.batch(chunk);
            let (loss, grad) = batch_loss_and_gradient(&model, &x, &c)?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!("loss diverged in epoch {epoch}")));
            }
            for (w, g) in model.w.iter_mut().zip(&grad) {
                *w -= config.learning_rate * g;
            }
            if model.w.iter().any(|w| !w.is_finite()) {
                return Err(Error::numeric(format!(
                    "W became non-finite in epoch {epoch} (last batch loss {loss})"
                )));
            }
        }
        let loss = train_set.mean_loss(&model, config.batch_size)?;
        log::debug!("epoch {epoch}: train loss {loss:.5}");
        loss_curve.push(loss);
        if val_set.len() >= 2 {
            validation_curve.push(val_set.mean_loss(&model, config.batch_size)?);
        }
    }
    Ok(AirTrainOutcome {
        model,
        initial_loss,
        loss_curve,
        validation_curve,
    })
}

/// Scores candidate images for an (overall image, aspect label) query.
pub trait ImageRetriever: Send + Sync {
    fn query_vector(
        &self,
        provider: &dyn EncoderProvider,
        overall_image_id: &str,
        aspect_label: &str,
    ) -> Result<Vector>;
}

impl ImageRetriever for ProjectionModel {
    fn query_vector(
        &self,
        provider: &dyn EncoderProvider,
        overall_image_id: &str,
        aspect_label: &str,
    ) -> Result<Vector> {
        self.forward(
            &provider.encode_image(overall_image_id)?,
            &provider.encode_text(aspect_label)?,
        )
    }
}

/// Scores by similarity to the aspect label's text embedding alone.
#[derive(Debug, Clone, Copy, Default)]
pub struct TextBaseline;

impl ImageRetriever for TextBaseline {
    fn query_vector(&self, provider: &dyn EncoderProvider, _overall: &str, aspect_label: &str) -> Result<Vector> {
        provider.encode_text(aspect_label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// `(image_id, score)`, best first, ties by id.
    pub ranked: Vec<(String, f64)>,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<&str> {
        self.ranked.iter().map(|(id, _)| id.as_str()).collect()
    }
}

pub fn retrieve(
    retriever: &dyn ImageRetriever,
    provider: &dyn EncoderProvider,
    overall_image_id: &str,
    aspect_label: &str,
    candidates: &[&str],
) -> Result<RetrievalResult> {
    let query = retriever.query_vector(provider, overall_image_id, aspect_label)?;
    let mut ranked = candidates
        .iter()
        .map(|id| Ok((id.to_string(), cosine(&query, &provider.encode_image(id)?)?)))
        .collect::<Result<Vec<_>>>()?;
    sort_by_score_then_id(&mut ranked);
    Ok(RetrievalResult { ranked })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectionPolicy {
    /// Remove images scoring below the threshold.
    Threshold(f64),
    /// Keep the best `m` images of each aspect.
    KeepTop(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovedLink {
    pub link: AspectImageLink,
    pub score: f64,
}

/// Scores each (entity, first-level aspect) group's images and drops the
/// links of those failing `policy`. Images stay in the graph.
pub fn correct_kg(
    kg: &AspectKg,
    retriever: &dyn ImageRetriever,
    provider: &dyn EncoderProvider,
    policy: CorrectionPolicy,
) -> Result<(AspectKg, Vec<RemovedLink>)> {
    let mut dropped: BTreeMap<(String, String, String), f64> = BTreeMap::new();
    for entity in kg.entities() {
        if kg.entity_images(&entity.id).is_empty() {
            continue;
        }
        let overall = overall_image(kg, provider, &entity.id)?;
        for label in kg.first_level_labels(&entity.id) {
            let images = kg.aspect_images(&entity.id, label);
            if images.is_empty() {
                continue;
            }
            let result = retrieve(retriever, provider, &overall, label, &images)?;
            for (rank, (id, score)) in result.ranked.into_iter().enumerate() {
                let remove = match policy {
                    CorrectionPolicy::Threshold(theta) => score < theta,
                    CorrectionPolicy::KeepTop(m) => rank >= m,
                };
                if remove {
                    dropped.insert((entity.id.clone(), label.to_string(), id), score);
                }
            }
        }
    }
    let mut parts: KgParts = kg.to_parts();
    let mut removed = Vec::new();
    parts.links.retain(|l| {
        let key = (
            l.entity_id.clone(),
            l.aspect_path.first_level().to_string(),
            l.image_id.clone(),
        );
        match dropped.get(&key) {
            Some(&score) => {
                removed.push(RemovedLink { link: l.clone(), score });
                false
            }
            None => true,
        }
    });
    Ok((AspectKg::new(parts)?, removed))
}

/// The entity's first-level aspect under which `image_id` scores highest,
/// ties to the alphabetically first label.
pub fn expand_assign(
    image_id: &str,
    entity_id: &str,
    kg: &AspectKg,
    retriever: &dyn ImageRetriever,
    provider: &dyn EncoderProvider,
) -> Result<(String, f64)> {
    let labels: BTreeSet<&str> = kg.first_level_labels(entity_id).into_iter().collect();
    if labels.is_empty() {
        return Err(Error::data(format!("entity `{entity_id}` has no aspects")));
    }
    let overall = overall_image(kg, provider, entity_id)?;
    let mut best: Option<(String, f64)> = None;
    for label in labels {
        let score = retrieve(retriever, provider, &overall, label, &[image_id])?.ranked[0].1;
        if best.as_ref().is_none_or(|(_, b)| score > *b) {
            best = Some((label.to_string(), score));
        }
    }
    Ok(best.expect("at least one label"))
}

/// The image feature with images chosen by the projection model's score.
pub fn eal_image_feature_air(
    ctx: &ContextSentence,
    aspect_label: &str,
    kg: &AspectKg,
    model: &ProjectionModel,
    provider: &dyn EncoderProvider,
) -> Result<f64> {
    image_feature_with(ctx, aspect_label, kg, provider, ImageSelection::Retriever(model))
}

pub fn save_triples(path: &Path, triples: &[AirTriple]) -> Result<()> {
    crate::jsonl::write_records(path, triples)
}

pub fn load_triples(path: &Path) -> Result<Vec<AirTriple>> {
    Ok(crate::jsonl::read_records(path)?.into_iter().map(|(_, t)| t).collect())
}
