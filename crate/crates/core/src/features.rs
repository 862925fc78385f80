//! Similarity features between a context sentence and candidate aspects.
//!
//! Seven text features compare the context with the aspect name (BM25,
//! TF-IDF cosine, word-vector cosine) and with the aspect content (the same
//! three plus raw token overlap). The eighth feature scores the aspect's
//! images in the graph against the context embedding.
//!
//! Corpus statistics are per query: they are built over the candidate
//! aspects of one entity, separately for names and contents.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::air::{self, ImageRetriever};
use crate::encoder::{cosine, top_k_by_similarity, EncoderProvider, Vector, WordEmbeddingTable};
use crate::error::{Error, Result};
use crate::kg::AspectKg;
pub use crate::ltr::{FeatureRow, QueryList};

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;
/// Images averaged by the image feature.
pub const IMAGE_TOP_K: usize = 5;

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextSentence {
    pub raw: String,
    pub tokens: Vec<String>,
    pub entity_id: String,
    /// Entity-id annotations, when the context carries any.
    pub entities: Option<BTreeSet<String>>,
}

impl ContextSentence {
    pub fn new(raw: impl Into<String>, entity_id: impl Into<String>) -> Self {
        let raw = raw.into();
        Self {
            tokens: tokenize(&raw),
            raw,
            entity_id: entity_id.into(),
            entities: None,
        }
    }

    pub fn with_entities(mut self, entities: BTreeSet<String>) -> Self {
        self.entities = Some(entities);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectDoc {
    pub aspect_id: String,
    pub name: String,
    #[serde(default)]
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entities: Option<BTreeSet<String>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusStats {
    pub n_docs: usize,
    pub df: HashMap<String, usize>,
    pub avgdl: f64,
}

impl CorpusStats {
    pub fn from_docs<'a>(docs: impl IntoIterator<Item = &'a [String]>) -> Self {
        let mut n_docs = 0;
        let mut total_len = 0;
        let mut df: HashMap<String, usize> = HashMap::new();
        for doc in docs {
            n_docs += 1;
            total_len += doc.len();
            let unique: BTreeSet<&String> = doc.iter().collect();
            for t in unique {
                *df.entry(t.clone()).or_default() += 1;
            }
        }
        let avgdl = if n_docs == 0 {
            0.0
        } else {
            total_len as f64 / n_docs as f64
        };
        Self { n_docs, df, avgdl }
    }

    pub fn df(&self, token: &str) -> usize {
        self.df.get(token).copied().unwrap_or(0)
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`, never negative.
    pub fn bm25_idf(&self, token: &str) -> f64 {
        let n = self.n_docs as f64;
        let df = self.df(token) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Smoothed idf: `ln((1 + N) / (1 + df)) + 1`.
    pub fn smooth_idf(&self, token: &str) -> f64 {
        ((1.0 + self.n_docs as f64) / (1.0 + self.df(token) as f64)).ln() + 1.0
    }
}

fn term_counts(tokens: &[String]) -> BTreeMap<&str, usize> {
    let mut counts = BTreeMap::new();
    for t in tokens {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    counts
}

/// Okapi BM25 of `doc` for the unique tokens of `query`.
pub fn bm25(query: &[String], doc: &[String], stats: &CorpusStats) -> f64 {
    if stats.n_docs == 0 || stats.avgdl == 0.0 {
        return 0.0;
    }
    let doc_counts = term_counts(doc);
    let norm = BM25_K1 * (1.0 - BM25_B + BM25_B * doc.len() as f64 / stats.avgdl);
    let unique: BTreeSet<&str> = query.iter().map(String::as_str).collect();
    unique
        .into_iter()
        .filter_map(|t| doc_counts.get(t).map(|&tf| (t, tf as f64)))
        .map(|(t, tf)| stats.bm25_idf(t) * tf * (BM25_K1 + 1.0) / (tf + norm))
        .sum()
}

/// Sparse token → weight map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TermVector(pub BTreeMap<String, f64>);

impl TermVector {
    pub fn norm(&self) -> f64 {
        self.0.values().map(|w| w * w).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &TermVector) -> f64 {
        let (small, large) = if self.0.len() <= other.0.len() {
            (self, other)
        } else {
            (other, self)
        };
        small.0.iter().filter_map(|(t, w)| large.0.get(t).map(|v| w * v)).sum()
    }

    pub fn cosine(&self, other: &TermVector) -> f64 {
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            0.0
        } else {
            (self.dot(other) / denom).clamp(-1.0, 1.0)
        }
    }
}

/// Log-normalized term frequency times smoothed idf.
pub fn tfidf_vector(tokens: &[String], stats: &CorpusStats) -> TermVector {
    TermVector(
        term_counts(tokens)
            .into_iter()
            .map(|(t, tf)| (t.to_string(), (1.0 + (tf as f64).ln()) * stats.smooth_idf(t)))
            .collect(),
    )
}

pub fn tfidf_cosine(query: &[String], doc: &[String], stats: &CorpusStats) -> f64 {
    tfidf_vector(query, stats).cosine(&tfidf_vector(doc, stats))
}

/// Number of distinct tokens shared by both sides.
pub fn overlap(query: &[String], doc: &[String]) -> usize {
    let a: BTreeSet<&String> = query.iter().collect();
    let b: BTreeSet<&String> = doc.iter().collect();
    a.intersection(&b).count()
}

/// Token overlap plus shared entity annotations when both sides carry them.
pub fn overlap_with_entities(
    query: &[String],
    query_entities: Option<&BTreeSet<String>>,
    doc: &[String],
    doc_entities: Option<&BTreeSet<String>>,
) -> usize {
    let entities = match (query_entities, doc_entities) {
        (Some(a), Some(b)) => a.intersection(b).count(),
        _ => 0,
    };
    overlap(query, doc) + entities
}

fn weighted_word_vector(tokens: &[String], table: &WordEmbeddingTable, stats: &CorpusStats) -> Option<Vec<f64>> {
    let weights = tfidf_vector(tokens, stats);
    let mut acc: Option<Vec<f64>> = None;
    for (token, w) in &weights.0 {
        if let Some(v) = table.get(token) {
            let acc = acc.get_or_insert_with(|| vec![0.0; v.dim()]);
            for (a, x) in acc.iter_mut().zip(v.values()) {
                *a += w * x;
            }
        }
    }
    acc
}

/// Cosine of TF-IDF-weighted sums of word vectors; 0 when either side has no
/// in-vocabulary token.
pub fn w2v_sim(query: &[String], doc: &[String], table: &WordEmbeddingTable, stats: &CorpusStats) -> f64 {
    match (
        weighted_word_vector(query, table, stats),
        weighted_word_vector(doc, table, stats),
    ) {
        (Some(a), Some(b)) => crate::encoder::cosine_slices(&a, &b),
        _ => 0.0,
    }
}

/// How the image feature picks the aspect images it averages over.
#[derive(Clone, Copy)]
pub enum ImageSelection<'a> {
    /// Top images by similarity to the aspect label's text embedding.
    AspectLabel,
    /// Top images by a retrieval model's score.
    Retriever(&'a dyn ImageRetriever),
}

impl fmt::Debug for ImageSelection<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageSelection::AspectLabel => f.write_str("AspectLabel"),
            ImageSelection::Retriever(_) => f.write_str("Retriever"),
        }
    }
}

/// Mean cosine between the context embedding and the top images of the
/// entity's first-level aspect `aspect_label`; 0 when the aspect has none.
pub fn image_feature(
    ctx: &ContextSentence,
    aspect_label: &str,
    kg: &AspectKg,
    provider: &dyn EncoderProvider,
) -> Result<f64> {
    image_feature_with(ctx, aspect_label, kg, provider, ImageSelection::AspectLabel)
}

pub fn image_feature_with(
    ctx: &ContextSentence,
    aspect_label: &str,
    kg: &AspectKg,
    provider: &dyn EncoderProvider,
    selection: ImageSelection<'_>,
) -> Result<f64> {
    let image_ids = kg.aspect_images(&ctx.entity_id, aspect_label);
    if image_ids.is_empty() {
        return Ok(0.0);
    }
    let query = match selection {
        ImageSelection::AspectLabel => provider.encode_text(aspect_label)?,
        ImageSelection::Retriever(retriever) => {
            let overall = air::overall_image(kg, provider, &ctx.entity_id)?;
            retriever.query_vector(provider, &overall, aspect_label)?
        }
    };
    let vectors = image_ids
        .iter()
        .map(|id| Ok((*id, provider.encode_image(id)?)))
        .collect::<Result<Vec<_>>>()?;
    let selected = top_k_by_similarity(&query, vectors.iter().map(|(id, v)| (*id, v)), IMAGE_TOP_K)?;
    mean_context_similarity(ctx, &selected, &vectors, provider)
}

fn mean_context_similarity(
    ctx: &ContextSentence,
    selected: &[(String, f64)],
    vectors: &[(&str, Vector)],
    provider: &dyn EncoderProvider,
) -> Result<f64> {
    if selected.is_empty() {
        return Ok(0.0);
    }
    let ctx_vec = provider.encode_text(&ctx.raw)?;
    let mut total = 0.0;
    for (id, _) in selected {
        let (_, v) = vectors
            .iter()
            .find(|(vid, _)| *vid == id.as_str())
            .expect("selected ids come from the candidate list");
        total += cosine(&ctx_vec, v)?;
    }
    Ok(total / selected.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    NameBm25,
    NameTfidf,
    NameW2v,
    ContentBm25,
    ContentTfidf,
    ContentOverlap,
    ContentW2v,
    Image,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 8] = [
        FeatureKind::NameBm25,
        FeatureKind::NameTfidf,
        FeatureKind::NameW2v,
        FeatureKind::ContentBm25,
        FeatureKind::ContentTfidf,
        FeatureKind::ContentOverlap,
        FeatureKind::ContentW2v,
        FeatureKind::Image,
    ];

    pub const TEXT: [FeatureKind; 7] = [
        FeatureKind::NameBm25,
        FeatureKind::NameTfidf,
        FeatureKind::NameW2v,
        FeatureKind::ContentBm25,
        FeatureKind::ContentTfidf,
        FeatureKind::ContentOverlap,
        FeatureKind::ContentW2v,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::NameBm25 => "name-bm25",
            FeatureKind::NameTfidf => "name-tfidf",
            FeatureKind::NameW2v => "name-w2v",
            FeatureKind::ContentBm25 => "content-bm25",
            FeatureKind::ContentTfidf => "content-tfidf",
            FeatureKind::ContentOverlap => "content-overlap",
            FeatureKind::ContentW2v => "content-w2v",
            FeatureKind::Image => "image",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(i) = s.parse::<usize>() {
            return FeatureKind::ALL
                .get(i)
                .copied()
                .ok_or_else(|| Error::usage(format!("feature index {i} out of range 0..8")));
        }
        FeatureKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown feature `{s}`")))
    }
}

/// Selected features, always kept in canonical order without repeats.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<FeatureKind>", into = "Vec<FeatureKind>")]
pub struct FeatureSet(Vec<FeatureKind>);

impl FeatureSet {
    pub fn new(kinds: impl IntoIterator<Item = FeatureKind>) -> Result<Self> {
        let set: BTreeSet<FeatureKind> = kinds.into_iter().collect();
        if set.is_empty() {
            return Err(Error::usage("feature set must not be empty"));
        }
        Ok(Self(set.into_iter().collect()))
    }

    /// All seven text features plus the image feature.
    pub fn full() -> Self {
        Self(FeatureKind::ALL.to_vec())
    }

    pub fn text_only() -> Self {
        Self(FeatureKind::TEXT.to_vec())
    }

    pub fn kinds(&self) -> &[FeatureKind] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, kind: FeatureKind) -> bool {
        self.0.contains(&kind)
    }

    pub fn with_image(&self) -> Self {
        let mut kinds = self.0.clone();
        kinds.push(FeatureKind::Image);
        Self::new(kinds).expect("non-empty")
    }

    pub fn without_image(&self) -> Result<Self> {
        Self::new(self.0.iter().copied().filter(|k| *k != FeatureKind::Image))
    }

    pub fn names(&self) -> Vec<String> {
        self.0.iter().map(|k| k.name().to_string()).collect()
    }

    /// Comma-separated indices or names, e.g. `0,3,7` or `name-bm25,image`.
    pub fn parse_list(list: &str) -> Result<Self> {
        Self::new(
            list.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(str::parse)
                .collect::<Result<Vec<FeatureKind>>>()?,
        )
    }
}

impl TryFrom<Vec<FeatureKind>> for FeatureSet {
    type Error = Error;

    fn try_from(kinds: Vec<FeatureKind>) -> Result<Self> {
        Self::new(kinds)
    }
}

impl From<FeatureSet> for Vec<FeatureKind> {
    fn from(set: FeatureSet) -> Self {
        set.0
    }
}

/// Nested random text-feature subsets: entry `k - 1` holds `k` features and
/// every entry extends the previous one. Determined by `seed`.
pub fn nested_text_subsets(seed: u64) -> Vec<FeatureSet> {
    let mut order = FeatureKind::TEXT.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    (1..=order.len())
        .map(|k| FeatureSet::new(order[..k].iter().copied()).expect("k >= 1"))
        .collect()
}

/// A random subset of `k` text features.
pub fn sample_text_subset(k: usize, seed: u64) -> Result<FeatureSet> {
    if k == 0 || k > FeatureKind::TEXT.len() {
        return Err(Error::usage(format!("text subset size must be in 1..=7, got {k}")));
    }
    Ok(nested_text_subsets(seed).swap_remove(k - 1))
}

/// External resources some features need.
#[derive(Clone, Copy)]
pub struct FeatureInputs<'a> {
    pub kg: Option<&'a AspectKg>,
    pub provider: Option<&'a dyn EncoderProvider>,
    pub words: Option<&'a WordEmbeddingTable>,
    pub image_selection: ImageSelection<'a>,
}

impl<'a> FeatureInputs<'a> {
    pub fn text_only(words: Option<&'a WordEmbeddingTable>) -> Self {
        Self {
            kg: None,
            provider: None,
            words,
            image_selection: ImageSelection::AspectLabel,
        }
    }

    fn require(&self, features: &FeatureSet) -> Result<()> {
        let needs_words = features.contains(FeatureKind::NameW2v) || features.contains(FeatureKind::ContentW2v);
        if needs_words && self.words.is_none() {
            return Err(Error::usage("word-vector features need a word embedding table"));
        }
        if features.contains(FeatureKind::Image) && (self.kg.is_none() || self.provider.is_none()) {
            return Err(Error::usage("the image feature needs a knowledge graph and an encoder"));
        }
        Ok(())
    }
}

/// One feature row per candidate aspect, labels all zero.
pub fn compute_feature_rows(
    query_id: &str,
    ctx: &ContextSentence,
    candidates: &[AspectDoc],
    inputs: &FeatureInputs<'_>,
    features: &FeatureSet,
) -> Result<Vec<FeatureRow>> {
    inputs.require(features)?;
    let names: Vec<Vec<String>> = candidates.iter().map(|c| tokenize(&c.name)).collect();
    let contents: Vec<Vec<String>> = candidates.iter().map(|c| tokenize(&c.content)).collect();
    let name_stats = CorpusStats::from_docs(names.iter().map(Vec::as_slice));
    let content_stats = CorpusStats::from_docs(contents.iter().map(Vec::as_slice));

    candidates
        .iter()
        .enumerate()
        .map(|(i, cand)| {
            let values = features
                .kinds()
                .iter()
                .map(|kind| {
                    Ok(match kind {
                        FeatureKind::NameBm25 => bm25(&ctx.tokens, &names[i], &name_stats),
                        FeatureKind::NameTfidf => tfidf_cosine(&ctx.tokens, &names[i], &name_stats),
                        FeatureKind::NameW2v => {
                            w2v_sim(&ctx.tokens, &names[i], inputs.words.expect("checked"), &name_stats)
                        }
                        FeatureKind::ContentBm25 => bm25(&ctx.tokens, &contents[i], &content_stats),
                        FeatureKind::ContentTfidf => tfidf_cosine(&ctx.tokens, &contents[i], &content_stats),
                        FeatureKind::ContentOverlap => overlap_with_entities(
                            &ctx.tokens,
                            ctx.entities.as_ref(),
                            &contents[i],
                            cand.entities.as_ref(),
                        ) as f64,
                        FeatureKind::ContentW2v => w2v_sim(
                            &ctx.tokens,
                            &contents[i],
                            inputs.words.expect("checked"),
                            &content_stats,
                        ),
                        FeatureKind::Image => image_feature_with(
                            ctx,
                            cand.name.trim(),
                            inputs.kg.expect("checked"),
                            inputs.provider.expect("checked"),
                            inputs.image_selection,
                        )?,
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(FeatureRow {
                query_id: query_id.to_string(),
                aspect_id: cand.aspect_id.clone(),
                features: values,
                label: 0,
            })
        })
        .collect()
}

/// Feature rows for a training or evaluation query with a known gold aspect.
pub fn assemble_feature_rows(
    query_id: &str,
    ctx: &ContextSentence,
    candidates: &[AspectDoc],
    gold_aspect_id: &str,
    inputs: &FeatureInputs<'_>,
    features: &FeatureSet,
) -> Result<QueryList> {
    if !candidates.iter().any(|c| c.aspect_id == gold_aspect_id) {
        return Err(Error::data(format!(
            "query `{query_id}`: gold aspect `{gold_aspect_id}` is not among the candidates"
        )));
    }
    let mut rows = compute_feature_rows(query_id, ctx, candidates, inputs, features)?;
    for row in &mut rows {
        row.label = u8::from(row.aspect_id == gold_aspect_id);
    }
    QueryList::new(query_id, rows)
}

/// One line of an EAL dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EalInstance {
    pub query_id: String,
    pub entity_id: String,
    pub context: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_entities: Option<BTreeSet<String>>,
    pub candidates: Vec<AspectDoc>,
    pub gold_aspect_id: String,
}

impl EalInstance {
    pub fn context_sentence(&self) -> ContextSentence {
        let ctx = ContextSentence::new(self.context.clone(), self.entity_id.clone());
        match &self.context_entities {
            Some(e) => ctx.with_entities(e.clone()),
            None => ctx,
        }
    }
}

/// Feature rows for a whole dataset, in input order. Queries are independent
/// and computed in parallel.
pub fn assemble_dataset(
    instances: &[EalInstance],
    inputs: &FeatureInputs<'_>,
    features: &FeatureSet,
) -> Result<Vec<QueryList>> {
    use rayon::prelude::*;
    instances
        .par_iter()
        .map(|inst| {
            assemble_feature_rows(
                &inst.query_id,
                &inst.context_sentence(),
                &inst.candidates,
                &inst.gold_aspect_id,
                inputs,
                features,
            )
        })
        .collect()
}

/// Writes `query_id aspect_id label f1 ... fF` lines.
pub fn write_run_file(path: &Path, lists: &[QueryList]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for list in lists {
        for row in &list.rows {
            if row.query_id.contains(char::is_whitespace) || row.aspect_id.contains(char::is_whitespace) {
                return Err(Error::data(format!(
                    "ids in run files must not contain whitespace: `{}` / `{}`",
                    row.query_id, row.aspect_id
                )));
            }
            write!(out, "{} {} {}", row.query_id, row.aspect_id, row.label).map_err(|e| Error::io(path, e))?;
            for f in &row.features {
                write!(out, " {f}").map_err(|e| Error::io(path, e))?;
            }
            writeln!(out).map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a run file back into query lists, ordered by first appearance.
pub fn read_run_file(path: &Path) -> Result<Vec<QueryList>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<FeatureRow>> = HashMap::new();
    let mut width = None;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut fields = line.split_whitespace();
        let Some(query_id) = fields.next() else { continue };
        let at = || format!("{}:{}", path.display(), idx + 1);
        let aspect_id = fields
            .next()
            .ok_or_else(|| Error::data(format!("{}: missing aspect id", at())))?;
        let label = match fields.next() {
            Some("0") => 0,
            Some("1") => 1,
            other => return Err(Error::data(format!("{}: label must be 0 or 1, got {other:?}", at()))),
        };
        let features = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::data(format!("{}: bad feature value `{f}`", at())))
            })
            .collect::<Result<Vec<_>>>()?;
        match width {
            None => width = Some(features.len()),
            Some(w) if w != features.len() => {
                return Err(Error::data(format!(
                    "{}: expected {w} features, found {}",
                    at(),
                    features.len()
                )))
            }
            _ => {}
        }
        if !groups.contains_key(query_id) {
            order.push(query_id.to_string());
        }
        groups.entry(query_id.to_string()).or_default().push(FeatureRow {
            query_id: query_id.to_string(),
            aspect_id: aspect_id.to_string(),
            features,
            label,
        });
    }
    order
        .into_iter()
        .map(|q| {
            let rows = groups.remove(&q).expect("grouped above");
            QueryList::new(&q, rows).map_err(|e| Error::data(format!("{}: {e}", path.display())))
        })
        .collect()
}
