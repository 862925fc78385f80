//! Aspect-aware multi-modal knowledge graph: entities, hierarchical aspects,
//! images and the links between them.
//!
//! An [`AspectKg`] is immutable once built. Every constructor validates the
//! referential invariants and stores each collection sorted by its primary
//! key, so iteration order and the on-disk form are deterministic.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

pub const ENTITIES_FILE: &str = "entities.jsonl";
pub const ASPECTS_FILE: &str = "aspects.jsonl";
pub const IMAGES_FILE: &str = "images.jsonl";
pub const LINKS_FILE: &str = "links.jsonl";

/// The fifteen entity types the graph is seeded from.
pub const STANDARD_ENTITY_TYPES: [&str; 15] = [
    "Capital and Country",
    "Company",
    "War",
    "Holiday",
    "Human (Canada)",
    "Human (China)",
    "Human (French)",
    "Human (UK)",
    "Sovereign State",
    "State (US)",
    "University (Canada)",
    "University (UK)",
    "University (US)",
    "Film (En)",
    "Series (En)",
];

/// Set of entity types accepted by validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeRegistry {
    types: BTreeSet<String>,
}

impl TypeRegistry {
    pub fn standard() -> Self {
        Self {
            types: STANDARD_ENTITY_TYPES.iter().map(|t| t.to_string()).collect(),
        }
    }

    pub fn with_extension(mut self, entity_type: impl Into<String>) -> Self {
        self.types.insert(entity_type.into());
        self
    }

    pub fn contains(&self, entity_type: &str) -> bool {
        self.types.contains(entity_type)
    }
}

impl Default for TypeRegistry {
    fn default() -> Self {
        Self::standard()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub id: String,
    pub name: String,
    pub entity_type: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    #[serde(default)]
    pub pageviews: u64,
}

/// Heading chain of an aspect, first element being the first-level aspect.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AspectPath(Vec<String>);

impl AspectPath {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Self {
        Self(labels.into_iter().map(Into::into).collect())
    }

    pub fn first_level(&self) -> &str {
        self.0.first().map(String::as_str).unwrap_or("")
    }

    /// Path truncated to its first element.
    pub fn truncated(&self) -> AspectPath {
        AspectPath(self.0.iter().take(1).cloned().collect())
    }

    pub fn child(&self, label: impl Into<String>) -> AspectPath {
        let mut labels = self.0.clone();
        labels.push(label.into());
        AspectPath(labels)
    }

    pub fn labels(&self) -> &[String] {
        &self.0
    }
}

impl Deref for AspectPath {
    type Target = [String];

    fn deref(&self) -> &[String] {
        &self.0
    }
}

impl fmt::Display for AspectPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join("/"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectNode {
    pub entity_id: String,
    pub path: AspectPath,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ImageSource {
    #[serde(rename = "wikipedia")]
    Wikipedia,
    #[serde(rename = "search-engine")]
    SearchEngine,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    pub locator: String,
    pub source: ImageSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search_rank: Option<u32>,
}

impl ImageRef {
    pub fn wikipedia(image_id: impl Into<String>, locator: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            locator: locator.into(),
            source: ImageSource::Wikipedia,
            origin_query: None,
            search_rank: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectImageLink {
    pub entity_id: String,
    pub aspect_path: AspectPath,
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<f64>,
}

impl AspectImageLink {
    pub fn new(entity_id: impl Into<String>, aspect_path: AspectPath, image_id: impl Into<String>) -> Self {
        Self {
            entity_id: entity_id.into(),
            aspect_path,
            image_id: image_id.into(),
            relevance: None,
        }
    }

    fn key(&self) -> (&str, &AspectPath, &str) {
        (&self.entity_id, &self.aspect_path, &self.image_id)
    }
}

/// Case-insensitive set of aspect labels that never become aspects.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blacklist {
    labels: BTreeSet<String>,
}

impl Blacklist {
    pub const DEFAULT_LABELS: [&'static str; 4] = ["Notes", "External links", "References", "See also"];

    pub fn new<S: AsRef<str>>(labels: impl IntoIterator<Item = S>) -> Self {
        Self {
            labels: labels.into_iter().map(|l| normalize_label(l.as_ref())).collect(),
        }
    }

    pub fn empty() -> Self {
        Self {
            labels: BTreeSet::new(),
        }
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.contains(&normalize_label(label))
    }
}

impl Default for Blacklist {
    fn default() -> Self {
        Self::new(Self::DEFAULT_LABELS)
    }
}

fn normalize_label(label: &str) -> String {
    label.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KgParts {
    pub entities: Vec<EntityRecord>,
    pub aspects: Vec<AspectNode>,
    pub images: Vec<ImageRef>,
    pub links: Vec<AspectImageLink>,
}

/// Per-record origins for entities, aspects, images and links.
type Origins<'a> = (
    Vec<Option<Origin<'a>>>,
    Vec<Option<Origin<'a>>>,
    Vec<Option<Origin<'a>>>,
    Vec<Option<Origin<'a>>>,
);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AspectKg {
    entities: Vec<EntityRecord>,
    aspects: Vec<AspectNode>,
    images: Vec<ImageRef>,
    links: Vec<AspectImageLink>,
}

/// Where a record came from, for error messages.
#[derive(Debug, Clone)]
struct Origin<'a> {
    file: &'a str,
    line: usize,
}

impl fmt::Display for Origin<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.file, self.line)
    }
}

fn at(origin: Option<&Origin<'_>>) -> String {
    origin.map(|o| format!(" at {o}")).unwrap_or_default()
}

impl AspectKg {
    /// Validates against the standard type registry.
    pub fn new(parts: KgParts) -> Result<Self> {
        Self::with_registry(parts, &TypeRegistry::standard())
    }

    pub fn with_registry(parts: KgParts, registry: &TypeRegistry) -> Result<Self> {
        let n = (
            parts.entities.len(),
            parts.aspects.len(),
            parts.images.len(),
            parts.links.len(),
        );
        let origins = (vec![None; n.0], vec![None; n.1], vec![None; n.2], vec![None; n.3]);
        Self::validated(parts, origins, registry)
    }

    fn validated(parts: KgParts, origins: Origins<'_>, registry: &TypeRegistry) -> Result<Self> {
        let KgParts {
            mut entities,
            mut aspects,
            mut images,
            mut links,
        } = parts;

        let mut entity_ids = BTreeSet::new();
        for (e, origin) in entities.iter().zip(&origins.0) {
            if e.id.is_empty() {
                return Err(Error::data(format!("entity with empty id{}", at(origin.as_ref()))));
            }
            if e.name.trim().is_empty() {
                return Err(Error::data(format!(
                    "entity `{}` has an empty name{}",
                    e.id,
                    at(origin.as_ref())
                )));
            }
            if !registry.contains(&e.entity_type) {
                return Err(Error::data(format!(
                    "entity `{}` has unregistered type `{}`{}",
                    e.id,
                    e.entity_type,
                    at(origin.as_ref())
                )));
            }
            if !entity_ids.insert(e.id.as_str()) {
                return Err(Error::data(format!(
                    "duplicate entity id `{}`{}",
                    e.id,
                    at(origin.as_ref())
                )));
            }
        }

        let mut aspect_keys = BTreeSet::new();
        for (a, origin) in aspects.iter().zip(&origins.1) {
            if !entity_ids.contains(a.entity_id.as_str()) {
                return Err(Error::data(format!(
                    "aspect {}:{} references unknown entity{}",
                    a.entity_id,
                    a.path,
                    at(origin.as_ref())
                )));
            }
            if a.path.is_empty() {
                return Err(Error::data(format!(
                    "aspect of `{}` has an empty path{}",
                    a.entity_id,
                    at(origin.as_ref())
                )));
            }
            if let Some(bad) = a.path.iter().find(|l| l.trim().is_empty() || l.trim() != l.as_str()) {
                return Err(Error::data(format!(
                    "aspect {}:{} has untrimmed or empty label `{bad}`{}",
                    a.entity_id,
                    a.path,
                    at(origin.as_ref())
                )));
            }
            if !aspect_keys.insert((a.entity_id.as_str(), &a.path)) {
                return Err(Error::data(format!(
                    "duplicate aspect {}:{}{}",
                    a.entity_id,
                    a.path,
                    at(origin.as_ref())
                )));
            }
        }

        let mut image_ids = BTreeSet::new();
        for (img, origin) in images.iter().zip(&origins.2) {
            if img.image_id.is_empty() {
                return Err(Error::data(format!("image with empty id{}", at(origin.as_ref()))));
            }
            match (img.source, img.search_rank) {
                (ImageSource::SearchEngine, None) => {
                    return Err(Error::data(format!(
                        "search-engine image `{}` lacks search_rank{}",
                        img.image_id,
                        at(origin.as_ref())
                    )))
                }
                (ImageSource::Wikipedia, Some(_)) => {
                    return Err(Error::data(format!(
                        "wikipedia image `{}` carries a search_rank{}",
                        img.image_id,
                        at(origin.as_ref())
                    )))
                }
                (ImageSource::SearchEngine, Some(0)) => {
                    return Err(Error::data(format!(
                        "image `{}` has search_rank 0; ranks start at 1{}",
                        img.image_id,
                        at(origin.as_ref())
                    )))
                }
                _ => {}
            }
            if !image_ids.insert(img.image_id.as_str()) {
                return Err(Error::data(format!(
                    "duplicate image id `{}`{}",
                    img.image_id,
                    at(origin.as_ref())
                )));
            }
        }

        let mut link_keys = BTreeSet::new();
        for (link, origin) in links.iter().zip(&origins.3) {
            let describe = || format!("{}:{}:{}", link.entity_id, link.aspect_path, link.image_id);
            if !aspect_keys.contains(&(link.entity_id.as_str(), &link.aspect_path)) {
                return Err(Error::data(format!(
                    "link {} references an unknown aspect{}",
                    describe(),
                    at(origin.as_ref())
                )));
            }
            if !image_ids.contains(link.image_id.as_str()) {
                return Err(Error::data(format!(
                    "link {} references an unknown image{}",
                    describe(),
                    at(origin.as_ref())
                )));
            }
            if let Some(r) = link.relevance {
                if !(-1.0..=1.0).contains(&r) {
                    return Err(Error::data(format!(
                        "link {} has relevance {r} outside [-1, 1]{}",
                        describe(),
                        at(origin.as_ref())
                    )));
                }
            }
            if !link_keys.insert(link.key()) {
                return Err(Error::data(format!(
                    "duplicate link {}{}",
                    describe(),
                    at(origin.as_ref())
                )));
            }
        }

        entities.sort_by(|a, b| a.id.cmp(&b.id));
        aspects.sort_by(|a, b| (&a.entity_id, &a.path).cmp(&(&b.entity_id, &b.path)));
        images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        links.sort_by(|a, b| a.key().cmp(&b.key()));

        Ok(Self {
            entities,
            aspects,
            images,
            links,
        })
    }

    pub fn entities(&self) -> &[EntityRecord] {
        &self.entities
    }

    pub fn aspects(&self) -> &[AspectNode] {
        &self.aspects
    }

    pub fn images(&self) -> &[ImageRef] {
        &self.images
    }

    pub fn links(&self) -> &[AspectImageLink] {
        &self.links
    }

    pub fn into_parts(self) -> KgParts {
        KgParts {
            entities: self.entities,
            aspects: self.aspects,
            images: self.images,
            links: self.links,
        }
    }

    pub fn to_parts(&self) -> KgParts {
        self.clone().into_parts()
    }

    pub fn entity(&self, id: &str) -> Option<&EntityRecord> {
        self.entities
            .binary_search_by(|e| e.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.entities[i])
    }

    pub fn image(&self, id: &str) -> Option<&ImageRef> {
        self.images
            .binary_search_by(|i| i.image_id.as_str().cmp(id))
            .ok()
            .map(|i| &self.images[i])
    }

    /// Distinct first-level aspect labels of an entity, sorted.
    pub fn first_level_labels(&self, entity_id: &str) -> Vec<&str> {
        let labels: BTreeSet<&str> = self
            .aspects
            .iter()
            .filter(|a| a.entity_id == entity_id)
            .map(|a| a.path.first_level())
            .collect();
        labels.into_iter().collect()
    }

    /// Distinct images linked anywhere under the entity, sorted by id.
    pub fn entity_images(&self, entity_id: &str) -> Vec<&str> {
        let ids: BTreeSet<&str> = self
            .links
            .iter()
            .filter(|l| l.entity_id == entity_id)
            .map(|l| l.image_id.as_str())
            .collect();
        ids.into_iter().collect()
    }

    /// Distinct images linked to the first-level aspect `label` of the entity
    /// or to any of its sub-aspects, sorted by id.
    pub fn aspect_images(&self, entity_id: &str, label: &str) -> Vec<&str> {
        let ids: BTreeSet<&str> = self
            .links
            .iter()
            .filter(|l| l.entity_id == entity_id && l.aspect_path.first_level() == label)
            .map(|l| l.image_id.as_str())
            .collect();
        ids.into_iter().collect()
    }

    /// Fails if any aspect path contains a blacklisted label.
    pub fn check_blacklist(&self, blacklist: &Blacklist) -> Result<()> {
        for a in &self.aspects {
            if let Some(label) = a.path.iter().find(|l| blacklist.contains(l)) {
                return Err(Error::data(format!(
                    "aspect {}:{} contains blacklisted label `{label}`",
                    a.entity_id, a.path
                )));
            }
        }
        Ok(())
    }
}

/// Writes the four record files into `dir`, creating it if needed.
pub fn save_kg(kg: &AspectKg, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    jsonl::write_records(&dir.join(ENTITIES_FILE), &kg.entities)?;
    jsonl::write_records(&dir.join(ASPECTS_FILE), &kg.aspects)?;
    jsonl::write_records(&dir.join(IMAGES_FILE), &kg.images)?;
    jsonl::write_records(&dir.join(LINKS_FILE), &kg.links)?;
    Ok(())
}

pub fn load_kg(dir: &Path) -> Result<AspectKg> {
    load_kg_with_registry(dir, &TypeRegistry::standard())
}

pub fn load_kg_with_registry(dir: &Path, registry: &TypeRegistry) -> Result<AspectKg> {
    let entities: Vec<(usize, EntityRecord)> = jsonl::read_records(&dir.join(ENTITIES_FILE))?;
    let aspects: Vec<(usize, AspectNode)> = jsonl::read_records(&dir.join(ASPECTS_FILE))?;
    let images: Vec<(usize, ImageRef)> = jsonl::read_records(&dir.join(IMAGES_FILE))?;
    let links: Vec<(usize, AspectImageLink)> = jsonl::read_records(&dir.join(LINKS_FILE))?;

    fn split<'a, T>(file: &'a str, records: Vec<(usize, T)>) -> (Vec<T>, Vec<Option<Origin<'a>>>) {
        records
            .into_iter()
            .map(|(line, r)| (r, Some(Origin { file, line })))
            .unzip()
    }

    let (entities, eo) = split(ENTITIES_FILE, entities);
    let (aspects, ao) = split(ASPECTS_FILE, aspects);
    let (images, io) = split(IMAGES_FILE, images);
    let (links, lo) = split(LINKS_FILE, links);
    AspectKg::validated(
        KgParts {
            entities,
            aspects,
            images,
            links,
        },
        (eo, ao, io, lo),
        registry,
    )
}

/// Moves every link onto its first-level aspect and drops deeper aspect
/// nodes. Links that collide after truncation are merged, keeping the
/// maximum relevance (any value beats a missing one).
pub fn flatten_to_first_level(kg: &AspectKg) -> AspectKg {
    let aspects: BTreeSet<(String, AspectPath)> = kg
        .aspects
        .iter()
        .map(|a| (a.entity_id.clone(), a.path.truncated()))
        .collect();

    let mut merged: BTreeMap<(String, AspectPath, String), Option<f64>> = BTreeMap::new();
    for link in &kg.links {
        let key = (
            link.entity_id.clone(),
            link.aspect_path.truncated(),
            link.image_id.clone(),
        );
        merged
            .entry(key)
            .and_modify(|best| {
                *best = match (*best, link.relevance) {
                    (Some(a), Some(b)) => Some(a.max(b)),
                    (a, b) => a.or(b),
                }
            })
            .or_insert(link.relevance);
    }

    // Every truncated path still names an existing entity and image, and the
    // first-level node exists because its descendants did.
    AspectKg {
        entities: kg.entities.clone(),
        aspects: aspects
            .into_iter()
            .map(|(entity_id, path)| AspectNode { entity_id, path })
            .collect(),
        images: kg.images.clone(),
        links: merged
            .into_iter()
            .map(|((entity_id, aspect_path, image_id), relevance)| AspectImageLink {
                entity_id,
                aspect_path,
                image_id,
                relevance,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgStats {
    pub n_entities: usize,
    /// Aspect nodes, i.e. distinct (entity, path) pairs.
    pub n_aspects: usize,
    /// Distinct aspect labels across all entities and levels.
    pub n_aspect_labels: usize,
    pub n_images: usize,
    pub n_links: usize,
    pub images_per_entity: f64,
    pub aspects_per_entity: f64,
}

pub fn compute_stats(kg: &AspectKg) -> KgStats {
    let n_entities = kg.entities.len();
    let labels: BTreeSet<&str> = kg
        .aspects
        .iter()
        .flat_map(|a| a.path.iter().map(String::as_str))
        .collect();
    let ratio = |count: usize| {
        if n_entities == 0 {
            0.0
        } else {
            count as f64 / n_entities as f64
        }
    };
    KgStats {
        n_entities,
        n_aspects: kg.aspects.len(),
        n_aspect_labels: labels.len(),
        n_images: kg.images.len(),
        n_links: kg.links.len(),
        images_per_entity: ratio(kg.images.len()),
        aspects_per_entity: ratio(kg.aspects.len()),
    }
}
