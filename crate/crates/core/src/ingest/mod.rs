//! Page documents → aspects, query sentences and aspect-image links.

mod html;
mod search;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{
    AspectImageLink, AspectKg, AspectNode, AspectPath, Blacklist, EntityRecord, ImageRef, ImageSource, KgParts,
    TypeRegistry,
};

pub use html::{image_id_from_src, parse_page_html_with_warnings};
pub use search::{
    harvest_search_images, normalize_query, FixtureSearchClient, HarvestReport, RateLimitedClient, SearchClient,
    SkippedQuery, DEFAULT_SEARCH_K,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub heading: String,
    pub level: u8,
    #[serde(default)]
    pub paragraphs: Vec<String>,
    #[serde(default)]
    pub images: Vec<ImageRef>,
    #[serde(default)]
    pub children: Vec<Section>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageDoc {
    pub entity_id: String,
    pub title: String,
    pub sections: Vec<Section>,
}

impl PageDoc {
    /// Checks heading nesting: top sections at level 2, each child one level
    /// below its parent, every heading non-empty.
    pub fn validate(&self) -> Result<()> {
        fn check(section: &Section, expected: u8) -> Result<()> {
            if section.heading.trim().is_empty() {
                return Err(Error::data("section with empty heading"));
            }
            if section.level != expected {
                return Err(Error::data(format!(
                    "section `{}` has level {} but its position implies {expected}",
                    section.heading, section.level
                )));
            }
            section.children.iter().try_for_each(|c| check(c, expected + 1))
        }
        self.sections.iter().try_for_each(|s| check(s, 2))
    }

    /// Depth-first walk over sections that survive the blacklist, yielding
    /// each section with its heading chain.
    fn visit<'a>(&'a self, blacklist: &Blacklist, mut f: impl FnMut(&AspectPath, &'a Section)) {
        fn walk<'a>(
            sections: &'a [Section],
            parent: &AspectPath,
            blacklist: &Blacklist,
            f: &mut impl FnMut(&AspectPath, &'a Section),
        ) {
            for s in sections {
                let label = s.heading.trim();
                if label.is_empty() || blacklist.contains(label) {
                    continue;
                }
                let path = parent.child(label);
                f(&path, s);
                walk(&s.children, &path, blacklist, f);
            }
        }
        walk(
            &self.sections,
            &AspectPath::new(Vec::<String>::new()),
            blacklist,
            &mut f,
        );
    }
}

/// Parses a rendered page; markup problems are logged and otherwise ignored.
pub fn parse_page_html(html: &str, entity_id: &str) -> PageDoc {
    parse_page_html_with_warnings(html, entity_id).0
}

/// One aspect per non-blacklisted section. A blacklisted section drops its
/// whole subtree. Repeated heading chains yield one aspect.
pub fn extract_aspects(page: &PageDoc, blacklist: &Blacklist) -> Vec<AspectNode> {
    let mut seen = BTreeSet::new();
    let mut aspects = Vec::new();
    page.visit(blacklist, |path, _| {
        if seen.insert(path.clone()) {
            aspects.push(AspectNode {
                entity_id: page.entity_id.clone(),
                path: path.clone(),
            });
        }
    });
    aspects
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySentence {
    pub entity_id: String,
    pub aspect_path: AspectPath,
    pub text: String,
}

/// Splits on `.`, `!` or `?` followed by whitespace or end of text.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_boundary = chars.peek().is_none_or(|(_, next)| next.is_whitespace());
            if at_boundary {
                let end = i + c.len_utf8();
                let sentence = text[start..end].trim();
                if !sentence.is_empty() {
                    sentences.push(sentence.to_string());
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        sentences.push(tail.to_string());
    }
    sentences
}

/// Case-insensitive substring match against the name or any alias.
pub fn mentions_entity(text: &str, entity: &EntityRecord) -> bool {
    let haystack = text.to_lowercase();
    std::iter::once(&entity.name)
        .chain(&entity.aliases)
        .map(|n| n.trim().to_lowercase())
        .any(|needle| !needle.is_empty() && haystack.contains(&needle))
}

/// Sentences of non-blacklisted sections that mention the entity, tagged
/// with their section's aspect path.
pub fn extract_query_sentences(page: &PageDoc, entity: &EntityRecord, blacklist: &Blacklist) -> Vec<QuerySentence> {
    let mut out = Vec::new();
    page.visit(blacklist, |path, section| {
        for paragraph in &section.paragraphs {
            for sentence in split_sentences(paragraph) {
                if mentions_entity(&sentence, entity) {
                    out.push(QuerySentence {
                        entity_id: page.entity_id.clone(),
                        aspect_path: path.clone(),
                        text: sentence,
                    });
                }
            }
        }
    });
    out
}

/// Images and links collected by a harvesting step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Harvest {
    pub images: Vec<ImageRef>,
    pub links: Vec<AspectImageLink>,
}

/// Links every image that sits in a non-blacklisted section to that
/// section's aspect.
pub fn harvest_wikipedia_images(page: &PageDoc, blacklist: &Blacklist) -> Harvest {
    let mut images: BTreeMap<String, ImageRef> = BTreeMap::new();
    let mut links: BTreeMap<(AspectPath, String), AspectImageLink> = BTreeMap::new();
    page.visit(blacklist, |path, section| {
        for img in &section.images {
            let mut image = img.clone();
            image.source = ImageSource::Wikipedia;
            image.search_rank = None;
            image.origin_query = None;
            images.entry(image.image_id.clone()).or_insert(image);
            links
                .entry((path.clone(), img.image_id.clone()))
                .or_insert_with(|| AspectImageLink::new(page.entity_id.clone(), path.clone(), img.image_id.clone()));
        }
    });
    Harvest {
        images: images.into_values().collect(),
        links: links.into_values().collect(),
    }
}

/// Per entity type, the `n_per_type` candidates with the most pageviews
/// (ties by ascending id). Output is grouped by type name, then by rank.
pub fn select_top_entities(candidates: &[EntityRecord], n_per_type: usize) -> Vec<EntityRecord> {
    let mut by_type: BTreeMap<&str, Vec<&EntityRecord>> = BTreeMap::new();
    for c in candidates {
        by_type.entry(c.entity_type.as_str()).or_default().push(c);
    }
    by_type
        .into_values()
        .flat_map(|mut group| {
            group.sort_by(|a, b| b.pageviews.cmp(&a.pageviews).then_with(|| a.id.cmp(&b.id)));
            group.into_iter().take(n_per_type).cloned()
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct BuildOptions {
    pub n_per_type: usize,
    pub search_k: usize,
    pub blacklist: Vec<String>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            n_per_type: 200,
            search_k: DEFAULT_SEARCH_K,
            blacklist: Blacklist::DEFAULT_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct BuildReport {
    pub n_candidates: usize,
    pub n_selected: usize,
    pub n_pages: usize,
    /// Pages whose entity was not selected or is unknown.
    pub pages_skipped: Vec<String>,
    pub n_wikipedia_links: usize,
    pub n_search_links: usize,
    pub search: HarvestReport,
}

/// Assembles a KG from candidate entities and their pages: entity selection,
/// aspect extraction, section images and (optionally) search images.
pub fn build_kg(
    candidates: &[EntityRecord],
    pages: &[PageDoc],
    client: Option<&dyn SearchClient>,
    options: &BuildOptions,
    registry: &TypeRegistry,
) -> Result<(AspectKg, BuildReport)> {
    let blacklist = Blacklist::new(&options.blacklist);
    let selected = select_top_entities(candidates, options.n_per_type);
    let by_id: BTreeMap<&str, &EntityRecord> = selected.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut report = BuildReport {
        n_candidates: candidates.len(),
        n_selected: selected.len(),
        n_pages: pages.len(),
        ..Default::default()
    };

    let mut aspects: BTreeMap<(String, AspectPath), AspectNode> = BTreeMap::new();
    let mut images: BTreeMap<String, ImageRef> = BTreeMap::new();
    let mut links: BTreeMap<(String, AspectPath, String), AspectImageLink> = BTreeMap::new();
    let mut queries = Vec::new();

    let mut pages: Vec<&PageDoc> = pages.iter().collect();
    pages.sort_by(|a, b| a.entity_id.cmp(&b.entity_id));
    for page in pages {
        page.validate()
            .map_err(|e| Error::data(format!("page for `{}`: {e}", page.entity_id)))?;
        let Some(entity) = by_id.get(page.entity_id.as_str()) else {
            report.pages_skipped.push(page.entity_id.clone());
            continue;
        };
        for a in extract_aspects(page, &blacklist) {
            aspects.entry((a.entity_id.clone(), a.path.clone())).or_insert(a);
        }
        let wiki = harvest_wikipedia_images(page, &blacklist);
        report.n_wikipedia_links += wiki.links.len();
        for img in wiki.images {
            images.entry(img.image_id.clone()).or_insert(img);
        }
        for l in wiki.links {
            links
                .entry((l.entity_id.clone(), l.aspect_path.clone(), l.image_id.clone()))
                .or_insert(l);
        }
        queries.extend(extract_query_sentences(page, entity, &blacklist));
    }

    if let Some(client) = client {
        let (harvest, search_report) = harvest_search_images(&queries, client, options.search_k);
        report.n_search_links = harvest.links.len();
        report.search = search_report;
        // Section images keep their provenance when a search also finds them.
        for img in harvest.images {
            images.entry(img.image_id.clone()).or_insert(img);
        }
        for l in harvest.links {
            links
                .entry((l.entity_id.clone(), l.aspect_path.clone(), l.image_id.clone()))
                .or_insert(l);
        }
    }

    let kg = AspectKg::with_registry(
        KgParts {
            entities: selected,
            aspects: aspects.into_values().collect(),
            images: images.into_values().collect(),
            links: links.into_values().collect(),
        },
        registry,
    )?;
    Ok((kg, report))
}
