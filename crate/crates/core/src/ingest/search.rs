//! Image search clients and query-driven image harvesting.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{Harvest, QuerySentence};
use crate::error::Result;
use crate::kg::{AspectImageLink, AspectPath, ImageRef, ImageSource};

/// Results kept per query.
pub const DEFAULT_SEARCH_K: usize = 5;

pub trait SearchClient: Send + Sync {
    /// At most `k` results, best first, with `search_rank` set to 1..=k.
    fn search(&self, query: &str, k: usize) -> Result<Vec<ImageRef>>;
}

/// Lowercased with whitespace runs collapsed to one space.
pub fn normalize_query(query: &str) -> String {
    query.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Offline client backed by `index.json`, a map from normalized query to an
/// ordered list of image ids. Unknown queries return no results.
#[derive(Debug, Clone, Default)]
pub struct FixtureSearchClient {
    index: HashMap<String, Vec<String>>,
}

impl FixtureSearchClient {
    pub const INDEX_FILE: &'static str = "index.json";

    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::INDEX_FILE);
        let raw: BTreeMap<String, Vec<String>> = crate::jsonl::read_json(&path)?;
        Ok(Self::from_index(raw))
    }

    pub fn from_index(index: impl IntoIterator<Item = (String, Vec<String>)>) -> Self {
        Self {
            index: index.into_iter().map(|(q, ids)| (normalize_query(&q), ids)).collect(),
        }
    }
}

impl SearchClient for FixtureSearchClient {
    fn search(&self, query: &str, k: usize) -> Result<Vec<ImageRef>> {
        let Some(ids) = self.index.get(&normalize_query(query)) else {
            return Ok(Vec::new());
        };
        Ok(ids
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, id)| ImageRef {
                image_id: id.clone(),
                locator: format!("fixture://{id}"),
                source: ImageSource::SearchEngine,
                origin_query: Some(query.to_string()),
                search_rank: Some(i as u32 + 1),
            })
            .collect())
    }
}

/// Enforces a minimum interval between calls to the wrapped client.
#[derive(Debug)]
pub struct RateLimitedClient<C> {
    inner: C,
    min_interval: Duration,
    last_call: Mutex<Option<Instant>>,
}

impl<C: SearchClient> RateLimitedClient<C> {
    pub fn new(inner: C, min_interval: Duration) -> Self {
        Self {
            inner,
            min_interval,
            last_call: Mutex::new(None),
        }
    }

    pub fn per_second(inner: C, calls_per_second: f64) -> Self {
        let interval = if calls_per_second > 0.0 {
            Duration::from_secs_f64(1.0 / calls_per_second)
        } else {
            Duration::ZERO
        };
        Self::new(inner, interval)
    }
}

impl<C: SearchClient> SearchClient for RateLimitedClient<C> {
    fn search(&self, query: &str, k: usize) -> Result<Vec<ImageRef>> {
        {
            // Holding the lock while sleeping serializes callers.
            let mut last = self.last_call.lock().unwrap_or_else(|p| p.into_inner());
            if let Some(prev) = *last {
                let ready = prev + self.min_interval;
                let now = Instant::now();
                if ready > now {
                    std::thread::sleep(ready - now);
                }
            }
            *last = Some(Instant::now());
        }
        self.inner.search(query, k)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedQuery {
    pub entity_id: String,
    pub query: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarvestReport {
    pub n_queries: usize,
    pub n_results: usize,
    pub n_links: usize,
    pub n_images: usize,
    pub skipped: Vec<SkippedQuery>,
}

/// Sends every query to `client` and links the top `k` results to the
/// query's aspect. A (entity, aspect, image) triple found by several queries
/// yields one link; each image keeps its best rank (ties by query text).
/// Failing queries are skipped and reported.
pub fn harvest_search_images(
    queries: &[QuerySentence],
    client: &dyn SearchClient,
    k: usize,
) -> (Harvest, HarvestReport) {
    let mut report = HarvestReport {
        n_queries: queries.len(),
        ..Default::default()
    };
    let mut links: BTreeMap<(String, AspectPath, String), AspectImageLink> = BTreeMap::new();
    let mut images: BTreeMap<String, ImageRef> = BTreeMap::new();

    for q in queries {
        let results = match client.search(&q.text, k) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("search failed for `{}`: {e}", q.text);
                report.skipped.push(SkippedQuery {
                    entity_id: q.entity_id.clone(),
                    query: q.text.clone(),
                    error: e.to_string(),
                });
                continue;
            }
        };
        for (i, mut img) in results.into_iter().take(k).enumerate() {
            report.n_results += 1;
            img.source = ImageSource::SearchEngine;
            img.origin_query = Some(q.text.clone());
            let rank = img.search_rank.filter(|r| *r >= 1).unwrap_or(i as u32 + 1);
            img.search_rank = Some(rank);

            links
                .entry((q.entity_id.clone(), q.aspect_path.clone(), img.image_id.clone()))
                .or_insert_with(|| {
                    AspectImageLink::new(q.entity_id.clone(), q.aspect_path.clone(), img.image_id.clone())
                });
            images
                .entry(img.image_id.clone())
                .and_modify(|best| {
                    if (rank, &img.origin_query) < (best.search_rank.unwrap_or(u32::MAX), &best.origin_query) {
                        *best = img.clone();
                    }
                })
                .or_insert(img);
        }
    }

    report.n_links = links.len();
    report.n_images = images.len();
    (
        Harvest {
            images: images.into_values().collect(),
            links: links.into_values().collect(),
        },
        report,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn query(aspect: &str, text: &str) -> QuerySentence {
        QuerySentence {
            entity_id: "Q99".into(),
            aspect_path: AspectPath::new([aspect]),
            text: text.into(),
        }
    }

    fn ids(n: usize, prefix: &str) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn five_results_ranked_one_to_five() {
        let client = FixtureSearchClient::from_index([("california  geography".to_string(), ids(8, "img"))]);
        let (h, report) = harvest_search_images(&[query("Geography", "California Geography")], &client, 5);
        assert_eq!(h.links.len(), 5);
        let ranks: Vec<_> = h.images.iter().map(|i| i.search_rank.unwrap()).collect();
        assert_eq!(ranks, [1, 2, 3, 4, 5]);
        assert!(report.skipped.is_empty());
    }

    #[test]
    fn no_results_is_not_an_error() {
        let client = FixtureSearchClient::default();
        let (h, report) = harvest_search_images(&[query("Geography", "anything")], &client, 5);
        assert!(h.links.is_empty());
        assert!(report.skipped.is_empty());
    }

    #[test]
    fn shared_image_keeps_best_rank() {
        let client = FixtureSearchClient::from_index([
            ("q one".to_string(), vec!["a".into(), "shared".into()]),
            (
                "q two".to_string(),
                vec!["b".into(), "c".into(), "d".into(), "shared".into()],
            ),
        ]);
        let (h, _) = harvest_search_images(&[query("Geography", "q two"), query("Geography", "q one")], &client, 5);
        let shared: Vec<_> = h.links.iter().filter(|l| l.image_id == "shared").collect();
        assert_eq!(shared.len(), 1);
        let img = h.images.iter().find(|i| i.image_id == "shared").unwrap();
        assert_eq!(img.search_rank, Some(2));
        assert_eq!(img.origin_query.as_deref(), Some("q one"));
    }

    struct Flaky;

    impl SearchClient for Flaky {
        fn search(&self, query: &str, _k: usize) -> Result<Vec<ImageRef>> {
            if query.contains("fail") {
                Err(Error::data("backend unavailable"))
            } else {
                FixtureSearchClient::from_index([(query.to_string(), vec!["x".to_string()])]).search(query, 5)
            }
        }
    }

    #[test]
    fn failing_query_is_skipped_and_reported() {
        let (h, report) = harvest_search_images(&[query("A", "will fail"), query("A", "works")], &Flaky, 5);
        assert_eq!(h.links.len(), 1);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.skipped[0].query, "will fail");
    }

    #[test]
    fn rate_limit_spaces_calls() {
        let client = RateLimitedClient::new(FixtureSearchClient::default(), Duration::from_millis(20));
        let start = Instant::now();
        for _ in 0..3 {
            client.search("q", 5).unwrap();
        }
        assert!(start.elapsed() >= Duration::from_millis(40));
    }
}
