//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use aspectkg::air::{
    batch_loss, batch_loss_and_gradient, build_triples, correct_kg, expand_assign, info_nce_loss, retrieve,
    split_triples, train, AirTrainConfig, AirTriple, CorrectionPolicy, ProjectionModel, TextBaseline,
};
use aspectkg::cli;
use aspectkg::encoder::{Vector, WordEmbeddingTable};
use aspectkg::features::{
    assemble_dataset, bm25, nested_text_subsets, overlap, tfidf_cosine, tokenize, w2v_sim, CorpusStats, FeatureInputs,
    FeatureSet, ImageSelection,
};
use aspectkg::ingest::{extract_aspects, parse_page_html};
use aspectkg::kg::{
    load_kg, save_kg, AspectImageLink, AspectKg, AspectNode, AspectPath, Blacklist, EntityRecord, ImageRef,
    ImageSource, KgParts, STANDARD_ENTITY_TYPES,
};
use aspectkg::ltr::{
    average_precision, coordinate_ascent_train, mean_ap, FeatureRow, LtrModel, QueryList, TrainConfig,
};
use aspectkg::manifest::{RunManifest, MANIFEST_FILE};
use aspectkg::metrics::{eval_air, DEFAULT_KS};
use aspectkg::synth::{air_world, eal_world, planted_kg, AirWorldConfig, EalWorldConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn within(start: Instant, limit_secs: u64) -> bool {
    start.elapsed() < Duration::from_secs(limit_secs)
}

// ---------------------------------------------------------------------------
// 1. AP / MAP against a brute-force oracle

/// Rank of each item counted directly: one plus the items scoring higher,
/// or equal and earlier. AP is the mean precision at each positive's rank.
fn oracle_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let n = scores.len();
    let rank = |i: usize| {
        1 + (0..n)
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count()
    };
    let positives: Vec<usize> = (0..n).filter(|&i| labels[i] == 1).collect();
    let total: f64 = positives
        .iter()
        .map(|&i| {
            let r = rank(i);
            positives.iter().filter(|&&j| rank(j) <= r).count() as f64 / r as f64
        })
        .sum();
    total / positives.len() as f64
}

fn ap_oracle() -> Outcome {
    let start = Instant::now();
    let mut configs = 0usize;
    let mut max_err = 0.0f64;
    for n in 1..=6usize {
        let score_patterns = n.pow(n as u32);
        for code in 0..score_patterns {
            // Every assignment of levels 0..n to the n items covers all tie patterns.
            let mut c = code;
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    let d = c % n;
                    c /= n;
                    d as f64
                })
                .collect();
            for mask in 0..(1u32 << n) {
                let labels: Vec<u8> = (0..n).map(|i| ((mask >> i) & 1) as u8).collect();
                let got = average_precision(&scores, &labels);
                if mask == 0 {
                    if got.is_ok() {
                        return Outcome::new(false, "AP without positives should be an error");
                    }
                    continue;
                }
                max_err = max_err.max((got.expect("has a positive") - oracle_ap(&scores, &labels)).abs());
                configs += 1;
            }
        }
    }

    // MAP over every 4-item list, scored through a one-feature model.
    let mut lists = Vec::new();
    let mut oracle_sum = 0.0;
    for code in 0..256usize {
        let scores: Vec<f64> = (0..4).map(|i| ((code >> (2 * i)) & 3) as f64).collect();
        for mask in 1..16u32 {
            let labels: Vec<u8> = (0..4).map(|i| ((mask >> i) & 1) as u8).collect();
            let rows = (0..4)
                .map(|i| FeatureRow {
                    query_id: format!("q{code}-{mask}"),
                    aspect_id: format!("a{i}"),
                    features: vec![scores[i]],
                    label: labels[i],
                })
                .collect();
            lists.push(QueryList::new(&format!("q{code}-{mask}"), rows).expect("valid list"));
            oracle_sum += oracle_ap(&scores, &labels);
        }
    }
    let map = mean_ap(&lists, &[1.0]).expect("map");
    let map_err = (map - oracle_sum / lists.len() as f64).abs();

    let pass = max_err <= 1e-12 && map_err <= 1e-12 && within(start, 5);
    Outcome::new(
        pass,
        format!(
            "{configs} configurations, max |AP - oracle| = {max_err:.1e}, MAP error {map_err:.1e} over {} lists",
            lists.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Feature oracles

fn feature_oracles() -> Outcome {
    let docs: Vec<Vec<String>> = [
        "The river flows to the bay",
        "Gold rush drew people to the river",
        "The economy is the largest economy",
    ]
    .iter()
    .map(|d| tokenize(d))
    .collect();
    let query = tokenize("The river of gold");
    let stats = CorpusStats::from_docs(docs.iter().map(Vec::as_slice));
    let v = |x: f64, y: f64| Vector::new(vec![x, y]).expect("finite");
    let table = WordEmbeddingTable::new(BTreeMap::from([
        ("river".to_string(), v(1.0, 0.0)),
        ("gold".to_string(), v(0.0, 1.0)),
        ("bay".to_string(), v(1.0, 1.0)),
        ("economy".to_string(), v(-1.0, 2.0)),
    ]))
    .expect("table");

    // Evaluated independently from the closed-form definitions.
    let expected_bm25 = [0.6667103550316258, 1.5189547405978658, 0.1863643476362285];
    let expected_tfidf = [0.2898365384050279, 0.4151851577921213, 0.12325908598219451];
    let expected_overlap = [2usize, 3, 1];
    let expected_w2v = [0.9194858016280341, 1.0, 0.4412086685008357];

    let mut worst = 0.0f64;
    let mut overlap_ok = true;
    for (i, doc) in docs.iter().enumerate() {
        worst = worst.max((bm25(&query, doc, &stats) - expected_bm25[i]).abs());
        worst = worst.max((tfidf_cosine(&query, doc, &stats) - expected_tfidf[i]).abs());
        worst = worst.max((w2v_sim(&query, doc, &table, &stats) - expected_w2v[i]).abs());
        overlap_ok &= overlap(&query, doc) == expected_overlap[i];
    }
    let oov = w2v_sim(&tokenize("the of"), &docs[0], &table, &stats);
    let no_match = bm25(&tokenize("volcano"), &docs[0], &stats);
    let pass = worst <= 1e-9 && overlap_ok && oov == 0.0 && no_match == 0.0;
    Outcome::new(
        pass,
        format!("max error {worst:.1e}, overlap exact: {overlap_ok}, out-of-vocabulary w2v = {oov}"),
    )
}

// ---------------------------------------------------------------------------
// 3. InfoNCE analytics

fn uniform_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn infonce_analytics() -> Outcome {
    let mut uniform_err = 0.0f64;
    for n in [2usize, 4, 8] {
        let p = vec![Vector::new(vec![0.3, -0.2, 0.9]).expect("finite"); n];
        let c = vec![Vector::new(vec![-0.5, 0.1, 0.4]).expect("finite"); n];
        let loss = info_nce_loss(&p, &c, 0.07).expect("loss");
        uniform_err = uniform_err.max((loss - (n as f64).ln()).abs());
    }

    let h = 1e-5;
    let mut worst_rel = 0.0f64;
    for fixture in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + fixture);
        let mut model = ProjectionModel::random(8, 8, 0.07, 0.3, fixture).expect("model");
        let inputs: Vec<Vec<f64>> = (0..6).map(|_| uniform_vec(&mut rng, 16)).collect();
        let positives: Vec<Vec<f64>> = (0..6).map(|_| uniform_vec(&mut rng, 8)).collect();
        let (_, grad) = batch_loss_and_gradient(&model, &inputs, &positives).expect("gradient");
        for k in 0..grad.len() {
            let w0 = model.weights()[k];
            model.weights_mut()[k] = w0 + h;
            let up = batch_loss(&model, &inputs, &positives).expect("loss");
            model.weights_mut()[k] = w0 - h;
            let down = batch_loss(&model, &inputs, &positives).expect("loss");
            model.weights_mut()[k] = w0;
            let numeric = (up - down) / (2.0 * h);
            let scale = grad[k].abs().max(numeric.abs()).max(1e-8);
            worst_rel = worst_rel.max((grad[k] - numeric).abs() / scale);
        }
    }
    let pass = uniform_err <= 1e-12 && worst_rel < 1e-4;
    Outcome::new(
        pass,
        format!("|loss - ln N| <= {uniform_err:.1e}, max gradient relative error {worst_rel:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// 4. Coordinate ascent

fn signal_corpus(seed: u64, n_queries: usize) -> Vec<QueryList> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_queries)
        .map(|q| {
            let gold = rng.random_range(0..5);
            let rows = (0..5)
                .map(|i| {
                    let signal = if i == gold {
                        rng.random_range(0.6..1.0)
                    } else {
                        rng.random_range(0.0..0.5)
                    };
                    let mut features = vec![signal];
                    features.extend((0..4).map(|_| rng.random_range(0.0..1.0)));
                    FeatureRow {
                        query_id: format!("q{q}"),
                        aspect_id: format!("a{i}"),
                        features,
                        label: u8::from(i == gold),
                    }
                })
                .collect();
            QueryList::new(&format!("q{q}"), rows).expect("valid list")
        })
        .collect()
}

fn coordinate_ascent() -> Outcome {
    let start = Instant::now();
    let lists = signal_corpus(11, 200);
    let config = TrainConfig {
        seed: 5,
        ..Default::default()
    };
    let outcome = coordinate_ascent_train(&lists, &config).expect("training");
    let again = coordinate_ascent_train(&lists, &config).expect("training");
    let other = coordinate_ascent_train(
        &lists,
        &TrainConfig {
            seed: 6,
            ..config.clone()
        },
    )
    .expect("training");

    let best = &outcome.restarts[outcome.best_restart];
    let first_perfect = best.train_map_by_epoch.iter().position(|&m| m == 1.0);
    let reached = outcome.train_map == 1.0 && first_perfect.is_some_and(|e| e <= 50);

    let monotone = outcome
        .restarts
        .iter()
        .flat_map(|r| &r.accepted)
        .all(|s| s.batch_map_after > s.batch_map_before);

    let rel_change = |prev: f64, now: f64| {
        if prev > 0.0 {
            (now - prev).abs() / prev
        } else {
            (now - prev).abs()
        }
    };
    let mut early_stops = 0;
    let stopping = outcome.restarts.iter().all(|r| {
        let m = &r.train_map_by_epoch;
        let last = m.len() - 1;
        let continued = (1..last).all(|e| rel_change(m[e - 1], m[e]) >= config.rel_tol);
        let stopped = rel_change(m[last - 1], m[last]) < config.rel_tol;
        if stopped && r.epochs() < config.max_epochs {
            early_stops += 1;
        }
        continued && (stopped || r.epochs() == config.max_epochs)
    });

    let best_map = outcome
        .restarts
        .iter()
        .map(|r| r.train_map())
        .fold(f64::NEG_INFINITY, f64::max);
    let selection = outcome.restarts.len() == 20
        && outcome.restarts.iter().enumerate().all(|(i, r)| r.restart == i)
        && outcome.best_restart
            == outcome
                .restarts
                .iter()
                .position(|r| r.train_map() == best_map)
                .expect("some")
        && outcome.weights == best.weights;
    let distinct_inits = outcome
        .restarts
        .iter()
        .map(|r| format!("{:?}", r.initial_weights))
        .collect::<BTreeSet<_>>()
        .len()
        == 20;
    let deterministic = outcome == again && other.restarts[0].initial_weights != outcome.restarts[0].initial_weights;

    let held_out = LtrModel::new(&outcome, (0..5).map(|i| i.to_string()).collect(), &config)
        .expect("model")
        .mean_ap(&signal_corpus(12, 200))
        .expect("map");

    let pass = reached
        && monotone
        && stopping
        && early_stops > 0
        && selection
        && distinct_inits
        && deterministic
        && within(start, 60);
    Outcome::new(
        pass,
        format!(
            "train MAP {} at epoch {:?}, held-out MAP {held_out:.3}, monotone {monotone}, stop rule {stopping} \
             ({early_stops}/20 early), best restart {} of {}, deterministic {deterministic}",
            outcome.train_map,
            first_perfect,
            outcome.best_restart,
            outcome.restarts.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. Image feature gain shrinks as text features are added

fn columns(lists: &[QueryList], cols: &[usize]) -> Vec<QueryList> {
    lists
        .iter()
        .map(|l| {
            let rows = l
                .rows
                .iter()
                .map(|r| FeatureRow {
                    features: cols.iter().map(|&c| r.features[c]).collect(),
                    ..r.clone()
                })
                .collect();
            QueryList::new(&l.query_id, rows).expect("valid list")
        })
        .collect()
}

fn test_map(train_lists: &[QueryList], test_lists: &[QueryList], cols: &[usize], config: &TrainConfig) -> f64 {
    let outcome = coordinate_ascent_train(&columns(train_lists, cols), config).expect("training");
    LtrModel::new(&outcome, cols.iter().map(|c| c.to_string()).collect(), config)
        .expect("model")
        .mean_ap(&columns(test_lists, cols))
        .expect("map")
}

fn eal_image_gain() -> Outcome {
    let start = Instant::now();
    let world_config = EalWorldConfig::default();
    let seeds = 5u64;
    let image_col = 7;
    let mut delta = [0.0f64; 7];
    for seed in 0..seeds {
        let w = eal_world(&world_config, seed);
        let inputs = FeatureInputs {
            kg: Some(&w.world.kg),
            provider: Some(&w.world.encoder),
            words: Some(&w.words),
            image_selection: ImageSelection::AspectLabel,
        };
        let lists = assemble_dataset(&w.instances, &inputs, &FeatureSet::full()).expect("dataset");
        let (train_lists, test_lists) = lists.split_at(lists.len() * 7 / 10);
        let config = TrainConfig {
            seed,
            ..Default::default()
        };
        for (k, subset) in nested_text_subsets(seed).iter().enumerate() {
            let text: Vec<usize> = subset.kinds().iter().map(|f| f.index()).collect();
            let mut with_image = text.clone();
            with_image.push(image_col);
            let without = test_map(train_lists, test_lists, &text, &config);
            let with = test_map(train_lists, test_lists, &with_image, &config);
            delta[k] += (with - without) / seeds as f64;
        }
    }
    let strong_start = delta[0] >= 0.05 && delta[1] >= 0.05;
    let non_increasing = delta.windows(2).all(|w| w[1] <= w[0] + 0.02);
    let pass = world_config.n_queries >= 500 && strong_start && non_increasing && within(start, 180);
    let shown: Vec<String> = delta.iter().map(|d| format!("{d:+.3}")).collect();
    Outcome::new(
        pass,
        format!(
            "mean delta MAP for 1..7 text features [{}] over {seeds} seeds",
            shown.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Trained retrieval beats the text baseline

fn air_recall() -> Outcome {
    let start = Instant::now();
    let world_config = AirWorldConfig::default();
    let seeds = 5u64;
    let mut air = [0.0f64; 3];
    let mut base = [0.0f64; 3];
    for seed in 0..seeds {
        let w = air_world(&world_config, seed);
        let (triples, _) = build_triples(&w.kg, &w.encoder).expect("triples");
        let split = split_triples(&triples, seed);
        let init = ProjectionModel::aspect_identity(world_config.dim, AirTrainConfig::default().tau).expect("model");
        let config = AirTrainConfig {
            seed,
            ..Default::default()
        };
        let trained = train(&init, &split, &w.encoder, &config).expect("training");
        let (a, _) = eval_air(&trained.model, &split.test, &w.encoder, &DEFAULT_KS).expect("eval");
        let (b, _) = eval_air(&TextBaseline, &split.test, &w.encoder, &DEFAULT_KS).expect("eval");
        for (i, k) in DEFAULT_KS.iter().enumerate() {
            air[i] += a.recall_at[k] / seeds as f64;
            base[i] += b.recall_at[k] / seeds as f64;
        }
    }
    let pass = air.iter().zip(&base).all(|(a, b)| a >= b) && air[2] > base[2] && within(start, 120);
    Outcome::new(
        pass,
        format!(
            "Recall@3/5/10 trained {:.3}/{:.3}/{:.3} vs baseline {:.3}/{:.3}/{:.3}",
            air[0], air[1], air[2], base[0], base[1], base[2]
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Parser golden files

fn parser_golden() -> Outcome {
    let pages = fixtures().join("pages");
    let mut mismatched = Vec::new();
    for (name, entity_id) in [("california", "Q99"), ("lead_only", "Q1"), ("skipped_level", "Q2")] {
        let html = std::fs::read_to_string(pages.join(format!("{name}.html"))).expect("fixture");
        let golden = std::fs::read_to_string(pages.join(format!("{name}.golden.json"))).expect("golden");
        let mut got = serde_json::to_string_pretty(&parse_page_html(&html, entity_id)).expect("json");
        got.push('\n');
        if got != golden {
            mismatched.push(name);
        }
    }

    let html = std::fs::read_to_string(pages.join("california.html")).expect("fixture");
    let page = parse_page_html(&html, "Q99");
    let paths =
        |bl: &Blacklist| -> BTreeSet<AspectPath> { extract_aspects(&page, bl).into_iter().map(|a| a.path).collect() };
    let everything = paths(&Blacklist::empty());
    let kept = paths(&Blacklist::default());
    let removed: BTreeSet<&AspectPath> = everything.difference(&kept).collect();
    let defaults: BTreeSet<&str> = Blacklist::DEFAULT_LABELS.into_iter().collect();
    let expected: BTreeSet<&AspectPath> = everything
        .iter()
        .filter(|p| defaults.contains(p.first_level()))
        .collect();
    let blacklist_exact = defaults == BTreeSet::from(["Notes", "External links", "References", "See also"])
        && removed == expected
        && expected.len() == 6
        && kept.iter().all(|p| p.iter().all(|l| !defaults.contains(l.as_str())));
    let nested = kept.contains(&AspectPath::new(["Geography", "Regions", "Rivers"]))
        && kept.contains(&AspectPath::new(["Geography", "Regions"]))
        && kept.contains(&AspectPath::new(["Geography"]));

    let pass = mismatched.is_empty() && blacklist_exact && nested;
    Outcome::new(
        pass,
        format!(
            "golden mismatches {mismatched:?}, blacklist removed {} paths, Geography/Regions/Rivers kept: {nested}",
            removed.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. Split arithmetic

fn synthetic_triples(n: usize) -> Vec<AirTriple> {
    (0..n)
        .map(|i| AirTriple {
            entity_id: format!("E{}", i % 97),
            overall_image_id: format!("overall{}", i % 97),
            aspect_label: format!("L{}", i % 13),
            positive_image_id: format!("img{i}"),
        })
        .collect()
}

fn split_arithmetic() -> Outcome {
    let big = synthetic_triples(46_779);
    let split = split_triples(&big, 3);
    let sizes = (split.train.len(), split.validation.len(), split.test.len());
    let small = split_triples(&synthetic_triples(10), 3);
    let small_sizes = (small.train.len(), small.validation.len(), small.test.len());
    let reproducible = split_triples(&big, 3) == split;
    let seed_matters = split_triples(&big, 4) != split;
    let union: BTreeSet<&AirTriple> = split.train.iter().chain(&split.validation).chain(&split.test).collect();
    let partition = union.len() == big.len();
    let pass = sizes == (37_453, 4_663, 4_663) && small_sizes == (8, 1, 1) && reproducible && seed_matters && partition;
    Outcome::new(
        pass,
        format!(
            "46779 -> {sizes:?}, 10 -> {small_sizes:?}, same seed identical: {reproducible}, partition: {partition}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. Persistence and end-to-end determinism

fn label_strategy() -> impl Strategy<Value = String> {
    "\\S([^\n]{0,10}\\S)?"
}

fn kg_strategy() -> impl Strategy<Value = AspectKg> {
    (
        prop::collection::vec(
            (
                "\\S[^\n]{0,15}",
                0..STANDARD_ENTITY_TYPES.len(),
                prop::collection::vec("[^\n]{0,8}", 0..3),
                any::<u64>(),
            ),
            1..6,
        ),
        prop::collection::vec(label_strategy(), 1..6),
        any::<u64>(),
    )
        .prop_map(|(entities, labels, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut parts = KgParts::default();
            for (i, (name, ty, aliases, pageviews)) in entities.into_iter().enumerate() {
                parts.entities.push(EntityRecord {
                    id: format!("Q{i}"),
                    name,
                    entity_type: STANDARD_ENTITY_TYPES[ty].to_string(),
                    aliases,
                    pageviews,
                });
            }
            let mut paths = BTreeSet::new();
            for e in &parts.entities {
                for _ in 0..rng.random_range(0..5) {
                    let depth = rng.random_range(1..=3);
                    let path = AspectPath::new((0..depth).map(|_| labels[rng.random_range(0..labels.len())].clone()));
                    paths.insert((e.id.clone(), path));
                }
            }
            parts.aspects = paths
                .iter()
                .map(|(entity_id, path)| AspectNode {
                    entity_id: entity_id.clone(),
                    path: path.clone(),
                })
                .collect();
            for i in 0..rng.random_range(0..8) {
                let mut img = ImageRef::wikipedia(format!("img{i}.jpg"), format!("https://example.org/{i}?q=\"x\""));
                if rng.random_bool(0.4) {
                    img.source = ImageSource::SearchEngine;
                    img.search_rank = Some(rng.random_range(1..6));
                    img.origin_query = Some(format!("query {i} with \u{e9}"));
                }
                parts.images.push(img);
            }
            let mut keys = BTreeSet::new();
            if !parts.images.is_empty() {
                for _ in 0..rng.random_range(0..12) {
                    let a = &parts.aspects[rng.random_range(0..parts.aspects.len().max(1))..];
                    let (Some(aspect), Some(img)) =
                        (a.first(), parts.images.get(rng.random_range(0..parts.images.len())))
                    else {
                        continue;
                    };
                    if keys.insert((aspect.entity_id.clone(), aspect.path.clone(), img.image_id.clone())) {
                        let mut link =
                            AspectImageLink::new(aspect.entity_id.clone(), aspect.path.clone(), img.image_id.clone());
                        if rng.random_bool(0.5) {
                            link.relevance = Some(rng.random_range(-1.0..=1.0));
                        }
                        parts.links.push(link);
                    }
                }
            }
            AspectKg::new(parts).expect("generated graph is valid")
        })
}

fn round_trip_cases() -> std::result::Result<u32, String> {
    let cases = 128;
    let mut runner = TestRunner::new(ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    runner
        .run(&kg_strategy(), |kg| {
            let dir = tempfile::tempdir().map_err(|e| TestCaseError::fail(e.to_string()))?;
            save_kg(&kg, dir.path()).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let back = load_kg(dir.path()).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(back, kg);
            Ok(())
        })
        .map(|()| cases)
        .map_err(|e| e.to_string())
}

fn cli(args: &[&str]) -> i32 {
    cli::run(std::iter::once("aspectkg").chain(args.iter().copied()))
}

/// The full pipeline under `root`; returns the first failing step.
fn pipeline(root: &Path) -> std::result::Result<(), String> {
    let p = |rel: &str| root.join(rel).to_string_lossy().into_owned();
    let pages = root.join("pages");
    std::fs::create_dir_all(&pages).map_err(|e| e.to_string())?;
    for (src, id) in [("california", "Q99"), ("lead_only", "Q1")] {
        std::fs::copy(
            fixtures().join(format!("pages/{src}.html")),
            pages.join(format!("{id}.html")),
        )
        .map_err(|e| e.to_string())?;
    }
    std::fs::write(root.join("config.json"), r#"{"air": {"epochs": 3}, "ks": [1, 3]}"#).map_err(|e| e.to_string())?;
    let fixture_dir = fixtures();
    let candidates = fixture_dir.join("candidates.jsonl").to_string_lossy().into_owned();
    let search = fixture_dir.join("search").to_string_lossy().into_owned();
    let config = p("config.json");

    let steps: Vec<Vec<String>> = vec![
        vec![
            "--out",
            &p("built"),
            "build",
            "--candidates",
            &candidates,
            "--pages",
            &p("pages"),
            "--fixtures",
            &search,
        ],
        vec!["--out", &p("flat"), "flatten", "--kg", &p("built/kg")],
        vec!["--seed", "7", "--out", &p("eal"), "synth", "--world", "eal"],
        vec![
            "--out",
            &p("feat_train"),
            "features",
            "--dataset",
            &p("eal/eal_train.jsonl"),
            "--kg",
            &p("eal/kg"),
            "--embeddings",
            &p("eal/embeddings.jsonl"),
            "--words",
            &p("eal/words.jsonl"),
        ],
        vec![
            "--out",
            &p("feat_test"),
            "features",
            "--dataset",
            &p("eal/eal_test.jsonl"),
            "--kg",
            &p("eal/kg"),
            "--embeddings",
            &p("eal/embeddings.jsonl"),
            "--words",
            &p("eal/words.jsonl"),
        ],
        vec![
            "--seed",
            "7",
            "--out",
            &p("ltr"),
            "ltr-train",
            "--run",
            &p("feat_train/features.run"),
        ],
        vec![
            "--config",
            &config,
            "--out",
            &p("ltr_eval"),
            "ltr-eval",
            "--model",
            &p("ltr/ltr_model.json"),
            "--run",
            &p("feat_test/features.run"),
        ],
        vec!["--seed", "7", "--out", &p("air"), "synth", "--world", "air"],
        vec![
            "--seed",
            "7",
            "--out",
            &p("triples"),
            "air-triples",
            "--kg",
            &p("air/kg"),
            "--embeddings",
            &p("air/embeddings.jsonl"),
        ],
        vec![
            "--config",
            &config,
            "--seed",
            "7",
            "--out",
            &p("air_model"),
            "air-train",
            "--triples",
            &p("triples"),
            "--embeddings",
            &p("air/embeddings.jsonl"),
        ],
        vec![
            "--config",
            &config,
            "--out",
            &p("air_eval"),
            "air-eval",
            "--model",
            &p("air_model/air_model.json"),
            "--triples",
            &p("triples"),
            "--embeddings",
            &p("air/embeddings.jsonl"),
        ],
        vec![
            "--out",
            &p("corrected"),
            "kg-correct",
            "--kg",
            &p("air/kg"),
            "--model",
            &p("air_model/air_model.json"),
            "--embeddings",
            &p("air/embeddings.jsonl"),
            "--keep-top",
            "2",
        ],
    ]
    .into_iter()
    .map(|s| s.into_iter().map(str::to_string).collect())
    .collect();

    for step in &steps {
        let args: Vec<&str> = step.iter().map(String::as_str).collect();
        let code = cli(&args);
        if code != 0 {
            return Err(format!("`{}` exited with {code}", args.join(" ")));
        }
    }
    Ok(())
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).expect("readable dir") {
        let path = entry.expect("entry").path();
        if path.is_dir() {
            collect_files(root, &path, out);
        } else {
            let rel = path.strip_prefix(root).expect("under root").to_path_buf();
            out.insert(rel, std::fs::read(&path).expect("readable file"));
        }
    }
}

fn compare_runs(a: &Path, b: &Path) -> std::result::Result<usize, String> {
    let mut fa = BTreeMap::new();
    let mut fb = BTreeMap::new();
    collect_files(a, a, &mut fa);
    collect_files(b, b, &mut fb);
    if fa.keys().ne(fb.keys()) {
        return Err("runs produced different file sets".into());
    }
    let mut manifests = 0;
    for (rel, bytes) in &fa {
        let other = &fb[rel];
        if rel.file_name().is_some_and(|n| n == MANIFEST_FILE) {
            let ma = RunManifest::read(&a.join(rel)).map_err(|e| e.to_string())?;
            let mb = RunManifest::read(&b.join(rel)).map_err(|e| e.to_string())?;
            if ma.without_timestamp() != mb.without_timestamp() {
                return Err(format!("{} differs beyond its timestamp", rel.display()));
            }
            manifests += 1;
        } else if bytes != other {
            return Err(format!("{} differs", rel.display()));
        }
    }
    Ok(manifests)
}

fn persistence() -> Outcome {
    let round_trip = round_trip_cases();
    let a = tempfile::tempdir().expect("tempdir");
    let b = tempfile::tempdir().expect("tempdir");
    let runs = pipeline(a.path())
        .and_then(|()| pipeline(b.path()))
        .and_then(|()| compare_runs(a.path(), b.path()));
    let detail = format!(
        "round trip: {}; end-to-end: {}",
        match &round_trip {
            Ok(n) => format!("{n} random graphs"),
            Err(e) => format!("failed: {e}"),
        },
        match &runs {
            Ok(n) => format!("identical outputs, {n} manifests equal up to timestamp"),
            Err(e) => e.clone(),
        }
    );
    Outcome::new(round_trip.is_ok() && runs.as_ref().is_ok_and(|&n| n >= 12), detail)
}

// ---------------------------------------------------------------------------
// 10. Correction and expansion on a planted graph

fn correction_expansion() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for seed in 0..3u64 {
        let planted = planted_kg(seed, 200);
        let kg = &planted.world.kg;
        let provider = &planted.world.encoder;
        let planted_keys: BTreeSet<(String, String)> = planted
            .planted
            .iter()
            .map(|l| (l.entity_id.clone(), l.image_id.clone()))
            .collect();

        let mut planted_max = f64::NEG_INFINITY;
        let mut genuine_min = f64::INFINITY;
        for entity in kg.entities() {
            let overall = aspectkg::air::overall_image(kg, provider, &entity.id).expect("overall image");
            for label in kg.first_level_labels(&entity.id) {
                let images = kg.aspect_images(&entity.id, label);
                let result = retrieve(&TextBaseline, provider, &overall, label, &images).expect("retrieve");
                for (id, score) in result.ranked {
                    if planted_keys.contains(&(entity.id.clone(), id)) {
                        planted_max = planted_max.max(score);
                    } else {
                        genuine_min = genuine_min.min(score);
                    }
                }
            }
        }
        let threshold = (planted_max + genuine_min) / 2.0;
        let (corrected, removed) =
            correct_kg(kg, &TextBaseline, provider, CorrectionPolicy::Threshold(threshold)).expect("correction");
        let removed_keys: BTreeSet<(String, String)> = removed
            .iter()
            .map(|r| (r.link.entity_id.clone(), r.link.image_id.clone()))
            .collect();
        let exact = planted_max < genuine_min
            && removed_keys == planted_keys
            && corrected.links().len() == kg.links().len() - planted.planted.len();

        let correct = planted
            .expansion
            .iter()
            .filter(|(image, entity, label)| {
                expand_assign(image, entity, &corrected, &TextBaseline, provider)
                    .expect("assign")
                    .0
                    == *label
            })
            .count();
        let accuracy = correct as f64 / planted.expansion.len() as f64;
        pass &= exact && planted.expansion.len() == 200 && accuracy >= 0.95;
        details.push(format!(
            "seed {seed}: gap [{planted_max:.3}, {genuine_min:.3}], removed {}/{} planted, expansion {correct}/200",
            removed_keys.intersection(&planted_keys).count(),
            planted_keys.len()
        ));
    }
    Outcome::new(pass, details.join("; "))
}

type Check = (u8, &'static str, fn() -> Outcome);

fn main() {
    let checks: [Check; 10] = [
        (1, "AP/MAP oracle equivalence", ap_oracle),
        (2, "feature oracles", feature_oracles),
        (3, "InfoNCE analytics", infonce_analytics),
        (4, "coordinate ascent", coordinate_ascent),
        (5, "image feature gain vs text features", eal_image_gain),
        (6, "trained retrieval vs text baseline", air_recall),
        (7, "parser golden tests", parser_golden),
        (8, "split arithmetic", split_arithmetic),
        (9, "persistence and determinism", persistence),
        (10, "correction and expansion", correction_expansion),
    ];
    let mut failures = 0;
    for (id, name, check) in checks {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        if !outcome.pass {
            failures += 1;
        }
        println!(
            "criterion {id:>2} {}: {name}: {} [{:.1?}]",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail,
            start.elapsed()
        );
    }
    println!("acceptance: {} of 10 criteria passed", 10 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
