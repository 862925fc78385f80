//! Seeded synthetic worlds: graphs, embeddings and EAL queries with planted
//! structure. Used by the test suites and the demo pipeline.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::{FileEncoder, Vector, WordEmbeddingTable};
use crate::features::{AspectDoc, EalInstance};
use crate::kg::{AspectImageLink, AspectKg, AspectNode, AspectPath, EntityRecord, ImageRef, KgParts};

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(v: Vec<f64>) -> Vector {
    Vector::new(v).expect("finite").normalized()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
    unit(gaussian(rng, dim))
}

/// `normalize(base + sigma · ε)`.
fn jitter(rng: &mut ChaCha8Rng, base: &Vector, sigma: f64) -> Vector {
    let noise = gaussian(rng, base.dim());
    unit(base.values().iter().zip(noise).map(|(b, e)| b + sigma * e).collect())
}

/// `count` orthonormal vectors via Gram-Schmidt; `count <= dim`.
fn orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vector> {
    assert!(count <= dim, "cannot draw {count} orthonormal vectors in {dim} dims");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, dim);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis.into_iter().map(|b| Vector::new(b).expect("finite")).collect()
}

fn entity(i: usize) -> EntityRecord {
    EntityRecord {
        id: format!("E{i:03}"),
        name: format!("Entity {i}"),
        entity_type: "Company".into(),
        aliases: vec![],
        pageviews: 1000 - i as u64 % 1000,
    }
}

fn image_ref(id: &str) -> ImageRef {
    ImageRef::wikipedia(id, format!("synthetic://{id}"))
}

/// A graph with embeddings for every entity name, aspect label and image.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub kg: AspectKg,
    pub encoder: FileEncoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EalWorldConfig {
    pub n_entities: usize,
    pub n_concepts: usize,
    pub candidates_per_query: usize,
    pub n_queries: usize,
    pub word_dim: usize,
    pub embed_dim: usize,
    /// Chance the gold aspect's name token appears in the context.
    pub p_name: f64,
    /// Chance a wrong candidate's name token appears.
    pub p_name_distractor: f64,
    pub p_synonym: f64,
    pub p_synonym_distractor: f64,
    /// Gold content tokens in the context: Binomial(n, p).
    pub content_draws: usize,
    pub p_content: f64,
    pub p_content_distractor: f64,
    pub p_aspect_has_images: f64,
    pub images_per_aspect: usize,
    /// Weight of the gold aspect's visual direction in the context embedding.
    pub image_signal: f64,
    pub image_noise: f64,
}

impl Default for EalWorldConfig {
    fn default() -> Self {
        Self {
            n_entities: 100,
            n_concepts: 40,
            candidates_per_query: 6,
            n_queries: 600,
            word_dim: 24,
            embed_dim: 24,
            p_name: 0.4,
            p_name_distractor: 0.2,
            p_synonym: 0.45,
            p_synonym_distractor: 0.2,
            content_draws: 3,
            p_content: 0.35,
            p_content_distractor: 0.2,
            p_aspect_has_images: 0.85,
            images_per_aspect: 5,
            image_signal: 0.45,
            image_noise: 0.4,
        }
    }
}

/// EAL queries whose gold aspect is hinted at, independently and noisily,
/// by name tokens, synonyms, content words and the aspect's images.
#[derive(Debug, Clone)]
pub struct EalWorld {
    pub world: SynthWorld,
    pub words: WordEmbeddingTable,
    pub instances: Vec<EalInstance>,
}

const FILLER_WORDS: usize = 300;
const SYNONYMS: usize = 4;
const CONTENT_POOL: usize = 25;

fn concept_label(c: usize) -> String {
    format!("Topic{c}")
}

pub fn eal_world(config: &EalWorldConfig, seed: u64) -> EalWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wd = config.word_dim;

    // Word vectors: name and synonyms sit near the concept base, content
    // words further out, fillers anywhere.
    let mut words: BTreeMap<String, Vector> = BTreeMap::new();
    let mut synonyms: Vec<Vec<String>> = Vec::new();
    let mut content_pool: Vec<Vec<String>> = Vec::new();
    for c in 0..config.n_concepts {
        let base = random_unit(&mut rng, wd);
        words.insert(concept_label(c).to_lowercase(), base.clone());
        let syn: Vec<String> = (0..SYNONYMS).map(|s| format!("syn{c}x{s}")).collect();
        for s in &syn {
            words.insert(s.clone(), jitter(&mut rng, &base, 0.3 / (wd as f64).sqrt() * 2.0));
        }
        let pool: Vec<String> = (0..CONTENT_POOL).map(|s| format!("word{c}x{s}")).collect();
        for w in &pool {
            words.insert(w.clone(), jitter(&mut rng, &base, 1.0 / (wd as f64).sqrt() * 2.0));
        }
        synonyms.push(syn);
        content_pool.push(pool);
    }
    let fillers: Vec<String> = (0..FILLER_WORDS).map(|f| format!("filler{f}")).collect();
    for f in &fillers {
        words.insert(f.clone(), random_unit(&mut rng, wd));
    }

    let mut text: BTreeMap<String, Vector> = BTreeMap::new();
    let mut images: BTreeMap<String, Vector> = BTreeMap::new();
    let mut parts = KgParts::default();
    // Per entity: candidate concepts, their docs and visual directions.
    type Aspect = (usize, AspectDoc, Option<Vector>, Vec<String>);
    let mut entity_aspects: Vec<Vec<Aspect>> = Vec::new();
    let concepts: Vec<usize> = (0..config.n_concepts).collect();
    for c in 0..config.n_concepts {
        text.insert(concept_label(c), random_unit(&mut rng, config.embed_dim));
    }
    for e in 0..config.n_entities {
        let ent = entity(e);
        text.insert(ent.name.clone(), random_unit(&mut rng, config.embed_dim));
        let chosen: Vec<usize> = concepts
            .choose_multiple(&mut rng, config.candidates_per_query)
            .copied()
            .collect();
        let mut aspects = Vec::new();
        for &c in &chosen {
            let label = concept_label(c);
            parts.aspects.push(AspectNode {
                entity_id: ent.id.clone(),
                path: AspectPath::new([label.clone()]),
            });
            let topical: Vec<String> = content_pool[c].choose_multiple(&mut rng, 12).cloned().collect();
            let mut content: Vec<&str> = topical.iter().map(String::as_str).collect();
            content.extend(fillers.choose_multiple(&mut rng, 8).map(String::as_str));
            content.shuffle(&mut rng);
            let doc = AspectDoc {
                aspect_id: format!("{}/{label}", ent.id),
                name: label.clone(),
                content: content.join(" "),
                entities: None,
            };
            let visual = if rng.random_bool(config.p_aspect_has_images) {
                let dir = random_unit(&mut rng, config.embed_dim);
                for k in 0..config.images_per_aspect {
                    let id = format!("img-{}-{label}-{k}", ent.id);
                    images.insert(id.clone(), jitter(&mut rng, &dir, config.image_noise));
                    parts.images.push(image_ref(&id));
                    parts.links.push(AspectImageLink::new(
                        ent.id.clone(),
                        AspectPath::new([label.clone()]),
                        id,
                    ));
                }
                Some(dir)
            } else {
                None
            };
            aspects.push((c, doc, visual, topical));
        }
        parts.entities.push(ent);
        entity_aspects.push(aspects);
    }

    let mut instances = Vec::with_capacity(config.n_queries);
    for q in 0..config.n_queries {
        let e = q % config.n_entities;
        let aspects = &entity_aspects[e];
        let gold = rng.random_range(0..aspects.len());
        let (gold_c, gold_doc, gold_visual, gold_words) = &aspects[gold];
        let mut distractor = rng.random_range(0..aspects.len() - 1);
        if distractor >= gold {
            distractor += 1;
        }
        let (dist_c, _, _, dist_words) = &aspects[distractor];
        let dist_c = *dist_c;

        let mut tokens: Vec<String> = vec![format!("q{q}")];
        if rng.random_bool(config.p_name) {
            tokens.push(concept_label(*gold_c).to_lowercase());
        }
        if rng.random_bool(config.p_name_distractor) {
            tokens.push(concept_label(dist_c).to_lowercase());
        }
        if rng.random_bool(config.p_synonym) {
            tokens.push(synonyms[*gold_c].choose(&mut rng).expect("non-empty").clone());
        }
        if rng.random_bool(config.p_synonym_distractor) {
            tokens.push(synonyms[dist_c].choose(&mut rng).expect("non-empty").clone());
        }
        for _ in 0..config.content_draws {
            if rng.random_bool(config.p_content) {
                tokens.push(gold_words.choose(&mut rng).expect("non-empty").clone());
            }
            if rng.random_bool(config.p_content_distractor) {
                tokens.push(dist_words.choose(&mut rng).expect("non-empty").clone());
            }
        }
        tokens.extend(fillers.choose_multiple(&mut rng, 5).cloned());
        tokens.shuffle(&mut rng);
        let context = tokens.join(" ");

        let noise = random_unit(&mut rng, config.embed_dim);
        let ctx_vec = match gold_visual {
            Some(dir) => unit(
                dir.values()
                    .iter()
                    .zip(noise.values())
                    .map(|(d, n)| config.image_signal * d + (1.0 - config.image_signal) * n)
                    .collect(),
            ),
            None => noise,
        };
        text.insert(context.clone(), ctx_vec);

        instances.push(EalInstance {
            query_id: format!("q{q:04}"),
            entity_id: parts.entities[e].id.clone(),
            context,
            context_entities: None,
            candidates: aspects.iter().map(|(_, d, _, _)| d.clone()).collect(),
            gold_aspect_id: gold_doc.aspect_id.clone(),
        });
    }

    EalWorld {
        world: SynthWorld {
            kg: AspectKg::new(parts).expect("synthetic graph is valid"),
            encoder: FileEncoder::from_tables(text, images).expect("consistent dims"),
        },
        words: WordEmbeddingTable::new(words).expect("consistent dims"),
        instances,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AirWorldConfig {
    pub n_entities: usize,
    pub n_labels: usize,
    pub aspects_per_entity: usize,
    pub images_per_aspect: usize,
    pub dim: usize,
    /// Weight of the label's own direction in its images' mixing matrix.
    pub label_alignment: f64,
    /// Weight of the entity's identity direction in every entity image.
    pub entity_weight: f64,
    pub noise: f64,
}

impl Default for AirWorldConfig {
    fn default() -> Self {
        Self {
            n_entities: 12,
            n_labels: 150,
            aspects_per_entity: 100,
            images_per_aspect: 3,
            dim: 16,
            label_alignment: 0.5,
            entity_weight: 0.5,
            noise: 0.5,
        }
    }
}

/// Aspect images lie along `A · label + γ · entity + noise` for a fixed
/// random mixing matrix `A` that only partly preserves the label direction,
/// so the label text alone is a weaker query than (overall image, label).
pub fn air_world(config: &AirWorldConfig, seed: u64) -> SynthWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.dim;
    let scale = 1.0 / (d as f64).sqrt();
    let mixing: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            gaussian(&mut rng, d)
                .into_iter()
                .enumerate()
                .map(|(j, g)| if i == j { config.label_alignment } else { 0.0 } + scale * g)
                .collect()
        })
        .collect();
    let labels: Vec<String> = (0..config.n_labels).map(|l| format!("Aspect{l}")).collect();
    let mut text: BTreeMap<String, Vector> = labels.iter().map(|l| (l.clone(), random_unit(&mut rng, d))).collect();
    let mut images = BTreeMap::new();
    let mut parts = KgParts::default();
    for e in 0..config.n_entities {
        let ent = entity(e);
        let identity = random_unit(&mut rng, d);
        text.insert(ent.name.clone(), identity.clone());
        for label in labels.choose_multiple(&mut rng, config.aspects_per_entity) {
            parts.aspects.push(AspectNode {
                entity_id: ent.id.clone(),
                path: AspectPath::new([label.clone()]),
            });
            let t = &text[label];
            let mixed: Vec<f64> = mixing
                .iter()
                .zip(identity.values())
                .map(|(row, o)| row.iter().zip(t.values()).map(|(a, x)| a * x).sum::<f64>() + config.entity_weight * o)
                .collect();
            let center = Vector::new(mixed).expect("finite");
            for k in 0..config.images_per_aspect {
                let id = format!("img-{}-{label}-{k}", ent.id);
                images.insert(id.clone(), jitter(&mut rng, &center, config.noise));
                parts.images.push(image_ref(&id));
                parts.links.push(AspectImageLink::new(
                    ent.id.clone(),
                    AspectPath::new([label.clone()]),
                    id,
                ));
            }
        }
        parts.entities.push(ent);
    }
    SynthWorld {
        kg: AspectKg::new(parts).expect("synthetic graph is valid"),
        encoder: FileEncoder::from_tables(text, images).expect("consistent dims"),
    }
}

/// A graph where each aspect group holds one image belonging to a sibling
/// aspect, plus unlinked images with a known home aspect.
#[derive(Debug, Clone)]
pub struct PlantedKg {
    pub world: SynthWorld,
    pub planted: Vec<AspectImageLink>,
    /// `(image_id, entity_id, aspect_label)` for images not in the graph.
    pub expansion: Vec<(String, String, String)>,
}

pub fn planted_kg(seed: u64, n_expansion: usize) -> PlantedKg {
    const DIM: usize = 64;
    const LABELS: usize = 30;
    const ENTITIES: usize = 10;
    const ASPECTS: usize = 6;
    const GENUINE: usize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = 0.08;
    let basis = orthonormal(&mut rng, LABELS, DIM);
    let labels: Vec<String> = (0..LABELS).map(|l| format!("Facet{l}")).collect();
    let mut text: BTreeMap<String, Vector> = labels.iter().cloned().zip(basis.iter().cloned()).collect();
    let mut images = BTreeMap::new();
    let mut parts = KgParts::default();
    let mut planted = Vec::new();
    let mut entity_labels = Vec::new();
    for e in 0..ENTITIES {
        let ent = entity(e);
        text.insert(ent.name.clone(), random_unit(&mut rng, DIM));
        let chosen: Vec<usize> = (0..LABELS)
            .collect::<Vec<_>>()
            .choose_multiple(&mut rng, ASPECTS)
            .copied()
            .collect();
        for (i, &l) in chosen.iter().enumerate() {
            let path = AspectPath::new([labels[l].clone()]);
            parts.aspects.push(AspectNode {
                entity_id: ent.id.clone(),
                path: path.clone(),
            });
            for k in 0..GENUINE {
                let id = format!("img-{}-{}-{k}", ent.id, labels[l]);
                images.insert(id.clone(), jitter(&mut rng, &basis[l], sigma));
                parts.images.push(image_ref(&id));
                parts.links.push(AspectImageLink::new(ent.id.clone(), path.clone(), id));
            }
            let sibling = chosen[(i + 1) % ASPECTS];
            let id = format!("off-{}-{}", ent.id, labels[l]);
            images.insert(id.clone(), jitter(&mut rng, &basis[sibling], sigma));
            parts.images.push(image_ref(&id));
            let link = AspectImageLink::new(ent.id.clone(), path, id);
            planted.push(link.clone());
            parts.links.push(link);
        }
        entity_labels.push((ent.id.clone(), chosen));
        parts.entities.push(ent);
    }
    let expansion = (0..n_expansion)
        .map(|i| {
            let (entity_id, chosen) = entity_labels.choose(&mut rng).expect("entities exist");
            let l = *chosen.choose(&mut rng).expect("aspects exist");
            let id = format!("new-{i:04}");
            images.insert(id.clone(), jitter(&mut rng, &basis[l], 2.0 * sigma));
            (id, entity_id.clone(), labels[l].clone())
        })
        .collect();
    PlantedKg {
        world: SynthWorld {
            kg: AspectKg::new(parts).expect("synthetic graph is valid"),
            encoder: FileEncoder::from_tables(text, images).expect("consistent dims"),
        },
        planted,
        expansion,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderProvider;

    #[test]
    fn worlds_are_seed_deterministic() {
        let small = EalWorldConfig {
            n_entities: 5,
            n_queries: 20,
            ..Default::default()
        };
        let a = eal_world(&small, 1);
        let b = eal_world(&small, 1);
        assert_eq!(a.instances, b.instances);
        assert_eq!(a.world.kg, b.world.kg);
        assert_ne!(eal_world(&small, 2).instances, a.instances);
        for inst in &a.instances {
            assert!(inst.candidates.iter().any(|c| c.aspect_id == inst.gold_aspect_id));
            assert!(a.world.encoder.encode_text(&inst.context).is_ok());
        }
    }

    #[test]
    fn air_world_shape() {
        let config = AirWorldConfig {
            n_entities: 2,
            aspects_per_entity: 5,
            ..Default::default()
        };
        let w = air_world(&config, 3);
        assert_eq!(w.kg.links().len(), 2 * 5 * 3);
        assert_eq!(w.encoder.image_dim(), config.dim);
    }

    #[test]
    fn planted_links_are_off_aspect() {
        let p = planted_kg(0, 10);
        assert_eq!(p.planted.len(), 60);
        assert_eq!(p.expansion.len(), 10);
        let link = &p.planted[0];
        let label = p.world.encoder.encode_text(link.aspect_path.first_level()).unwrap();
        let img = p.world.encoder.encode_image(&link.image_id).unwrap();
        assert!(crate::encoder::cosine(&label, &img).unwrap() < 0.5);
    }
}
