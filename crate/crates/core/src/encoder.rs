//! Dense vectors, cosine similarity and the embedding providers.
//!
//! Two providers ship with the toolkit. [`MockEncoder`] hashes its input to a
//! deterministic pseudo-random unit vector and needs no data at all.
//! [`FileEncoder`] serves vectors precomputed by an external model from a
//! JSONL file of `{"id": ..., "vec": [...]}` records, where text keys carry a
//! `t:` prefix and image keys an `i:` prefix. Unprefixed ids are served for
//! both kinds of lookup.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::jsonl;

pub const TEXT_PREFIX: &str = "t:";
pub const IMAGE_PREFIX: &str = "i:";

/// Non-empty vector of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::data("vector must have at least one entry"));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("vector entry {bad} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "vector dimension must be positive");
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        check_dims(self, other)?;
        Ok(dot(&self.0, &other.0))
    }

    /// Unit-length copy; the zero vector is returned unchanged.
    pub fn normalized(&self) -> Vector {
        let n = self.norm();
        if n == 0.0 {
            self.clone()
        } else {
            Vector(self.0.iter().map(|v| v / n).collect())
        }
    }

    pub fn scaled(&self, alpha: f64) -> Vector {
        Vector(self.0.iter().map(|v| v * alpha).collect())
    }

    /// `self ⊕ other`.
    pub fn concat(&self, other: &Vector) -> Vector {
        let mut values = self.0.clone();
        values.extend_from_slice(&other.0);
        Vector(values)
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Vector::new(values)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dims(u: &Vector, v: &Vector) -> Result<()> {
    if u.dim() != v.dim() {
        return Err(Error::usage(format!("dimension mismatch: {} vs {}", u.dim(), v.dim())));
    }
    Ok(())
}

/// Cosine similarity, defined as 0 when either vector has zero norm.
pub fn cosine(u: &Vector, v: &Vector) -> Result<f64> {
    check_dims(u, v)?;
    Ok(cosine_slices(&u.0, &v.0))
}

pub(crate) fn cosine_slices(u: &[f64], v: &[f64]) -> f64 {
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0)
}

/// The `k` candidates most similar to `query`, by descending cosine with ties
/// broken by ascending id.
pub fn top_k_by_similarity<'a, I>(query: &Vector, candidates: I, k: usize) -> Result<Vec<(String, f64)>>
where
    I: IntoIterator<Item = (&'a str, &'a Vector)>,
{
    let mut scored = candidates
        .into_iter()
        .map(|(id, v)| Ok((id.to_string(), cosine(query, v)?)))
        .collect::<Result<Vec<_>>>()?;
    sort_by_score_then_id(&mut scored);
    scored.truncate(k);
    Ok(scored)
}

/// Descending score, ascending id.
pub fn sort_by_score_then_id(scored: &mut [(String, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

pub trait EncoderProvider: Send + Sync {
    fn encode_text(&self, text: &str) -> Result<Vector>;
    fn encode_image(&self, image_id: &str) -> Result<Vector>;
    fn text_dim(&self) -> usize;
    fn image_dim(&self) -> usize;
}

/// Hash-seeded random unit vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockEncoder {
    seed: u64,
    dim: usize,
}

impl MockEncoder {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::usage("mock encoder dimension must be positive"));
        }
        Ok(Self { seed, dim })
    }

    fn vector_for(&self, namespace: &str, input: &str) -> Vector {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(namespace.as_bytes());
        hasher.update(input.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
        loop {
            let values: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let v = Vector(values);
            if v.norm() > 0.0 {
                return v.normalized();
            }
        }
    }
}

impl EncoderProvider for MockEncoder {
    fn encode_text(&self, text: &str) -> Result<Vector> {
        Ok(self.vector_for(TEXT_PREFIX, text))
    }

    fn encode_image(&self, image_id: &str) -> Result<Vector> {
        Ok(self.vector_for(IMAGE_PREFIX, image_id))
    }

    fn text_dim(&self) -> usize {
        self.dim
    }

    fn image_dim(&self) -> usize {
        self.dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vec: Vector,
}

/// Lookup tables of precomputed text and image vectors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FileEncoder {
    text: BTreeMap<String, Vector>,
    image: BTreeMap<String, Vector>,
}

impl FileEncoder {
    pub fn open(path: &Path) -> Result<Self> {
        let records: Vec<(usize, EmbeddingRecord)> = jsonl::read_records(path)?;
        Self::from_records(records.into_iter().map(|(_, r)| r))
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }

    pub fn from_records(records: impl IntoIterator<Item = EmbeddingRecord>) -> Result<Self> {
        let mut text = BTreeMap::new();
        let mut image = BTreeMap::new();
        for EmbeddingRecord { id, vec } in records {
            if let Some(key) = id.strip_prefix(TEXT_PREFIX) {
                insert_unique(&mut text, key, vec, &id)?;
            } else if let Some(key) = id.strip_prefix(IMAGE_PREFIX) {
                insert_unique(&mut image, key, vec, &id)?;
            } else {
                insert_unique(&mut text, &id, vec.clone(), &id)?;
                insert_unique(&mut image, &id, vec, &id)?;
            }
        }
        Self::from_tables(text, image)
    }

    pub fn from_tables(text: BTreeMap<String, Vector>, image: BTreeMap<String, Vector>) -> Result<Self> {
        check_uniform_dim(text.iter(), "text")?;
        check_uniform_dim(image.iter(), "image")?;
        Ok(Self { text, image })
    }

    /// Records in file order: text keys first, then image keys, each sorted.
    pub fn records(&self) -> Vec<EmbeddingRecord> {
        let text = self.text.iter().map(|(k, v)| EmbeddingRecord {
            id: format!("{TEXT_PREFIX}{k}"),
            vec: v.clone(),
        });
        let image = self.image.iter().map(|(k, v)| EmbeddingRecord {
            id: format!("{IMAGE_PREFIX}{k}"),
            vec: v.clone(),
        });
        text.chain(image).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_records(path, self.records())
    }

    pub fn text_len(&self) -> usize {
        self.text.len()
    }

    pub fn image_len(&self) -> usize {
        self.image.len()
    }
}

fn insert_unique(table: &mut BTreeMap<String, Vector>, key: &str, vec: Vector, id: &str) -> Result<()> {
    if table.insert(key.to_string(), vec).is_some() {
        return Err(Error::data(format!("duplicate embedding id `{id}`")));
    }
    Ok(())
}

fn check_uniform_dim<'a>(mut entries: impl Iterator<Item = (&'a String, &'a Vector)>, kind: &str) -> Result<()> {
    if let Some((first_id, first)) = entries.next() {
        for (id, v) in entries {
            if v.dim() != first.dim() {
                return Err(Error::data(format!(
                    "{kind} embedding `{id}` has dim {} but `{first_id}` has dim {}",
                    v.dim(),
                    first.dim()
                )));
            }
        }
    }
    Ok(())
}

impl EncoderProvider for FileEncoder {
    fn encode_text(&self, text: &str) -> Result<Vector> {
        self.text
            .get(text)
            .cloned()
            .ok_or_else(|| Error::Lookup(format!("{TEXT_PREFIX}{text}")))
    }

    fn encode_image(&self, image_id: &str) -> Result<Vector> {
        self.image
            .get(image_id)
            .cloned()
            .ok_or_else(|| Error::Lookup(format!("{IMAGE_PREFIX}{image_id}")))
    }

    fn text_dim(&self) -> usize {
        self.text.values().next().map_or(0, Vector::dim)
    }

    fn image_dim(&self) -> usize {
        self.image.values().next().map_or(0, Vector::dim)
    }
}

/// Token → word vector table used by the word-embedding similarity feature.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WordEmbeddingTable {
    vectors: BTreeMap<String, Vector>,
}

impl WordEmbeddingTable {
    pub fn new(vectors: BTreeMap<String, Vector>) -> Result<Self> {
        check_uniform_dim(vectors.iter(), "word")?;
        Ok(Self { vectors })
    }

    /// Loads the same `{id, vec}` record format as [`FileEncoder`].
    pub fn open(path: &Path) -> Result<Self> {
        let records: Vec<(usize, EmbeddingRecord)> = jsonl::read_records(path)?;
        let mut vectors = BTreeMap::new();
        for (line, r) in records {
            if vectors.insert(r.id.clone(), r.vec).is_some() {
                return Err(Error::data(format!(
                    "{}:{line}: duplicate word `{}`",
                    path.display(),
                    r.id
                )));
            }
        }
        Self::new(vectors)
    }

    pub fn get(&self, token: &str) -> Option<&Vector> {
        self.vectors.get(token)
    }

    pub fn dim(&self) -> usize {
        self.vectors.values().next().map_or(0, Vector::dim)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn records(&self) -> Vec<EmbeddingRecord> {
        self.vectors
            .iter()
            .map(|(id, vec)| EmbeddingRecord {
                id: id.clone(),
                vec: vec.clone(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f64]) -> Vector {
        Vector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let e1 = v(&[1.0, 0.0, 0.0]);
        assert_eq!(cosine(&e1, &e1).unwrap(), 1.0);
        assert_eq!(cosine(&e1, &v(&[0.0, 1.0, 0.0])).unwrap(), 0.0);
        // 32 / (sqrt(14) * sqrt(77))
        let expected = 32.0 / (14.0f64.sqrt() * 77.0f64.sqrt());
        let got = cosine(&v(&[1.0, 2.0, 3.0]), &v(&[4.0, 5.0, 6.0])).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.974_631_846_197_076_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_vector_is_zero() {
        assert_eq!(cosine(&Vector::zeros(3), &v(&[1.0, 2.0, 3.0])).unwrap(), 0.0);
    }

    #[test]
    fn cosine_dim_mismatch_is_usage_error() {
        let err = cosine(&v(&[1.0]), &v(&[1.0, 2.0])).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn vector_rejects_non_finite_and_empty() {
        assert!(Vector::new(vec![]).is_err());
        assert!(Vector::new(vec![1.0, f64::NAN]).is_err());
        assert!(serde_json::from_str::<Vector>("[]").is_err());
    }

    #[test]
    fn top_k_ties_break_by_id() {
        let q = v(&[1.0, 0.0]);
        let a = v(&[0.9, (1.0f64 - 0.81).sqrt()]);
        let c = v(&[0.1, (1.0f64 - 0.01).sqrt()]);
        let cands = [("zeta", &a), ("alpha", &a), ("mid", &c)];
        let top = top_k_by_similarity(&q, cands.iter().map(|(i, v)| (*i, *v)), 2).unwrap();
        let ids: Vec<_> = top.iter().map(|(i, _)| i.as_str()).collect();
        assert_eq!(ids, ["alpha", "zeta"]);

        assert!(top_k_by_similarity(&q, cands.iter().map(|(i, v)| (*i, *v)), 0)
            .unwrap()
            .is_empty());
        assert_eq!(
            top_k_by_similarity(&q, cands.iter().map(|(i, v)| (*i, *v)), 10)
                .unwrap()
                .len(),
            3
        );
    }

    #[test]
    fn mock_encoder_is_deterministic_and_unit_norm() {
        let enc = MockEncoder::new(7, 64).unwrap();
        let a = enc.encode_text("x").unwrap();
        assert_eq!(a, enc.encode_text("x").unwrap());
        assert!((a.norm() - 1.0).abs() < 1e-12);
        assert_ne!(a, enc.encode_image("x").unwrap());
        assert_ne!(a, MockEncoder::new(8, 64).unwrap().encode_text("x").unwrap());
    }

    #[test]
    fn mock_encoder_distinct_inputs_are_nearly_orthogonal() {
        let enc = MockEncoder::new(11, 64).unwrap();
        for i in 0..1000 {
            let a = enc.encode_text(&format!("input-{i}")).unwrap();
            let b = enc.encode_text(&format!("other-{i}")).unwrap();
            assert!(cosine(&a, &b).unwrap() < 0.5, "pair {i}");
        }
    }

    #[test]
    fn file_encoder_namespaces_and_lookup_errors() {
        let enc = FileEncoder::from_records(vec![
            EmbeddingRecord {
                id: "t:river".into(),
                vec: v(&[1.0, 0.0]),
            },
            EmbeddingRecord {
                id: "i:img1".into(),
                vec: v(&[0.0, 1.0, 0.0]),
            },
            EmbeddingRecord {
                id: "both".into(),
                vec: v(&[0.5, 0.5]),
            },
        ]);
        // `both` lands in the image table too, whose dim is 3.
        assert!(enc.is_err());

        let enc = FileEncoder::from_records(vec![
            EmbeddingRecord {
                id: "t:river".into(),
                vec: v(&[1.0, 0.0]),
            },
            EmbeddingRecord {
                id: "i:img1".into(),
                vec: v(&[0.0, 1.0]),
            },
        ])
        .unwrap();
        assert_eq!(enc.encode_text("river").unwrap(), v(&[1.0, 0.0]));
        match enc.encode_image("river").unwrap_err() {
            Error::Lookup(id) => assert_eq!(id, "i:river"),
            other => panic!("unexpected {other}"),
        }
        assert_eq!(enc.text_dim(), 2);
    }
}
