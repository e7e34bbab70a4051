//! Embedding catalogs, keyword enhancement and collaborative pair filtering.
//!
//! Catalog files are line-oriented: a `dim=<d>` header followed by one
//! `id<TAB>base64(f32 little-endian vector)` record per line. The same format
//! carries keyword embeddings, where the id is the owner id and may repeat.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;

use crate::error::{Error, Result};

/// The 18 structured attribute classes keywords are mined for.
pub const ATTRIBUTE_CLASSES: [&str; 18] = [
    "Entity",
    "Modifier",
    "Brand",
    "Material",
    "Style",
    "Function",
    "Location",
    "Audience",
    "Color",
    "Marketing",
    "Season",
    "Pattern",
    "Scene",
    "Specifications",
    "Price",
    "Model",
    "Anchor",
    "Series",
];

/// Cosine threshold used to keep collaborative pairs.
pub const DEFAULT_PAIR_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub id: String,
    pub vector: Vec<f32>,
}

impl Embedding {
    pub fn new(id: impl Into<String>, vector: Vec<f32>) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::Empty("embedding vector"));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding vector"));
        }
        Ok(Self {
            id: id.into(),
            vector,
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Keyword embeddings attached to one query or item.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeywordSet {
    pub owner_id: String,
    pub keyword_embeddings: Vec<Embedding>,
    pub attribute_tags: Vec<String>,
}

impl KeywordSet {
    pub fn new(owner_id: impl Into<String>, keyword_embeddings: Vec<Embedding>) -> Self {
        Self {
            owner_id: owner_id.into(),
            keyword_embeddings,
            attribute_tags: Vec::new(),
        }
    }
}

/// A fixed-dimension set of embeddings. Immutable once loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    dim: usize,
    entries: Vec<Embedding>,
}

impl Catalog {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("catalog dimension must be > 0".into()));
        }
        Ok(Self {
            dim,
            entries: Vec::new(),
        })
    }

    pub fn from_entries(dim: usize, entries: Vec<Embedding>) -> Result<Self> {
        let mut catalog = Self::new(dim)?;
        for e in entries {
            catalog.push(e)?;
        }
        Ok(catalog)
    }

    pub fn push(&mut self, embedding: Embedding) -> Result<()> {
        if embedding.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: embedding.dim(),
            });
        }
        self.entries.push(embedding);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Embedding] {
        &self.entries
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Embedding> {
        self.entries.iter()
    }

    /// Row-major copy of all vectors widened to f64.
    pub fn to_rows(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|e| e.vector.iter().map(|&v| v as f64))
            .collect()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines().enumerate();
        let dim = match lines.next() {
            Some((_, line)) => {
                let line = line?;
                line.trim()
                    .strip_prefix("dim=")
                    .and_then(|d| d.parse::<usize>().ok())
                    .ok_or_else(|| Error::parse(path, 1, "expected `dim=<d>` header"))?
            }
            None => return Err(Error::parse(path, 1, "missing `dim=<d>` header")),
        };
        let mut catalog = Catalog::new(dim).map_err(|e| Error::parse(path, 1, e.to_string()))?;
        for (idx, line) in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (id, payload) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, idx + 1, "expected `id<TAB>base64`"))?;
            let bytes = B64
                .decode(payload.trim_end())
                .map_err(|e| Error::parse(path, idx + 1, e.to_string()))?;
            if bytes.len() != dim * 4 {
                return Err(Error::parse(
                    path,
                    idx + 1,
                    format!("vector has {} bytes, expected {}", bytes.len(), dim * 4),
                ));
            }
            let vector = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let emb = Embedding::new(id, vector).map_err(|e| Error::parse(path, idx + 1, e.to_string()))?;
            catalog.push(emb)?;
        }
        Ok(catalog)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "dim={}", self.dim)?;
        let mut bytes = Vec::with_capacity(self.dim * 4);
        for e in &self.entries {
            bytes.clear();
            for v in &e.vector {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            writeln!(w, "{}\t{}", e.id, B64.encode(&bytes))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Groups a keyword catalog (owner id repeated once per keyword) into sets.
pub fn group_keywords(keywords: &Catalog) -> BTreeMap<String, KeywordSet> {
    let mut sets: BTreeMap<String, KeywordSet> = BTreeMap::new();
    for e in keywords.iter() {
        sets.entry(e.id.clone())
            .or_insert_with(|| KeywordSet::new(e.id.clone(), Vec::new()))
            .keyword_embeddings
            .push(e.clone());
    }
    sets
}

/// Averages a base embedding with the mean of its keyword embeddings.
///
/// An empty keyword set leaves the base embedding unchanged.
pub fn compose_enhanced(base: &Embedding, keywords: &KeywordSet) -> Result<Embedding> {
    let d = base.dim();
    for k in &keywords.keyword_embeddings {
        if k.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: k.dim(),
            });
        }
    }
    if keywords.keyword_embeddings.is_empty() {
        return Ok(base.clone());
    }
    let m = keywords.keyword_embeddings.len() as f64;
    let vector = (0..d)
        .map(|j| {
            let mean = keywords
                .keyword_embeddings
                .iter()
                .map(|k| k.vector[j] as f64)
                .sum::<f64>()
                / m;
            (0.5 * (base.vector[j] as f64 + mean)) as f32
        })
        .collect();
    Ok(Embedding {
        id: base.id.clone(),
        vector,
    })
}

/// Applies [`compose_enhanced`] to every catalog entry with its keyword set (if any).
pub fn enhance_catalog(catalog: &Catalog, keywords: &BTreeMap<String, KeywordSet>) -> Result<Catalog> {
    let empty = KeywordSet::default();
    let entries = catalog
        .iter()
        .map(|e| compose_enhanced(e, keywords.get(&e.id).unwrap_or(&empty)))
        .collect::<Result<Vec<_>>>()?;
    Catalog::from_entries(catalog.dim(), entries)
}

/// Cosine similarity of the raw stored vectors (no re-normalization).
///
/// A zero vector has cosine 0 with everything.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairKind {
    QueryQuery,
    ItemItem,
    QueryItem,
}

impl fmt::Display for PairKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairKind::QueryQuery => "q2q",
            PairKind::ItemItem => "i2i",
            PairKind::QueryItem => "q2i",
        })
    }
}

impl FromStr for PairKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q2q" => Ok(PairKind::QueryQuery),
            "i2i" => Ok(PairKind::ItemItem),
            "q2i" => Ok(PairKind::QueryItem),
            other => Err(Error::InvalidArgument(format!("unknown pair kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub left_id: String,
    pub right_id: String,
    pub pair_kind: PairKind,
    pub cosine: f64,
}

impl PairRecord {
    /// Builds a pair whose cosine is computed from the two embeddings.
    pub fn from_embeddings(left: &Embedding, right: &Embedding, pair_kind: PairKind) -> Result<Self> {
        Ok(Self {
            left_id: left.id.clone(),
            right_id: right.id.clone(),
            pair_kind,
            cosine: cosine(&left.vector, &right.vector)?,
        })
    }
}

/// Keeps the pairs with cosine strictly above `threshold`, in input order.
pub fn cosine_filter(pairs: &[PairRecord], threshold: f64) -> Vec<PairRecord> {
    pairs.iter().filter(|p| p.cosine > threshold).cloned().collect()
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<PairRecord>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(path, idx + 1, "expected `left<TAB>right<TAB>kind<TAB>cosine`"));
        }
        let pair_kind = fields[2]
            .parse()
            .map_err(|e: Error| Error::parse(path, idx + 1, e.to_string()))?;
        let cosine: f64 = fields[3]
            .parse()
            .map_err(|_| Error::parse(path, idx + 1, "bad cosine"))?;
        if !(-1.0..=1.0).contains(&cosine) {
            return Err(Error::parse(path, idx + 1, "cosine outside [-1, 1]"));
        }
        out.push(PairRecord {
            left_id: fields[0].to_string(),
            right_id: fields[1].to_string(),
            pair_kind,
            cosine,
        });
    }
    Ok(out)
}

pub fn write_pairs<W: Write>(mut w: W, pairs: &[PairRecord]) -> Result<()> {
    for p in pairs {
        writeln!(w, "{}\t{}\t{}\t{}", p.left_id, p.right_id, p.pair_kind, p.cosine)?;
    }
    Ok(())
}

/// Attribute class → keyword list, kept in insertion order.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    classes: Vec<(String, Vec<String>)>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, attribute: impl Into<String>, keywords: Vec<String>) -> Result<()> {
        if keywords.iter().any(|k| k.is_empty()) {
            return Err(Error::InvalidArgument("lexicon keywords must be nonempty".into()));
        }
        let attribute = attribute.into();
        match self.classes.iter_mut().find(|(a, _)| *a == attribute) {
            Some((_, list)) => list.extend(keywords),
            None => self.classes.push((attribute, keywords)),
        }
        Ok(())
    }

    pub fn classes(&self) -> &[(String, Vec<String>)] {
        &self.classes
    }
}

/// Exact-substring keyword matching.
///
/// Returns every lexicon keyword contained in `text`, once, in lexicon order.
pub fn match_keywords(text: &str, lexicon: &Lexicon) -> Vec<String> {
    let mut found: Vec<String> = Vec::new();
    for (_, keywords) in lexicon.classes() {
        for k in keywords {
            if text.contains(k.as_str()) && !found.contains(k) {
                found.push(k.clone());
            }
        }
    }
    found
}

/// Like [`match_keywords`] but returns the attribute classes that fired.
pub fn match_attributes(text: &str, lexicon: &Lexicon) -> Vec<String> {
    lexicon
        .classes()
        .iter()
        .filter(|(_, kws)| kws.iter().any(|k| text.contains(k.as_str())))
        .map(|(a, _)| a.clone())
        .collect()
}
