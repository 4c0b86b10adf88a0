//! Caption embeddings.
//!
//! Two interchangeable backends produce a fixed-length vector per caption:
//! a table of vectors computed elsewhere (for example by a pretrained
//! sentence encoder), and a dependency-free hashing encoder that maps word
//! n-grams to signed buckets.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Default embedding width, matching the sentence-vector size the model was
/// designed around.
pub const DEFAULT_TEXT_DIM: usize = 4800;

const INTERP_MARKER: &str = "+interp";

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    vector: Vec<f64>,
    encoder_id: String,
}

impl TextEmbedding {
    pub fn new(vector: Vec<f64>, encoder_id: impl Into<String>) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::Validation("embedding must not be empty".into()));
        }
        if let Some(i) = vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("embedding entry {i} is not finite")));
        }
        Ok(Self {
            vector,
            encoder_id: encoder_id.into(),
        })
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn len(&self) -> usize {
        self.vector.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vector.is_empty()
    }

    pub fn encoder_id(&self) -> &str {
        &self.encoder_id
    }

    /// Encoder tag without the interpolation marker.
    pub fn base_encoder_id(&self) -> &str {
        self.encoder_id
            .strip_suffix(INTERP_MARKER)
            .unwrap_or(&self.encoder_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderBackend {
    Precomputed {
        source: PathBuf,
        dim: usize,
        table: HashMap<String, Vec<f64>>,
    },
    Hashing {
        seed: u64,
        max_ngram: usize,
        dim: usize,
    },
}

impl EncoderBackend {
    /// Hashing backend over word unigrams and bigrams.
    pub fn hashing(seed: u64, dim: usize) -> Self {
        EncoderBackend::Hashing {
            seed,
            max_ngram: 2,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EncoderBackend::Precomputed { dim, .. } | EncoderBackend::Hashing { dim, .. } => *dim,
        }
    }

    pub fn id(&self) -> String {
        match self {
            EncoderBackend::Precomputed { source, dim, .. } => {
                format!("table:{}:dim={dim}", source.display())
            }
            EncoderBackend::Hashing {
                seed,
                max_ngram,
                dim,
            } => format!("hash:seed={seed}:ngrams={max_ngram}:dim={dim}"),
        }
    }

    pub fn embed(&self, caption: &str) -> Result<TextEmbedding> {
        match self {
            EncoderBackend::Precomputed { table, .. } => {
                let vector = table
                    .get(caption)
                    .ok_or_else(|| Error::Lookup(caption.to_string()))?;
                TextEmbedding::new(vector.clone(), self.id())
            }
            EncoderBackend::Hashing {
                seed,
                max_ngram,
                dim,
            } => {
                let vector = hash_embed(caption, *seed, *max_ngram, *dim)?;
                TextEmbedding::new(vector, self.id())
            }
        }
    }
}

pub fn embed(backend: &EncoderBackend, caption: &str) -> Result<TextEmbedding> {
    backend.embed(caption)
}

fn hash_embed(caption: &str, seed: u64, max_ngram: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::Validation("embedding dimension must be positive".into()));
    }
    let tokens: Vec<&str> = caption.split_whitespace().collect();
    if tokens.is_empty() {
        return Err(Error::Validation("caption must contain at least one token".into()));
    }
    let mut v = vec![0.0; dim];
    for n in 1..=max_ngram.max(1) {
        for gram in tokens.windows(n) {
            let h = feature_hash(gram, seed ^ (n as u64).wrapping_mul(0xA076_1D64_78BD_642F));
            let bucket = (h % dim as u64) as usize;
            v[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
    }
    let mut norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // Every feature cancelled against another; fall back to the whole caption.
        let h = feature_hash(&[caption], seed.rotate_left(17));
        v[(h % dim as u64) as usize] = 1.0;
        norm = 1.0;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// FNV-1a over the n-gram tokens (unit-separated), finished with a
/// SplitMix64 mix so that nearby inputs spread across buckets.
fn feature_hash(gram: &[&str], seed: u64) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET ^ seed;
    for (i, token) in gram.iter().enumerate() {
        if i > 0 {
            h = (h ^ 0x1f).wrapping_mul(PRIME);
        }
        for &b in token.as_bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(PRIME);
        }
    }
    splitmix64(h)
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `(1 - alpha) * a + alpha * b`.
pub fn interpolate_embeddings(a: &TextEmbedding, b: &TextEmbedding, alpha: f64) -> Result<TextEmbedding> {
    if a.len() != b.len() {
        return Err(Error::Validation(format!(
            "cannot interpolate embeddings of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.base_encoder_id() != b.base_encoder_id() {
        return Err(Error::Validation(format!(
            "cannot interpolate embeddings from different encoders ({} vs {})",
            a.base_encoder_id(),
            b.base_encoder_id()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Validation(format!("alpha {alpha} outside [0, 1]")));
    }
    let vector = a
        .vector
        .iter()
        .zip(&b.vector)
        .map(|(x, y)| (1.0 - alpha) * x + alpha * y)
        .collect();
    Ok(TextEmbedding {
        vector,
        encoder_id: format!("{}{INTERP_MARKER}", a.base_encoder_id()),
    })
}

/// Reads a `caption<TAB>v1,v2,...` table.
pub fn load_precomputed_table(path: &Path) -> Result<EncoderBackend> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_table(&text, path)
}

fn parse_table(text: &str, source: &Path) -> Result<EncoderBackend> {
    let mut table = HashMap::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        if line.is_empty() {
            continue;
        }
        let (caption, values) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("row {row}: missing tab separator")))?;
        let vector = values
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Format(format!("row {row}: invalid value {s:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None => dim = Some(vector.len()),
            Some(d) if d != vector.len() => {
                return Err(Error::Format(format!(
                    "row {row}: vector length {} differs from {d}",
                    vector.len()
                )))
            }
            Some(_) => {}
        }
        if table.insert(caption.to_string(), vector).is_some() {
            return Err(Error::Format(format!("row {row}: duplicate caption {caption:?}")));
        }
    }
    let dim = dim.ok_or_else(|| Error::Format("no rows".into()))?;
    Ok(EncoderBackend::Precomputed {
        source: source.to_path_buf(),
        dim,
        table,
    })
}

/// One table row for `caption`; rows written this way load back bit-exactly.
pub fn format_table_row(caption: &str, embedding: &TextEmbedding) -> String {
    let mut row = String::with_capacity(caption.len() + embedding.len() * 12);
    row.push_str(caption);
    row.push('\t');
    for (i, v) in embedding.vector().iter().enumerate() {
        if i > 0 {
            row.push(',');
        }
        write!(row, "{v:?}").expect("writing to a String cannot fail");
    }
    row
}
