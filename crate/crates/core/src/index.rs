//! Paired image/caption embedding matrices over the image database, exact
//! cosine retrieval and the on-disk index format.
//!
//! # File layout
//!
//! ```text
//! offset  size        field
//! 0       8           magic  b"LGIRIDX\0"
//! 8       4           format version, u32 little-endian (currently 1)
//! 12      8           header length H, u64 little-endian
//! 20      H           header, UTF-8 JSON: {version, n, dim, ids, images, captions}
//! 20+H    4*n*dim     image matrix, row-major f32 little-endian
//! ...     4*n*dim     caption matrix, row-major f32 little-endian
//! ...     32          SHA-256 of every preceding byte
//! ```

use std::collections::{HashMap, HashSet};
use std::path::Path;

use futures::{StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::gateway::BackendRole;
use crate::model::{l2_norm, Embedding, ImageRecord};

pub const INDEX_MAGIC: &[u8; 8] = b"LGIRIDX\0";
pub const INDEX_VERSION: u32 = 1;
const UNIT_NORM_TOLERANCE: f64 = 1e-6;
const PREAMBLE: usize = 8 + 4 + 8;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub text: String,
    pub captioner_id: String,
}

/// Row-major `rows × dim` f32 matrix with cached f64 row norms.
#[derive(Debug, Clone)]
pub struct VectorMatrix {
    data: Vec<f32>,
    dim: usize,
    norms: Vec<f64>,
}

impl PartialEq for VectorMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl VectorMatrix {
    pub fn new(data: Vec<f32>, dim: usize) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: data.len(),
            });
        }
        let norms = data.chunks_exact(dim).map(l2_norm).collect();
        Ok(Self { data, dim, norms })
    }

    pub fn from_rows(rows: &[Vec<f32>], dim: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(data, dim)
    }

    pub fn rows(&self) -> usize {
        self.norms.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_norm(&self, i: usize) -> f64 {
        self.norms[i]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// Cosine similarity of `query` against every row of `matrix`.
///
/// Products are accumulated in f64 and divided by both norms, so the
/// result is a true cosine even when inputs carry f32 rounding.
pub fn cosine_scores(query: &Embedding, matrix: &VectorMatrix) -> Result<Vec<f64>> {
    if query.dim != matrix.dim || query.values.len() != matrix.dim {
        return Err(Error::DimensionMismatch {
            expected: matrix.dim,
            actual: query.values.len(),
        });
    }
    let qn = query.norm();
    Ok((0..matrix.rows())
        .map(|i| {
            let dot: f64 = matrix
                .row(i)
                .iter()
                .zip(&query.values)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            let denom = qn * matrix.row_norm(i);
            if denom == 0.0 {
                0.0
            } else {
                (dot / denom).clamp(-1.0, 1.0)
            }
        })
        .collect())
}

/// Stable descending argsort: equal scores keep index order.
pub fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    images: Vec<ImageRecord>,
    image_vectors: VectorMatrix,
    caption_vectors: VectorMatrix,
    captions: Vec<CaptionRecord>,
    positions: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    n: usize,
    dim: usize,
    ids: Vec<String>,
    images: Vec<ImageRecord>,
    captions: Vec<CaptionRecord>,
}

impl EmbeddingIndex {
    /// Assembles an index, checking alignment, unique ids and unit-norm rows.
    pub fn new(
        images: Vec<ImageRecord>,
        image_vectors: VectorMatrix,
        caption_vectors: VectorMatrix,
        captions: Vec<CaptionRecord>,
    ) -> Result<Self> {
        let n = images.len();
        if image_vectors.rows() != n || caption_vectors.rows() != n || captions.len() != n {
            return Err(Error::CorruptIndex(format!(
                "misaligned index: {n} images, {} image rows, {} caption rows, {} captions",
                image_vectors.rows(),
                caption_vectors.rows(),
                captions.len()
            )));
        }
        if image_vectors.dim != caption_vectors.dim {
            return Err(Error::DimensionMismatch {
                expected: image_vectors.dim,
                actual: caption_vectors.dim,
            });
        }
        let mut positions = HashMap::with_capacity(n);
        for (i, img) in images.iter().enumerate() {
            if positions.insert(img.id.clone(), i).is_some() {
                return Err(Error::CorruptIndex(format!("duplicate image id {:?}", img.id)));
            }
            if captions[i].image_id != img.id {
                return Err(Error::CorruptIndex(format!("caption {i} belongs to another image")));
            }
            if captions[i].text.trim().is_empty() {
                return Err(Error::CorruptIndex(format!("empty caption for {:?}", img.id)));
            }
        }
        for m in [&image_vectors, &caption_vectors] {
            if let Some(bad) = m.norms.iter().position(|n| (n - 1.0).abs() > UNIT_NORM_TOLERANCE) {
                return Err(Error::CorruptIndex(format!(
                    "row {bad} has norm {} (expected unit norm)",
                    m.norms[bad]
                )));
            }
        }
        Ok(Self {
            images,
            image_vectors,
            caption_vectors,
            captions,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.image_vectors.dim
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.images.iter().map(|r| r.id.as_str())
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn captions(&self) -> &[CaptionRecord] {
        &self.captions
    }

    pub fn image_vectors(&self) -> &VectorMatrix {
        &self.image_vectors
    }

    pub fn caption_vectors(&self) -> &VectorMatrix {
        &self.caption_vectors
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn record(&self, id: &str) -> Result<&ImageRecord> {
        self.position(id)
            .map(|i| &self.images[i])
            .ok_or_else(|| Error::UnknownImage(id.to_string()))
    }

    pub fn caption_of(&self, id: &str) -> Option<&str> {
        self.position(id).map(|i| self.captions[i].text.as_str())
    }

    /// Exact top-`k` image positions by cosine against the image matrix.
    pub fn search_images(&self, query: &Embedding, k: usize) -> Result<Vec<(usize, f64)>> {
        let scores = cosine_scores(query, &self.image_vectors)?;
        Ok(argsort_desc(&scores)
            .into_iter()
            .take(k)
            .map(|i| (i, scores[i]))
            .collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: INDEX_VERSION,
            n: self.len(),
            dim: self.dim(),
            ids: self.images.iter().map(|r| r.id.clone()).collect(),
            images: self.images.clone(),
            captions: self.captions.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let payload = 2 * 4 * self.image_vectors.data.len();
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload + CHECKSUM_LEN);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for m in [&self.image_vectors, &self.caption_vectors] {
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptIndex(m.to_string());
        if bytes.len() < PREAMBLE + CHECKSUM_LEN {
            return Err(corrupt("file too short"));
        }
        if &bytes[..8] != INDEX_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != INDEX_VERSION {
            return Err(Error::CorruptIndex(format!("unsupported version {version}")));
        }
        let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != checksum {
            return Err(corrupt("checksum mismatch"));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|h| PREAMBLE.checked_add(h))
            .filter(|&end| end <= body.len())
            .ok_or_else(|| corrupt("header length exceeds file"))?;
        let header: Header = serde_json::from_slice(&body[PREAMBLE..header_end])
            .map_err(|e| Error::CorruptIndex(format!("header: {e}")))?;
        if header.version != INDEX_VERSION {
            return Err(corrupt("header version mismatch"));
        }
        if header.dim == 0 {
            return Err(corrupt("zero dimension"));
        }
        if header.ids.len() != header.n || header.images.len() != header.n || header.captions.len() != header.n {
            return Err(corrupt("header record counts disagree with n"));
        }
        if header.ids.iter().zip(&header.images).any(|(id, r)| id != &r.id) {
            return Err(corrupt("header ids disagree with image records"));
        }
        let cells = header
            .n
            .checked_mul(header.dim)
            .ok_or_else(|| corrupt("n * dim overflows"))?;
        let payload = &body[header_end..];
        if payload.len() != cells * 4 * 2 {
            return Err(Error::CorruptIndex(format!(
                "payload holds {} bytes, header implies {}",
                payload.len(),
                cells * 8
            )));
        }
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let (img, cap) = floats.split_at(cells);
        Self::new(
            header.images,
            VectorMatrix::new(img.to_vec(), header.dim)?,
            VectorMatrix::new(cap.to_vec(), header.dim)?,
            header.captions,
        )
        .map_err(|e| match e {
            Error::CorruptIndex(_) => e,
            other => Error::CorruptIndex(other.to_string()),
        })
    }

    /// Short hex id derived from the serialized checksum.
    pub fn fingerprint(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        Ok(hex::encode(&bytes[bytes.len() - 8..]))
    }

    /// Writes atomically via a sibling temp file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// One line of an ingest manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

/// Parses a JSON-lines manifest (`{"id", "uri"}` per line; blank lines
/// skipped). Relative paths resolve against `base`.
pub fn read_manifest(text: &str, base: Option<&Path>) -> Result<Vec<ImageRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let entry: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| Error::Config(format!("manifest line {}: {e}", i + 1)))?;
            let is_relative_path = !entry.uri.contains("://")
                && !entry.uri.starts_with("data:")
                && Path::new(&entry.uri).is_relative();
            let uri = match base {
                Some(b) if is_relative_path => b.join(&entry.uri).to_string_lossy().into_owned(),
                _ => entry.uri,
            };
            let mut record = ImageRecord::new(entry.id, uri);
            record.caption = entry.caption;
            Ok(record)
        })
        .collect()
}

/// Captions and embeds every image, preserving input order.
///
/// Captions come from the record when supplied, otherwise from the
/// captioner. Every model result is cached by content hash, so re-running
/// over unchanged images makes no model calls and a failed ingest resumes.
pub async fn ingest(engine: &Engine, images: Vec<ImageRecord>) -> Result<EmbeddingIndex> {
    if images.is_empty() {
        return Err(Error::Config("no images to ingest".into()));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = images.iter().find(|r| !seen.insert(r.id.as_str())) {
        return Err(Error::CorruptIndex(format!("duplicate image id {:?}", dup.id)));
    }
    let captioner_id = engine
        .gateway
        .backend_id(BackendRole::Captioner)
        .unwrap_or_else(|_| "provided".into());
    let workers = engine.config.gateway.concurrency.max(1);

    let rows: Vec<(ImageRecord, CaptionRecord, Embedding, Embedding)> = futures::stream::iter(images)
        .map(|record| {
            let captioner_id = captioner_id.clone();
            async move {
                let loaded = engine.load(&record).await?;
                let (text, source) = match record.caption.as_deref().map(str::trim) {
                    Some(c) if !c.is_empty() => (c.to_string(), "provided".to_string()),
                    _ => (engine.caption(&loaded).await?, captioner_id),
                };
                let caption_vec = engine.embed_text(&text).await?;
                let image_vec = engine.embed_image(&loaded).await?;
                let mut stored = loaded.record;
                stored.caption = Some(text.clone());
                let caption = CaptionRecord {
                    image_id: stored.id.clone(),
                    text,
                    captioner_id: source,
                };
                Ok::<_, Error>((stored, caption, image_vec, caption_vec))
            }
        })
        .buffered(workers)
        .try_collect()
        .await?;

    let dim = rows[0].2.dim;
    let mut records = Vec::with_capacity(rows.len());
    let mut captions = Vec::with_capacity(rows.len());
    let mut image_data = Vec::with_capacity(rows.len() * dim);
    let mut caption_data = Vec::with_capacity(rows.len() * dim);
    for (record, caption, image_vec, caption_vec) in rows {
        for v in [&image_vec, &caption_vec] {
            if v.dim != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.dim,
                });
            }
        }
        records.push(record);
        captions.push(caption);
        image_data.extend_from_slice(&image_vec.values);
        caption_data.extend_from_slice(&caption_vec.values);
    }
    EmbeddingIndex::new(
        records,
        VectorMatrix::new(image_data, dim)?,
        VectorMatrix::new(caption_data, dim)?,
        captions,
    )
}
