use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::chunk::{chunk_words, PASSAGE_WORDS};
use super::topk::top_k;
use super::ToolError;
use crate::modelclient::{embed, EmbedInput, EmbeddingProvider};
use crate::vector::dot;

const FORMAT_VERSION: u32 = 1;
const EMBED_BATCH: usize = 64;

/// Input document for text ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextDoc {
    #[serde(default)]
    pub doc_id: Option<String>,
    pub title: String,
    pub body: String,
    #[serde(default)]
    pub url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextPassage {
    pub doc_id: String,
    pub passage_id: u64,
    pub title: String,
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_url: Option<String>,
    #[serde(skip)]
    pub embedding: Vec<f32>,
}

impl TextPassage {
    /// What gets embedded: title, newline, passage body.
    pub fn indexed_text(title: &str, body: &str) -> String {
        format!("{title}\n{body}")
    }
}

/// Input row for image ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDoc {
    pub image_id: String,
    pub uri: String,
    #[serde(default)]
    pub caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: String,
    pub uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(skip)]
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct IngestStats {
    pub doc_count: usize,
    pub passage_count: usize,
    pub image_count: usize,
}

/// Maps image references to bytes. Relative references resolve against `root`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImageResolver {
    pub root: Option<PathBuf>,
}

impl ImageResolver {
    pub fn new(root: Option<PathBuf>) -> Self {
        Self { root }
    }

    pub fn path_of(&self, reference: &str) -> PathBuf {
        let p = Path::new(reference);
        match &self.root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub fn read(&self, reference: &str) -> Result<Vec<u8>, ToolError> {
        let bytes = fs::read(self.path_of(reference))
            .map_err(|_| ToolError::ImageUnreadable(reference.to_string()))?;
        if bytes.is_empty() {
            return Err(ToolError::ImageUnreadable(reference.to_string()));
        }
        Ok(bytes)
    }
}

fn embed_texts(
    embedder: &dyn EmbeddingProvider,
    texts: Vec<String>,
    doc: Option<&str>,
) -> Result<Vec<Vec<f32>>, ToolError> {
    embed(embedder, &EmbedInput::Texts(texts)).map_err(|source| ToolError::EmbeddingFailure {
        doc: doc.map(str::to_string),
        source,
    })
}

/// Exact full-scan passage index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TextIndex {
    pub passages: Vec<TextPassage>,
}

impl TextIndex {
    /// Chunks every document into ≤512-word passages, embeds title + passage,
    /// and numbers passages consecutively in document order.
    pub fn build(
        docs: &[TextDoc],
        embedder: &dyn EmbeddingProvider,
    ) -> Result<(Self, IngestStats), ToolError> {
        if docs.is_empty() {
            return Err(ToolError::EmptyCorpus);
        }
        let mut passages = Vec::new();
        for (i, doc) in docs.iter().enumerate() {
            let doc_id = doc.doc_id.clone().unwrap_or_else(|| format!("doc{i}"));
            let chunks = chunk_words(&doc.body, PASSAGE_WORDS);
            if chunks.is_empty() {
                return Err(ToolError::EmptyDocument(doc_id));
            }
            for body in chunks {
                passages.push(TextPassage {
                    doc_id: doc_id.clone(),
                    passage_id: passages.len() as u64,
                    title: doc.title.clone(),
                    body,
                    source_url: doc.url.clone(),
                    embedding: Vec::new(),
                });
            }
        }
        for batch in passages.chunks_mut(EMBED_BATCH) {
            let texts = batch
                .iter()
                .map(|p| TextPassage::indexed_text(&p.title, &p.body))
                .collect();
            let first_doc = batch[0].doc_id.clone();
            let vectors = embed_texts(embedder, texts, Some(&first_doc))?;
            for (p, v) in batch.iter_mut().zip(vectors) {
                p.embedding = v;
            }
        }
        let stats = IngestStats {
            doc_count: docs.len(),
            passage_count: passages.len(),
            image_count: 0,
        };
        Ok((Self { passages }, stats))
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    /// Positions and cosine scores of the `k` best passages for `query`.
    pub fn rank(&self, query: &[f32], k: usize) -> Vec<(usize, f64)> {
        top_k(
            self.passages
                .iter()
                .enumerate()
                .map(|(i, p)| (i, dot(query, &p.embedding))),
            k,
        )
    }
}

/// Exact full-scan image index, kept sorted by `image_id`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageIndex {
    pub images: Vec<ImageEntry>,
}

impl ImageIndex {
    pub fn build(
        docs: &[ImageDoc],
        embedder: &dyn EmbeddingProvider,
        resolver: &ImageResolver,
    ) -> Result<Self, ToolError> {
        if docs.is_empty() {
            return Err(ToolError::EmptyCorpus);
        }
        let mut seen = BTreeSet::new();
        let mut images = Vec::with_capacity(docs.len());
        for doc in docs {
            if !seen.insert(doc.image_id.clone()) {
                return Err(ToolError::Format {
                    path: PathBuf::from(&doc.uri),
                    detail: format!("duplicate image id `{}`", doc.image_id),
                });
            }
            let bytes = resolver.read(&doc.uri)?;
            let embedding = embed(embedder, &EmbedInput::Image(bytes))
                .map_err(|source| ToolError::EmbeddingFailure {
                    doc: Some(doc.image_id.clone()),
                    source,
                })?
                .pop()
                .expect("one vector per image");
            images.push(ImageEntry {
                image_id: doc.image_id.clone(),
                uri: doc.uri.clone(),
                caption: doc.caption.clone(),
                embedding,
            });
        }
        images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        Ok(Self { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn find(&self, image_id: &str) -> Option<&ImageEntry> {
        self.images
            .binary_search_by(|e| e.image_id.as_str().cmp(image_id))
            .ok()
            .map(|i| &self.images[i])
    }

    /// Best `k` images scoring strictly above `threshold`.
    pub fn rank(&self, query: &[f32], threshold: f64, k: usize) -> Vec<(usize, f64)> {
        top_k(
            self.images
                .iter()
                .enumerate()
                .map(|(i, e)| (i, dot(query, &e.embedding)))
                .filter(|(_, s)| *s > threshold),
            k,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dim: usize,
    doc_count: usize,
    passage_count: usize,
    image_count: usize,
}

/// Text and image indices sharing one embedding space.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusIndex {
    pub dim: usize,
    pub doc_count: usize,
    pub text: Option<TextIndex>,
    pub images: Option<ImageIndex>,
}

impl CorpusIndex {
    pub fn stats(&self) -> IngestStats {
        IngestStats {
            doc_count: self.doc_count,
            passage_count: self.text.as_ref().map_or(0, TextIndex::len),
            image_count: self.images.as_ref().map_or(0, ImageIndex::len),
        }
    }

    pub fn text(&self) -> Result<&TextIndex, ToolError> {
        self.text
            .as_ref()
            .filter(|t| !t.is_empty())
            .ok_or(ToolError::IndexMissing("text"))
    }

    pub fn images(&self) -> Result<&ImageIndex, ToolError> {
        self.images
            .as_ref()
            .filter(|t| !t.is_empty())
            .ok_or(ToolError::IndexMissing("image"))
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join("manifest.json").is_file()
    }

    /// Writes `manifest.json`, `passages.jsonl`, `vectors.f32`,
    /// `images.jsonl` and `image_vectors.f32` (little-endian f32 rows).
    pub fn save(&self, dir: &Path) -> Result<(), ToolError> {
        fs::create_dir_all(dir).map_err(|e| ToolError::io(dir, e))?;
        let stats = self.stats();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dim: self.dim,
            doc_count: stats.doc_count,
            passage_count: stats.passage_count,
            image_count: stats.image_count,
        };
        let passages: &[TextPassage] = self.text.as_ref().map_or(&[], |t| &t.passages);
        let images: &[ImageEntry] = self.images.as_ref().map_or(&[], |t| &t.images);
        write_jsonl(&dir.join("passages.jsonl"), passages)?;
        write_vectors(
            &dir.join("vectors.f32"),
            passages.iter().map(|p| &p.embedding[..]),
        )?;
        write_jsonl(&dir.join("images.jsonl"), images)?;
        write_vectors(
            &dir.join("image_vectors.f32"),
            images.iter().map(|e| &e.embedding[..]),
        )?;
        // Manifest last: its presence marks a complete index.
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| ToolError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self, ToolError> {
        let path = dir.join("manifest.json");
        if !path.is_file() {
            return Err(ToolError::IndexMissing("corpus"));
        }
        let text = fs::read_to_string(&path).map_err(|e| ToolError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| ToolError::Format {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(ToolError::Format {
                path,
                detail: format!("unsupported format version {}", manifest.format_version),
            });
        }
        let mut passages: Vec<TextPassage> = read_jsonl(&dir.join("passages.jsonl"))?;
        let vectors = read_vectors(&dir.join("vectors.f32"), manifest.dim, passages.len())?;
        for (p, v) in passages.iter_mut().zip(vectors) {
            p.embedding = v;
        }
        let mut images: Vec<ImageEntry> = read_jsonl(&dir.join("images.jsonl"))?;
        let vectors = read_vectors(&dir.join("image_vectors.f32"), manifest.dim, images.len())?;
        for (e, v) in images.iter_mut().zip(vectors) {
            e.embedding = v;
        }
        if passages.len() != manifest.passage_count || images.len() != manifest.image_count {
            return Err(ToolError::Format {
                path: dir.to_path_buf(),
                detail: "row counts disagree with manifest".into(),
            });
        }
        Ok(Self {
            dim: manifest.dim,
            doc_count: manifest.doc_count,
            text: (!passages.is_empty()).then_some(TextIndex { passages }),
            images: (!images.is_empty()).then_some(ImageIndex { images }),
        })
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ToolError> {
    let file = fs::File::create(path).map_err(|e| ToolError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|e| ToolError::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(|e| ToolError::io(path, e))?;
    }
    w.flush().map_err(|e| ToolError::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ToolError> {
    let file = fs::File::open(path).map_err(|e| ToolError::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ToolError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| ToolError::Format {
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(rows)
}

fn write_vectors<'a>(path: &Path, rows: impl Iterator<Item = &'a [f32]>) -> Result<(), ToolError> {
    let file = fs::File::create(path).map_err(|e| ToolError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        for x in row {
            w.write_all(&x.to_le_bytes())
                .map_err(|e| ToolError::io(path, e))?;
        }
    }
    w.flush().map_err(|e| ToolError::io(path, e))
}

fn read_vectors(path: &Path, dim: usize, rows: usize) -> Result<Vec<Vec<f32>>, ToolError> {
    let bytes = fs::read(path).map_err(|e| ToolError::io(path, e))?;
    if bytes.len() != dim * rows * 4 {
        return Err(ToolError::Format {
            path: path.to_path_buf(),
            detail: format!("expected {} bytes, found {}", dim * rows * 4, bytes.len()),
        });
    }
    if dim == 0 {
        return Ok(vec![Vec::new(); rows]);
    }
    Ok(bytes
        .chunks_exact(dim * 4)
        .map(|row| {
            row.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelclient::HashEmbedder;
    use crate::vector::l2_norm;

    fn docs() -> Vec<TextDoc> {
        vec![
            TextDoc {
                doc_id: Some("a".into()),
                title: "Paris".into(),
                body: "the seine flows through paris ".repeat(150),
                url: Some("http://paris".into()),
            },
            TextDoc {
                doc_id: None,
                title: "Rome".into(),
                body: "the tiber flows through rome".into(),
                url: None,
            },
        ]
    }

    #[test]
    fn build_counts_and_norms() {
        let (idx, stats) = TextIndex::build(&docs(), &HashEmbedder::default()).unwrap();
        assert_eq!(stats.doc_count, 2);
        // 750 words -> 512 + 238, plus one short doc.
        assert_eq!(stats.passage_count, 3);
        assert_eq!(idx.passages[2].doc_id, "doc1");
        for p in &idx.passages {
            assert!(p.body.split_whitespace().count() <= PASSAGE_WORDS);
            assert!((l2_norm(&p.embedding) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_document_and_corpus() {
        let bad = vec![TextDoc {
            doc_id: Some("e".into()),
            title: "t".into(),
            body: "  ".into(),
            url: None,
        }];
        assert!(matches!(
            TextIndex::build(&bad, &HashEmbedder::default()),
            Err(ToolError::EmptyDocument(id)) if id == "e"
        ));
        assert!(matches!(
            TextIndex::build(&[], &HashEmbedder::default()),
            Err(ToolError::EmptyCorpus)
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img_dir = dir.path().join("imgs");
        fs::create_dir_all(&img_dir).unwrap();
        fs::write(img_dir.join("b.txt"), "red bridge river").unwrap();
        fs::write(img_dir.join("a.txt"), "stone tower city").unwrap();
        let emb = HashEmbedder::default();
        let resolver = ImageResolver::new(Some(dir.path().to_path_buf()));
        let images = ImageIndex::build(
            &[
                ImageDoc {
                    image_id: "b".into(),
                    uri: "imgs/b.txt".into(),
                    caption: None,
                },
                ImageDoc {
                    image_id: "a".into(),
                    uri: "imgs/a.txt".into(),
                    caption: Some("tower".into()),
                },
            ],
            &emb,
            &resolver,
        )
        .unwrap();
        assert_eq!(images.images[0].image_id, "a");
        assert!(images.find("b").is_some());
        let (text, _) = TextIndex::build(&docs(), &emb).unwrap();
        let idx = CorpusIndex {
            dim: 64,
            doc_count: 2,
            text: Some(text),
            images: Some(images),
        };
        let out = dir.path().join("index");
        idx.save(&out).unwrap();
        assert!(CorpusIndex::exists(&out));
        let back = CorpusIndex::load(&out).unwrap();
        assert_eq!(back, idx);
    }

    #[test]
    fn load_missing_is_index_missing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            CorpusIndex::load(dir.path()),
            Err(ToolError::IndexMissing(_))
        ));
    }

    #[test]
    fn unreadable_image() {
        let r = ImageResolver::default();
        assert!(matches!(
            r.read("/definitely/not/here.png"),
            Err(ToolError::ImageUnreadable(_))
        ));
    }
}
