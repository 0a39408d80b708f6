use base64::Engine as _;
use serde_json::{json, Value};

use super::http::{post_json, Endpoint};
use super::retry::with_retries;
use super::ClientError;
use crate::vector::normalize_in_place;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbedInput {
    Texts(Vec<String>),
    /// Raw image bytes.
    Image(Vec<u8>),
}

impl EmbedInput {
    pub fn len(&self) -> usize {
        match self {
            EmbedInput::Texts(t) => t.len(),
            EmbedInput::Image(_) => 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            EmbedInput::Texts(t) => t.is_empty(),
            EmbedInput::Image(b) => b.is_empty(),
        }
    }
}

/// A dense embedding backend. Vectors need not be normalized; [`embed`] does it.
pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed_raw(&self, input: &EmbedInput) -> Result<Vec<Vec<f32>>, ClientError>;
}

/// Embeds `input` and returns one unit-norm vector per item.
pub fn embed(
    provider: &dyn EmbeddingProvider,
    input: &EmbedInput,
) -> Result<Vec<Vec<f32>>, ClientError> {
    if input.is_empty() {
        return Err(ClientError::InvalidRequest("nothing to embed".into()));
    }
    let mut rows = provider.embed_raw(input)?;
    if rows.len() != input.len() {
        return Err(ClientError::MalformedResponse(format!(
            "expected {} vectors, got {}",
            input.len(),
            rows.len()
        )));
    }
    let expected = provider.dimension();
    for row in rows.iter_mut() {
        if row.len() != expected {
            return Err(ClientError::DimensionMismatch {
                expected,
                got: row.len(),
            });
        }
        if !normalize_in_place(row) {
            return Err(ClientError::DegenerateVector);
        }
    }
    Ok(rows)
}

/// Offline embedder: signed feature hashing of whitespace tokens.
///
/// Tokens are lowercased and stripped of leading/trailing ASCII punctuation,
/// then hashed (FNV-1a 64) into `dim` buckets with a ±1 sign taken from the
/// top hash bit. Image bytes are decoded lossily as UTF-8 and hashed the same
/// way, which puts text and "images" in one shared space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 64 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn hash_text(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0.0f32; self.dim];
        for raw in text.split_whitespace() {
            let tok = raw
                .trim_matches(|c: char| c.is_ascii_punctuation())
                .to_lowercase();
            if tok.is_empty() {
                continue;
            }
            let h = fnv1a(tok.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            v[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
        v
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, input: &EmbedInput) -> Result<Vec<Vec<f32>>, ClientError> {
        Ok(match input {
            EmbedInput::Texts(texts) => texts.iter().map(|t| self.hash_text(t)).collect(),
            EmbedInput::Image(bytes) => vec![self.hash_text(&String::from_utf8_lossy(bytes))],
        })
    }
}

/// HTTP embedder: `POST {base_url}` with `{"texts": [...]}` or
/// `{"image": "<base64>"}`; accepts `{"vectors": [[...]]}` or the
/// `{"data": [{"embedding": [...]}]}` shape in reply.
pub struct HttpEmbedder {
    endpoint: Endpoint,
    agent: ureq::Agent,
    dim: usize,
}

impl HttpEmbedder {
    pub fn new(endpoint: Endpoint, dim: usize) -> Result<Self, ClientError> {
        endpoint.validate()?;
        let agent = endpoint.agent();
        Ok(Self {
            endpoint,
            agent,
            dim,
        })
    }
}

fn parse_vectors(reply: &Value) -> Result<Vec<Vec<f32>>, ClientError> {
    let rows: Vec<&Value> = if let Some(v) = reply.get("vectors").and_then(Value::as_array) {
        v.iter().collect()
    } else if let Some(d) = reply.get("data").and_then(Value::as_array) {
        d.iter()
            .map(|item| {
                item.get("embedding").ok_or_else(|| {
                    ClientError::MalformedResponse("data item without embedding".into())
                })
            })
            .collect::<Result<_, _>>()?
    } else {
        return Err(ClientError::MalformedResponse(
            "expected `vectors` or `data`".into(),
        ));
    };
    rows.into_iter()
        .map(|row| {
            row.as_array()
                .ok_or_else(|| ClientError::MalformedResponse("vector is not an array".into()))?
                .iter()
                .map(|x| {
                    x.as_f64().map(|f| f as f32).ok_or_else(|| {
                        ClientError::MalformedResponse("non-numeric component".into())
                    })
                })
                .collect()
        })
        .collect()
}

impl EmbeddingProvider for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, input: &EmbedInput) -> Result<Vec<Vec<f32>>, ClientError> {
        let body = match input {
            EmbedInput::Texts(t) => json!({"texts": t}),
            EmbedInput::Image(bytes) => {
                json!({"image": base64::engine::general_purpose::STANDARD.encode(bytes)})
            }
        };
        let bearer = self.endpoint.bearer()?;
        let url = self.endpoint.base_url.clone();
        let reply = with_retries(self.endpoint.retry_policy(), || {
            post_json(&self.agent, &url, bearer.as_deref(), &body)
        })?;
        parse_vectors(&reply)
    }
}
