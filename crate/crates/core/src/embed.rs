//! Text embedders: a deterministic feature-hash embedder for offline use and
//! an OpenAI-compatible `/embeddings` client.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kg::normalize_tokens;

pub const HASH_EMBEDDING_DIM: usize = 256;
pub const DEFAULT_EMBEDDING_MODEL: &str = "voyage-large-2";

pub trait Embedder: Send + Sync {
    fn model_id(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;

    fn embed_one(&self, text: &str) -> Result<Vec<f64>> {
        self.embed(&[text.to_string()])?
            .pop()
            .ok_or_else(|| Error::Transport("embedder returned no vectors".into()))
    }
}

impl<E: Embedder + ?Sized> Embedder for Arc<E> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        (**self).embed(texts)
    }
}

impl<E: Embedder + ?Sized> Embedder for Box<E> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        (**self).embed(texts)
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Signed feature hashing of unigrams and bigrams over normalized tokens.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self {
            dimension: HASH_EMBEDDING_DIM,
        }
    }
}

impl HashEmbedder {
    pub fn with_dimension(dimension: usize) -> Self {
        assert!(dimension > 0);
        Self { dimension }
    }

    fn add_feature(&self, v: &mut [f64], feature: &str) {
        let h = fnv1a64(feature.as_bytes());
        let slot = (h % self.dimension as u64) as usize;
        v[slot] += if h >> 63 == 0 { 1.0 } else { -1.0 };
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let tokens = normalize_tokens(text);
        let mut v = vec![0.0; self.dimension];
        for t in &tokens {
            self.add_feature(&mut v, t);
        }
        for pair in tokens.windows(2) {
            self.add_feature(&mut v, &format!("{} {}", pair[0], pair[1]));
        }
        v
    }
}

impl Embedder for HashEmbedder {
    fn model_id(&self) -> &str {
        "feature-hash-256"
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingClientConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub dimension: usize,
    pub timeout_secs: u64,
}

impl Default for EmbeddingClientConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.voyageai.com/v1".into(),
            model: DEFAULT_EMBEDDING_MODEL.into(),
            api_key_env: "VOYAGE_API_KEY".into(),
            dimension: 1536,
            timeout_secs: 60,
        }
    }
}

#[cfg(feature = "http")]
pub use http::HttpEmbedder;

#[cfg(feature = "http")]
mod http {
    use super::*;
    use serde::Deserialize;
    use std::time::Duration;

    #[derive(Deserialize)]
    struct EmbeddingResponse {
        data: Vec<EmbeddingDatum>,
    }

    #[derive(Deserialize)]
    struct EmbeddingDatum {
        index: Option<usize>,
        embedding: Vec<f64>,
    }

    pub struct HttpEmbedder {
        config: EmbeddingClientConfig,
        client: reqwest::blocking::Client,
    }

    impl HttpEmbedder {
        pub fn new(config: EmbeddingClientConfig) -> Result<Self> {
            let client = reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(config.timeout_secs))
                .build()
                .map_err(|e| Error::Transport(e.to_string()))?;
            Ok(Self { config, client })
        }
    }

    impl Embedder for HttpEmbedder {
        fn model_id(&self) -> &str {
            &self.config.model
        }

        fn dimension(&self) -> usize {
            self.config.dimension
        }

        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
            let url = format!("{}/embeddings", self.config.base_url.trim_end_matches('/'));
            let body = serde_json::json!({ "model": self.config.model, "input": texts });
            let mut req = self.client.post(&url).json(&body);
            if let Ok(key) = std::env::var(&self.config.api_key_env) {
                req = req.bearer_auth(key);
            }
            let resp = req.send().map_err(|e| Error::Transport(e.to_string()))?;
            let status = resp.status();
            if !status.is_success() {
                return Err(Error::Transport(format!(
                    "embedding endpoint returned {status}"
                )));
            }
            let mut parsed: EmbeddingResponse =
                resp.json().map_err(|e| Error::Transport(e.to_string()))?;
            parsed.data.sort_by_key(|d| d.index.unwrap_or(0));
            if parsed.data.len() != texts.len() {
                return Err(Error::Transport(
                    "embedding count does not match input".into(),
                ));
            }
            let out: Vec<Vec<f64>> = parsed.data.into_iter().map(|d| d.embedding).collect();
            if let Some(bad) = out.iter().find(|v| v.len() != self.config.dimension) {
                return Err(Error::Config(format!(
                    "expected {}-dimensional embeddings, received {}",
                    self.config.dimension,
                    bad.len()
                )));
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_embedder_is_deterministic_and_case_insensitive() {
        let e = HashEmbedder::default();
        let a = e.embed_one("The Cat sat").unwrap();
        assert_eq!(a.len(), HASH_EMBEDDING_DIM);
        assert_eq!(a, e.embed_one("the cat SAT").unwrap());
        assert_ne!(a, e.embed_one("a dog ran").unwrap());
        assert!(e.embed_one("").unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }
}
