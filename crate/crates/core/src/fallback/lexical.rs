use serde::{Deserialize, Serialize};
use twox_hash::XxHash64;

use crate::error::{Error, Result};

const SIGN_SALT: u64 = 0x5157_4E5F_5349_474E;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexicalEmbedderConfig {
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub text_dim: usize,
    pub hash_seed: u64,
}

impl Default for LexicalEmbedderConfig {
    fn default() -> Self {
        Self {
            ngram_min: 3,
            ngram_max: 5,
            text_dim: 384,
            hash_seed: 0,
        }
    }
}

impl LexicalEmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ngram_min == 0 || self.ngram_min > self.ngram_max {
            return Err(Error::Config(format!(
                "need 1 <= ngram_min <= ngram_max, got {}..{}",
                self.ngram_min, self.ngram_max
            )));
        }
        if self.text_dim < 2 {
            return Err(Error::Config("text_dim must be at least 2".into()));
        }
        Ok(())
    }
}

/// Anything that maps a code line to a fixed-width text vector.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, line: &str) -> Result<Vec<f32>>;
}

/// Signed feature hashing of character n-grams.
///
/// The line is wrapped in `<` and `>` so prefixes and suffixes produce their
/// own grams. Each gram's UTF-8 bytes are hashed with seeded XXH64 to pick a
/// bucket and, with a salted seed, a +1/-1 sign. The bucket counts are
/// L2-normalized.
#[derive(Debug, Clone)]
pub struct LexicalEmbedder {
    cfg: LexicalEmbedderConfig,
}

impl LexicalEmbedder {
    pub fn new(cfg: LexicalEmbedderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &LexicalEmbedderConfig {
        &self.cfg
    }
}

impl TextEncoder for LexicalEmbedder {
    fn dim(&self) -> usize {
        self.cfg.text_dim
    }

    fn embed(&self, line: &str) -> Result<Vec<f32>> {
        if line.is_empty() {
            return Err(Error::Input("cannot embed an empty line".into()));
        }
        let chars: Vec<char> = std::iter::once('<').chain(line.chars()).chain(std::iter::once('>')).collect();
        let dim = self.cfg.text_dim as u64;
        let mut acc = vec![0f64; self.cfg.text_dim];
        let mut gram = String::new();
        for n in self.cfg.ngram_min..=self.cfg.ngram_max {
            for window in chars.windows(n) {
                gram.clear();
                gram.extend(window);
                let bytes = gram.as_bytes();
                let bucket = XxHash64::oneshot(self.cfg.hash_seed, bytes) % dim;
                let sign = if XxHash64::oneshot(self.cfg.hash_seed ^ SIGN_SALT, bytes) & 1 == 0 {
                    1.0
                } else {
                    -1.0
                };
                acc[bucket as usize] += sign;
            }
        }
        let mut norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // short lines or cancelling signs: fall back to a whole-line feature
            let bucket = XxHash64::oneshot(self.cfg.hash_seed, line.as_bytes()) % dim;
            acc[bucket as usize] = 1.0;
            norm = 1.0;
        }
        Ok(acc.iter().map(|x| (x / norm) as f32).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn embedder() -> LexicalEmbedder {
        LexicalEmbedder::new(LexicalEmbedderConfig::default()).unwrap()
    }

    fn cos(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    /// Exact n-gram count vectors, no hashing.
    fn gram_counts(s: &str) -> HashMap<String, f64> {
        let chars: Vec<char> = format!("<{s}>").chars().collect();
        let mut m = HashMap::new();
        for n in 3..=5 {
            for w in chars.windows(n) {
                *m.entry(w.iter().collect::<String>()).or_insert(0.0) += 1.0;
            }
        }
        m
    }

    fn exact_cos(a: &str, b: &str) -> f64 {
        let (ca, cb) = (gram_counts(a), gram_counts(b));
        let dot: f64 = ca.iter().map(|(g, x)| x * cb.get(g).unwrap_or(&0.0)).sum();
        let na = ca.values().map(|x| x * x).sum::<f64>().sqrt();
        let nb = cb.values().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let e = embedder();
        let a = e.embed("for i in range(n):").unwrap();
        assert_eq!(a, e.embed("for i in range(n):").unwrap());
        assert_eq!(a.len(), 384);
        let norm: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        let tiny = e.embed("x").unwrap();
        assert!((tiny.iter().map(|x| x * x).sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn overlap_orders_similarity() {
        let e = embedder();
        let (x, y, z) = ("return x", "return y", "import os");
        assert!(exact_cos(x, y) > exact_cos(x, z));
        let (ex, ey, ez) = (e.embed(x).unwrap(), e.embed(y).unwrap(), e.embed(z).unwrap());
        assert!(cos(&ex, &ey) > cos(&ex, &ez));
    }

    #[test]
    fn seed_changes_buckets() {
        let other = LexicalEmbedder::new(LexicalEmbedderConfig {
            hash_seed: 9,
            ..LexicalEmbedderConfig::default()
        })
        .unwrap();
        assert_ne!(embedder().embed("print(x)").unwrap(), other.embed("print(x)").unwrap());
    }

    #[test]
    fn buckets_come_from_padded_grams() {
        let v = embedder().embed("abc").unwrap();
        let nz: Vec<usize> = v.iter().enumerate().filter(|(_, x)| **x != 0.0).map(|(i, _)| i).collect();
        let gram_buckets: Vec<u64> = ["<ab", "abc", "bc>", "<abc", "abc>", "<abc>"]
            .iter()
            .map(|g| XxHash64::oneshot(0, g.as_bytes()) % 384)
            .collect();
        for i in &nz {
            assert!(gram_buckets.contains(&(*i as u64)));
        }
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(embedder().embed(""), Err(Error::Input(_))));
        assert!(LexicalEmbedder::new(LexicalEmbedderConfig { ngram_min: 4, ngram_max: 3, ..Default::default() }).is_err());
        assert!(LexicalEmbedder::new(LexicalEmbedderConfig { text_dim: 1, ..Default::default() }).is_err());
    }
}
