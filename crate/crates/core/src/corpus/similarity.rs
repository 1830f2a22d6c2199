use std::collections::HashMap;

use crate::text::normalize;
use crate::Result;

/// Text-to-text similarity in `[0, 1]`, with 1 reserved for identical inputs.
pub trait SentenceSimilarity: Send + Sync {
    fn id(&self) -> &str;

    fn similarity(&self, a: &str, b: &str) -> Result<f64>;
}

/// Cosine similarity between padded character-trigram count vectors of the
/// normalized strings.
#[derive(Debug, Clone, Default)]
pub struct TrigramSimilarity;

fn trigrams(s: &str) -> HashMap<[char; 3], f64> {
    let padded: Vec<char> = std::iter::once(' ')
        .chain(normalize(s).chars())
        .chain(std::iter::once(' '))
        .collect();
    let mut counts = HashMap::new();
    for w in padded.windows(3) {
        *counts.entry([w[0], w[1], w[2]]).or_insert(0.0) += 1.0;
    }
    counts
}

impl SentenceSimilarity for TrigramSimilarity {
    fn id(&self) -> &str {
        "trigram-cosine-v1"
    }

    fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        let (na, nb) = (normalize(a), normalize(b));
        if na == nb {
            return Ok(1.0);
        }
        let (ta, tb) = (trigrams(&na), trigrams(&nb));
        let dot: f64 = ta
            .iter()
            .filter_map(|(k, v)| tb.get(k).map(|w| v * w))
            .sum();
        let norm = |t: &HashMap<[char; 3], f64>| t.values().map(|v| v * v).sum::<f64>().sqrt();
        let denom = norm(&ta) * norm(&tb);
        Ok(if denom == 0.0 {
            0.0
        } else {
            (dot / denom).clamp(0.0, 1.0)
        })
    }
}
