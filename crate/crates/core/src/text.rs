//! Word-level text utilities shared by the caption filters and corpus statistics.

/// Splits on whitespace, strips every non-alphanumeric character from each
/// piece and drops pieces that end up empty.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|piece| {
            piece
                .chars()
                .filter(|c| c.is_alphanumeric())
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn word_count(text: &str) -> usize {
    word_tokens(text).len()
}

/// Text that cannot be tokenized: control characters other than whitespace, or
/// the replacement character left behind by lossy UTF-8 decoding.
pub fn is_malformed(text: &str) -> bool {
    text.chars()
        .any(|c| c == '\u{FFFD}' || (c.is_control() && !c.is_whitespace()))
}

const IRREGULAR: &[(&str, &str)] = &[
    ("children", "child"),
    ("men", "man"),
    ("women", "woman"),
    ("people", "person"),
    ("feet", "foot"),
    ("teeth", "tooth"),
    ("mice", "mouse"),
    ("geese", "goose"),
    ("was", "be"),
    ("were", "be"),
    ("is", "be"),
    ("are", "be"),
    ("been", "be"),
    ("has", "have"),
    ("had", "have"),
];

/// Rule-based English lemmatizer over lowercased words: irregular table first,
/// then plural suffix rules. Deliberately conservative; unknown shapes pass
/// through unchanged.
pub fn lemmatize(word: &str) -> String {
    let w = word.to_lowercase();
    if let Some((_, lemma)) = IRREGULAR.iter().find(|(form, _)| *form == w) {
        return (*lemma).to_string();
    }
    let n = w.chars().count();
    if n > 4 && w.ends_with("ies") {
        return format!("{}y", &w[..w.len() - 3]);
    }
    if n > 4
        && (w.ends_with("sses") || w.ends_with("shes") || w.ends_with("ches") || w.ends_with("xes"))
    {
        return w[..w.len() - 2].to_string();
    }
    if n > 3 && w.ends_with('s') && !w.ends_with("ss") && !w.ends_with("us") && !w.ends_with("is") {
        return w[..w.len() - 1].to_string();
    }
    w
}

/// Case-folded, whitespace-collapsed view of a string together with the
/// originating char index of every normalized char.
#[derive(Debug, Clone)]
pub struct NormalizedText {
    pub chars: Vec<char>,
    pub origin: Vec<usize>,
}

impl NormalizedText {
    pub fn new(text: &str) -> Self {
        let mut chars = Vec::new();
        let mut origin = Vec::new();
        let mut pending_space: Option<usize> = None;
        for (idx, c) in text.chars().enumerate() {
            if c.is_whitespace() {
                if !chars.is_empty() && pending_space.is_none() {
                    pending_space = Some(idx);
                }
                continue;
            }
            if let Some(sp) = pending_space.take() {
                chars.push(' ');
                origin.push(sp);
            }
            for lc in c.to_lowercase() {
                chars.push(lc);
                origin.push(idx);
            }
        }
        NormalizedText { chars, origin }
    }

    pub fn as_string(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    /// Non-overlapping occurrences of `needle`, returned as half-open ranges of
    /// char indices into the original text.
    pub fn find_all(&self, needle: &NormalizedText) -> Vec<(usize, usize)> {
        let n = needle.chars.len();
        if n == 0 || n > self.chars.len() {
            return Vec::new();
        }
        let mut out = Vec::new();
        let mut i = 0;
        while i + n <= self.chars.len() {
            if self.chars[i..i + n] == needle.chars[..] {
                out.push((self.origin[i], self.origin[i + n - 1] + 1));
                i += n;
            } else {
                i += 1;
            }
        }
        out
    }

    pub fn contains(&self, needle: &NormalizedText) -> bool {
        !self.find_all(needle).is_empty()
    }
}

pub fn normalize(text: &str) -> String {
    NormalizedText::new(text).as_string()
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// 64-bit FNV-1a, used where a stable non-cryptographic hash is enough.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Substring by char indices `[start, end)`.
pub fn char_slice(text: &str, start: usize, end: usize) -> String {
    text.chars()
        .skip(start)
        .take(end.saturating_sub(start))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_strip_punctuation() {
        let words = word_tokens("The school offers clothing, including shoes, to its students.");
        assert_eq!(words.len(), 9);
        assert_eq!(words[3], "clothing");
        assert_eq!(word_count(" -- ... "), 0);
    }

    #[test]
    fn malformed_detection() {
        assert!(is_malformed("bad \u{0007} bell"));
        assert!(is_malformed("lossy \u{FFFD}"));
        assert!(!is_malformed("tab\tand\nnewline"));
    }

    #[test]
    fn lemmas() {
        assert_eq!(lemmatize("Shoes"), "shoe");
        assert_eq!(lemmatize("cities"), "city");
        assert_eq!(lemmatize("boxes"), "box");
        assert_eq!(lemmatize("glass"), "glass");
        assert_eq!(lemmatize("children"), "child");
        assert_eq!(lemmatize("bus"), "bus");
    }

    #[test]
    fn normalized_search_maps_back_to_original() {
        let hay = NormalizedText::new("A  Bronze\tTiger and a bronze   tiger");
        let needle = NormalizedText::new("bronze tiger");
        let hits = hay.find_all(&needle);
        assert_eq!(hits, vec![(3, 15), (22, 36)]);
        assert_eq!(
            char_slice("A  Bronze\tTiger and a bronze   tiger", 3, 15),
            "Bronze\tTiger"
        );
    }
}
