//! Response parsers. Both are total: any byte string yields a (possibly
//! empty) phrase list, never a panic.

use serde_json::Value;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedSubjects {
    pub main: Option<String>,
    pub additional: Vec<String>,
}

fn clean_phrase(s: &str) -> Option<String> {
    let t = s
        .trim()
        .trim_matches(|c: char| {
            c == '"' || c == '\'' || c == '`' || c == '“' || c == '”' || c == '‘' || c == '’'
        })
        .trim()
        .trim_end_matches(['.', ',', ';', ':', '!'])
        .trim();
    let t: String = t.split_whitespace().collect::<Vec<_>>().join(" ");
    (!t.is_empty()).then_some(t)
}

/// The outermost `{ ... }` region, if any; an unclosed object runs to the
/// end of the response.
fn object_region(raw: &str) -> Option<&str> {
    let start = raw.find('{')?;
    match raw.rfind('}') {
        Some(end) if end > start => Some(&raw[start..=end]),
        _ => Some(&raw[start..]),
    }
}

fn repair(json: &str) -> String {
    let mut s: String = json
        .chars()
        .map(|c| match c {
            '“' | '”' | '„' => '"',
            '‘' | '’' => '\'',
            c => c,
        })
        .collect();
    if !s.contains('"') {
        s = s.replace('\'', "\"");
    }
    // trailing commas before a closing bracket
    let mut out = String::with_capacity(s.len());
    let chars: Vec<char> = s.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if c == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

fn key_kind(key: &str) -> Option<bool> {
    let k: String = key
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric())
        .collect();
    if k.starts_with("main") {
        Some(true)
    } else if k.starts_with("additional") || k.starts_with("other") {
        Some(false)
    } else {
        None
    }
}

fn phrases_of(v: &Value) -> Vec<String> {
    match v {
        Value::String(s) => s.split(',').filter_map(clean_phrase).collect(),
        Value::Array(items) => items
            .iter()
            .filter_map(|i| match i {
                Value::String(s) => clean_phrase(s),
                Value::Number(n) => clean_phrase(&n.to_string()),
                _ => None,
            })
            .collect(),
        Value::Number(n) => clean_phrase(&n.to_string()).into_iter().collect(),
        _ => Vec::new(),
    }
}

fn from_value(v: &Value) -> ParsedSubjects {
    let mut parsed = ParsedSubjects::default();
    if let Value::Object(map) = v {
        for (k, val) in map {
            match key_kind(k) {
                Some(true) if parsed.main.is_none() => {
                    let mut ps = phrases_of(val).into_iter();
                    parsed.main = ps.next();
                    parsed.additional.extend(ps);
                }
                Some(false) => parsed.additional.extend(phrases_of(val)),
                _ => {}
            }
        }
    }
    parsed
}

/// Scans `"key": "value"` / `"key": [ ... ]` pairs without a JSON parser,
/// for responses too broken to repair.
fn scan_pairs(region: &str) -> ParsedSubjects {
    let mut parsed = ParsedSubjects::default();
    let mut rest = region;
    while let Some(q) = rest.find('"') {
        let after = &rest[q + 1..];
        let Some(qe) = after.find('"') else { break };
        let key = &after[..qe];
        let tail = after[qe + 1..].trim_start();
        rest = &after[qe + 1..];
        let Some(kind) = key_kind(key) else { continue };
        let Some(tail) = tail.strip_prefix(':') else {
            continue;
        };
        let tail = tail.trim_start();
        let values: Vec<String> = if let Some(list) = tail.strip_prefix('[') {
            let body = list.split(']').next().unwrap_or("");
            body.split(',').filter_map(clean_phrase).collect()
        } else if let Some(s) = tail.strip_prefix('"') {
            s.split('"')
                .next()
                .and_then(clean_phrase)
                .into_iter()
                .collect()
        } else {
            Vec::new()
        };
        if kind && parsed.main.is_none() {
            let mut it = values.into_iter();
            parsed.main = it.next();
            parsed.additional.extend(it);
        } else {
            parsed.additional.extend(values);
        }
    }
    parsed
}

/// Parses the `{"main_topic_word": ..., "additional_topic_words": [...]}` format,
/// tolerating surrounding prose, smart/single quotes and trailing commas.
pub fn parse_structured(raw: &str) -> ParsedSubjects {
    let Some(region) = object_region(raw) else {
        return ParsedSubjects::default();
    };
    for candidate in [region.to_string(), repair(region)] {
        if let Ok(v) = serde_json::from_str::<Value>(&candidate) {
            return from_value(&v);
        }
    }
    scan_pairs(&repair(region))
}

fn strip_marker(line: &str) -> &str {
    let t = line.trim_start();
    let t = t.trim_start_matches(['-', '*', '•', '·']).trim_start();
    let digits = t.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return r.trim_start();
        }
    }
    t
}

/// Parses bullet, numbered or comma-separated lists. Lines that end in a
/// colon are treated as preamble; text after a leading "...:" is kept.
pub fn parse_list(raw: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in raw.lines() {
        let mut l = strip_marker(line).trim();
        for prefix in ["Assistant:", "assistant:", "Answer:", "answer:"] {
            if let Some(r) = l.strip_prefix(prefix) {
                l = r.trim();
            }
        }
        if l.is_empty() || l.ends_with(':') {
            continue;
        }
        if let Some((head, tail)) = l.split_once(':') {
            if head.split_whitespace().count() > 1 || head.to_lowercase().contains("object") {
                l = tail.trim();
            }
        }
        let l = l.trim_end_matches('.');
        for part in l.split([',', ';']) {
            let part = part.trim();
            let part = part.strip_prefix("and ").unwrap_or(part);
            for piece in part.split(" and ") {
                if let Some(p) = clean_phrase(strip_marker(piece)) {
                    out.push(p);
                }
            }
        }
    }
    out
}
