//! Turning free-text responses into attribute lists and description maps.

use indexmap::IndexMap;

use crate::toa::{follows_grammar, normalize_name, MAX_DESCRIPTIONS, MIN_DESCRIPTIONS};

/// Maximum number of attributes accepted from step 1 (exclusive).
pub const ATTRIBUTE_LIMIT: usize = 10;

/// Removes bullets, enumerators, markdown emphasis and surrounding quotes.
pub fn strip_list_marker(line: &str) -> &str {
    let mut s = line.trim();
    loop {
        let before = s;
        s = s.trim_start_matches(['-', '*', '•', '·', '#', '>']).trim_start();
        let digits = s.chars().take_while(char::is_ascii_digit).count();
        if digits > 0 {
            let rest = &s[digits..];
            if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
                s = r.trim_start();
            }
        }
        if s == before {
            break;
        }
    }
    s.trim_matches(|c| c == '*' || c == '_' || c == '`').trim()
}

fn unquote(s: &str) -> &str {
    let s = s.trim();
    for (open, close) in [('"', '"'), ('“', '”'), ('\'', '\'')] {
        if let Some(inner) = s.strip_prefix(open).and_then(|r| r.strip_suffix(close)) {
            return inner.trim();
        }
    }
    s
}

/// One attribute name per non-empty line. A `Name: explanation` line keeps
/// only the name. Duplicates (up to case and punctuation) are dropped.
pub fn parse_attributes(response: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for line in response.lines() {
        let item = strip_list_marker(line);
        let item = match item.split_once(':') {
            Some((head, _)) => head,
            None => item,
        };
        let item = unquote(item.trim_matches(|c| c == '*' || c == '_')).trim_end_matches('.').trim();
        if item.is_empty() || normalize_name(item).is_empty() {
            continue;
        }
        if !out.iter().any(|a| normalize_name(a) == normalize_name(item)) {
            out.push(item.to_string());
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedDescriptions {
    pub per_attribute: IndexMap<String, Vec<String>>,
    /// Rule code and detail for every problem found.
    pub problems: Vec<(String, String)>,
}

impl ParsedDescriptions {
    pub fn is_clean(&self) -> bool {
        self.problems.is_empty()
    }

    pub fn rules(&self) -> Vec<&str> {
        self.problems.iter().map(|(r, _)| r.as_str()).collect()
    }

    pub fn messages(&self) -> Vec<String> {
        self.problems.iter().map(|(r, d)| format!("{r}: {d}")).collect()
    }
}

fn attribute_header<'a>(text: &str, attributes: &'a [String]) -> Option<&'a String> {
    let key = normalize_name(text.trim_end_matches(':'));
    attributes.iter().find(|a| normalize_name(a) == key)
}

/// Parses descriptions of `class` grouped under attribute header lines.
///
/// A header is a line naming one of `attributes`, optionally followed by
/// `:` and a first description on the same line.
pub fn parse_descriptions(response: &str, class: &str, attributes: &[String]) -> ParsedDescriptions {
    let mut per_attribute: IndexMap<String, Vec<String>> = IndexMap::new();
    let mut problems = Vec::new();
    let mut current: Option<&String> = None;
    for line in response.lines() {
        let item = strip_list_marker(line);
        if item.is_empty() {
            continue;
        }
        if let Some(a) = attribute_header(item, attributes) {
            current = Some(a);
            continue;
        }
        let mut text = item;
        if let Some((head, tail)) = item.split_once(':') {
            if let Some(a) = attribute_header(strip_list_marker(head), attributes) {
                current = Some(a);
                text = tail;
            }
        }
        let text = unquote(text).trim_end_matches('.').trim();
        if text.is_empty() {
            continue;
        }
        if !follows_grammar(class, text) {
            problems.push(("grammar".to_string(), format!("`{text}` is not of the form \"{class}, which ...\"")));
            continue;
        }
        match current {
            Some(a) => per_attribute.entry(a.clone()).or_default().push(text.to_string()),
            None => problems.push(("orphan-description".to_string(), format!("`{text}` appears before any attribute"))),
        }
    }
    for a in attributes {
        match per_attribute.get(a).map(Vec::len).unwrap_or(0) {
            0 => problems.push(("attribute-coverage".to_string(), format!("no descriptions for `{a}`"))),
            n if n < MIN_DESCRIPTIONS => {
                problems.push(("min-2".to_string(), format!("`{a}` has {n} description, at least {MIN_DESCRIPTIONS} needed")))
            }
            n if n > MAX_DESCRIPTIONS => {
                problems.push(("max-5".to_string(), format!("`{a}` has {n} descriptions, at most {MAX_DESCRIPTIONS} allowed")))
            }
            _ => {}
        }
    }
    let ordered = attributes.iter().filter_map(|a| per_attribute.get(a).map(|d| (a.clone(), d.clone()))).collect();
    ParsedDescriptions { per_attribute: ordered, problems }
}
