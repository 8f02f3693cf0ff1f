//! Tree of Attribute: the `concept → attribute → description` knowledge graph
//! for one dataset, its validator, and its on-disk document format.
//!
//! The document is pretty-printed JSON with four top-level keys:
//!
//! ```json
//! {
//!   "dataset": "Food101",
//!   "attributes": ["Color", "Shape", "Texture"],
//!   "global_context_templates": ["itap of a {class}.", "..."],
//!   "classes": {
//!     "dumplings": {
//!       "Color": ["dumplings, which are pale white", "..."],
//!       "Shape": ["..."],
//!       "Texture": ["..."]
//!     }
//!   }
//! }
//! ```
//!
//! Unknown keys are rejected; key order inside `classes` is preserved and is
//! the canonical class order.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Placeholder substituted by the class name in global-context templates.
pub const CLASS_PLACEHOLDER: &str = "{class}";

/// Number of global-context templates every tree carries.
pub const GLOBAL_TEMPLATE_COUNT: usize = 7;

/// Display name of the pseudo-attribute aligned with the vision CLS token.
pub const GLOBAL_CONTEXT_NAME: &str = "Global context";

pub const MIN_DESCRIPTIONS: usize = 2;
pub const MAX_DESCRIPTIONS: usize = 5;

/// The seven CLIP ensemble templates used for the global-context attribute.
pub const DEFAULT_GLOBAL_TEMPLATES: [&str; GLOBAL_TEMPLATE_COUNT] = [
    "itap of a {class}.",
    "a bad photo of the {class}.",
    "a origami {class}.",
    "a photo of the large {class}.",
    "a {class} in a video game.",
    "art of the {class}.",
    "a photo of the small {class}.",
];

pub fn default_global_templates() -> Vec<String> {
    DEFAULT_GLOBAL_TEMPLATES.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, thiserror::Error)]
pub enum ToaError {
    #[error("malformed tree document: {0}")]
    Malformed(String),
    #[error("no classes")]
    NoClasses,
    #[error("templates arity: expected {GLOBAL_TEMPLATE_COUNT} global-context templates, found {0}")]
    TemplatesArity(usize),
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("unknown attribute index {0}")]
    UnknownAttribute(usize),
    #[error("tree failed validation: {0}")]
    Invalid(ValidationReport),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeTree {
    #[serde(rename = "dataset")]
    pub dataset_name: String,
    #[serde(rename = "attributes")]
    pub attribute_names: Vec<String>,
    pub global_context_templates: Vec<String>,
    #[serde(rename = "classes")]
    pub per_class: IndexMap<String, IndexMap<String, Vec<String>>>,
}

/// One node of the attribute layer, including the global-context pseudo-attribute.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeId {
    pub index: usize,
    pub name: String,
    pub is_global_context: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub class: Option<String>,
    pub attribute: Option<String>,
    pub rule: String,
    pub offending: String,
    pub severity: Severity,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] class={} attribute={}: {:?}",
            self.rule,
            self.class.as_deref().unwrap_or("-"),
            self.attribute.as_deref().unwrap_or("-"),
            self.offending
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(|v| v.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(|v| v.severity == Severity::Warning)
    }

    /// True when no error-severity violation was found. Warnings do not count.
    pub fn is_valid(&self) -> bool {
        self.errors().next().is_none()
    }

    pub fn rules(&self) -> Vec<&str> {
        self.violations.iter().map(|v| v.rule.as_str()).collect()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msgs: Vec<String> = self.errors().map(ToString::to_string).collect();
        write!(f, "{}", msgs.join("; "))
    }
}

/// Lowercases and keeps only alphanumerics, collapsing everything else to
/// single spaces. Used for punctuation-insensitive class-name matching.
pub fn normalize_name(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_space = false;
    for ch in s.chars() {
        if ch.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.extend(ch.to_lowercase());
        } else {
            pending_space = true;
        }
    }
    out
}

/// Checks the `<classname>, which <free text>` surface form.
pub fn follows_grammar(class_name: &str, description: &str) -> bool {
    let lower = description.to_lowercase();
    let Some(pos) = lower.find(", which") else { return false };
    let head = &description[..pos];
    let tail = &description[pos + ", which".len()..];
    let tail_ok = tail.starts_with(char::is_whitespace) && !tail.trim().is_empty();
    tail_ok && normalize_name(head) == normalize_name(class_name)
}

impl AttributeTree {
    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.per_class.keys().map(String::as_str)
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn class_index(&self, class_name: &str) -> Option<usize> {
        self.per_class.get_index_of(class_name)
    }

    /// Attribute layer including the global-context pseudo-attribute, which
    /// is always at index 0; named attributes follow in document order.
    pub fn attribute_ids(&self) -> Vec<AttributeId> {
        let mut ids = vec![AttributeId {
            index: 0,
            name: GLOBAL_CONTEXT_NAME.to_string(),
            is_global_context: true,
        }];
        ids.extend(self.attribute_names.iter().enumerate().map(|(i, n)| AttributeId {
            index: i + 1,
            name: n.clone(),
            is_global_context: false,
        }));
        ids
    }

    /// Number of attributes including global context.
    pub fn num_attributes(&self) -> usize {
        self.attribute_names.len() + 1
    }

    pub fn instantiate_global_context(&self, class_name: &str) -> Result<Vec<String>, ToaError> {
        if !self.per_class.contains_key(class_name) {
            return Err(ToaError::UnknownClass(class_name.to_string()));
        }
        Ok(self
            .global_context_templates
            .iter()
            .map(|t| t.replacen(CLASS_PLACEHOLDER, class_name, 1))
            .collect())
    }

    /// Leaves of `(class, attribute)`; for global context these are the
    /// instantiated templates.
    pub fn descriptions(&self, class_name: &str, attribute: usize) -> Result<Vec<String>, ToaError> {
        if attribute == 0 {
            return self.instantiate_global_context(class_name);
        }
        let name = self
            .attribute_names
            .get(attribute - 1)
            .ok_or(ToaError::UnknownAttribute(attribute))?;
        let per_attr = self
            .per_class
            .get(class_name)
            .ok_or_else(|| ToaError::UnknownClass(class_name.to_string()))?;
        Ok(per_attr.get(name).cloned().unwrap_or_default())
    }

    /// Validation never fails; it reports.
    pub fn validate(&self) -> ValidationReport {
        let mut out = Vec::new();
        let mut push = |class: Option<&str>, attribute: Option<&str>, rule: &str, offending: &str, severity| {
            out.push(Violation {
                class: class.map(str::to_string),
                attribute: attribute.map(str::to_string),
                rule: rule.to_string(),
                offending: offending.to_string(),
                severity,
            })
        };
        use Severity::{Error, Warning};

        if self.dataset_name.trim().is_empty() {
            push(None, None, "empty-string", "dataset", Error);
        }
        if self.per_class.is_empty() {
            push(None, None, "no-classes", "", Error);
        }
        if self.global_context_templates.len() != GLOBAL_TEMPLATE_COUNT {
            push(None, None, "templates-arity", &self.global_context_templates.len().to_string(), Error);
        }
        for t in &self.global_context_templates {
            if t.matches(CLASS_PLACEHOLDER).count() != 1 {
                push(None, None, "template-placeholder", t, Error);
            }
        }
        let mut seen_attrs: Vec<String> = Vec::new();
        for a in &self.attribute_names {
            if a.trim().is_empty() {
                push(None, Some(a), "empty-string", a, Error);
            }
            let key = normalize_name(a);
            if seen_attrs.contains(&key) || key == normalize_name(GLOBAL_CONTEXT_NAME) {
                push(None, Some(a), "duplicate-attribute", a, Error);
            }
            seen_attrs.push(key);
        }
        let mut seen_classes: Vec<String> = Vec::new();
        for (class, per_attr) in &self.per_class {
            if class.trim().is_empty() {
                push(Some(class), None, "empty-string", class, Error);
            }
            let key = normalize_name(class);
            if seen_classes.contains(&key) {
                push(Some(class), None, "duplicate-class", class, Error);
            }
            seen_classes.push(key);
            for a in &self.attribute_names {
                if !per_attr.contains_key(a) {
                    push(Some(class), Some(a), "missing-attribute", a, Error);
                }
            }
            for (a, descs) in per_attr {
                if !self.attribute_names.contains(a) {
                    push(Some(class), Some(a), "unknown-attribute", a, Error);
                }
                if descs.len() < MIN_DESCRIPTIONS {
                    push(Some(class), Some(a), "min-2", &descs.len().to_string(), Error);
                }
                if descs.len() > MAX_DESCRIPTIONS {
                    push(Some(class), Some(a), "max-5", &descs.len().to_string(), Error);
                }
                for d in descs {
                    if d.trim().is_empty() {
                        push(Some(class), Some(a), "empty-string", d, Error);
                    } else if !follows_grammar(class, d) {
                        push(Some(class), Some(a), "grammar", d, Error);
                    }
                }
            }
        }
        // Identical descriptions across classes under one attribute are legal
        // but weaken discrimination, so they are surfaced as warnings.
        for a in &self.attribute_names {
            let mut seen: IndexMap<String, &str> = IndexMap::new();
            for (class, per_attr) in &self.per_class {
                for d in per_attr.get(a).into_iter().flatten() {
                    let body = description_body(d);
                    match seen.get(&body) {
                        Some(first) if *first != class.as_str() => {
                            push(Some(class), Some(a), "duplicate-description", d, Warning)
                        }
                        Some(_) => {}
                        None => {
                            seen.insert(body, class);
                        }
                    }
                }
            }
        }
        ValidationReport { violations: out }
    }

    /// Like [`ensure_valid`](Self::ensure_valid) but ignores the named rules.
    pub fn ensure_valid_except(&self, rules: &[&str]) -> Result<(), ToaError> {
        let mut report = self.validate();
        report.violations.retain(|v| !rules.contains(&v.rule.as_str()));
        if report.is_valid() {
            Ok(())
        } else {
            Err(ToaError::Invalid(report))
        }
    }

    /// Errors with the report if any error-severity violation exists.
    pub fn ensure_valid(&self) -> Result<(), ToaError> {
        let report = self.validate();
        if report.is_valid() {
            Ok(())
        } else {
            Err(ToaError::Invalid(report))
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("tree serializes");
        s.push('\n');
        s
    }

    pub fn serialize(&self) -> Vec<u8> {
        self.to_json().into_bytes()
    }

    /// Parses a tree document. Structural problems (unknown keys, missing
    /// fields, template arity, no classes) are rejected here; content rules
    /// are left to [`AttributeTree::validate`].
    pub fn parse(bytes: &[u8]) -> Result<Self, ToaError> {
        let tree: AttributeTree =
            serde_json::from_slice(bytes).map_err(|e| ToaError::Malformed(e.to_string()))?;
        if tree.per_class.is_empty() {
            return Err(ToaError::NoClasses);
        }
        if tree.global_context_templates.len() != GLOBAL_TEMPLATE_COUNT {
            return Err(ToaError::TemplatesArity(tree.global_context_templates.len()));
        }
        Ok(tree)
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.serialize()))
    }

    /// Keeps only the first `k` named attributes.
    pub fn truncate_attributes(&self, k: usize) -> AttributeTree {
        let keep: Vec<String> = self.attribute_names.iter().take(k).cloned().collect();
        let per_class = self
            .per_class
            .iter()
            .map(|(c, m)| {
                let m = m.iter().filter(|(a, _)| keep.contains(a)).map(|(a, d)| (a.clone(), d.clone())).collect();
                (c.clone(), m)
            })
            .collect();
        AttributeTree {
            dataset_name: self.dataset_name.clone(),
            attribute_names: keep,
            global_context_templates: self.global_context_templates.clone(),
            per_class,
        }
    }

    /// Sub-tree restricted to the listed classes, in the given order.
    pub fn restrict_classes(&self, classes: &[String]) -> Result<AttributeTree, ToaError> {
        let mut per_class = IndexMap::new();
        for c in classes {
            let m = self.per_class.get(c).ok_or_else(|| ToaError::UnknownClass(c.clone()))?;
            per_class.insert(c.clone(), m.clone());
        }
        Ok(AttributeTree { per_class, ..self.clone() })
    }
}

/// Description text after the `<classname>, which` prefix, normalized.
pub fn description_body(description: &str) -> String {
    let lower = description.to_lowercase();
    match lower.find(", which") {
        Some(pos) => normalize_name(&lower[pos + ", which".len()..]),
        None => normalize_name(&lower),
    }
}
