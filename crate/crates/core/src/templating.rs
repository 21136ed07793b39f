//! Prompt templates with `{name}` attribute placeholders, expanded either
//! exhaustively (odometer order) or by seeded sampling.

use std::collections::BTreeMap;
use std::fmt;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_EXPANSION_CAP: u64 = 100_000;

/// Attribute whose bound value doubles as the token of interest when a
/// template lists none.
pub const OBJECT_ATTRIBUTE: &str = "object";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template '{template}': {field} has an unmatched '{{' at offset {offset}")]
    UnclosedBrace {
        template: String,
        field: String,
        offset: usize,
    },
    #[error("template '{template}': {field} has an unmatched '}}' at offset {offset}")]
    StrayClosingBrace {
        template: String,
        field: String,
        offset: usize,
    },
    #[error("template '{template}': {field} has an invalid placeholder name at offset {offset}")]
    InvalidPlaceholder {
        template: String,
        field: String,
        offset: usize,
    },
    #[error("template '{template}': placeholder '{{{name}}}' has no attribute definition")]
    UndefinedPlaceholder { template: String, name: String },
    #[error("template '{template}': attribute '{name}' has an empty value list")]
    EmptyAttribute { template: String, name: String },
    #[error("template '{template}': attribute '{name}' repeats value '{value}'")]
    DuplicateValue {
        template: String,
        name: String,
        value: String,
    },
    #[error("template '{template}': expansion yields {count} prompts, above the cap of {cap}; set \"count\" to sample instead")]
    ExpansionTooLarge {
        template: String,
        count: u128,
        cap: u64,
    },
    #[error("template '{template}': sample size must be at least 1")]
    EmptySample { template: String },
}

/// All problems found in one template, collected rather than fail-fast.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateErrors(pub Vec<TemplateError>);

impl fmt::Display for TemplateErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for TemplateErrors {}

/// One template entry of the input configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateEntry {
    pub id: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_prompt: Option<String>,
    #[serde(default)]
    pub attributes: IndexMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_of_interest: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Placeholder(String),
}

/// A scanned piece of template text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateText {
    segments: Vec<Segment>,
}

impl TemplateText {
    /// Placeholder names in order of appearance (repeats included).
    pub fn placeholders(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Placeholder(n) => Some(n.as_str()),
            Segment::Literal(_) => None,
        })
    }

    fn render(&self, bindings: &BTreeMap<String, String>) -> String {
        let mut out = String::new();
        for s in &self.segments {
            match s {
                Segment::Literal(t) => out.push_str(t),
                Segment::Placeholder(n) => out.push_str(&bindings[n]),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScanError {
    Unclosed(usize),
    StrayClose(usize),
    BadName(usize),
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '-'
}

/// Single-pass scan: `{{`/`}}` are literal braces, `{name}` is a placeholder.
/// Offsets are byte offsets of the offending brace.
fn scan(text: &str) -> Result<TemplateText, ScanError> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        match c {
            '{' => {
                if matches!(chars.peek(), Some((_, '{'))) {
                    chars.next();
                    literal.push('{');
                    continue;
                }
                let mut name = String::new();
                let mut closed = false;
                while let Some(&(_, n)) = chars.peek() {
                    if n == '}' {
                        chars.next();
                        closed = true;
                        break;
                    }
                    if n == '{' {
                        break;
                    }
                    name.push(n);
                    chars.next();
                }
                if !closed {
                    return Err(ScanError::Unclosed(i));
                }
                if name.is_empty() || !name.chars().all(is_name_char) {
                    return Err(ScanError::BadName(i));
                }
                if !literal.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                segments.push(Segment::Placeholder(name));
            }
            '}' => {
                if matches!(chars.peek(), Some((_, '}'))) {
                    chars.next();
                    literal.push('}');
                } else {
                    return Err(ScanError::StrayClose(i));
                }
            }
            other => literal.push(other),
        }
    }
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    Ok(TemplateText { segments })
}

/// Counts unescaped placeholders in already-expanded text; zero means the
/// substitution was total.
pub fn count_placeholders(text: &str) -> usize {
    scan(text).map_or(0, |t| t.placeholders().count())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub template_id: String,
    body: TemplateText,
    negative_body: Option<TemplateText>,
    attributes: IndexMap<String, Vec<String>>,
    tokens_of_interest: Option<Vec<TemplateText>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpandedPrompt {
    pub template_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_text: Option<String>,
    pub bindings: BTreeMap<String, String>,
    pub tokens_of_interest: Vec<String>,
}

/// Validates a configuration entry, reporting every problem found.
pub fn parse_template(entry: &TemplateEntry) -> Result<PromptTemplate, TemplateErrors> {
    let id = entry.id.clone();
    let mut errors = Vec::new();

    let scan_field = |field: &str, text: &str, errors: &mut Vec<TemplateError>| {
        scan(text)
            .map_err(|e| {
                let (template, field) = (id.clone(), field.to_string());
                errors.push(match e {
                    ScanError::Unclosed(offset) => TemplateError::UnclosedBrace {
                        template,
                        field,
                        offset,
                    },
                    ScanError::StrayClose(offset) => TemplateError::StrayClosingBrace {
                        template,
                        field,
                        offset,
                    },
                    ScanError::BadName(offset) => TemplateError::InvalidPlaceholder {
                        template,
                        field,
                        offset,
                    },
                })
            })
            .ok()
    };

    let body = scan_field("prompt", &entry.prompt, &mut errors);
    let negative = entry
        .negative_prompt
        .as_deref()
        .map(|n| scan_field("negative_prompt", n, &mut errors));
    let tokens = entry.tokens_of_interest.as_ref().map(|list| {
        list.iter()
            .enumerate()
            .map(|(i, t)| scan_field(&format!("tokens_of_interest[{i}]"), t, &mut errors))
            .collect::<Vec<_>>()
    });

    for (name, values) in &entry.attributes {
        if values.is_empty() {
            errors.push(TemplateError::EmptyAttribute {
                template: id.clone(),
                name: name.clone(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        for v in values {
            if !seen.insert(v) {
                errors.push(TemplateError::DuplicateValue {
                    template: id.clone(),
                    name: name.clone(),
                    value: v.clone(),
                });
            }
        }
    }

    let mut reported = std::collections::HashSet::new();
    let scanned = body
        .iter()
        .chain(negative.iter().flatten())
        .chain(tokens.iter().flatten().flatten());
    for text in scanned {
        for name in text.placeholders() {
            if !entry.attributes.contains_key(name) && reported.insert(name.to_string()) {
                errors.push(TemplateError::UndefinedPlaceholder {
                    template: id.clone(),
                    name: name.to_string(),
                });
            }
        }
    }

    if !errors.is_empty() {
        return Err(TemplateErrors(errors));
    }
    Ok(PromptTemplate {
        template_id: id,
        body: body.expect("scanned"),
        negative_body: negative.map(|n| n.expect("scanned")),
        attributes: entry.attributes.clone(),
        tokens_of_interest: tokens.map(|t| t.into_iter().map(|x| x.expect("scanned")).collect()),
    })
}

impl PromptTemplate {
    pub fn placeholder_count(&self) -> usize {
        self.body.placeholders().count()
    }

    pub fn attributes(&self) -> &IndexMap<String, Vec<String>> {
        &self.attributes
    }

    /// Size of the cartesian product over all attribute domains.
    pub fn combination_count(&self) -> u128 {
        self.attributes
            .values()
            .map(|v| v.len() as u128)
            .product()
    }

    fn instantiate(&self, choice: &[usize]) -> ExpandedPrompt {
        let bindings: BTreeMap<String, String> = self
            .attributes
            .iter()
            .zip(choice)
            .map(|((name, values), &i)| (name.clone(), values[i].clone()))
            .collect();
        let tokens_of_interest = match &self.tokens_of_interest {
            Some(list) => list.iter().map(|t| t.render(&bindings)).collect(),
            None => bindings.get(OBJECT_ATTRIBUTE).cloned().into_iter().collect(),
        };
        ExpandedPrompt {
            template_id: self.template_id.clone(),
            text: self.body.render(&bindings),
            negative_text: self.negative_body.as_ref().map(|n| n.render(&bindings)),
            bindings,
            tokens_of_interest,
        }
    }
}

/// Full cartesian expansion with the default cap.
pub fn expand_all(t: &PromptTemplate) -> Result<Vec<ExpandedPrompt>, TemplateError> {
    expand_all_capped(t, DEFAULT_EXPANSION_CAP)
}

/// Odometer-order expansion: the last declared attribute varies fastest.
pub fn expand_all_capped(t: &PromptTemplate, cap: u64) -> Result<Vec<ExpandedPrompt>, TemplateError> {
    let count = t.combination_count();
    if count > cap as u128 {
        return Err(TemplateError::ExpansionTooLarge {
            template: t.template_id.clone(),
            count,
            cap,
        });
    }
    let sizes: Vec<usize> = t.attributes.values().map(Vec::len).collect();
    let mut choice = vec![0usize; sizes.len()];
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        out.push(t.instantiate(&choice));
        for pos in (0..sizes.len()).rev() {
            choice[pos] += 1;
            if choice[pos] < sizes[pos] {
                break;
            }
            choice[pos] = 0;
        }
    }
    Ok(out)
}

/// Draws `n` combinations uniformly with replacement; identical inputs give
/// identical output.
pub fn sample(t: &PromptTemplate, n: usize, seed: u64) -> Result<Vec<ExpandedPrompt>, TemplateError> {
    if n == 0 {
        return Err(TemplateError::EmptySample {
            template: t.template_id.clone(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = t.attributes.values().map(Vec::len).collect();
    Ok((0..n)
        .map(|_| {
            let choice: Vec<usize> = sizes.iter().map(|&s| rng.gen_range(0..s)).collect();
            t.instantiate(&choice)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(prompt: &str, attrs: &[(&str, &[&str])]) -> TemplateEntry {
        TemplateEntry {
            id: "t".into(),
            prompt: prompt.into(),
            negative_prompt: None,
            attributes: attrs
                .iter()
                .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
                .collect(),
            tokens_of_interest: None,
            count: None,
            seed: None,
        }
    }

    #[test]
    fn single_placeholder() {
        let t = parse_template(&entry("a {color} sedan on road", &[("color", &["red", "blue"])]))
            .unwrap();
        assert_eq!(t.placeholder_count(), 1);
    }

    #[test]
    fn no_placeholders() {
        let t = parse_template(&entry("a sedan", &[])).unwrap();
        assert_eq!(t.placeholder_count(), 0);
        let out = expand_all(&t).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].text, "a sedan");
    }

    #[test]
    fn unclosed_brace_reports_offset() {
        let err = parse_template(&entry("a {color sedan", &[])).unwrap_err();
        assert_eq!(
            err.0,
            vec![TemplateError::UnclosedBrace {
                template: "t".into(),
                field: "prompt".into(),
                offset: 2
            }]
        );
    }

    #[test]
    fn nested_brace_and_stray_close() {
        let err = parse_template(&entry("a {col{or}", &[])).unwrap_err();
        assert!(matches!(err.0[0], TemplateError::UnclosedBrace { offset: 2, .. }));
        let err = parse_template(&entry("oops } here", &[])).unwrap_err();
        assert!(matches!(err.0[0], TemplateError::StrayClosingBrace { offset: 5, .. }));
        let err = parse_template(&entry("a { x } b", &[])).unwrap_err();
        assert!(matches!(err.0[0], TemplateError::InvalidPlaceholder { offset: 2, .. }));
    }

    #[test]
    fn escaped_braces_are_literal() {
        let t = parse_template(&entry("{{literal}} {x}", &[("x", &["v"])])).unwrap();
        let out = expand_all(&t).unwrap();
        assert_eq!(out[0].text, "{literal} v");
    }

    #[test]
    fn collects_every_error() {
        let mut e = entry("{a} {b} {a}", &[("c", &[]), ("d", &["x", "x"])]);
        e.negative_prompt = Some("bad {".into());
        let err = parse_template(&e).unwrap_err();
        let msg = err.to_string();
        assert_eq!(err.0.len(), 5, "{msg}");
        assert!(msg.contains("'{a}'") && msg.contains("'{b}'"));
        assert!(msg.contains("empty value list"));
        assert!(msg.contains("repeats value 'x'"));
    }

    #[test]
    fn cartesian_two_by_one() {
        let t = parse_template(&entry(
            "{color} {object}",
            &[("color", &["red", "blue"]), ("object", &["car"])],
        ))
        .unwrap();
        let texts: Vec<String> = expand_all(&t).unwrap().into_iter().map(|p| p.text).collect();
        assert_eq!(texts, vec!["red car", "blue car"]);
    }

    #[test]
    fn odometer_order_last_fastest() {
        let t = parse_template(&entry(
            "{color} {weather}",
            &[("color", &["red", "blue"]), ("weather", &["sunny", "rainy"])],
        ))
        .unwrap();
        let texts: Vec<String> = expand_all(&t).unwrap().into_iter().map(|p| p.text).collect();
        assert_eq!(texts, vec!["red sunny", "red rainy", "blue sunny", "blue rainy"]);
    }

    #[test]
    fn rare_concept_token_passes_through() {
        let t = parse_template(&entry(
            "a photo of a {object} on the road",
            &[("object", &["car", "grand-piano"])],
        ))
        .unwrap();
        let out = expand_all(&t).unwrap();
        assert_eq!(out[1].text, "a photo of a grand-piano on the road");
        assert_eq!(out[1].tokens_of_interest, vec!["grand-piano"]);
    }

    #[test]
    fn explicit_tokens_may_reference_attributes() {
        let mut e = entry("a {color} {object}", &[("color", &["red"]), ("object", &["car"])]);
        e.tokens_of_interest = Some(vec!["{object}".into(), "road".into()]);
        let out = expand_all(&parse_template(&e).unwrap()).unwrap();
        assert_eq!(out[0].tokens_of_interest, vec!["car", "road"]);
    }

    #[test]
    fn cap_is_enforced() {
        let t = parse_template(&entry("{a}{b}", &[("a", &["1", "2", "3"]), ("b", &["x", "y"])]))
            .unwrap();
        let err = expand_all_capped(&t, 5).unwrap_err();
        assert!(err.to_string().contains("\"count\""));
        assert_eq!(expand_all_capped(&t, 6).unwrap().len(), 6);
    }

    #[test]
    fn sampling_is_deterministic() {
        let t = parse_template(&entry("{a} {b}", &[("a", &["1", "2", "3"]), ("b", &["x", "y"])]))
            .unwrap();
        assert_eq!(sample(&t, 3, 42).unwrap(), sample(&t, 3, 42).unwrap());
        assert!(sample(&t, 0, 1).is_err());
    }

    #[test]
    fn sampling_forced_outcome() {
        let t = parse_template(&entry("{a} {b}", &[("a", &["1"]), ("b", &["x"])])).unwrap();
        let out = sample(&t, 1, 7).unwrap();
        assert_eq!(out, expand_all(&t).unwrap());
    }

    #[test]
    fn entry_preserves_attribute_order() {
        let e: TemplateEntry = serde_json::from_str(
            r#"{"id":"x","prompt":"{z} {a}","attributes":{"z":["1","2"],"a":["p","q"]}}"#,
        )
        .unwrap();
        let names: Vec<&String> = e.attributes.keys().collect();
        assert_eq!(names, ["z", "a"]);
        let out = expand_all(&parse_template(&e).unwrap()).unwrap();
        assert_eq!(out[1].text, "1 q");
    }

    fn domains() -> impl Strategy<Value = Vec<Vec<String>>> {
        proptest::collection::vec(
            (1usize..5).prop_map(|n| (0..n).map(|i| format!("v{i}")).collect::<Vec<_>>()),
            0..4,
        )
    }

    proptest! {
        #[test]
        fn expansion_count_and_totality(doms in domains()) {
            let names: Vec<String> = (0..doms.len()).map(|i| format!("a{i}")).collect();
            let body = names.iter().map(|n| format!("{{{n}}}")).collect::<Vec<_>>().join(" ");
            let e = TemplateEntry {
                id: "p".into(),
                prompt: format!("x {body}"),
                negative_prompt: None,
                attributes: names.iter().cloned().zip(doms.iter().cloned()).collect(),
                tokens_of_interest: None,
                count: None,
                seed: None,
            };
            let t = parse_template(&e).unwrap();
            let out = expand_all(&t).unwrap();
            let expected: usize = doms.iter().map(Vec::len).product();
            prop_assert_eq!(out.len(), expected);
            let bindings: std::collections::HashSet<_> = out.iter().map(|p| p.bindings.clone()).collect();
            prop_assert_eq!(bindings.len(), expected);
            let texts: std::collections::HashSet<_> = out.iter().map(|p| p.text.clone()).collect();
            prop_assert_eq!(texts.len(), expected);
            prop_assert!(out.iter().all(|p| count_placeholders(&p.text) == 0));
        }
    }
}
