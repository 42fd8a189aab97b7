//! Keyword-extraction prompt construction and VLM response ingestion.
//!
//! The VLM is never called from here. Callers render a prompt, send it to
//! whatever model they use together with the sample images, and pass the raw
//! response text back to [`ingest_vlm_response`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Corpus, NodeSpec};

/// Group that collects bare strings found outside any keyed group.
pub const STRAGGLER_GROUP: &str = "Accessories";

const TEMPLATE: &str = "You are an expert at finding features important for text-based image editing using \
diffusion models, given a set of images. Upon receiving a set of images, analyze the given inputs and extract \
important features and keywords that can be used for text-based image editing using diffusion models. Analyze \
the set of images and identify key features that define or are significant within the specified domain. These \
features are encoded to guide generative diffusion model for fine-grained image editing of subjects.
List all different categories related to that specific feature. For example, for DOMAIN_NAME, it ranges from \
ATTRIBUTE_LIST, etc.
Output must be in the format given, a sample output is given below, give the output only without any other \
descriptive text. Do not restrict your answers to the given sample, come up with all features. I want detailed \
fine-grained features.
SAMPLE_OUTPUT";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleGroup {
    pub name: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VlmPromptSpec {
    pub domain_name: String,
    pub sample_attribute_names: Vec<String>,
    /// Opaque ids of the sample images sent alongside the prompt.
    #[serde(default)]
    pub example_image_refs: Vec<String>,
    /// Worked example shown in the output-format section. When empty, each
    /// sample attribute is shown with two generic sub-attributes.
    #[serde(default)]
    pub sample_groups: Vec<SampleGroup>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("no value for placeholder {0}")]
    MissingPlaceholder(&'static str),
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum IngestError {
    #[error("no attribute group could be parsed from the VLM response")]
    NoGroups,
    #[error("domain name is empty")]
    EmptyDomain,
}

/// Renders the keyword-extraction prompt. Identical specs give identical
/// bytes.
pub fn build_vlm_prompt(spec: &VlmPromptSpec) -> Result<String, PromptError> {
    let domain = spec.domain_name.trim();
    if domain.is_empty() {
        return Err(PromptError::MissingPlaceholder("DOMAIN_NAME"));
    }
    let attrs: Vec<&str> = spec.sample_attribute_names.iter().map(|a| a.trim()).collect();
    if let Some(pos) = attrs.iter().position(|a| a.is_empty()) {
        return Err(PromptError::MissingPlaceholder(ATTRIBUTE_NAMES[pos.min(ATTRIBUTE_NAMES.len() - 1)]));
    }
    let attribute_list = match attrs.as_slice() {
        [] => return Err(PromptError::MissingPlaceholder("ATTRIBUTE_1")),
        [only] => only.to_string(),
        [first, rest @ ..] => format!("{first} to {}", rest.join(", ")),
    };

    let groups: Vec<SampleGroup> = if spec.sample_groups.is_empty() {
        attrs
            .iter()
            .map(|a| SampleGroup {
                name: a.to_string(),
                members: (1..=2).map(|k| format!("{} type {k}", a.to_lowercase())).collect(),
            })
            .collect()
    } else {
        spec.sample_groups.clone()
    };
    let sample = render_groups(groups.iter().map(|g| (g.name.as_str(), g.members.as_slice())), &[]);

    Ok(TEMPLATE
        .replace("DOMAIN_NAME", domain)
        .replace("ATTRIBUTE_LIST", &attribute_list)
        .replace("SAMPLE_OUTPUT", &sample))
}

const ATTRIBUTE_NAMES: [&str; 8] = [
    "ATTRIBUTE_1",
    "ATTRIBUTE_2",
    "ATTRIBUTE_3",
    "ATTRIBUTE_4",
    "ATTRIBUTE_5",
    "ATTRIBUTE_6",
    "ATTRIBUTE_7",
    "ATTRIBUTE_8",
];

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for ch in s.chars() {
        if ch == '"' || ch == '\\' {
            out.push('\\');
        }
        out.push(ch);
    }
    out.push('"');
    out
}

fn render_groups<'a>(groups: impl Iterator<Item = (&'a str, &'a [String])>, stragglers: &[String]) -> String {
    let mut out = String::from("[{\n");
    for (name, members) in groups {
        let members: Vec<String> = members.iter().map(|m| quote(m)).collect();
        out.push_str(&format!("    {}: {{{}}},\n", quote(name), members.join(", ")));
    }
    if !stragglers.is_empty() {
        let s: Vec<String> = stragglers.iter().map(|m| quote(m)).collect();
        out.push_str(&format!("    {},\n", s.join(", ")));
    }
    out.push_str("}]");
    out
}

/// Serializes a corpus back into the VLM output format (two levels only;
/// deeper nodes are dropped). Ingesting the result reproduces the corpus.
pub fn render_vlm_response(corpus: &Corpus) -> String {
    let groups: Vec<(String, Vec<String>)> = corpus
        .roots
        .iter()
        .map(|r| (r.label.clone(), r.children.iter().map(|c| c.label.clone()).collect()))
        .collect();
    render_groups(groups.iter().map(|(n, m)| (n.as_str(), m.as_slice())), &[])
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOutcome {
    pub corpus: Corpus,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Str(String),
    Bare(String),
    Punct(char),
}

fn tokenize(text: &str, warnings: &mut Vec<String>) -> Vec<(Token, usize)> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (pos, ch) = chars[i];
        match ch {
            c if c.is_whitespace() => i += 1,
            '[' | ']' | '{' | '}' | ':' | ',' | '(' | ')' => {
                out.push((Token::Punct(ch), pos));
                i += 1;
            }
            '"' | '\'' => {
                let quote = ch;
                let mut s = String::new();
                i += 1;
                let mut closed = false;
                while i < chars.len() {
                    let c = chars[i].1;
                    if c == '\\' && i + 1 < chars.len() {
                        s.push(chars[i + 1].1);
                        i += 2;
                        continue;
                    }
                    i += 1;
                    if c == quote {
                        closed = true;
                        break;
                    }
                    s.push(c);
                }
                if !closed {
                    warnings.push(format!("unterminated string starting at byte {pos}"));
                }
                out.push((Token::Str(s), pos));
            }
            _ => {
                let mut s = String::new();
                while i < chars.len() {
                    let c = chars[i].1;
                    if c.is_whitespace() || "[]{}:,()\"'".contains(c) {
                        break;
                    }
                    s.push(c);
                    i += 1;
                }
                out.push((Token::Bare(s), pos));
            }
        }
    }
    out
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

struct Group {
    name: String,
    members: Vec<String>,
}

struct Builder {
    groups: Vec<Group>,
    by_key: HashMap<String, usize>,
    warnings: Vec<String>,
}

impl Builder {
    fn group(&mut self, name: &str, announce_merge: bool) -> usize {
        let key = name.to_lowercase();
        if let Some(&idx) = self.by_key.get(&key) {
            if announce_merge {
                self.warnings.push(format!("duplicate group {name:?} merged into {:?}", self.groups[idx].name));
            }
            return idx;
        }
        self.groups.push(Group { name: name.to_string(), members: vec![] });
        self.by_key.insert(key, self.groups.len() - 1);
        self.groups.len() - 1
    }

    fn add_member(&mut self, idx: usize, member: &str) {
        let m = normalize(member);
        if m.is_empty() {
            return;
        }
        let g = &mut self.groups[idx];
        if g.members.iter().any(|x| x.to_lowercase() == m.to_lowercase()) {
            self.warnings.push(format!("duplicate member {m:?} in group {:?} dropped", g.name));
            return;
        }
        g.members.push(m);
    }
}

/// Parses the bracketed `"Key": {"member", ...}` format a keyword-extraction
/// prompt asks for. Keys become level-1 roots and set members their level-2
/// children. Trailing commas, missing separators and single quotes are
/// tolerated; bare strings outside any group are split on commas and filed
/// under a synthesized `Accessories` group.
pub fn ingest_vlm_response(text: &str, domain: &str) -> Result<IngestOutcome, IngestError> {
    if domain.trim().is_empty() {
        return Err(IngestError::EmptyDomain);
    }
    let mut warnings = Vec::new();
    let tokens = tokenize(text, &mut warnings);
    let mut b = Builder { groups: vec![], by_key: HashMap::new(), warnings };
    let mut stragglers: Vec<String> = Vec::new();
    let mut keyed = 0usize;

    let mut i = 0;
    while i < tokens.len() {
        match &tokens[i].0 {
            Token::Str(s) if matches!(tokens.get(i + 1), Some((Token::Punct(':'), _))) => {
                let name = normalize(s);
                i += 2;
                let open = match tokens.get(i) {
                    Some((Token::Punct(c @ ('{' | '[')), _)) => *c,
                    _ => {
                        b.warnings.push(format!("group {name:?} has no member set; skipped"));
                        continue;
                    }
                };
                let close = if open == '{' { '}' } else { ']' };
                i += 1;
                if name.is_empty() {
                    b.warnings.push("group with empty name skipped".into());
                }
                let idx = (!name.is_empty()).then(|| b.group(&name, true));
                while i < tokens.len() {
                    match &tokens[i].0 {
                        Token::Punct(c) if *c == close => {
                            i += 1;
                            break;
                        }
                        Token::Punct(',') => i += 1,
                        Token::Str(m) => {
                            if let Some(idx) = idx {
                                b.add_member(idx, m);
                            }
                            i += 1;
                        }
                        // A key inside an unclosed set means the set ended early.
                        Token::Punct(':') => {
                            b.warnings.push(format!("set for group {name:?} was not closed"));
                            i = i.saturating_sub(1);
                            break;
                        }
                        other => {
                            b.warnings.push(format!("ignored token {other:?} at byte {} in group {name:?}", tokens[i].1));
                            i += 1;
                        }
                    }
                }
                if idx.is_some() {
                    keyed += 1;
                }
            }
            Token::Str(s) => {
                stragglers.extend(s.split(',').map(normalize).filter(|m| !m.is_empty()));
                i += 1;
            }
            Token::Punct(_) => i += 1,
            Token::Bare(w) => {
                b.warnings.push(format!("ignored unquoted text {w:?} at byte {}", tokens[i].1));
                i += 1;
            }
        }
    }

    if keyed == 0 {
        return Err(IngestError::NoGroups);
    }

    let mut provenance = format!("ingested from VLM response ({keyed} keyed groups)");
    if !stragglers.is_empty() {
        let idx = b.group(STRAGGLER_GROUP, false);
        for s in &stragglers {
            b.add_member(idx, s);
        }
        b.warnings.push(format!("{} ungrouped entries filed under {STRAGGLER_GROUP:?}", stragglers.len()));
        provenance.push_str(&format!("; synthesized group {STRAGGLER_GROUP:?} from {} ungrouped entries", stragglers.len()));
    }

    let mut fragments: HashMap<String, String> = HashMap::new();
    let mut roots = Vec::with_capacity(b.groups.len());
    let mut warnings = b.warnings;
    let mut claim = |label: &str, parent: &str, warnings: &mut Vec<String>| -> String {
        let mut fragment = label.to_string();
        let mut n = 1;
        while fragments.contains_key(&fragment.to_lowercase()) {
            fragment = if n == 1 { format!("{label} ({parent})") } else { format!("{label} ({parent} {n})") };
            n += 1;
        }
        if fragment != label {
            warnings.push(format!("{label:?} appears in several groups; prompt for the one under {parent:?} is {fragment:?}"));
        }
        fragments.insert(fragment.to_lowercase(), parent.to_string());
        fragment
    };
    for g in &b.groups {
        let fragment = claim(&g.name, "root", &mut warnings);
        let children = g
            .members
            .iter()
            .map(|m| NodeSpec::new(m.clone(), claim(m, &g.name, &mut warnings)))
            .collect();
        roots.push(NodeSpec::new(g.name.clone(), fragment).with_children(children));
    }

    Ok(IngestOutcome { corpus: Corpus::from_specs(domain.trim(), "1", roots, provenance), warnings })
}
