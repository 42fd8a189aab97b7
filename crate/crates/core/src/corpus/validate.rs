use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{slugify, Corpus, Guidance, SemanticNode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    AtLeastOneRoot,
    LevelConsistency,
    SiblingDuplicate,
    EmptyLabel,
    EmptyPrompt,
    DuplicateId,
    IdDerivation,
    /// The same edit semantic (prompt fragment + guidance) placed under two
    /// parents, which would make the taxonomy a DAG rather than a forest.
    MultiParent,
}

impl Rule {
    pub fn as_str(self) -> &'static str {
        match self {
            Rule::AtLeastOneRoot => "at-least-one-root",
            Rule::LevelConsistency => "level-consistency",
            Rule::SiblingDuplicate => "sibling-duplicate",
            Rule::EmptyLabel => "empty-label",
            Rule::EmptyPrompt => "empty-prompt",
            Rule::DuplicateId => "duplicate-id",
            Rule::IdDerivation => "id-derivation",
            Rule::MultiParent => "multi-parent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub rule: Rule,
    /// Label path of the offending node (empty for corpus-level rules).
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn count(&self, rule: Rule) -> usize {
        self.findings.iter().filter(|f| f.rule == rule).count()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.findings.is_empty() {
            return writeln!(f, "ok: no findings");
        }
        for finding in &self.findings {
            let path = if finding.path.is_empty() { "<corpus>" } else { &finding.path };
            writeln!(f, "[{}] {}: {}", finding.rule.as_str(), path, finding.message)?;
        }
        Ok(())
    }
}

struct Walker {
    findings: Vec<Finding>,
    ids: HashMap<String, String>,
    semantics: HashMap<(String, Guidance), String>,
}

impl Walker {
    fn push(&mut self, rule: Rule, path: &str, message: String) {
        self.findings.push(Finding { rule, path: path.to_string(), message });
    }

    fn visit(&mut self, node: &SemanticNode, parent: Option<(&SemanticNode, &str)>, sibling_dup: bool) {
        let path = match parent {
            Some((_, p)) => format!("{p} / {}", node.label),
            None => node.label.clone(),
        };

        let expected_level = parent.map(|(p, _)| p.level + 1).unwrap_or(1);
        if node.level != expected_level {
            let message = match parent {
                Some((p, _)) => format!("level {} but parent is at level {}", node.level, p.level),
                None => format!("root at level {} (roots are level 1)", node.level),
            };
            self.push(Rule::LevelConsistency, &path, message);
        }
        if node.label.trim().is_empty() {
            self.push(Rule::EmptyLabel, &path, "label is empty".into());
        }
        if node.prompt_fragment.trim().is_empty() {
            self.push(Rule::EmptyPrompt, &path, "prompt_fragment is empty".into());
        }

        let expected_id = match parent {
            Some((p, _)) => format!("{}/{}", p.id, slugify(&node.label)),
            None => slugify(&node.label),
        };
        if node.id != expected_id {
            self.push(Rule::IdDerivation, &path, format!("id {:?} should be {:?}", node.id, expected_id));
        }
        match self.ids.get(&node.id) {
            // A case-insensitive sibling duplicate already explains the collision.
            Some(_) if sibling_dup => {}
            Some(first) => {
                let message = format!("id {:?} already used by {first}", node.id);
                self.push(Rule::DuplicateId, &path, message);
            }
            None => {
                self.ids.insert(node.id.clone(), path.clone());
            }
        }

        let key = (node.prompt_fragment.trim().to_lowercase(), node.guidance);
        if !key.0.is_empty() && !sibling_dup {
            match self.semantics.get(&key) {
                Some(first) => {
                    let message = format!(
                        "semantic {:?} ({}) appears under two parents: {first} and {path}",
                        node.prompt_fragment.trim(),
                        node.guidance
                    );
                    self.push(Rule::MultiParent, &path, message);
                }
                None => {
                    self.semantics.insert(key, path.clone());
                }
            }
        }

        let mut seen: HashMap<String, &str> = HashMap::new();
        for child in &node.children {
            let dup = self.check_sibling(&mut seen, child, &path);
            self.visit(child, Some((node, &path)), dup);
        }
    }

    fn check_sibling<'n>(&mut self, seen: &mut HashMap<String, &'n str>, node: &'n SemanticNode, parent_path: &str) -> bool {
        let folded = node.label.trim().to_lowercase();
        if let Some(first) = seen.get(&folded) {
            let path = if parent_path.is_empty() { node.label.clone() } else { format!("{parent_path} / {}", node.label) };
            let message = format!("label {:?} duplicates sibling {:?} (case-insensitive)", node.label, first);
            self.push(Rule::SiblingDuplicate, &path, message);
            true
        } else {
            seen.insert(folded, &node.label);
            false
        }
    }
}

/// Checks every corpus invariant and reports all violations found.
pub fn validate_corpus(corpus: &Corpus) -> ValidationReport {
    let mut w = Walker { findings: vec![], ids: HashMap::new(), semantics: HashMap::new() };
    if corpus.roots.is_empty() {
        w.push(Rule::AtLeastOneRoot, "", "corpus must have at least one root".into());
    }
    let mut seen = HashMap::new();
    for root in &corpus.roots {
        let dup = w.check_sibling(&mut seen, root, "");
        w.visit(root, None, dup);
    }
    ValidationReport { findings: w.findings }
}
