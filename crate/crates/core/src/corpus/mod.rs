//! Hierarchical semantic corpus: the attribute forest the search walks.
//!
//! A corpus is a forest of [`SemanticNode`]s. Level-1 nodes are broad groups
//! ("Beak"), deeper levels are finer-grained variants ("Beak Color",
//! "Yellow"). Node ids and levels are derived from position and never stored
//! in the on-disk format.

mod validate;
pub mod vlm;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use validate::{validate_corpus, Finding, Rule, ValidationReport};
pub use vlm::{build_vlm_prompt, ingest_vlm_response, render_vlm_response, IngestOutcome, SampleGroup, VlmPromptSpec};

/// Schema tag carried by every corpus file.
pub const CORPUS_SCHEMA: &str = "diffex-corpus/1";

/// Edit direction for a semantic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Guidance {
    #[default]
    Add,
    Remove,
}

impl fmt::Display for Guidance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Guidance::Add => f.write_str("add"),
            Guidance::Remove => f.write_str("remove"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticNode {
    pub id: String,
    pub label: String,
    pub level: u32,
    pub prompt_fragment: String,
    pub guidance: Guidance,
    pub children: Vec<SemanticNode>,
}

impl SemanticNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub domain: String,
    pub version: String,
    pub roots: Vec<SemanticNode>,
    pub provenance: String,
}

/// A node resolved against its corpus: everything an edit backend or a
/// report needs without holding a reference into the tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Semantic {
    pub id: String,
    /// Labels from the root down to this node.
    pub path: Vec<String>,
    pub prompt_fragment: String,
    pub guidance: Guidance,
    pub level: u32,
}

impl Semantic {
    pub fn label(&self) -> &str {
        self.path.last().map(String::as_str).unwrap_or("")
    }

    /// Root-to-node labels joined with `/`; the key used for tie-breaking.
    pub fn path_string(&self) -> String {
        self.path.join("/")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("unsupported corpus schema {found:?} (expected {CORPUS_SCHEMA:?})")]
    Schema { found: String },
    #[error("corpus failed validation:\n{0}")]
    Invalid(ValidationReport),
}

/// Lowercase slug: alphanumerics kept, every other run collapsed to `-`.
pub fn slugify(label: &str) -> String {
    let mut out = String::with_capacity(label.len());
    let mut pending_dash = false;
    for ch in label.chars() {
        if ch.is_alphanumeric() {
            if pending_dash && !out.is_empty() {
                out.push('-');
            }
            pending_dash = false;
            out.extend(ch.to_lowercase());
        } else {
            pending_dash = true;
        }
    }
    if out.is_empty() {
        out.push('_');
    }
    out
}

impl SemanticNode {
    /// Builds a node (and its subtree) at `level` under `parent_id`, deriving
    /// ids and levels from position.
    pub fn derive(
        parent_id: Option<&str>,
        level: u32,
        label: impl Into<String>,
        prompt_fragment: impl Into<String>,
        guidance: Guidance,
        children: Vec<NodeSpec>,
    ) -> Self {
        let label = label.into();
        let id = match parent_id {
            Some(p) => format!("{p}/{}", slugify(&label)),
            None => slugify(&label),
        };
        let children = children
            .into_iter()
            .map(|c| c.into_node(Some(&id), level + 1))
            .collect();
        SemanticNode { id, label, level, prompt_fragment: prompt_fragment.into(), guidance, children }
    }
}

/// Position-free node description, the shape stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub label: String,
    pub prompt_fragment: String,
    #[serde(default)]
    pub guidance: Guidance,
    #[serde(default)]
    pub children: Vec<NodeSpec>,
}

impl NodeSpec {
    pub fn new(label: impl Into<String>, prompt_fragment: impl Into<String>) -> Self {
        NodeSpec { label: label.into(), prompt_fragment: prompt_fragment.into(), guidance: Guidance::Add, children: vec![] }
    }

    /// Leaf whose prompt fragment is its label.
    pub fn leaf(label: impl Into<String>) -> Self {
        let label = label.into();
        NodeSpec::new(label.clone(), label)
    }

    pub fn with_children(mut self, children: Vec<NodeSpec>) -> Self {
        self.children = children;
        self
    }

    pub fn with_guidance(mut self, guidance: Guidance) -> Self {
        self.guidance = guidance;
        self
    }

    fn into_node(self, parent_id: Option<&str>, level: u32) -> SemanticNode {
        SemanticNode::derive(parent_id, level, self.label, self.prompt_fragment, self.guidance, self.children)
    }

    fn from_node(node: &SemanticNode) -> Self {
        NodeSpec {
            label: node.label.clone(),
            prompt_fragment: node.prompt_fragment.clone(),
            guidance: node.guidance,
            children: node.children.iter().map(NodeSpec::from_node).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusFile {
    schema: String,
    domain: String,
    version: String,
    roots: Vec<NodeSpec>,
}

impl Corpus {
    /// Assembles a corpus from position-free node specs. No validation.
    pub fn from_specs(
        domain: impl Into<String>,
        version: impl Into<String>,
        roots: Vec<NodeSpec>,
        provenance: impl Into<String>,
    ) -> Self {
        Corpus {
            domain: domain.into(),
            version: version.into(),
            roots: roots.into_iter().map(|r| r.into_node(None, 1)).collect(),
            provenance: provenance.into(),
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self, CorpusError> {
        let file: CorpusFile = serde_json::from_str(text).map_err(|e| CorpusError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if file.schema != CORPUS_SCHEMA {
            return Err(CorpusError::Schema { found: file.schema });
        }
        let corpus = Corpus::from_specs(file.domain, file.version, file.roots, String::new());
        let report = validate_corpus(&corpus);
        if !report.is_clean() {
            return Err(CorpusError::Invalid(report));
        }
        Ok(corpus)
    }

    /// Pretty JSON in the `diffex-corpus/1` schema, newline terminated.
    pub fn to_json_string(&self) -> String {
        let file = CorpusFile {
            schema: CORPUS_SCHEMA.to_string(),
            domain: self.domain.clone(),
            version: self.version.clone(),
            roots: self.roots.iter().map(NodeSpec::from_node).collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("corpus serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string())
            .map_err(|source| CorpusError::Io { path: path.display().to_string(), source })
    }

    /// Structural equality: domain, version and the node forest. Provenance
    /// is not part of the file format and is ignored.
    pub fn structurally_eq(&self, other: &Corpus) -> bool {
        self.domain == other.domain && self.version == other.version && self.roots == other.roots
    }

    /// Pre-order walk over every node.
    pub fn walk(&self) -> impl Iterator<Item = &SemanticNode> {
        let mut stack: Vec<&SemanticNode> = self.roots.iter().rev().collect();
        std::iter::from_fn(move || {
            let node = stack.pop()?;
            stack.extend(node.children.iter().rev());
            Some(node)
        })
    }

    pub fn node_count(&self) -> usize {
        self.walk().count()
    }

    pub fn depth(&self) -> u32 {
        self.walk().map(|n| n.level).max().unwrap_or(0)
    }

    /// Nodes at `level` in pre-order. Levels beyond the depth yield nothing.
    pub fn nodes_at_level(&self, level: u32) -> Vec<&SemanticNode> {
        self.walk().filter(|n| n.level == level).collect()
    }

    /// Largest number of nodes sharing one level.
    pub fn branching_width(&self) -> usize {
        (1..=self.depth()).map(|l| self.nodes_at_level(l).len()).max().unwrap_or(0)
    }

    pub fn index(&self) -> CorpusIndex<'_> {
        CorpusIndex::new(self)
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
    let mut corpus = Corpus::from_json_str(&text)?;
    corpus.provenance = format!("loaded from {}", path.display());
    Ok(corpus)
}

/// Id-addressed view of a corpus with parent links and resolved paths.
pub struct CorpusIndex<'a> {
    entries: HashMap<&'a str, IndexEntry<'a>>,
    order: Vec<&'a str>,
}

struct IndexEntry<'a> {
    node: &'a SemanticNode,
    parent: Option<&'a str>,
    path: Vec<String>,
}

impl<'a> CorpusIndex<'a> {
    fn new(corpus: &'a Corpus) -> Self {
        fn visit<'a>(
            node: &'a SemanticNode,
            parent: Option<&'a str>,
            prefix: &[String],
            entries: &mut HashMap<&'a str, IndexEntry<'a>>,
        ) {
            let mut path = prefix.to_vec();
            path.push(node.label.clone());
            for child in &node.children {
                visit(child, Some(&node.id), &path, entries);
            }
            // First occurrence wins; duplicate ids are a validation finding.
            entries.entry(&node.id).or_insert(IndexEntry { node, parent, path });
        }
        let mut entries = HashMap::new();
        for root in &corpus.roots {
            visit(root, None, &[], &mut entries);
        }
        let order = corpus.walk().map(|n| n.id.as_str()).collect();
        CorpusIndex { entries, order }
    }

    pub fn node(&self, id: &str) -> Option<&'a SemanticNode> {
        self.entries.get(id).map(|e| e.node)
    }

    pub fn parent_of(&self, id: &str) -> Option<&'a str> {
        self.entries.get(id).and_then(|e| e.parent)
    }

    pub fn semantic(&self, id: &str) -> Option<Semantic> {
        let e = self.entries.get(id)?;
        Some(Semantic {
            id: e.node.id.clone(),
            path: e.path.clone(),
            prompt_fragment: e.node.prompt_fragment.clone(),
            guidance: e.node.guidance,
            level: e.node.level,
        })
    }

    /// Ids in pre-order.
    pub fn ids(&self) -> &[&'a str] {
        &self.order
    }

    /// Looks a node up by id, falling back to a unique case-insensitive
    /// label match.
    pub fn resolve(&self, key: &str) -> Option<&'a SemanticNode> {
        if let Some(n) = self.node(key) {
            return Some(n);
        }
        let mut hits = self.order.iter().filter_map(|id| {
            let n = self.entries[id].node;
            n.label.eq_ignore_ascii_case(key).then_some(n)
        });
        let first = hits.next()?;
        hits.next().is_none().then_some(first)
    }
}
