//! Explanation reports and counterfactual manifests.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backend::ValueSpace;
use crate::scoring::{rank_candidates, CacheEntry, CandidateScore, RankKey, ScoreCache};
use crate::search::{RankedExplanations, SearchEcho, SearchTrace};

pub const REPORT_SCHEMA: &str = "diffex-report/1";
pub const MANIFEST_HEADER: [&str; 6] =
    ["original_id", "edited_id", "semantics", "params_digest", "original_value", "edited_value"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Candidate key: member ids joined with ` + `.
    pub candidate: String,
    pub attribute: String,
    pub paths: Vec<String>,
    pub depth: u32,
    pub f_score: f64,
    pub influence: f64,
    pub n: usize,
}

/// A retained candidate next to the candidate it was expanded from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyLink {
    pub parent: String,
    pub child: String,
    pub parent_score: f64,
    pub child_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub schema: String,
    pub domain: String,
    pub classifier: String,
    pub target_class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_space: Option<ValueSpace>,
    pub rows: Vec<ReportRow>,
    pub hierarchy: Vec<HierarchyLink>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<SearchEcho>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<SearchTrace>,
}

fn row_of(score: &CandidateScore, depth: u32) -> ReportRow {
    ReportRow {
        candidate: score.candidate.key(),
        attribute: score.candidate.label(),
        paths: score.candidate.paths(),
        depth,
        f_score: score.f_score,
        influence: score.influence,
        n: score.n,
    }
}

impl ExplanationReport {
    /// Report over a search result, with its config and trace embedded.
    pub fn from_ranked(
        ranked: &RankedExplanations,
        domain: impl Into<String>,
        classifier: impl Into<String>,
        value_space: Option<ValueSpace>,
    ) -> Self {
        let rows = ranked.entries.iter().map(|e| row_of(&e.score, e.depth)).collect();
        let hierarchy = ranked
            .entries
            .iter()
            .filter_map(|e| {
                let parent = e.parent.as_ref()?;
                Some(HierarchyLink {
                    parent: parent.clone(),
                    child: e.candidate().key(),
                    parent_score: ranked.parent_score(e)?,
                    child_score: e.score.f_score,
                })
            })
            .collect();
        ExplanationReport {
            schema: REPORT_SCHEMA.into(),
            domain: domain.into(),
            classifier: classifier.into(),
            target_class: ranked.config.scoring.target_class.clone(),
            value_space,
            rows,
            hierarchy,
            config: Some(ranked.config.clone()),
            trace: Some(ranked.trace.clone()),
        }
    }

    /// Report over loose scores, ranked by f_score. Depth is the deepest
    /// member level.
    pub fn from_scores(
        domain: impl Into<String>,
        classifier: impl Into<String>,
        target_class: impl Into<String>,
        scores: Vec<CandidateScore>,
    ) -> Self {
        let rows = rank_candidates(scores, RankKey::FScore)
            .iter()
            .map(|s| row_of(s, s.candidate.members.iter().map(|m| m.level).max().unwrap_or(0)))
            .collect();
        ExplanationReport {
            schema: REPORT_SCHEMA.into(),
            domain: domain.into(),
            classifier: classifier.into(),
            target_class: target_class.into(),
            value_space: None,
            rows,
            hierarchy: vec![],
            config: None,
            trace: None,
        }
    }

    pub fn without_config(mut self) -> Self {
        self.config = None;
        self.trace = None;
        self
    }

    pub fn from_json_slice(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }
}

/// The first `k` rows. Hierarchy links whose child was dropped go too.
pub fn top_k(report: &ExplanationReport, k: usize) -> ExplanationReport {
    let mut out = report.clone();
    out.rows.truncate(k);
    out.hierarchy.retain(|h| out.rows.iter().any(|r| r.candidate == h.child));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Markdown,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "json" => Ok(Format::Json),
            "markdown" | "md" => Ok(Format::Markdown),
            "csv" => Ok(Format::Csv),
            other => Err(format!("unknown format {other:?} (expected json, markdown or csv)")),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Json => "json",
            Format::Markdown => "markdown",
            Format::Csv => "csv",
        })
    }
}

/// Formats `x` with six significant digits, dropping trailing zeros.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if !(-5..6).contains(&exp) {
        return format!("{}e{exp}", trim(mantissa.to_string()));
    }
    let rounded: f64 = sci.parse().expect("round trip");
    trim(format!("{:.*}", (5 - exp).max(0) as usize, rounded))
}

fn md_cell(s: &str) -> String {
    s.replace('|', "\\|")
}

/// Renders `report` as canonical JSON (sorted keys, full precision),
/// a markdown score table, or CSV.
pub fn render(report: &ExplanationReport, format: Format) -> Vec<u8> {
    match format {
        Format::Json => {
            let value = serde_json::to_value(report).expect("report serializes");
            let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
            s.push('\n');
            s.into_bytes()
        }
        Format::Markdown => {
            let mut s = String::from("| Domain | Attribute | Score |\n| --- | --- | --- |\n");
            for r in &report.rows {
                s.push_str(&format!(
                    "| {} | {} | {} |\n",
                    md_cell(&report.domain),
                    md_cell(&r.attribute),
                    format_sig6(r.f_score)
                ));
            }
            s.into_bytes()
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["rank", "domain", "attribute", "candidate", "paths", "depth", "f_score", "influence", "n"])
                .expect("in-memory write");
            for (i, r) in report.rows.iter().enumerate() {
                w.write_record([
                    (i + 1).to_string(),
                    report.domain.clone(),
                    r.attribute.clone(),
                    r.candidate.clone(),
                    r.paths.join(" + "),
                    r.depth.to_string(),
                    r.f_score.to_string(),
                    r.influence.to_string(),
                    r.n.to_string(),
                ])
                .expect("in-memory write");
            }
            w.into_inner().expect("in-memory flush")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub original_id: String,
    pub edited_id: String,
    pub semantics: String,
    pub params_digest: String,
    pub original_value: f64,
    pub edited_value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualManifest {
    pub target_class: String,
    pub rows: Vec<ManifestRow>,
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("cache entry for {image_id:?} has no value for class {target:?}")]
    MissingClass { image_id: String, target: String },
    #[error("cache entry for edited image {0:?} has no classified original")]
    MissingOriginal(String),
}

/// One row per cached edit accepted by `filter`, in candidate then image
/// order. An empty cache gives an empty manifest.
pub fn export_manifest(
    cache: &ScoreCache,
    target_class: &str,
    filter: impl Fn(&CacheEntry) -> bool,
) -> Result<CounterfactualManifest, ManifestError> {
    let mut rows = Vec::new();
    for e in cache.entries().into_iter().filter(|e| filter(e)) {
        let missing = || ManifestError::MissingClass { image_id: e.image_id.clone(), target: target_class.into() };
        let original = e.original.as_ref().ok_or_else(|| ManifestError::MissingOriginal(e.edited_image_id.clone()))?;
        rows.push(ManifestRow {
            original_id: e.image_id.clone(),
            edited_id: e.edited_image_id.clone(),
            semantics: e.candidate_key.clone(),
            params_digest: e.params_digest.clone(),
            original_value: original.value_for(target_class).ok_or_else(missing)?,
            edited_value: e.edited.value_for(target_class).ok_or_else(missing)?,
        });
    }
    Ok(CounterfactualManifest { target_class: target_class.into(), rows })
}

impl CounterfactualManifest {
    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(MANIFEST_HEADER).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.original_id.clone(),
                r.edited_id.clone(),
                r.semantics.clone(),
                r.params_digest.clone(),
                r.original_value.to_string(),
                r.edited_value.to_string(),
            ])
            .expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}
