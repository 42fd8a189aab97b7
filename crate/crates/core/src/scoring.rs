//! Candidate scoring over a sample image set.
//!
//! For a candidate `s` and sample images `x_1..x_N`, each image is edited
//! into `x'_i = g(x_i, s)` and both versions are classified for the target
//! class `y`. Three aggregates are available:
//!
//! * mean edited score: `(1/N) Σ C(x'_i)`, the quantity the beam search
//!   maximizes;
//! * mean absolute delta: `(1/N) Σ |f(x'_i, y) − f(x_i, y)|`, the influence
//!   `I(s)`, always reported;
//! * mean signed delta: `(1/N) Σ (f(x'_i, y) − f(x_i, y))`, used for ranking
//!   tables.
//!
//! Sums are taken in image-id order so aggregates do not depend on the order
//! of the sample list.

use std::cmp::Ordering as CmpOrdering;
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::RwLock;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{BackendError, BackendSession, ClassifierOutput, EditParams, ImageRef, SemanticEdit, ValueSpace};
use crate::corpus::Semantic;

/// An ordered set of semantics applied together as one edit.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Candidate {
    pub members: Vec<Semantic>,
}

impl Candidate {
    pub fn empty() -> Self {
        Candidate::default()
    }

    pub fn single(s: Semantic) -> Self {
        Candidate { members: vec![s] }
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn last(&self) -> Option<&Semantic> {
        self.members.last()
    }

    /// Order-preserving cache key; edits need not commute.
    pub fn key(&self) -> String {
        self.members.iter().map(|m| m.id.as_str()).collect::<Vec<_>>().join(" + ")
    }

    /// Human label: member labels joined with ` + `.
    pub fn label(&self) -> String {
        self.members.iter().map(|m| m.label()).collect::<Vec<_>>().join(" + ")
    }

    pub fn paths(&self) -> Vec<String> {
        self.members.iter().map(Semantic::path_string).collect()
    }

    pub fn edits(&self) -> Vec<SemanticEdit> {
        self.members.iter().map(SemanticEdit::from).collect()
    }

    /// Lexicographic comparison of member path strings (labels joined with
    /// `/`); the ranking tie-breaker.
    pub fn cmp_paths(&self, other: &Candidate) -> CmpOrdering {
        self.paths().cmp(&other.paths())
    }

    pub fn with_appended(&self, s: Semantic) -> Candidate {
        let mut members = self.members.clone();
        members.push(s);
        Candidate { members }
    }

    pub fn with_last_replaced(&self, s: Semantic) -> Candidate {
        let mut members = self.members.clone();
        match members.last_mut() {
            Some(last) => *last = s,
            None => members.push(s),
        }
        Candidate { members }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    MeanEditedScore,
    MeanAbsDelta,
    #[default]
    MeanSignedDelta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub sample_image_ids: Vec<String>,
    pub target_class: String,
    #[serde(default)]
    pub score_mode: ScoreMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_space_override: Option<ValueSpace>,
}

impl ScoringConfig {
    pub fn new(sample_image_ids: Vec<String>, target_class: impl Into<String>) -> Self {
        ScoringConfig {
            sample_image_ids,
            target_class: target_class.into(),
            score_mode: ScoreMode::default(),
            value_space_override: None,
        }
    }

    pub fn with_mode(mut self, mode: ScoreMode) -> Self {
        self.score_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), ScoreError> {
        if self.sample_image_ids.is_empty() {
            return Err(ScoreError::Config("at least one sample image is required".into()));
        }
        if self.target_class.trim().is_empty() {
            return Err(ScoreError::Config("target class is empty".into()));
        }
        Ok(())
    }

    /// Value space the scores are expressed in.
    pub fn value_space(&self, session: &BackendSession) -> ValueSpace {
        self.value_space_override.unwrap_or_else(|| session.value_space())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: String,
    pub original_value: f64,
    pub edited_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub candidate: Candidate,
    pub f_score: f64,
    pub influence: f64,
    pub per_image: Vec<ImageScore>,
    pub n: usize,
}

/// `(f_score, influence)` for `per_image` under `mode`.
pub fn aggregate(per_image: &[ImageScore], mode: ScoreMode) -> (f64, f64) {
    let mut sorted: Vec<&ImageScore> = per_image.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let n = sorted.len() as f64;
    if sorted.is_empty() {
        return (0.0, 0.0);
    }
    let mut edited = 0.0;
    let mut abs = 0.0;
    let mut signed = 0.0;
    for s in &sorted {
        let d = s.edited_value - s.original_value;
        edited += s.edited_value;
        abs += d.abs();
        signed += d;
    }
    let f = match mode {
        ScoreMode::MeanEditedScore => edited / n,
        ScoreMode::MeanAbsDelta => abs / n,
        ScoreMode::MeanSignedDelta => signed / n,
    };
    (f, abs / n)
}

impl CandidateScore {
    pub fn from_images(candidate: Candidate, per_image: Vec<ImageScore>, mode: ScoreMode) -> Self {
        let (f_score, influence) = aggregate(&per_image, mode);
        let n = per_image.len();
        CandidateScore { candidate, f_score, influence, per_image, n }
    }

    pub fn key(&self, by: RankKey) -> f64 {
        match by {
            RankKey::FScore => self.f_score,
            RankKey::Influence => self.influence,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankKey {
    #[default]
    FScore,
    Influence,
}

/// Total order used everywhere scores are ranked: descending key, then
/// lexicographic candidate path.
pub fn rank_order(a: &CandidateScore, b: &CandidateScore, by: RankKey) -> CmpOrdering {
    b.key(by).total_cmp(&a.key(by)).then_with(|| a.candidate.cmp_paths(&b.candidate))
}

pub fn rank_candidates(mut scores: Vec<CandidateScore>, by: RankKey) -> Vec<CandidateScore> {
    scores.sort_by(|a, b| rank_order(a, b, by));
    scores
}

#[derive(Debug, thiserror::Error)]
pub enum ScoreError {
    #[error("invalid scoring config: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("scoring {candidate:?} failed after {} of {total} images: {source}", completed.len())]
    Partial {
        candidate: String,
        completed: Vec<ImageScore>,
        total: usize,
        #[source]
        source: BackendError,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct CacheKey {
    image_id: String,
    candidate: String,
    params: String,
}

impl CacheKey {
    fn digest(&self) -> String {
        let mut h = Sha256::new();
        for part in [&self.image_id, &self.candidate, &self.params] {
            h.update(part.as_bytes());
            h.update([0u8]);
        }
        hex::encode(&h.finalize()[..12])
    }
}

#[derive(Debug, Clone, PartialEq)]
struct CachedEdit {
    edited_image_id: String,
    label: String,
    output: ClassifierOutput,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub entries: u64,
}

/// Memo of edited-image classifications keyed by
/// `(image, candidate, params digest)`, plus classifications of originals.
#[derive(Default)]
pub struct ScoreCache {
    edits: RwLock<HashMap<CacheKey, CachedEdit>>,
    originals: RwLock<HashMap<String, ClassifierOutput>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

/// One cached edit as seen from outside.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub key_digest: String,
    pub image_id: String,
    pub candidate_key: String,
    pub candidate_label: String,
    pub params_digest: String,
    pub edited_image_id: String,
    pub original: Option<ClassifierOutput>,
    pub edited: ClassifierOutput,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    key_digest: String,
    image_id: String,
    candidate: String,
    label: String,
    params_digest: String,
    edited_image_id: String,
    value_space: ValueSpace,
    labels: Vec<String>,
    original_values: Vec<f64>,
    edited_values: Vec<f64>,
}

impl ScoreCache {
    pub fn new() -> Self {
        ScoreCache::default()
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::SeqCst),
            misses: self.misses.load(Ordering::SeqCst),
            entries: self.edits.read().len() as u64,
        }
    }

    /// Classification of an original image, asking the backend at most once.
    pub fn original(&self, session: &BackendSession, image: &ImageRef, target: &str) -> Result<ClassifierOutput, BackendError> {
        if let Some(o) = self.originals.read().get(&image.id) {
            return Ok(o.clone());
        }
        let mut originals = self.originals.write();
        if let Some(o) = originals.get(&image.id) {
            return Ok(o.clone());
        }
        let out = session.classify(image, target)?;
        originals.insert(image.id.clone(), out.clone());
        Ok(out)
    }

    /// Snapshot of every cached edit, sorted by candidate key then image id.
    pub fn entries(&self) -> Vec<CacheEntry> {
        let edits = self.edits.read();
        let originals = self.originals.read();
        let mut keys: Vec<&CacheKey> = edits.keys().collect();
        keys.sort_by(|a, b| (&a.candidate, &a.image_id, &a.params).cmp(&(&b.candidate, &b.image_id, &b.params)));
        keys.into_iter()
            .map(|k| {
                let e = &edits[k];
                CacheEntry {
                    key_digest: k.digest(),
                    image_id: k.image_id.clone(),
                    candidate_key: k.candidate.clone(),
                    candidate_label: e.label.clone(),
                    params_digest: k.params.clone(),
                    edited_image_id: e.edited_image_id.clone(),
                    original: originals.get(&k.image_id).cloned(),
                    edited: e.output.clone(),
                }
            })
            .collect()
    }

    /// Writes one JSON object per cached edit.
    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in self.entries() {
            let Some(original) = &e.original else { continue };
            let line = CacheLine {
                key_digest: e.key_digest,
                image_id: e.image_id,
                candidate: e.candidate_key,
                label: e.candidate_label,
                params_digest: e.params_digest,
                edited_image_id: e.edited_image_id,
                value_space: e.edited.value_space,
                labels: e.edited.class_labels.clone(),
                original_values: original.values.clone(),
                edited_values: e.edited.values,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    /// Restores a cache written by [`ScoreCache::save_jsonl`]. Counters
    /// start at zero.
    pub fn load_jsonl(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let cache = ScoreCache::new();
        let reader = std::io::BufReader::new(std::fs::File::open(path)?);
        {
            let mut edits = cache.edits.write();
            let mut originals = cache.originals.write();
            for (no, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let l: CacheLine = serde_json::from_str(&line).map_err(|e| {
                    std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", no + 1))
                })?;
                let key = CacheKey { image_id: l.image_id.clone(), candidate: l.candidate, params: l.params_digest };
                if key.digest() != l.key_digest {
                    return Err(std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("line {}: key digest mismatch", no + 1),
                    ));
                }
                let output = |values| ClassifierOutput { class_labels: l.labels.clone(), values, value_space: l.value_space };
                originals.entry(l.image_id).or_insert_with(|| output(l.original_values));
                edits.insert(key, CachedEdit { edited_image_id: l.edited_image_id, label: l.label, output: output(l.edited_values.clone()) });
            }
        }
        Ok(cache)
    }
}

fn domain_of(session: &BackendSession) -> String {
    session.info().domains.first().cloned().unwrap_or_default()
}

fn target_value(out: &ClassifierOutput, target: &str) -> Result<f64, BackendError> {
    out.value_for(target).ok_or_else(|| BackendError::UnknownLabel {
        label: target.to_string(),
        valid: out.class_labels.clone(),
    })
}

/// Classifies every sample original once, ahead of concurrent scoring.
pub fn warm_originals(config: &ScoringConfig, session: &BackendSession, cache: &ScoreCache) -> Result<(), ScoreError> {
    config.validate()?;
    session.check_label(&config.target_class)?;
    let domain = domain_of(session);
    for id in &config.sample_image_ids {
        cache.original(session, &ImageRef::original(id, &domain), &config.target_class)?;
    }
    Ok(())
}

/// Scores one candidate. Cache writes are committed only if every sample
/// image succeeds.
pub fn score_candidate(
    candidate: &Candidate,
    config: &ScoringConfig,
    session: &BackendSession,
    params: &EditParams,
    cache: &ScoreCache,
) -> Result<CandidateScore, ScoreError> {
    config.validate()?;
    session.check_label(&config.target_class)?;
    params.validate()?;
    let target = config.target_class.as_str();
    let domain = domain_of(session);
    let cand_key = candidate.key();
    let params_digest = params.digest();
    let edits = candidate.edits();

    let mut per_image = Vec::with_capacity(config.sample_image_ids.len());
    let mut fresh: Vec<(CacheKey, CachedEdit)> = Vec::new();
    let partial = |completed: &[ImageScore], source: BackendError| ScoreError::Partial {
        candidate: cand_key.clone(),
        completed: completed.to_vec(),
        total: config.sample_image_ids.len(),
        source,
    };

    for id in &config.sample_image_ids {
        let image = ImageRef::original(id, &domain);
        let original = cache.original(session, &image, target).map_err(|e| partial(&per_image, e))?;
        let original_value = target_value(&original, target).map_err(|e| partial(&per_image, e))?;
        let key = CacheKey { image_id: id.clone(), candidate: cand_key.clone(), params: params_digest.clone() };

        let cached = cache.edits.read().get(&key).map(|c| c.output.clone());
        let edited_out = match cached {
            Some(out) => {
                cache.hits.fetch_add(1, Ordering::SeqCst);
                out
            }
            None => {
                cache.misses.fetch_add(1, Ordering::SeqCst);
                let edited = session.edit(&image, &edits, params).map_err(|e| partial(&per_image, e))?;
                let out = session.classify(&edited, target).map_err(|e| partial(&per_image, e))?;
                fresh.push((
                    key,
                    CachedEdit { edited_image_id: edited.id, label: candidate.label(), output: out.clone() },
                ));
                out
            }
        };
        let edited_value = target_value(&edited_out, target).map_err(|e| partial(&per_image, e))?;
        per_image.push(ImageScore { image_id: id.clone(), original_value, edited_value });
    }

    if !fresh.is_empty() {
        let mut edits = cache.edits.write();
        for (k, v) in fresh {
            edits.entry(k).or_insert(v);
        }
    }
    Ok(CandidateScore::from_images(candidate.clone(), per_image, config.score_mode))
}

/// Scores candidates concurrently on at most `parallelism` threads. Results
/// come back in input order.
pub fn score_many(
    candidates: &[Candidate],
    config: &ScoringConfig,
    session: &BackendSession,
    params: &EditParams,
    cache: &ScoreCache,
    parallelism: usize,
) -> Result<Vec<CandidateScore>, ScoreError> {
    if parallelism <= 1 || candidates.len() <= 1 {
        return candidates.iter().map(|c| score_candidate(c, config, session, params, cache)).collect();
    }
    warm_originals(config, session, cache)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| ScoreError::Config(format!("cannot start scoring pool: {e}")))?;
    pool.install(|| {
        candidates
            .par_iter()
            .map(|c| score_candidate(c, config, session, params, cache))
            .collect()
    })
}
