//! Hierarchical beam search over a semantic corpus, joint-attribute search,
//! and an exhaustive baseline used as a test oracle.
//!
//! Each level scores its whole candidate set (optionally in parallel) before
//! anything is selected, and selection sorts with [`rank_order`], so results
//! do not depend on scheduling.

use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendSession, CallCounts, EditParams};
use crate::corpus::{Corpus, CorpusIndex, Semantic};
use crate::scoring::{
    rank_order, score_many, warm_originals, Candidate, CandidateScore, RankKey, ScoreCache, ScoreError, ScoringConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionMode {
    /// The child replaces the tail of the parent candidate.
    #[default]
    Refine,
    /// The child is appended as an extra joint member.
    Augment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdScope {
    #[default]
    RootOnly,
    EveryLevel,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_width: usize,
    /// Minimum score to enter the beam; `None` admits everything.
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub max_depth: Option<u32>,
    #[serde(default)]
    pub expansion_mode: ExpansionMode,
    #[serde(default)]
    pub improvement_epsilon: f64,
    #[serde(default)]
    pub threshold_scope: ThresholdScope,
    /// Scoring threads per level. Does not affect results, so it is not
    /// serialized.
    #[serde(skip_serializing, default = "one")]
    pub parallelism: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_width: 5,
            threshold: None,
            max_depth: None,
            expansion_mode: ExpansionMode::Refine,
            improvement_epsilon: 0.0,
            threshold_scope: ThresholdScope::RootOnly,
            parallelism: 1,
        }
    }
}

impl BeamConfig {
    pub fn new(beam_width: usize, threshold: Option<f64>) -> Self {
        BeamConfig { beam_width, threshold, ..BeamConfig::default() }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: String| Err(SearchError::Config(m));
        if self.beam_width == 0 {
            return bad("beam_width must be at least 1".into());
        }
        if !(self.improvement_epsilon >= 0.0 && self.improvement_epsilon.is_finite()) {
            return bad(format!("improvement_epsilon {} must be a finite value >= 0", self.improvement_epsilon));
        }
        if self.threshold.is_some_and(f64::is_nan) {
            return bad("threshold is NaN".into());
        }
        if self.max_depth == Some(0) {
            return bad("max_depth must be at least 1".into());
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        Ok(())
    }

    fn passes_threshold(&self, f: f64, depth: u32) -> bool {
        let applies = depth == 1 || self.threshold_scope == ThresholdScope::EveryLevel;
        match self.threshold {
            Some(t) if applies => f >= t,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelTrace {
    pub depth: u32,
    pub generated: usize,
    pub scored: usize,
    pub pruned_threshold: usize,
    pub pruned_improvement: usize,
    /// Survivors that did not fit in the beam.
    pub pruned_beam: usize,
    /// Beam size after selection.
    pub retained: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub levels: Vec<LevelTrace>,
    pub edit_calls: u64,
    pub classify_calls: u64,
    #[serde(skip)]
    pub wall_time_ms: f64,
}

impl SearchTrace {
    pub fn max_beam(&self) -> usize {
        self.levels.iter().map(|l| l.retained).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SearchMethod {
    Discover,
    Joint { seeds: Vec<String>, max_combo: usize },
    BruteForce { max_combo: usize },
}

/// Everything needed to re-run a search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchEcho {
    pub method: SearchMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beam: Option<BeamConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expansion_mode: Option<ExpansionMode>,
    pub scoring: ScoringConfig,
    pub params: EditParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub score: CandidateScore,
    pub depth: u32,
    /// Key of the candidate this one was expanded from.
    pub parent: Option<String>,
}

impl RankedEntry {
    pub fn candidate(&self) -> &Candidate {
        &self.score.candidate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedExplanations {
    pub entries: Vec<RankedEntry>,
    pub trace: SearchTrace,
    pub config: SearchEcho,
}

impl RankedExplanations {
    pub fn find(&self, key: &str) -> Option<&RankedEntry> {
        self.entries.iter().find(|e| e.candidate().key() == key)
    }

    /// Score of each entry's parent, where the parent is also an entry.
    pub fn parent_score(&self, entry: &RankedEntry) -> Option<f64> {
        entry.parent.as_deref().and_then(|k| self.find(k)).map(|p| p.score.f_score)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error("corpus has no roots")]
    EmptyCorpus,
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("exhaustive search would score {count} candidates, above the safety bound of {bound}")]
    BoundExceeded { count: u128, bound: usize },
    #[error(transparent)]
    Score(#[from] ScoreError),
}

fn sort_entries(entries: &mut [RankedEntry]) {
    entries.sort_by(|a, b| rank_order(&a.score, &b.score, RankKey::FScore));
}

struct Run<'a> {
    scoring: &'a ScoringConfig,
    session: &'a BackendSession,
    params: &'a EditParams,
    cache: &'a ScoreCache,
    parallelism: usize,
    start_calls: CallCounts,
    started: Instant,
}

impl<'a> Run<'a> {
    fn new(
        scoring: &'a ScoringConfig,
        session: &'a BackendSession,
        params: &'a EditParams,
        cache: &'a ScoreCache,
        parallelism: usize,
    ) -> Result<Self, SearchError> {
        params.validate().map_err(ScoreError::from)?;
        let run = Run { scoring, session, params, cache, parallelism, start_calls: session.calls(), started: Instant::now() };
        warm_originals(scoring, session, cache)?;
        Ok(run)
    }

    fn score(&self, cands: &[Candidate]) -> Result<Vec<CandidateScore>, SearchError> {
        Ok(score_many(cands, self.scoring, self.session, self.params, self.cache, self.parallelism)?)
    }

    fn finish(&self, levels: Vec<LevelTrace>) -> SearchTrace {
        let now = self.session.calls();
        SearchTrace {
            levels,
            edit_calls: now.edit - self.start_calls.edit,
            classify_calls: now.classify - self.start_calls.classify,
            wall_time_ms: self.started.elapsed().as_secs_f64() * 1e3,
        }
    }
}

/// One pending expansion: the candidate plus the beam member it came from.
struct Expansion {
    candidate: Candidate,
    parent: Option<CandidateScore>,
}

/// Survivors of one level with their parent keys.
type Selected = Vec<(CandidateScore, Option<String>)>;

/// Scores `expansions`, applies the threshold and improvement filters, and
/// returns the top-`B` survivors with their parent keys.
fn select_level(
    run: &Run<'_>,
    config: &BeamConfig,
    depth: u32,
    expansions: Vec<Expansion>,
) -> Result<(Selected, LevelTrace), SearchError> {
    let generated = expansions.len();
    let mut seen = HashSet::new();
    let expansions: Vec<Expansion> = expansions.into_iter().filter(|e| seen.insert(e.candidate.key())).collect();
    let cands: Vec<Candidate> = expansions.iter().map(|e| e.candidate.clone()).collect();
    let scores = run.score(&cands)?;

    let mut trace = LevelTrace { depth, generated, scored: scores.len(), ..LevelTrace::default() };
    let mut survivors = Vec::new();
    for (score, exp) in scores.into_iter().zip(expansions) {
        if !config.passes_threshold(score.f_score, depth) {
            trace.pruned_threshold += 1;
            continue;
        }
        if let Some(p) = &exp.parent {
            let improves = score.f_score > p.f_score + config.improvement_epsilon;
            if !improves {
                trace.pruned_improvement += 1;
                continue;
            }
        }
        survivors.push((score, exp.parent.map(|p| p.candidate.key())));
    }
    survivors.sort_by(|a, b| rank_order(&a.0, &b.0, RankKey::FScore));
    trace.pruned_beam = survivors.len().saturating_sub(config.beam_width);
    survivors.truncate(config.beam_width);
    trace.retained = survivors.len();
    Ok((survivors, trace))
}

/// Generic level loop shared by [`discover`] and [`joint_search`].
fn beam_loop(
    run: &Run<'_>,
    config: &BeamConfig,
    initial: Vec<Candidate>,
    depth_limit: Option<u32>,
    mut expand: impl FnMut(&Candidate) -> Vec<Candidate>,
) -> Result<(Vec<RankedEntry>, Vec<LevelTrace>), SearchError> {
    let mut entries = Vec::new();
    let mut levels = Vec::new();
    let mut pending: Vec<Expansion> = initial.into_iter().map(|candidate| Expansion { candidate, parent: None }).collect();
    let mut depth = 1u32;
    let limit = match (config.max_depth, depth_limit) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    while !pending.is_empty() {
        let (beam, trace) = select_level(run, config, depth, pending)?;
        levels.push(trace);
        log::debug!("depth {depth}: beam of {}", beam.len());
        entries.extend(beam.iter().map(|(s, parent)| RankedEntry { score: s.clone(), depth, parent: parent.clone() }));
        if limit.is_some_and(|l| depth >= l) {
            break;
        }
        pending = beam
            .into_iter()
            .flat_map(|(s, _)| {
                expand(&s.candidate)
                    .into_iter()
                    .map(|candidate| Expansion { candidate, parent: Some(s.clone()) })
                    .collect::<Vec<_>>()
            })
            .collect();
        depth += 1;
    }
    sort_entries(&mut entries);
    Ok((entries, levels))
}

fn semantic_of(index: &CorpusIndex<'_>, id: &str) -> Semantic {
    index.semantic(id).expect("ids come from the same corpus")
}

/// Hierarchical beam search: score the roots, keep the best `B` at or above
/// the threshold, then repeatedly expand each beam member by the children of
/// its last semantic, keeping only expansions that improve on their parent.
/// Returns every candidate that was ever in the beam.
pub fn discover(
    corpus: &Corpus,
    config: &BeamConfig,
    scoring: &ScoringConfig,
    session: &BackendSession,
    params: &EditParams,
    cache: &ScoreCache,
) -> Result<RankedExplanations, SearchError> {
    config.validate()?;
    if corpus.roots.is_empty() {
        return Err(SearchError::EmptyCorpus);
    }
    let run = Run::new(scoring, session, params, cache, config.parallelism)?;
    let index = corpus.index();
    let roots: Vec<Candidate> = corpus.roots.iter().map(|r| Candidate::single(semantic_of(&index, &r.id))).collect();
    let (entries, levels) = beam_loop(&run, config, roots, None, |cand| {
        let last = cand.last().expect("beam candidates are non-empty");
        let node = index.node(&last.id).expect("candidate node exists");
        node.children
            .iter()
            .map(|c| {
                let s = semantic_of(&index, &c.id);
                match config.expansion_mode {
                    ExpansionMode::Refine => cand.with_last_replaced(s),
                    ExpansionMode::Augment => cand.with_appended(s),
                }
            })
            .collect()
    })?;
    Ok(RankedExplanations {
        entries,
        trace: run.finish(levels),
        config: SearchEcho {
            method: SearchMethod::Discover,
            beam: Some(config.clone()),
            expansion_mode: None,
            scoring: scoring.clone(),
            params: *params,
        },
    })
}

/// Beam search over combinations of `seeds`. Size-one candidates are the
/// seeds; a candidate grows by appending a seed that comes later in `seeds`
/// than all of its members, so each set is generated once.
pub fn joint_search(
    seeds: &[Semantic],
    max_combo: usize,
    config: &BeamConfig,
    scoring: &ScoringConfig,
    session: &BackendSession,
    params: &EditParams,
    cache: &ScoreCache,
) -> Result<RankedExplanations, SearchError> {
    config.validate()?;
    if max_combo < 2 {
        return Err(SearchError::Config(format!("max_combo must be at least 2, got {max_combo}")));
    }
    if seeds.is_empty() {
        return Err(SearchError::Config("no seeds given".into()));
    }
    let mut ids = HashSet::new();
    if let Some(dup) = seeds.iter().find(|s| !ids.insert(s.id.as_str())) {
        return Err(SearchError::Config(format!("seed {:?} given twice", dup.id)));
    }
    let run = Run::new(scoring, session, params, cache, config.parallelism)?;
    let position = |s: &Semantic| seeds.iter().position(|x| x.id == s.id).expect("member is a seed");
    let singles = seeds.iter().cloned().map(Candidate::single).collect();
    let limit = u32::try_from(max_combo).unwrap_or(u32::MAX);
    let (entries, levels) = beam_loop(&run, config, singles, Some(limit), |cand| {
        let next = cand.members.iter().map(position).max().map_or(0, |p| p + 1);
        seeds[next..].iter().map(|s| cand.with_appended(s.clone())).collect()
    })?;
    Ok(RankedExplanations {
        entries,
        trace: run.finish(levels),
        config: SearchEcho {
            method: SearchMethod::Joint { seeds: seeds.iter().map(|s| s.id.clone()).collect(), max_combo },
            beam: Some(config.clone()),
            expansion_mode: None,
            scoring: scoring.clone(),
            params: *params,
        },
    })
}

pub const DEFAULT_SAFETY_BOUND: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceConfig {
    pub max_combo: usize,
    pub expansion_mode: ExpansionMode,
    pub safety_bound: usize,
    pub parallelism: usize,
}

impl Default for BruteForceConfig {
    fn default() -> Self {
        BruteForceConfig { max_combo: 1, expansion_mode: ExpansionMode::Refine, safety_bound: DEFAULT_SAFETY_BOUND, parallelism: 1 }
    }
}

fn binomial(n: u128, k: u128) -> u128 {
    (0..k).fold(1u128, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Number of candidates [`brute_force_discover`] would score.
pub fn brute_force_count(node_count: usize, max_combo: usize) -> u128 {
    let n = node_count as u128;
    (1..=max_combo.max(1) as u128).take_while(|&k| k <= n).map(|k| binomial(n, k)).fold(0u128, u128::saturating_add)
}

fn combinations(n: usize, k: usize, out: &mut Vec<Vec<usize>>) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::with_capacity(k), out);
}

/// Scores every node of the corpus, and every combination of nodes up to
/// `max_combo` members, then ranks them all.
///
/// In refine mode a node's candidate is the node alone; in augment mode it is
/// the chain from its root. Node candidates link to their parent node's
/// candidate; combinations have no parent.
pub fn brute_force_discover(
    corpus: &Corpus,
    config: &BruteForceConfig,
    scoring: &ScoringConfig,
    session: &BackendSession,
    params: &EditParams,
    cache: &ScoreCache,
) -> Result<RankedExplanations, SearchError> {
    if corpus.roots.is_empty() {
        return Err(SearchError::EmptyCorpus);
    }
    if config.max_combo == 0 || config.parallelism == 0 {
        return Err(SearchError::Config("max_combo and parallelism must be at least 1".into()));
    }
    let index = corpus.index();
    let ids: Vec<&str> = index.ids().to_vec();
    let count = brute_force_count(ids.len(), config.max_combo);
    if count > config.safety_bound as u128 {
        return Err(SearchError::BoundExceeded { count, bound: config.safety_bound });
    }
    let run = Run::new(scoring, session, params, cache, config.parallelism)?;

    let node_candidate = |id: &str| -> Candidate {
        match config.expansion_mode {
            ExpansionMode::Refine => Candidate::single(semantic_of(&index, id)),
            ExpansionMode::Augment => {
                let mut chain = vec![semantic_of(&index, id)];
                let mut cur = id;
                while let Some(p) = index.parent_of(cur) {
                    chain.push(semantic_of(&index, p));
                    cur = p;
                }
                chain.reverse();
                Candidate { members: chain }
            }
        }
    };

    let mut cands = Vec::new();
    let mut meta: Vec<(u32, Option<String>)> = Vec::new();
    for id in &ids {
        cands.push(node_candidate(id));
        let parent = index.parent_of(id).map(|p| node_candidate(p).key());
        meta.push((index.node(id).map_or(1, |n| n.level), parent));
    }
    for k in 2..=config.max_combo.min(ids.len()) {
        let mut combos = Vec::new();
        combinations(ids.len(), k, &mut combos);
        for combo in combos {
            let members: Vec<Semantic> = combo.iter().map(|&i| semantic_of(&index, ids[i])).collect();
            let depth = members.iter().map(|m| m.level).max().unwrap_or(1);
            cands.push(Candidate { members });
            meta.push((depth, None));
        }
    }

    let scores = run.score(&cands)?;
    let mut entries: Vec<RankedEntry> =
        scores.into_iter().zip(meta).map(|(score, (depth, parent))| RankedEntry { score, depth, parent }).collect();
    sort_entries(&mut entries);
    let level = LevelTrace {
        depth: 1,
        generated: cands.len(),
        scored: entries.len(),
        retained: entries.len(),
        ..LevelTrace::default()
    };
    Ok(RankedExplanations {
        entries,
        trace: run.finish(vec![level]),
        config: SearchEcho {
            method: SearchMethod::BruteForce { max_combo: config.max_combo },
            beam: None,
            expansion_mode: Some(config.expansion_mode),
            scoring: scoring.clone(),
            params: *params,
        },
    })
}

/// Keeps only entries that no other entry names as its parent, preserving
/// order.
pub fn restrict_to_maximal(result: &RankedExplanations) -> RankedExplanations {
    let parents: HashSet<&str> = result.entries.iter().filter_map(|e| e.parent.as_deref()).collect();
    let entries = result.entries.iter().filter(|e| !parents.contains(e.candidate().key().as_str())).cloned().collect();
    RankedExplanations { entries, trace: result.trace.clone(), config: result.config.clone() }
}

/// Upper bound on edit calls for one [`discover`] run:
/// `N · (roots + Σ over expansion levels of B · max children)`.
pub fn discover_edit_bound(corpus: &Corpus, config: &BeamConfig, n_images: usize) -> u64 {
    let max_children = corpus.walk().map(|n| n.children.len()).max().unwrap_or(0) as u64;
    let mut levels = corpus.depth().saturating_sub(1) as u64;
    if let Some(d) = config.max_depth {
        levels = levels.min(d.saturating_sub(1) as u64);
    }
    n_images as u64 * (corpus.roots.len() as u64 + levels * config.beam_width as u64 * max_children)
}
