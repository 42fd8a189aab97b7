//! Hierarchical counterfactual explanations for image classifiers.
//!
//! A [`corpus::Corpus`] holds a tree of semantic attributes. A
//! [`backend::BackendSession`] edits images by semantic and classifies
//! them. [`search::discover`] runs a beam search down the tree, scoring each
//! candidate by how much its edits move the classifier, and
//! [`report`] renders the ranked result.

pub mod backend;
pub mod corpus;
pub mod report;
pub mod scoring;
pub mod search;

pub use backend::{
    connect_remote_backend, make_synthetic_backend, serve, BackendError, BackendSession, EditParams, RemoteConfig,
    SyntheticWorld, ValueSpace,
};
pub use corpus::{load_corpus, validate_corpus, Corpus, CorpusError, Semantic};
pub use report::{export_manifest, render, top_k, ExplanationReport, Format};
pub use scoring::{rank_candidates, score_candidate, Candidate, CandidateScore, ScoreCache, ScoreMode, ScoringConfig};
pub use search::{brute_force_discover, discover, joint_search, BeamConfig, RankedExplanations, SearchError};
