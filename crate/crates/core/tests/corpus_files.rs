mod common;

use common::fixture;
use diffex_core::corpus::{ingest_vlm_response, CorpusError, Rule};
use diffex_core::{load_corpus, validate_corpus};

#[test]
fn committed_corpora_load_clean() {
    let bird = load_corpus(fixture("bird.corpus.json")).unwrap();
    assert_eq!(bird.depth(), 2);
    assert_eq!(bird.roots.iter().map(|r| r.label.as_str()).collect::<Vec<_>>(), ["Beak", "Wings", "Eye", "Head", "Body"]);
    assert!(validate_corpus(&bird).is_clean());

    let retina = load_corpus(fixture("retina.corpus.json")).unwrap();
    assert_eq!(retina.depth(), 3);
    let leaves: Vec<&str> = retina.nodes_at_level(3).iter().map(|n| n.label.as_str()).collect();
    assert_eq!(leaves, ["Hard Exudates", "Soft Exudates", "Clustered Exudates", "Subretinal Hemorrhage", "Intraretinal Hemorrhage"]);
    assert_eq!(retina.branching_width(), 6);
}

#[test]
fn duplicate_sibling_fixture_has_one_finding() {
    match load_corpus(fixture("duplicate-sibling.corpus.json")) {
        Err(CorpusError::Invalid(report)) => {
            assert_eq!(report.findings.len(), 1);
            assert_eq!(report.count(Rule::SiblingDuplicate), 1);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn face_sample_round_trips() {
    let text = std::fs::read_to_string(fixture("face-sample-response.txt")).unwrap();
    let corpus = ingest_vlm_response(&text, "face").unwrap().corpus;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("face.json");
    corpus.save(&path).unwrap();
    let back = load_corpus(&path).unwrap();
    assert!(back.structurally_eq(&corpus));
    assert_eq!(back.to_json_string(), std::fs::read_to_string(&path).unwrap());
}
