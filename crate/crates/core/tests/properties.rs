mod common;

use common::{dyadic, planted_world, random_corpus, random_link, random_world, reference_scores};
use diffex_core::backend::make_synthetic_backend;
use diffex_core::backend::synthetic::{FeatureEffect, Link, SyntheticWorld, WORLD_SCHEMA};
use diffex_core::corpus::{Corpus, Guidance, NodeSpec};
use diffex_core::report::{render, top_k, ExplanationReport, Format};
use diffex_core::scoring::{aggregate, score_candidate, score_many, Candidate, ScoreCache, ScoreMode, ScoringConfig};
use diffex_core::search::{
    brute_force_discover, discover, discover_edit_bound, joint_search, restrict_to_maximal, BeamConfig, BruteForceConfig,
    ExpansionMode, ThresholdScope,
};
use diffex_core::EditParams;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn params(seed: u64) -> EditParams {
    EditParams::new(0.5, seed).unwrap()
}

fn all_images(world: &SyntheticWorld) -> Vec<String> {
    world.images.keys().cloned().collect()
}

fn node_candidates(corpus: &Corpus) -> Vec<Candidate> {
    let idx = corpus.index();
    idx.ids().iter().map(|id| Candidate::single(idx.semantic(id).unwrap())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scores_match_reference_and_recompute(seed in any::<u64>()) {
        let mut r = rng(seed);
        let corpus = random_corpus(&mut r, 3, 2, 2);
        let link = random_link(&mut r);
        let world = random_world(&mut r, &corpus, 4, link);
        let json = serde_json::to_value(&world).unwrap();
        let target = world.labels[world.labels.len() - 1].clone();
        let session = make_synthetic_backend(world.clone()).unwrap();
        let cfg = ScoringConfig::new(all_images(&world), target.clone());
        let cache = ScoreCache::new();
        for cand in node_candidates(&corpus) {
            let sem: Vec<_> = cand.members.iter().map(|m| (m.prompt_fragment.clone(), m.guidance == Guidance::Remove)).collect();
            let (edited, signed, abs) = reference_scores(&json, &sem, &cfg.sample_image_ids, &target);
            for (mode, want) in [(ScoreMode::MeanEditedScore, edited), (ScoreMode::MeanSignedDelta, signed), (ScoreMode::MeanAbsDelta, abs)] {
                let s = score_candidate(&cand, &cfg.clone().with_mode(mode), &session, &params(1), &cache).unwrap();
                prop_assert!((s.f_score - want).abs() <= 1e-12);
                prop_assert!((s.influence - abs).abs() <= 1e-12);
                prop_assert_eq!(s.n, s.per_image.len());
                let (f, i) = aggregate(&s.per_image, mode);
                prop_assert!((f - s.f_score).abs() <= 1e-12 && (i - s.influence).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn abs_and_signed_agree_iff_deltas_share_sign(seed in any::<u64>()) {
        let mut r = rng(seed);
        let corpus = random_corpus(&mut r, 2, 2, 2);
        let world = random_world(&mut r, &corpus, 5, Link::Identity);
        let session = make_synthetic_backend(world.clone()).unwrap();
        let cfg = ScoringConfig::new(all_images(&world), "c0");
        for cand in node_candidates(&corpus) {
            let s = score_candidate(&cand, &cfg, &session, &params(1), &ScoreCache::new()).unwrap();
            let deltas: Vec<f64> = s.per_image.iter().map(|p| p.edited_value - p.original_value).collect();
            let same_sign = deltas.iter().all(|d| *d >= 0.0) || deltas.iter().all(|d| *d <= 0.0);
            prop_assert_eq!(same_sign, s.f_score.abs() == s.influence, "{:?}", deltas);
        }
    }

    #[test]
    fn aggregates_ignore_sample_order(seed in any::<u64>(), shuffle in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut r = rng(seed);
        let corpus = random_corpus(&mut r, 3, 1, 2);
        let link = random_link(&mut r);
        let world = random_world(&mut r, &corpus, 6, link);
        let session = make_synthetic_backend(world.clone()).unwrap();
        let ordered = all_images(&world);
        let mut shuffled = ordered.clone();
        shuffled.shuffle(&mut rng(shuffle));
        for cand in node_candidates(&corpus) {
            let a = score_candidate(&cand, &ScoringConfig::new(ordered.clone(), "c1"), &session, &params(1), &ScoreCache::new()).unwrap();
            let b = score_candidate(&cand, &ScoringConfig::new(shuffled.clone(), "c1"), &session, &params(1), &ScoreCache::new()).unwrap();
            prop_assert_eq!(a.f_score.to_bits(), b.f_score.to_bits());
            prop_assert_eq!(a.influence.to_bits(), b.influence.to_bits());
            let order: Vec<_> = b.per_image.iter().map(|p| p.image_id.clone()).collect();
            prop_assert_eq!(&order, &shuffled);
        }
    }

    #[test]
    fn cache_is_transparent_and_calls_are_bounded(seed in any::<u64>()) {
        let mut r = rng(seed);
        let corpus = random_corpus(&mut r, 3, 2, 2);
        let link = random_link(&mut r);
        let world = random_world(&mut r, &corpus, 4, link);
        let cands = node_candidates(&corpus);
        let cfg = ScoringConfig::new(all_images(&world), "c0");
        let n = cfg.sample_image_ids.len() as u64;
        let m = cands.len() as u64;

        let cached_session = make_synthetic_backend(world.clone()).unwrap();
        let cache = ScoreCache::new();
        let first = score_many(&cands, &cfg, &cached_session, &params(3), &cache, 1).unwrap();
        let second = score_many(&cands, &cfg, &cached_session, &params(3), &cache, 1).unwrap();
        prop_assert_eq!(&first, &second);
        let calls = cached_session.calls();
        prop_assert!(calls.edit <= m * n);
        prop_assert!(calls.classify <= m * n + n);
        let stats = cache.stats();
        prop_assert_eq!(stats.hits, m * n);
        prop_assert_eq!(stats.misses, m * n);

        let fresh_session = make_synthetic_backend(world).unwrap();
        let uncached: Vec<_> = cands.iter().map(|c| score_candidate(c, &cfg, &fresh_session, &params(3), &ScoreCache::new()).unwrap()).collect();
        prop_assert_eq!(&first, &uncached);
    }

    #[test]
    fn parallel_search_matches_sequential(seed in any::<u64>()) {
        let mut r = rng(seed);
        let corpus = random_corpus(&mut r, 4, 3, 3);
        let link = random_link(&mut r);
        let world = random_world(&mut r, &corpus, 3, link);
        let session = make_synthetic_backend(world.clone()).unwrap();
        let cfg = ScoringConfig::new(all_images(&world), "c0");
        let mut beam = BeamConfig::new(2, None);
        let a = discover(&corpus, &beam, &cfg, &session, &params(1), &ScoreCache::new()).unwrap();
        beam.parallelism = 4;
        let b = discover(&corpus, &beam, &cfg, &session, &params(1), &ScoreCache::new()).unwrap();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn retained_candidates_improve_and_beam_is_bounded(
        seed in any::<u64>(),
        width in 1usize..4,
        eps_num in 0i32..4,
        augment in any::<bool>(),
        every_level in any::<bool>(),
    ) {
        let mut r = rng(seed);
        let corpus = random_corpus(&mut r, 4, 3, 3);
        let link = random_link(&mut r);
        let world = random_world(&mut r, &corpus, 3, link);
        let session = make_synthetic_backend(world.clone()).unwrap();
        let cfg = ScoringConfig::new(all_images(&world), "c0");
        let mut beam = BeamConfig::new(width, Some(dyadic(&mut r, -1, 0, 8)));
        beam.improvement_epsilon = eps_num as f64 / 64.0;
        if augment { beam.expansion_mode = ExpansionMode::Augment; }
        if every_level { beam.threshold_scope = ThresholdScope::EveryLevel; }
        let before = session.calls();
        let res = discover(&corpus, &beam, &cfg, &session, &params(1), &ScoreCache::new()).unwrap();
        let after = session.calls();
        for e in &res.entries {
            match &e.parent {
                None => prop_assert_eq!(e.depth, 1),
                Some(_) => {
                    let p = res.parent_score(e).expect("parent retained");
                    prop_assert!(e.score.f_score > p + beam.improvement_epsilon);
                }
            }
        }
        for level in &res.trace.levels {
            prop_assert!(level.retained <= width);
            prop_assert!(level.retained <= level.scored);
            prop_assert_eq!(level.scored, level.pruned_threshold + level.pruned_improvement + level.pruned_beam + level.retained);
        }
        prop_assert_eq!(res.trace.edit_calls, after.edit - before.edit);
        prop_assert_eq!(res.trace.classify_calls, after.classify - before.classify);
        prop_assert!(res.trace.edit_calls <= discover_edit_bound(&corpus, &beam, cfg.sample_image_ids.len()));
        prop_assert_eq!(res.entries.len(), res.trace.levels.iter().map(|l| l.retained).sum::<usize>());
    }

    #[test]
    fn exhaustive_beam_matches_oracle_when_children_improve(seed in any::<u64>(), augment in any::<bool>()) {
        let mut r = rng(seed);
        let corpus = random_corpus(&mut r, 3, 3, 3);
        // values grow with depth so every child beats its parent
        let jitter: BTreeMap<String, f64> = corpus.walk().map(|n| (n.id.clone(), dyadic(&mut r, 0, 1, 16) / 8.0)).collect();
        let world = planted_world(&corpus, |id, level| level as f64 + jitter[id]);
        let session = make_synthetic_backend(world).unwrap();
        let cfg = ScoringConfig::new(vec!["a".into(), "b".into()], "yes");
        let mode = if augment { ExpansionMode::Augment } else { ExpansionMode::Refine };
        let mut beam = BeamConfig::new(corpus.branching_width(), None);
        beam.expansion_mode = mode;
        let d = discover(&corpus, &beam, &cfg, &session, &params(1), &ScoreCache::new()).unwrap();
        let bf = BruteForceConfig { expansion_mode: mode, ..BruteForceConfig::default() };
        let b = brute_force_discover(&corpus, &bf, &cfg, &session, &params(1), &ScoreCache::new()).unwrap();
        let json = |res| render(&ExplanationReport::from_ranked(&restrict_to_maximal(res), "rand", "toy", None).without_config(), Format::Json);
        prop_assert_eq!(json(&d), json(&b));
    }

    #[test]
    fn disjoint_joint_edits_add_up(a in -16i32..16, b in -16i32..16, x in 0i32..8) {
        let world = SyntheticWorld {
            schema: WORLD_SCHEMA.into(),
            domain: "face".into(),
            labels: vec!["young".into(), "old".into()],
            features: vec!["gray".into(), "glasses".into()],
            images: BTreeMap::from([("p".into(), vec![x as f64 / 8.0, 0.0]), ("q".into(), vec![0.0, x as f64 / 8.0])]),
            effects: BTreeMap::from([
                ("gray hair".into(), vec![FeatureEffect::add("gray", a as f64 / 16.0)]),
                ("eyeglasses".into(), vec![FeatureEffect::add("glasses", b as f64 / 16.0)]),
            ]),
            weights: vec![vec![0.75, -0.5]],
            bias: vec![0.125],
            link: Link::Identity,
            interactions: vec![],
        };
        let corpus = Corpus::from_specs("face", "1", vec![NodeSpec::leaf("gray hair"), NodeSpec::leaf("eyeglasses")], "t");
        let idx = corpus.index();
        let (g, e) = (idx.semantic("gray-hair").unwrap(), idx.semantic("eyeglasses").unwrap());
        let session = make_synthetic_backend(world).unwrap();
        let cfg = ScoringConfig::new(vec!["p".into(), "q".into()], "young");
        let cache = ScoreCache::new();
        let sg = score_candidate(&Candidate::single(g.clone()), &cfg, &session, &params(1), &cache).unwrap();
        let se = score_candidate(&Candidate::single(e.clone()), &cfg, &session, &params(1), &cache).unwrap();
        let both = score_candidate(&Candidate { members: vec![g, e] }, &cfg, &session, &params(1), &cache).unwrap();
        prop_assert_eq!(both.f_score, sg.f_score + se.f_score);
    }

    #[test]
    fn top_k_is_a_prefix_and_json_is_a_fixpoint(seed in any::<u64>(), k in 0usize..12) {
        let mut r = rng(seed);
        let corpus = random_corpus(&mut r, 4, 2, 2);
        let link = random_link(&mut r);
        let world = random_world(&mut r, &corpus, 3, link);
        let session = make_synthetic_backend(world.clone()).unwrap();
        let cfg = ScoringConfig::new(all_images(&world), "c0");
        let res = discover(&corpus, &BeamConfig::new(3, None), &cfg, &session, &params(1), &ScoreCache::new()).unwrap();
        let report = ExplanationReport::from_ranked(&res, "rand", "synthetic", Some(session.value_space()));
        let top = top_k(&report, k);
        prop_assert_eq!(&top.rows[..], &report.rows[..k.min(report.rows.len())]);
        prop_assert_eq!(&top.config, &report.config);
        let bytes = render(&report, Format::Json);
        let back = ExplanationReport::from_json_slice(&bytes).unwrap();
        prop_assert_eq!(render(&back, Format::Json), bytes);
    }
}

#[test]
fn superadditive_pair_outranks_singletons() {
    let world = SyntheticWorld {
        schema: WORLD_SCHEMA.into(),
        domain: "face".into(),
        labels: vec!["young".into(), "old".into()],
        features: vec!["gray".into(), "glasses".into(), "both".into()],
        images: BTreeMap::from([("p".into(), vec![0.0; 3]), ("q".into(), vec![0.0; 3])]),
        effects: BTreeMap::from([
            ("gray hair".into(), vec![FeatureEffect::set("gray", 1.0)]),
            ("eyeglasses".into(), vec![FeatureEffect::set("glasses", 1.0)]),
        ]),
        weights: vec![vec![0.25, 0.25, 1.0]],
        bias: vec![0.0],
        link: Link::Sigmoid,
        interactions: vec![diffex_core::backend::synthetic::Interaction {
            feature: "both".into(),
            product: vec!["gray".into(), "glasses".into()],
        }],
    };
    let corpus = Corpus::from_specs("face", "1", vec![NodeSpec::leaf("gray hair"), NodeSpec::leaf("eyeglasses")], "t");
    let idx = corpus.index();
    let seeds = vec![idx.semantic("gray-hair").unwrap(), idx.semantic("eyeglasses").unwrap()];
    let session = make_synthetic_backend(world).unwrap();
    let cfg = ScoringConfig::new(vec!["p".into(), "q".into()], "young");
    let res = joint_search(&seeds, 2, &BeamConfig::new(2, None), &cfg, &session, &params(1), &ScoreCache::new()).unwrap();
    assert_eq!(res.entries[0].candidate().label(), "gray hair + eyeglasses");
    assert!(res.entries[0].score.f_score > res.entries[1].score.f_score);
    assert_eq!(res.entries.len(), 3);
    assert_eq!(res.entries[0].depth, 2);
}

#[test]
fn joint_search_enumerates_each_set_once() {
    let corpus = Corpus::from_specs("t", "1", (0..5).map(|i| NodeSpec::leaf(format!("s{i}"))).collect(), "t");
    let idx = corpus.index();
    let seeds: Vec<_> = idx.ids().iter().map(|id| idx.semantic(id).unwrap()).collect();
    let world = planted_world(&corpus, |_, _| 0.25);
    let session = make_synthetic_backend(world).unwrap();
    let cfg = ScoringConfig::new(vec!["a".into(), "b".into()], "yes");
    // additive and positive: every extension improves, so a wide beam keeps all C(5,1)+C(5,2)+C(5,3)
    let res = joint_search(&seeds, 3, &BeamConfig::new(100, None), &cfg, &session, &params(1), &ScoreCache::new()).unwrap();
    assert_eq!(res.entries.len(), 5 + 10 + 10);
    let mut keys: Vec<_> = res.entries.iter().map(|e| e.candidate().key()).collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), 25);
}

#[test]
fn remove_guidance_reverses_add() {
    let corpus = Corpus::from_specs(
        "t",
        "1",
        vec![NodeSpec::new("beard", "beard"), NodeSpec::new("no beard", "beard").with_guidance(Guidance::Remove)],
        "t",
    );
    let mut world = planted_world(&corpus, |_, _| 0.5);
    world.effects.insert("beard".into(), vec![FeatureEffect::add(world.features[0].clone(), 0.5)]);
    let session = make_synthetic_backend(world).unwrap();
    let cfg = ScoringConfig::new(vec!["a".into(), "b".into()], "yes");
    let idx = corpus.index();
    let cache = ScoreCache::new();
    let add = score_candidate(&Candidate::single(idx.semantic("beard").unwrap()), &cfg, &session, &params(1), &cache).unwrap();
    let rem = score_candidate(&Candidate::single(idx.semantic("no-beard").unwrap()), &cfg, &session, &params(1), &cache).unwrap();
    assert_eq!(add.f_score, 0.5);
    assert_eq!(rem.f_score, -0.5);
}

#[test]
fn second_pass_is_all_hits_and_new_seed_all_misses() {
    let mut r = rng(5);
    let corpus = random_corpus(&mut r, 2, 0, 1);
    let world = random_world(&mut r, &corpus, 4, Link::Identity);
    let session = make_synthetic_backend(world.clone()).unwrap();
    let cfg = ScoringConfig::new(all_images(&world), "c0");
    let cand = node_candidates(&corpus).remove(0);
    let cache = ScoreCache::new();
    score_candidate(&cand, &cfg, &session, &params(1), &cache).unwrap();
    let edits = session.calls().edit;
    score_candidate(&cand, &cfg, &session, &params(1), &cache).unwrap();
    assert_eq!(cache.stats().hits, 4);
    assert_eq!(session.calls().edit, edits);
    score_candidate(&cand, &cfg, &session, &params(2), &cache).unwrap();
    assert_eq!(cache.stats().misses, 8);
}
