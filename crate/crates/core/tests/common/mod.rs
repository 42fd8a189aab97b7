//! Random corpora and worlds for property tests, and a straight-line
//! reference scorer that reads world JSON without going through the crate.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use diffex_core::backend::synthetic::{FeatureEffect, Interaction, Link, SyntheticWorld, WORLD_SCHEMA};
use diffex_core::corpus::{Corpus, Guidance, NodeSpec};
use rand::Rng;
use serde_json::Value;

/// Shared fixtures live in the core crate; this resolves from any crate
/// that includes this module.
pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

/// A multiple of 1/`den` drawn uniformly from `[lo, hi]`.
pub fn dyadic(rng: &mut impl Rng, lo: i32, hi: i32, den: i32) -> f64 {
    rng.random_range(lo * den..=hi * den) as f64 / den as f64
}

/// Tree with `roots` roots and up to `max_children` children per node,
/// `depth` levels deep. Labels are `n0`, `n1`, ... in creation order and
/// prompt fragments are `p0`, `p1`, ...
pub fn random_corpus(rng: &mut impl Rng, roots: usize, max_children: usize, depth: u32) -> Corpus {
    fn grow(rng: &mut impl Rng, counter: &mut usize, level: u32, depth: u32, max_children: usize) -> NodeSpec {
        let i = *counter;
        *counter += 1;
        let mut node = NodeSpec::new(format!("n{i}"), format!("p{i}"));
        if rng.random_bool(0.1) {
            node = node.with_guidance(Guidance::Remove);
        }
        if level < depth {
            let k = rng.random_range(0..=max_children);
            let kids = (0..k).map(|_| grow(rng, counter, level + 1, depth, max_children)).collect();
            node = node.with_children(kids);
        }
        node
    }
    let mut counter = 0;
    let specs = (0..roots).map(|_| grow(rng, &mut counter, 1, depth, max_children)).collect();
    Corpus::from_specs("rand", "1", specs, "generated")
}

/// `roots` roots with exactly `children` leaves each.
pub fn regular_corpus(roots: usize, children: usize) -> Corpus {
    let mut i = 0;
    let mut next = || {
        i += 1;
        NodeSpec::new(format!("n{}", i - 1), format!("p{}", i - 1))
    };
    let specs = (0..roots)
        .map(|_| {
            let root = next();
            root.with_children((0..children).map(|_| next()).collect())
        })
        .collect();
    Corpus::from_specs("regular", "1", specs, "generated")
}

pub fn random_link(rng: &mut impl Rng) -> Link {
    match rng.random_range(0..3) {
        0 => Link::Identity,
        1 => Link::Sigmoid,
        _ => Link::SoftmaxRows,
    }
}

/// World over `corpus` with random dyadic images, effects and weights.
pub fn random_world(rng: &mut impl Rng, corpus: &Corpus, n_images: usize, link: Link) -> SyntheticWorld {
    let n_features = rng.random_range(2..=6);
    let mut features: Vec<String> = (0..n_features).map(|i| format!("f{i}")).collect();
    let mut interactions = vec![];
    if rng.random_bool(0.3) {
        features.push("both".into());
        interactions.push(Interaction { feature: "both".into(), product: vec!["f0".into(), "f1".into()] });
    }
    let nf = features.len();
    let labels: Vec<String> = match link {
        Link::SoftmaxRows => (0..rng.random_range(2..=4)).map(|i| format!("c{i}")).collect(),
        _ => vec!["c0".into(), "c1".into()],
    };
    let rows = if link == Link::SoftmaxRows { labels.len() } else { 1 };
    let images = (0..n_images)
        .map(|i| (format!("img-{i:03}"), (0..nf).map(|_| dyadic(rng, 0, 1, 8)).collect()))
        .collect();
    let effects = corpus
        .walk()
        .map(|n| {
            let ops = (0..rng.random_range(1..=2))
                .map(|_| {
                    let f = features[rng.random_range(0..n_features)].clone();
                    if rng.random_bool(0.7) {
                        FeatureEffect::add(f, dyadic(rng, -1, 1, 16))
                    } else {
                        FeatureEffect::set(f, dyadic(rng, 0, 1, 16))
                    }
                })
                .collect();
            (n.prompt_fragment.clone(), ops)
        })
        .collect();
    SyntheticWorld {
        schema: WORLD_SCHEMA.into(),
        domain: "rand".into(),
        labels,
        features,
        images,
        effects,
        weights: (0..rows).map(|_| (0..nf).map(|_| dyadic(rng, -1, 1, 8)).collect()).collect(),
        bias: (0..rows).map(|_| dyadic(rng, -1, 1, 8)).collect(),
        link,
        interactions,
    }
}

/// Identity-link world where each node moves its own unit-weight feature
/// by `value(id, level)`, so a node's signed delta is its value whatever its
/// guidance.
pub fn planted_world(corpus: &Corpus, value: impl Fn(&str, u32) -> f64) -> SyntheticWorld {
    let nodes: Vec<_> = corpus.walk().collect();
    let features: Vec<String> = nodes.iter().map(|n| format!("x-{}", n.id)).collect();
    let effects: BTreeMap<_, _> = nodes
        .iter()
        .map(|n| {
            let v = value(&n.id, n.level);
            let v = if n.guidance == Guidance::Remove { -v } else { v };
            (n.prompt_fragment.clone(), vec![FeatureEffect::add(format!("x-{}", n.id), v)])
        })
        .collect();
    SyntheticWorld {
        schema: WORLD_SCHEMA.into(),
        domain: corpus.domain.clone(),
        labels: vec!["yes".into(), "no".into()],
        images: BTreeMap::from([
            ("a".into(), vec![0.0; features.len()]),
            ("b".into(), vec![0.5; features.len()]),
        ]),
        weights: vec![vec![1.0; features.len()]],
        bias: vec![0.0],
        features,
        effects,
        link: Link::Identity,
        interactions: vec![],
    }
}

/// Reference aggregate for one candidate: `(mean edited, mean signed delta,
/// mean abs delta)` of the value for `target`, read straight from world JSON.
/// `semantics` are `(prompt_fragment, remove)` pairs in application order.
pub fn reference_scores(world: &Value, semantics: &[(String, bool)], images: &[String], target: &str) -> (f64, f64, f64) {
    let features: Vec<&str> = world["features"].as_array().unwrap().iter().map(|f| f.as_str().unwrap()).collect();
    let pos = |name: &str| features.iter().position(|f| *f == name).unwrap();
    let labels: Vec<&str> = world["labels"].as_array().unwrap().iter().map(|f| f.as_str().unwrap()).collect();
    let t = labels.iter().position(|l| *l == target).unwrap();
    let link = world["link"].as_str().unwrap();

    let classify = |x: &[f64]| -> f64 {
        let mut x = x.to_vec();
        if let Some(its) = world.get("interactions").and_then(Value::as_array) {
            let base = x.clone();
            for it in its {
                let mut p = 1.0;
                for f in it["product"].as_array().unwrap() {
                    p *= base[pos(f.as_str().unwrap())];
                }
                x[pos(it["feature"].as_str().unwrap())] = p;
            }
        }
        let logits: Vec<f64> = world["weights"]
            .as_array()
            .unwrap()
            .iter()
            .zip(world["bias"].as_array().unwrap())
            .map(|(row, b)| {
                let mut z = 0.0;
                for (w, v) in row.as_array().unwrap().iter().zip(&x) {
                    z += w.as_f64().unwrap() * v;
                }
                z + b.as_f64().unwrap()
            })
            .collect();
        match link {
            "identity" => {
                if t == 0 {
                    logits[0]
                } else {
                    -logits[0]
                }
            }
            "sigmoid" => {
                let p = 1.0 / (1.0 + (-logits[0]).exp());
                if t == 0 {
                    p
                } else {
                    1.0 - p
                }
            }
            "softmax-rows" => {
                let total: f64 = logits.iter().map(|z| z.exp()).sum();
                logits[t].exp() / total
            }
            other => panic!("unknown link {other}"),
        }
    };

    let (mut edited_sum, mut signed_sum, mut abs_sum) = (0.0, 0.0, 0.0);
    for id in images {
        let x: Vec<f64> = world["images"][id].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        let mut y = x.clone();
        for (frag, remove) in semantics {
            for op in world["effects"][frag].as_array().unwrap() {
                let i = pos(op["feature"].as_str().unwrap());
                let v = op["value"].as_f64().unwrap();
                match (op["op"].as_str().unwrap(), remove) {
                    ("add", false) => y[i] += v,
                    ("add", true) => y[i] -= v,
                    ("set", false) => y[i] = v,
                    ("set", true) => y[i] = 0.0,
                    (o, _) => panic!("unknown op {o}"),
                }
            }
        }
        let before = classify(&x);
        let after = classify(&y);
        edited_sum += after;
        signed_sum += after - before;
        abs_sum += (after - before).abs();
    }
    let n = images.len() as f64;
    (edited_sum / n, signed_sum / n, abs_sum / n)
}

/// Coefficient of determination of the least-squares line through `points`.
pub fn r_squared(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let ss_res: f64 = points.iter().map(|(x, y)| (y - (icpt + slope * x)).powi(2)).sum();
    let ss_tot: f64 = points.iter().map(|(_, y)| (y - my).powi(2)).sum();
    if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    }
}
