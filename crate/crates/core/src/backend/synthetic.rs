//! Deterministic feature-vector world used as ground truth.
//!
//! Images are real vectors over named features. A semantic is a list of
//! feature operations applied in order; guidance `remove` negates `add`
//! operations and resets `set` operations to zero. Classification is a
//! linear model followed by a link function. Derived interaction features
//! (products of other features) let a linear classifier reward
//! co-occurring attributes.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::protocol::{ErrorCode, Handshake, PROTOCOL_VERSION};
use super::{Backend, BackendError, BackendSession, ClassifierOutput, EditParams, SemanticEdit, ValueSpace};
use crate::corpus::Guidance;

pub const WORLD_SCHEMA: &str = "diffex-world/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Link {
    /// Logit `z` for the first label, `-z` for the second.
    Identity,
    /// `sigmoid(z)` for the first label, its complement for the second.
    Sigmoid,
    /// One weight row and bias per label, softmax across rows.
    SoftmaxRows,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectOp {
    Add,
    Set,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureEffect {
    pub feature: String,
    pub op: EffectOp,
    pub value: f64,
}

impl FeatureEffect {
    pub fn add(feature: impl Into<String>, value: f64) -> Self {
        FeatureEffect { feature: feature.into(), op: EffectOp::Add, value }
    }

    pub fn set(feature: impl Into<String>, value: f64) -> Self {
        FeatureEffect { feature: feature.into(), op: EffectOp::Set, value }
    }
}

/// `feature` is recomputed as the product of `product` before scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interaction {
    pub feature: String,
    pub product: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticWorld {
    #[serde(default = "default_schema")]
    pub schema: String,
    pub domain: String,
    pub labels: Vec<String>,
    pub features: Vec<String>,
    pub images: BTreeMap<String, Vec<f64>>,
    /// Keyed by the prompt fragment the engine sends.
    pub effects: BTreeMap<String, Vec<FeatureEffect>>,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub link: Link,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub interactions: Vec<Interaction>,
}

fn default_schema() -> String {
    WORLD_SCHEMA.to_string()
}

impl SyntheticWorld {
    pub fn from_json_str(text: &str) -> Result<Self, BackendError> {
        let world: SyntheticWorld = serde_json::from_str(text).map_err(|e| BackendError::InvalidWorld(e.to_string()))?;
        if world.schema != WORLD_SCHEMA {
            return Err(BackendError::InvalidWorld(format!("unsupported schema {:?}", world.schema)));
        }
        Ok(world)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::InvalidWorld(format!("cannot read {}: {e}", path.display())))?;
        SyntheticWorld::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes") + "\n"
    }

    pub fn value_space(&self) -> ValueSpace {
        match self.link {
            Link::Identity => ValueSpace::Logit,
            Link::Sigmoid | Link::SoftmaxRows => ValueSpace::Probability,
        }
    }

    fn feature_index(&self) -> HashMap<&str, usize> {
        self.features.iter().enumerate().map(|(i, f)| (f.as_str(), i)).collect()
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: String| Err(BackendError::InvalidWorld(m));
        let n = self.features.len();
        if n == 0 {
            return bad("world has no features".into());
        }
        let index = self.feature_index();
        if index.len() != n {
            return bad("feature names are not unique".into());
        }
        match self.link {
            Link::Identity | Link::Sigmoid => {
                if self.labels.len() != 2 || self.weights.len() != 1 || self.bias.len() != 1 {
                    return bad(format!(
                        "{:?} link needs 2 labels, 1 weight row and 1 bias (got {}, {}, {})",
                        self.link,
                        self.labels.len(),
                        self.weights.len(),
                        self.bias.len()
                    ));
                }
            }
            Link::SoftmaxRows => {
                let k = self.labels.len();
                if k < 2 || self.weights.len() != k || self.bias.len() != k {
                    return bad(format!("softmax link needs one weight row and bias per label ({k} labels)"));
                }
            }
        }
        if let Some(row) = self.weights.iter().find(|r| r.len() != n) {
            return bad(format!("weight row has {} entries, expected {n}", row.len()));
        }
        let mut labels = self.labels.clone();
        labels.sort();
        labels.dedup();
        if labels.len() != self.labels.len() {
            return bad("class labels are not unique".into());
        }
        for (id, v) in &self.images {
            if v.len() != n {
                return bad(format!("image {id:?} has {} features, expected {n}", v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return bad(format!("image {id:?} has a non-finite feature"));
            }
        }
        for (sem, ops) in &self.effects {
            for op in ops {
                if !index.contains_key(op.feature.as_str()) {
                    return bad(format!("effect {sem:?} references unknown feature {:?}", op.feature));
                }
                if !op.value.is_finite() {
                    return bad(format!("effect {sem:?} has a non-finite value"));
                }
            }
        }
        for it in &self.interactions {
            if it.product.is_empty() {
                return bad(format!("interaction {:?} has no factors", it.feature));
            }
            for f in std::iter::once(&it.feature).chain(&it.product) {
                if !index.contains_key(f.as_str()) {
                    return bad(format!("interaction references unknown feature {f:?}"));
                }
            }
        }
        let params = self.weights.iter().flatten().chain(&self.bias);
        if params.into_iter().any(|x| !x.is_finite()) {
            return bad("non-finite weight or bias".into());
        }
        Ok(())
    }
}

struct CompiledOp {
    feature: usize,
    op: EffectOp,
    value: f64,
}

pub struct SyntheticBackend {
    world: SyntheticWorld,
    effects: HashMap<String, Vec<CompiledOp>>,
    interactions: Vec<(usize, Vec<usize>)>,
    edited: RwLock<HashMap<String, Vec<f64>>>,
}

impl SyntheticBackend {
    pub fn new(world: SyntheticWorld) -> Result<Self, BackendError> {
        world.validate()?;
        let index = world.feature_index();
        let effects = world
            .effects
            .iter()
            .map(|(k, ops)| {
                let ops = ops
                    .iter()
                    .map(|o| CompiledOp { feature: index[o.feature.as_str()], op: o.op, value: o.value })
                    .collect();
                (k.clone(), ops)
            })
            .collect();
        let interactions = world
            .interactions
            .iter()
            .map(|it| (index[it.feature.as_str()], it.product.iter().map(|f| index[f.as_str()]).collect()))
            .collect();
        Ok(SyntheticBackend { world, effects, interactions, edited: RwLock::new(HashMap::new()) })
    }

    pub fn world(&self) -> &SyntheticWorld {
        &self.world
    }

    /// Feature vector of an original or previously edited image.
    pub fn features(&self, image_id: &str) -> Option<Vec<f64>> {
        if let Some(v) = self.world.images.get(image_id) {
            return Some(v.clone());
        }
        self.edited.read().get(image_id).cloned()
    }

    /// Applies the semantics to a vector without registering an image.
    pub fn apply(&self, base: &[f64], semantics: &[SemanticEdit]) -> Result<Vec<f64>, BackendError> {
        let mut x = base.to_vec();
        for s in semantics {
            let ops = self.effects.get(&s.prompt_fragment).ok_or_else(|| {
                BackendError::protocol(ErrorCode::UnknownSemantic, format!("no effect for {:?}", s.prompt_fragment))
            })?;
            for op in ops {
                let slot = &mut x[op.feature];
                match (op.op, s.guidance) {
                    (EffectOp::Add, Guidance::Add) => *slot += op.value,
                    (EffectOp::Add, Guidance::Remove) => *slot -= op.value,
                    (EffectOp::Set, Guidance::Add) => *slot = op.value,
                    (EffectOp::Set, Guidance::Remove) => *slot = 0.0,
                }
            }
        }
        Ok(x)
    }

    /// Class values for a raw feature vector.
    pub fn evaluate(&self, features: &[f64]) -> Vec<f64> {
        let mut x = features.to_vec();
        for (target, factors) in &self.interactions {
            x[*target] = factors.iter().map(|&i| features[i]).product();
        }
        let logits: Vec<f64> = self
            .world
            .weights
            .iter()
            .zip(&self.world.bias)
            .map(|(row, b)| row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect();
        match self.world.link {
            Link::Identity => vec![logits[0], -logits[0]],
            Link::Sigmoid => {
                let p = 1.0 / (1.0 + (-logits[0]).exp());
                vec![p, 1.0 - p]
            }
            Link::SoftmaxRows => {
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                exps.iter().map(|e| e / total).collect()
            }
        }
    }

    fn edited_id(parent: &str, semantics: &[SemanticEdit], params: &EditParams) -> String {
        let mut h = Sha256::new();
        h.update(parent.as_bytes());
        for s in semantics {
            h.update([0u8]);
            h.update(s.prompt_fragment.as_bytes());
            h.update([if s.guidance == Guidance::Add { 1u8 } else { 2u8 }]);
        }
        h.update(params.digest().as_bytes());
        format!("{parent}~{}", hex::encode(&h.finalize()[..6]))
    }
}

impl Backend for SyntheticBackend {
    fn handshake(&self) -> Result<Handshake, BackendError> {
        Ok(Handshake {
            protocol: PROTOCOL_VERSION.to_string(),
            labels: self.world.labels.clone(),
            value_space: self.world.value_space(),
            domains: vec![self.world.domain.clone()],
        })
    }

    fn edit(&self, image_id: &str, semantics: &[SemanticEdit], params: &EditParams) -> Result<String, BackendError> {
        params.validate().map_err(|e| BackendError::protocol(ErrorCode::BadParams, e.to_string()))?;
        let base = self
            .features(image_id)
            .ok_or_else(|| BackendError::protocol(ErrorCode::UnknownImage, format!("unknown image {image_id:?}")))?;
        let x = self.apply(&base, semantics)?;
        let id = SyntheticBackend::edited_id(image_id, semantics, params);
        self.edited.write().entry(id.clone()).or_insert(x);
        Ok(id)
    }

    fn classify(&self, image_id: &str) -> Result<ClassifierOutput, BackendError> {
        let x = self
            .features(image_id)
            .ok_or_else(|| BackendError::protocol(ErrorCode::UnknownImage, format!("unknown image {image_id:?}")))?;
        Ok(ClassifierOutput {
            class_labels: self.world.labels.clone(),
            values: self.evaluate(&x),
            value_space: self.world.value_space(),
        })
    }
}

pub fn make_synthetic_backend(world: SyntheticWorld) -> Result<BackendSession, BackendError> {
    BackendSession::open(Arc::new(SyntheticBackend::new(world)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ImageRef;

    fn world(link: Link, weights: Vec<f64>) -> SyntheticWorld {
        SyntheticWorld {
            schema: WORLD_SCHEMA.into(),
            domain: "toy".into(),
            labels: vec!["pos".into(), "neg".into()],
            features: vec!["a".into(), "b".into()],
            images: BTreeMap::from([("x".into(), vec![0.3, 0.9]), ("y".into(), vec![0.0, 0.0])]),
            effects: BTreeMap::from([
                ("set a".into(), vec![FeatureEffect::set("a", 1.0)]),
                ("bump b".into(), vec![FeatureEffect::add("b", 0.5)]),
            ]),
            weights: vec![weights],
            bias: vec![0.0],
            link,
            interactions: vec![],
        }
    }

    fn params() -> EditParams {
        EditParams::new(0.5, 7).unwrap()
    }

    #[test]
    fn identity_link_is_a_dot_product() {
        let s = make_synthetic_backend(world(Link::Identity, vec![1.0, 0.0])).unwrap();
        let out = s.classify(&ImageRef::original("x", "toy"), "pos").unwrap();
        assert_eq!(out.value_for("pos"), Some(0.3));
        assert_eq!(out.value_for("neg"), Some(-0.3));
        assert_eq!(out.value_space, ValueSpace::Logit);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let s = make_synthetic_backend(world(Link::Sigmoid, vec![1.0, 1.0])).unwrap();
        let out = s.classify(&ImageRef::original("y", "toy"), "pos").unwrap();
        assert_eq!(out.value_for("pos"), Some(0.5));
    }

    #[test]
    fn set_effect_overrides_one_feature() {
        let b = SyntheticBackend::new(world(Link::Identity, vec![1.0, 1.0])).unwrap();
        let id = b.edit("x", &[SemanticEdit::add("set a")], &params()).unwrap();
        assert_eq!(b.features(&id).unwrap(), vec![1.0, 0.9]);
    }

    #[test]
    fn effects_apply_in_order_and_remove_inverts() {
        let b = SyntheticBackend::new(world(Link::Identity, vec![1.0, 1.0])).unwrap();
        let both = b.edit("x", &[SemanticEdit::add("set a"), SemanticEdit::add("bump b")], &params()).unwrap();
        assert_eq!(b.features(&both).unwrap(), vec![1.0, 0.9 + 0.5]);
        let removed = b
            .edit("x", &[SemanticEdit { prompt_fragment: "set a".into(), guidance: Guidance::Remove }], &params())
            .unwrap();
        assert_eq!(b.features(&removed).unwrap(), vec![0.0, 0.9]);
    }

    #[test]
    fn empty_edit_classifies_like_original() {
        let s = make_synthetic_backend(world(Link::Sigmoid, vec![0.7, -0.2])).unwrap();
        let x = ImageRef::original("x", "toy");
        let e = s.edit(&x, &[], &params()).unwrap();
        assert_eq!(e.parent_id.as_deref(), Some("x"));
        assert_ne!(e.id, x.id);
        assert_eq!(s.classify(&e, "pos").unwrap(), s.classify(&x, "pos").unwrap());
    }

    #[test]
    fn unknown_ids_map_to_protocol_codes() {
        let s = make_synthetic_backend(world(Link::Identity, vec![1.0, 0.0])).unwrap();
        let x = ImageRef::original("nope", "toy");
        assert_eq!(s.edit(&x, &[], &params()).unwrap_err().code(), Some(ErrorCode::UnknownImage));
        let y = ImageRef::original("x", "toy");
        let err = s.edit(&y, &[SemanticEdit::add("wings")], &params()).unwrap_err();
        assert_eq!(err.code(), Some(ErrorCode::UnknownSemantic));
        assert!(matches!(s.classify(&y, "cat"), Err(BackendError::UnknownLabel { .. })));
    }

    #[test]
    fn telemetry_counts_calls() {
        let s = make_synthetic_backend(world(Link::Identity, vec![1.0, 0.0])).unwrap();
        let x = ImageRef::original("x", "toy");
        for _ in 0..5 {
            s.edit(&x, &[SemanticEdit::add("set a")], &params()).unwrap();
        }
        s.classify(&x, "pos").unwrap();
        assert_eq!(s.calls().edit, 5);
        assert_eq!(s.calls().classify, 1);
    }

    #[test]
    fn invalid_worlds_are_rejected() {
        let mut w = world(Link::Identity, vec![1.0]);
        assert!(SyntheticBackend::new(w.clone()).is_err());
        w.weights = vec![vec![1.0, 0.0]];
        w.effects.insert("bad".into(), vec![FeatureEffect::add("zzz", 1.0)]);
        assert!(SyntheticBackend::new(w.clone()).is_err());
        w.effects.remove("bad");
        w.link = Link::SoftmaxRows;
        assert!(SyntheticBackend::new(w).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut w = world(Link::SoftmaxRows, vec![1.0, 0.0]);
        w.labels.push("other".into());
        w.weights = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]];
        w.bias = vec![0.0, 0.1, -0.1];
        let s = make_synthetic_backend(w).unwrap();
        let out = s.classify(&ImageRef::original("x", "toy"), "other").unwrap();
        assert!((out.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interaction_feature_rewards_co_occurrence() {
        let mut w = world(Link::Identity, vec![0.0, 0.0]);
        w.features.push("ab".into());
        w.weights = vec![vec![0.0, 0.0, 1.0]];
        for v in w.images.values_mut() {
            v.push(0.0);
        }
        w.interactions = vec![Interaction { feature: "ab".into(), product: vec!["a".into(), "b".into()] }];
        let b = SyntheticBackend::new(w).unwrap();
        assert_eq!(b.evaluate(&[2.0, 3.0, 0.0])[0], 6.0);
    }

    #[test]
    fn world_json_round_trip() {
        let w = world(Link::Sigmoid, vec![1.0, 2.0]);
        let back = SyntheticWorld::from_json_str(&w.to_json_string()).unwrap();
        assert_eq!(back, w);
    }
}
