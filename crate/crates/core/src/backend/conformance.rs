//! Backend-agnostic conformance checks. Any backend the engine talks to,
//! in-process or remote, is expected to pass all of them.

use serde::Serialize;

use super::protocol::{ErrorCode, PROTOCOL_VERSION};
use super::{BackendError, BackendSession, EditParams, ImageRef, SemanticEdit};

/// Known-good inputs the suite probes the backend with.
#[derive(Debug, Clone)]
pub struct Probe {
    pub image_id: String,
    pub domain: String,
    pub semantic: SemanticEdit,
    pub target_class: String,
    pub params: EditParams,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ConformanceReport {
    pub checks: Vec<Check>,
}

impl ConformanceReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }

    fn record(&mut self, name: &'static str, result: Result<(), String>) {
        let (passed, detail) = match result {
            Ok(()) => (true, String::new()),
            Err(d) => (false, d),
        };
        self.checks.push(Check { name, passed, detail });
    }
}

fn expect_code<T: std::fmt::Debug>(r: Result<T, BackendError>, code: ErrorCode) -> Result<(), String> {
    match r {
        Err(e) if e.code() == Some(code) => Ok(()),
        Err(e) => Err(format!("expected {code}, got error {e}")),
        Ok(v) => Err(format!("expected {code}, got success {v:?}")),
    }
}

pub fn run_conformance(session: &BackendSession, probe: &Probe) -> ConformanceReport {
    let mut report = ConformanceReport::default();
    let x = ImageRef::original(&probe.image_id, &probe.domain);
    let target = probe.target_class.as_str();

    report.record(
        "handshake",
        if session.info().protocol != PROTOCOL_VERSION {
            Err(format!("protocol {:?}", session.info().protocol))
        } else if session.labels().is_empty() {
            Err("no labels".into())
        } else {
            Ok(())
        },
    );

    report.record(
        "identity-edit",
        (|| {
            let before = session.classify(&x, target).map_err(|e| e.to_string())?;
            let edited = session.edit(&x, &[], &probe.params).map_err(|e| e.to_string())?;
            if edited.parent_id.as_deref() != Some(x.id.as_str()) {
                return Err("edited image lacks parent id".into());
            }
            let after = session.classify(&edited, target).map_err(|e| e.to_string())?;
            if before.values != after.values {
                return Err(format!("{:?} != {:?}", before.values, after.values));
            }
            session.edit(&x, std::slice::from_ref(&probe.semantic), &probe.params).map_err(|e| e.to_string())?;
            let again = session.classify(&x, target).map_err(|e| e.to_string())?;
            if again.values != before.values {
                return Err("original image changed after an edit".into());
            }
            Ok(())
        })(),
    );

    report.record(
        "determinism",
        (|| {
            let sem = std::slice::from_ref(&probe.semantic);
            let a = session.edit(&x, sem, &probe.params).map_err(|e| e.to_string())?;
            let b = session.edit(&x, sem, &probe.params).map_err(|e| e.to_string())?;
            let ca = session.classify(&a, target).map_err(|e| e.to_string())?;
            let cb = session.classify(&b, target).map_err(|e| e.to_string())?;
            if ca.values != cb.values {
                return Err(format!("{:?} != {:?}", ca.values, cb.values));
            }
            ca.validate()?;
            Ok(())
        })(),
    );

    let ghost = ImageRef::original("\u{0}no-such-image", &probe.domain);
    report.record("unknown-image-edit", expect_code(session.edit(&ghost, &[], &probe.params), ErrorCode::UnknownImage));
    report.record("unknown-image-classify", expect_code(session.classify(&ghost, target), ErrorCode::UnknownImage));
    report.record(
        "unknown-semantic",
        expect_code(
            session.edit(&x, &[SemanticEdit::add("\u{0}no-such-semantic")], &probe.params),
            ErrorCode::UnknownSemantic,
        ),
    );
    let mut bad = probe.params;
    bad.edit_threshold = 2.0;
    report.record(
        "bad-params",
        expect_code(session.backend().edit(&x.id, &[], &bad), ErrorCode::BadParams),
    );
    report.record(
        "unknown-label",
        match session.classify(&x, "\u{0}no-such-label") {
            Err(BackendError::UnknownLabel { valid, .. }) if valid == session.labels() => Ok(()),
            other => Err(format!("{other:?}")),
        },
    );
    report
}
