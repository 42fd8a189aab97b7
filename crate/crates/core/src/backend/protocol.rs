//! JSON bodies of the `diffex-backend/1` HTTP protocol.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{EditParams, SemanticEdit, ValueSpace};

pub const PROTOCOL_VERSION: &str = "diffex-backend/1";

pub const HANDSHAKE_PATH: &str = "/v1/handshake";
pub const EDIT_PATH: &str = "/v1/edit";
pub const CLASSIFY_PATH: &str = "/v1/classify";
pub const EDIT_BATCH_PATH: &str = "/v1/edit_batch";
pub const CLASSIFY_BATCH_PATH: &str = "/v1/classify_batch";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol: String,
    pub labels: Vec<String>,
    pub value_space: ValueSpace,
    #[serde(default)]
    pub domains: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    UnknownImage,
    UnknownSemantic,
    BadParams,
    Internal,
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorCode::UnknownImage => "unknown_image",
            ErrorCode::UnknownSemantic => "unknown_semantic",
            ErrorCode::BadParams => "bad_params",
            ErrorCode::Internal => "internal",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub request_id: String,
    pub image_id: String,
    pub semantics: Vec<SemanticEdit>,
    pub params: EditParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditResponse {
    pub request_id: String,
    pub edited_image_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub request_id: String,
    pub image_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub request_id: String,
    pub labels: Vec<String>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub request_id: String,
    pub error: ErrorBody,
}

/// Either a success body or an error body; used for batch elements and for
/// decoding single responses whose status code is not trusted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Reply<T> {
    Err(ErrorResponse),
    Ok(T),
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn edit_request_wire_shape() {
        let req = EditRequest {
            request_id: "r1".into(),
            image_id: "x".into(),
            semantics: vec![SemanticEdit::add("balbo beard")],
            params: EditParams { edit_threshold: 0.75, skipped_steps: 25, seed: 9 },
        };
        assert_eq!(
            serde_json::to_value(&req).unwrap(),
            json!({"request_id":"r1","image_id":"x",
                   "semantics":[{"prompt_fragment":"balbo beard","guidance":"add"}],
                   "params":{"edit_threshold":0.75,"skipped_steps":25,"seed":9}})
        );
    }

    #[test]
    fn reply_decodes_both_arms() {
        let ok: Reply<EditResponse> = serde_json::from_value(json!({"request_id":"r","edited_image_id":"y"})).unwrap();
        assert!(matches!(ok, Reply::Ok(_)));
        let err: Reply<EditResponse> =
            serde_json::from_value(json!({"request_id":"r","error":{"code":"unknown_image","message":"no"}})).unwrap();
        match err {
            Reply::Err(e) => assert_eq!(e.error.code, ErrorCode::UnknownImage),
            Reply::Ok(_) => panic!(),
        }
    }

    #[test]
    fn handshake_shape() {
        let h: Handshake = serde_json::from_value(json!({
            "protocol":"diffex-backend/1","labels":["young","old"],"value_space":"probability","domains":["face"]
        }))
        .unwrap();
        assert_eq!(h.value_space, ValueSpace::Probability);
    }
}
