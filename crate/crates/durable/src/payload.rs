use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::EngineError;

/// Largest payload accepted for any activity or workflow input or result.
pub const MAX_PAYLOAD_BYTES: usize = 2 * 1024 * 1024;
/// Largest cumulative payload volume a single run history may hold.
pub const MAX_HISTORY_BYTES: usize = 4 * 1024 * 1024;

pub const JSON: &str = "application/json";
pub const OCTETS: &str = "application/octet-stream";

/// An opaque serialized value with a content-type tag, bounded by
/// [`MAX_PAYLOAD_BYTES`].
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PayloadRepr", into = "PayloadRepr")]
pub struct Payload {
    content_type: String,
    data: Vec<u8>,
}

impl Payload {
    pub fn new(content_type: impl Into<String>, data: Vec<u8>) -> Result<Self, EngineError> {
        if data.len() > MAX_PAYLOAD_BYTES {
            return Err(EngineError::PayloadTooLarge { size: data.len(), limit: MAX_PAYLOAD_BYTES });
        }
        Ok(Payload { content_type: content_type.into(), data })
    }

    pub fn json<T: Serialize + ?Sized>(value: &T) -> Result<Self, EngineError> {
        let data = serde_json::to_vec(value).map_err(|e| EngineError::Codec(e.to_string()))?;
        Payload::new(JSON, data)
    }

    pub fn empty() -> Self {
        Payload { content_type: JSON.into(), data: b"null".to_vec() }
    }

    pub fn decode<T: DeserializeOwned>(&self) -> Result<T, EngineError> {
        serde_json::from_slice(&self.data).map_err(|e| EngineError::Codec(e.to_string()))
    }

    pub fn content_type(&self) -> &str {
        &self.content_type
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn size(&self) -> usize {
        self.data.len()
    }
}

impl std::fmt::Debug for Payload {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match std::str::from_utf8(&self.data) {
            Ok(text) if text.len() <= 120 => write!(f, "Payload({}, {text})", self.content_type),
            _ => write!(f, "Payload({}, {} bytes)", self.content_type, self.data.len()),
        }
    }
}

/// Text payloads stay readable in exported histories; anything else is
/// written as a byte array.
#[derive(Serialize, Deserialize)]
struct PayloadRepr {
    content_type: String,
    size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bytes: Option<Vec<u8>>,
}

impl From<Payload> for PayloadRepr {
    fn from(p: Payload) -> Self {
        let size = p.data.len();
        match String::from_utf8(p.data) {
            Ok(text) => PayloadRepr { content_type: p.content_type, size, text: Some(text), bytes: None },
            Err(e) => PayloadRepr {
                content_type: p.content_type,
                size,
                text: None,
                bytes: Some(e.into_bytes()),
            },
        }
    }
}

impl TryFrom<PayloadRepr> for Payload {
    type Error = EngineError;

    fn try_from(r: PayloadRepr) -> Result<Self, Self::Error> {
        let data = match (r.text, r.bytes) {
            (Some(text), None) => text.into_bytes(),
            (None, Some(bytes)) => bytes,
            (None, None) => Vec::new(),
            (Some(_), Some(_)) => {
                return Err(EngineError::Codec("payload has both text and bytes".into()))
            }
        };
        if data.len() != r.size {
            return Err(EngineError::Codec(format!(
                "payload size {} does not match declared {}",
                data.len(),
                r.size
            )));
        }
        Payload::new(r.content_type, data)
    }
}
