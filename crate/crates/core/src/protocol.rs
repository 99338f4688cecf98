//! JSON-RPC 2.0 message model for the MCP tool protocol.
//!
//! Frames are decoded strictly: duplicate object keys are rejected at any
//! depth and the request/response/notification shapes are checked. Encoding
//! is canonical (lexicographic key order, no insignificant whitespace) so
//! journaled frames can be diffed and hashed.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{self, DeserializeSeed, MapAccess, SeqAccess, Visitor};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::fence::SessionState;

pub const JSONRPC_VERSION: &str = "2.0";
pub const TOOLS_CALL: &str = "tools/call";
pub const TOOLS_LIST: &str = "tools/list";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("tools/call params lack a tool name")]
    MissingToolName,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MessageKind {
    Request,
    Response,
    Notification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcError {
    pub code: i64,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<Value>,
}

impl RpcError {
    pub fn new(code: i64, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            data: None,
        }
    }

    pub fn with_data(mut self, data: Value) -> Self {
        self.data = Some(data);
        self
    }

    pub fn to_value(&self) -> Value {
        let mut map = Map::new();
        map.insert("code".into(), Value::from(self.code));
        map.insert("message".into(), Value::from(self.message.clone()));
        if let Some(data) = &self.data {
            map.insert("data".into(), data.clone());
        }
        Value::Object(map)
    }

    fn from_value(value: &Value) -> Result<Self, ProtocolError> {
        let obj = value
            .as_object()
            .ok_or_else(|| violation("error member must be an object"))?;
        let code = obj
            .get("code")
            .and_then(Value::as_i64)
            .ok_or_else(|| violation("error.code must be an integer"))?;
        let message = obj
            .get("message")
            .and_then(Value::as_str)
            .ok_or_else(|| violation("error.message must be a string"))?
            .to_owned();
        Ok(Self {
            code,
            message,
            data: obj.get("data").cloned(),
        })
    }
}

/// One JSON-RPC message. Top-level members other than the six the model
/// knows about (including `jsonrpc` itself) are kept in `extra` and written
/// back out unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub id: Option<Value>,
    pub method: Option<String>,
    pub params: Option<Value>,
    pub result: Option<Value>,
    pub error: Option<RpcError>,
    pub extra: BTreeMap<String, Value>,
}

fn versioned() -> BTreeMap<String, Value> {
    let mut extra = BTreeMap::new();
    extra.insert("jsonrpc".to_owned(), Value::from(JSONRPC_VERSION));
    extra
}

impl Message {
    pub fn request(id: impl Into<Value>, method: impl Into<String>, params: Option<Value>) -> Self {
        Self {
            kind: MessageKind::Request,
            id: Some(id.into()),
            method: Some(method.into()),
            params,
            result: None,
            error: None,
            extra: versioned(),
        }
    }

    pub fn notification(method: impl Into<String>, params: Option<Value>) -> Self {
        Self {
            kind: MessageKind::Notification,
            id: None,
            method: Some(method.into()),
            params,
            result: None,
            error: None,
            extra: versioned(),
        }
    }

    pub fn response(id: Value, result: Value) -> Self {
        Self {
            kind: MessageKind::Response,
            id: Some(id),
            method: None,
            params: None,
            result: Some(result),
            error: None,
            extra: versioned(),
        }
    }

    pub fn error_response(id: Value, error: RpcError) -> Self {
        Self {
            kind: MessageKind::Response,
            id: Some(id),
            method: None,
            params: None,
            result: None,
            error: Some(error),
            extra: versioned(),
        }
    }

    /// Builds a `tools/call` request.
    pub fn tool_call(id: impl Into<Value>, tool: &str, arguments: Value) -> Self {
        let mut params = Map::new();
        params.insert("name".into(), Value::from(tool));
        params.insert("arguments".into(), arguments);
        Self::request(id, TOOLS_CALL, Some(Value::Object(params)))
    }

    pub fn is_tool_call(&self) -> bool {
        self.kind == MessageKind::Request && self.method.as_deref() == Some(TOOLS_CALL)
    }

    pub fn to_value(&self) -> Value {
        let mut map = Map::new();
        for (k, v) in &self.extra {
            map.insert(k.clone(), v.clone());
        }
        if let Some(id) = &self.id {
            map.insert("id".into(), id.clone());
        }
        if let Some(method) = &self.method {
            map.insert("method".into(), Value::from(method.clone()));
        }
        if let Some(params) = &self.params {
            map.insert("params".into(), params.clone());
        }
        if let Some(result) = &self.result {
            map.insert("result".into(), result.clone());
        }
        if let Some(error) = &self.error {
            map.insert("error".into(), error.to_value());
        }
        Value::Object(map)
    }

    pub fn from_value(value: Value) -> Result<Self, ProtocolError> {
        let Value::Object(mut obj) = value else {
            return Err(violation("message must be a JSON object"));
        };
        let id = obj.remove("id");
        if let Some(id) = &id {
            if !matches!(id, Value::String(_) | Value::Number(_) | Value::Null) {
                return Err(violation("id must be a string, number or null"));
            }
        }
        let method = match obj.remove("method") {
            None => None,
            Some(Value::String(m)) => Some(m),
            Some(_) => return Err(violation("method must be a string")),
        };
        let params = obj.remove("params");
        if let Some(p) = &params {
            if !p.is_object() && !p.is_array() {
                return Err(violation("params must be an object or array"));
            }
        }
        let result = obj.remove("result");
        let error = obj.remove("error");

        let kind = if method.is_some() {
            if result.is_some() || error.is_some() {
                return Err(violation("a request cannot carry result or error"));
            }
            if id.is_some() {
                MessageKind::Request
            } else {
                MessageKind::Notification
            }
        } else {
            if id.is_none() {
                return Err(violation("response without id"));
            }
            if params.is_some() {
                return Err(violation("a response cannot carry params"));
            }
            match (&result, &error) {
                (Some(_), Some(_)) => {
                    return Err(violation("response carries both result and error"))
                }
                (None, None) => return Err(violation("response carries neither result nor error")),
                _ => MessageKind::Response,
            }
        };
        let error = error.as_ref().map(RpcError::from_value).transpose()?;
        Ok(Self {
            kind,
            id,
            method,
            params,
            result,
            error,
            extra: obj.into_iter().collect(),
        })
    }
}

fn violation(msg: &str) -> ProtocolError {
    ProtocolError::ProtocolViolation(msg.to_owned())
}

/// Decodes one complete frame.
pub fn decode_message(bytes: &[u8]) -> Result<Message, ProtocolError> {
    let value = parse_strict(bytes)?;
    Message::from_value(value)
}

/// Canonical serialization of a message.
pub fn encode_message(msg: &Message) -> Vec<u8> {
    canonical_bytes(&msg.to_value())
}

/// Parses a JSON document, rejecting duplicate object keys at any depth.
pub fn parse_strict(bytes: &[u8]) -> Result<Value, ProtocolError> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let value = StrictValue
        .deserialize(&mut de)
        .map_err(|e| classify_parse_error(&e))?;
    de.end().map_err(|e| classify_parse_error(&e))?;
    Ok(value)
}

fn classify_parse_error(e: &serde_json::Error) -> ProtocolError {
    let text = e.to_string();
    if text.contains("duplicate key") {
        ProtocolError::ProtocolViolation(text)
    } else {
        ProtocolError::MalformedFrame(text)
    }
}

struct StrictValue;

impl<'de> DeserializeSeed<'de> for StrictValue {
    type Value = Value;

    fn deserialize<D: de::Deserializer<'de>>(self, deserializer: D) -> Result<Value, D::Error> {
        deserializer.deserialize_any(StrictVisitor)
    }
}

struct StrictVisitor;

impl<'de> Visitor<'de> for StrictVisitor {
    type Value = Value;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("any JSON value")
    }

    fn visit_bool<E>(self, v: bool) -> Result<Value, E> {
        Ok(Value::Bool(v))
    }

    fn visit_i64<E>(self, v: i64) -> Result<Value, E> {
        Ok(Value::from(v))
    }

    fn visit_u64<E>(self, v: u64) -> Result<Value, E> {
        Ok(Value::from(v))
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<Value, E> {
        serde_json::Number::from_f64(v)
            .map(Value::Number)
            .ok_or_else(|| E::custom("non-finite number"))
    }

    fn visit_str<E>(self, v: &str) -> Result<Value, E> {
        Ok(Value::String(v.to_owned()))
    }

    fn visit_string<E>(self, v: String) -> Result<Value, E> {
        Ok(Value::String(v))
    }

    fn visit_unit<E>(self) -> Result<Value, E> {
        Ok(Value::Null)
    }

    fn visit_none<E>(self) -> Result<Value, E> {
        Ok(Value::Null)
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Value, A::Error> {
        let mut items = Vec::new();
        while let Some(item) = seq.next_element_seed(StrictValue)? {
            items.push(item);
        }
        Ok(Value::Array(items))
    }

    fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Value, A::Error> {
        let mut map = Map::new();
        while let Some(key) = access.next_key::<String>()? {
            if map.contains_key(&key) {
                return Err(de::Error::custom(format!("duplicate key `{key}`")));
            }
            let value = access.next_value_seed(StrictValue)?;
            map.insert(key, value);
        }
        Ok(Value::Object(map))
    }
}

/// Serializes a value with object keys in lexicographic order and no
/// insignificant whitespace, independent of how the map was built.
pub fn canonical_bytes(value: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    write_canonical(value, &mut out);
    out
}

pub fn canonical_string(value: &Value) -> String {
    String::from_utf8(canonical_bytes(value)).expect("canonical JSON is UTF-8")
}

fn write_canonical(value: &Value, out: &mut Vec<u8>) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push(b'{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                serde_json::to_writer(&mut *out, key).expect("string serialization");
                out.push(b':');
                write_canonical(&map[key], out);
            }
            out.push(b'}');
        }
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_canonical(item, out);
            }
            out.push(b']');
        }
        scalar => serde_json::to_writer(&mut *out, scalar).expect("scalar serialization"),
    }
}

/// A `tools/call` request with the identity the fence assigns to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub session_id: String,
    pub branch_id: String,
    /// Position among tool calls on the branch, counting from 0.
    pub seq_index: u64,
    pub tool_name: String,
    pub arguments: Value,
    pub wire_id: Value,
}

/// Pulls the tool-call semantics out of a message.
///
/// Returns `Ok(None)` for anything other than a `tools/call` request; those
/// messages are passed through untouched. On success the session's
/// tool-call counter is advanced.
pub fn extract_tool_call(
    msg: &Message,
    session: &mut SessionState,
) -> Result<Option<ToolCall>, ProtocolError> {
    if !msg.is_tool_call() {
        return Ok(None);
    }
    let params = msg.params.as_ref().and_then(Value::as_object);
    let tool_name = params
        .and_then(|p| p.get("name"))
        .and_then(Value::as_str)
        .filter(|name| !name.is_empty())
        .ok_or(ProtocolError::MissingToolName)?
        .to_owned();
    let arguments = match params.and_then(|p| p.get("arguments")) {
        None | Some(Value::Null) => Value::Object(Map::new()),
        Some(args @ Value::Object(_)) => args.clone(),
        Some(_) => return Err(violation("tools/call arguments must be an object")),
    };
    let seq_index = session.take_seq();
    Ok(Some(ToolCall {
        session_id: session.session_id.clone(),
        branch_id: session.current_branch_id.clone(),
        seq_index,
        tool_name,
        arguments,
        wire_id: msg.id.clone().unwrap_or(Value::Null),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    #[test]
    fn decodes_tool_call_request() {
        let msg = decode_message(
            br#"{"jsonrpc":"2.0","id":1,"method":"tools/call","params":{"name":"transfer","arguments":{"amount":500}}}"#,
        )
        .unwrap();
        assert_eq!(msg.kind, MessageKind::Request);
        assert_eq!(msg.id, Some(json!(1)));
        assert_eq!(msg.method.as_deref(), Some("tools/call"));
        assert_eq!(msg.params.unwrap()["arguments"]["amount"], json!(500));
    }

    #[test]
    fn decodes_response() {
        let msg = decode_message(
            br#"{"jsonrpc":"2.0","id":1,"result":{"content":[{"type":"text","text":"ok"}]}}"#,
        )
        .unwrap();
        assert_eq!(msg.kind, MessageKind::Response);
        assert_eq!(msg.id, Some(json!(1)));
        assert_eq!(msg.result.unwrap()["content"][0]["text"], json!("ok"));
    }

    #[test]
    fn result_and_error_together_is_a_violation() {
        let err = decode_message(
            br#"{"jsonrpc":"2.0","id":1,"result":{},"error":{"code":-1,"message":"x"}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, ProtocolError::ProtocolViolation(_)));
    }

    #[test]
    fn garbage_is_malformed() {
        assert!(matches!(
            decode_message(b"{\"id\":1,"),
            Err(ProtocolError::MalformedFrame(_))
        ));
        assert!(matches!(
            decode_message(b"{} trailing"),
            Err(ProtocolError::MalformedFrame(_))
        ));
    }

    #[test]
    fn duplicate_keys_rejected_at_depth() {
        let err = decode_message(
            br#"{"jsonrpc":"2.0","id":1,"method":"tools/call","params":{"name":"t","arguments":{"a":{"b":1,"b":2}}}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, ProtocolError::ProtocolViolation(_)), "{err:?}");
    }

    #[test]
    fn notification_encodes_without_id() {
        let bytes = encode_message(&Message::notification("notifications/progress", None));
        let text = String::from_utf8(bytes).unwrap();
        assert!(!text.contains("\"id\""));
        assert_eq!(text, r#"{"jsonrpc":"2.0","method":"notifications/progress"}"#);
    }

    #[test]
    fn request_encoding_contains_id_and_method() {
        let text = String::from_utf8(encode_message(&Message::request(7, "tools/list", None))).unwrap();
        assert!(text.contains(r#""id":7"#));
        assert!(text.contains(r#""method":"tools/list""#));
    }

    #[test]
    fn unknown_top_level_fields_survive() {
        let frame = br#"{"zeta":true,"jsonrpc":"2.0","id":"a","method":"ping","alpha":[1]}"#;
        let msg = decode_message(frame).unwrap();
        assert_eq!(msg.extra.get("zeta"), Some(&json!(true)));
        let text = String::from_utf8(encode_message(&msg)).unwrap();
        assert_eq!(text, r#"{"alpha":[1],"id":"a","jsonrpc":"2.0","method":"ping","zeta":true}"#);
    }

    #[test]
    fn shape_checks() {
        for (frame, what) in [
            (&br#"[1,2]"#[..], "batch"),
            (br#"{"jsonrpc":"2.0","result":1}"#, "response without id"),
            (br#"{"jsonrpc":"2.0","id":1}"#, "empty response"),
            (br#"{"jsonrpc":"2.0","id":{},"method":"x"}"#, "object id"),
            (br#"{"jsonrpc":"2.0","id":1,"method":"x","params":3}"#, "scalar params"),
            (br#"{"jsonrpc":"2.0","id":1,"error":{"code":"x","message":"m"}}"#, "string code"),
        ] {
            assert!(
                matches!(decode_message(frame), Err(ProtocolError::ProtocolViolation(_))),
                "{what}"
            );
        }
    }

    #[test]
    fn extract_uses_session_counter() {
        let mut session = SessionState::new("s1", "b0");
        session.next_seq_index = 3;
        let msg = Message::tool_call(9, "transfer", json!({"amount": 500}));
        let call = extract_tool_call(&msg, &mut session).unwrap().unwrap();
        assert_eq!(call.seq_index, 3);
        assert_eq!(call.tool_name, "transfer");
        assert_eq!(call.session_id, "s1");
        assert_eq!(call.branch_id, "b0");
        assert_eq!(call.wire_id, json!(9));
        assert_eq!(session.next_seq_index, 4);
    }

    #[test]
    fn extract_passes_other_methods_through() {
        let mut session = SessionState::new("s1", "b0");
        let msg = Message::request(1, "tools/list", None);
        assert_eq!(extract_tool_call(&msg, &mut session).unwrap(), None);
        assert_eq!(session.next_seq_index, 0);
    }

    #[test]
    fn extract_requires_tool_name() {
        let mut session = SessionState::new("s1", "b0");
        let msg = Message::request(1, "tools/call", Some(json!({})));
        assert_eq!(
            extract_tool_call(&msg, &mut session),
            Err(ProtocolError::MissingToolName)
        );
        let msg = Message::request(1, "tools/call", Some(json!({"name": ""})));
        assert_eq!(
            extract_tool_call(&msg, &mut session),
            Err(ProtocolError::MissingToolName)
        );
        assert_eq!(session.next_seq_index, 0);
    }

    #[test]
    fn missing_arguments_become_empty_object() {
        let mut session = SessionState::new("s1", "b0");
        let msg = Message::request(1, "tools/call", Some(json!({"name": "ping"})));
        let call = extract_tool_call(&msg, &mut session).unwrap().unwrap();
        assert_eq!(call.arguments, json!({}));
    }

    fn arb_scalar() -> impl Strategy<Value = Value> {
        prop_oneof![
            Just(Value::Null),
            any::<bool>().prop_map(Value::Bool),
            any::<i64>().prop_map(Value::from),
            (-1.0e9f64..1.0e9).prop_map(Value::from),
            "[a-zA-Z0-9 _\\-\u{e9}\"\\\\]{0,12}".prop_map(Value::from),
        ]
    }

    fn arb_tree() -> impl Strategy<Value = Value> {
        arb_scalar().prop_recursive(3, 24, 4, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
                prop::collection::btree_map("[a-z]{1,6}", inner, 0..4)
                    .prop_map(|m| Value::Object(m.into_iter().collect())),
            ]
        })
    }

    fn arb_object() -> impl Strategy<Value = Value> {
        prop::collection::btree_map("[a-z]{1,6}", arb_tree(), 0..4)
            .prop_map(|m| Value::Object(m.into_iter().collect()))
    }

    fn arb_id() -> impl Strategy<Value = Value> {
        prop_oneof![
            any::<i64>().prop_map(Value::from),
            "[a-z0-9-]{1,10}".prop_map(Value::from),
        ]
    }

    fn arb_message() -> impl Strategy<Value = Message> {
        let method = "[a-z]{1,8}(/[a-z]{1,8})?";
        prop_oneof![
            (arb_id(), method, prop::option::of(arb_object()))
                .prop_map(|(id, m, p)| Message::request(id, m, p)),
            (method, prop::option::of(arb_object()))
                .prop_map(|(m, p)| Message::notification(m, p)),
            (arb_id(), arb_tree()).prop_map(|(id, r)| Message::response(id, r)),
            (arb_id(), any::<i32>(), "[a-z ]{0,10}", prop::option::of(arb_tree())).prop_map(
                |(id, code, text, data)| {
                    let mut err = RpcError::new(code as i64, text);
                    err.data = data;
                    Message::error_response(id, err)
                }
            ),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn round_trip_is_structural_identity(msg in arb_message()) {
            let bytes = encode_message(&msg);
            let back = decode_message(&bytes).unwrap();
            prop_assert_eq!(&back, &msg);
            prop_assert_eq!(encode_message(&back), bytes);
        }

        #[test]
        fn canonical_form_is_key_order_independent(obj in arb_object()) {
            let pretty = serde_json::to_vec_pretty(&obj).unwrap();
            let reparsed = parse_strict(&pretty).unwrap();
            prop_assert_eq!(canonical_bytes(&reparsed), canonical_bytes(&obj));
        }
    }
}
