//! Wire messages. Every frame is one JSON object discriminated by `type`.

use miditune::engine::{Backend, Decision};
use miditune::theory::{parse_key, Mode};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq)]
pub enum ClientMessage {
    /// Fields left out keep their current value.
    Config {
        backend: Option<Backend>,
        aid_level: Option<f64>,
        threshold: Option<f64>,
        key: Option<u8>,
        mode: Option<Mode>,
    },
    NoteOn { pitch: u8, velocity: u8, t_ms: f64 },
    NoteOff { pitch: u8, t_ms: f64 },
    Reset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadMessage,
    BadConfig,
    BadNote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Decision {
        orig_pitch: u8,
        out_pitch: u8,
        overridden: bool,
        flagged: bool,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        p_orig: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        p_out: Option<f64>,
        latency_us: u64,
    },
    Ack {
        #[serde(rename = "for")]
        for_type: String,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
}

/// Probabilities go on the wire with six decimals.
pub fn round_probability(p: f64) -> f64 {
    (p * 1e6).round() / 1e6
}

impl ServerMessage {
    pub fn decision(d: &Decision) -> Self {
        ServerMessage::Decision {
            orig_pitch: d.original_pitch,
            out_pitch: d.emitted_pitch,
            overridden: d.overridden,
            flagged: d.flagged_error,
            p_orig: d.p_original.map(round_probability),
            p_out: d.p_emitted.map(round_probability),
            latency_us: d.latency_us,
        }
    }

    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        ServerMessage::Error { code, message: message.into() }
    }

    pub fn ack(for_type: &str) -> Self {
        ServerMessage::Ack { for_type: for_type.to_string() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialize")
    }
}

fn bad(message: impl Into<String>) -> ServerMessage {
    ServerMessage::error(ErrorCode::BadMessage, message)
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, name: &str) -> Option<&'a Value> {
    obj.get(name).filter(|v| !v.is_null())
}

fn required<'a>(obj: &'a serde_json::Map<String, Value>, ty: &str, name: &str) -> Result<&'a Value, ServerMessage> {
    field(obj, name).ok_or_else(|| bad(format!("{ty}: missing field `{name}`")))
}

fn midi_value(v: &Value, name: &str, min: i64) -> Result<u8, ServerMessage> {
    let n = v.as_i64().ok_or_else(|| {
        if v.is_number() {
            ServerMessage::error(ErrorCode::BadNote, format!("`{name}` must be an integer"))
        } else {
            bad(format!("`{name}` must be a number"))
        }
    })?;
    if !(min..=127).contains(&n) {
        return Err(ServerMessage::error(ErrorCode::BadNote, format!("`{name}` {n} outside {min}..=127")));
    }
    Ok(n as u8)
}

fn timestamp(v: &Value) -> Result<f64, ServerMessage> {
    let t = v.as_f64().ok_or_else(|| bad("`t_ms` must be a number"))?;
    if !(t.is_finite() && t >= 0.0) {
        return Err(ServerMessage::error(ErrorCode::BadNote, "`t_ms` must be finite and non-negative"));
    }
    Ok(t)
}

fn unit_value(v: &Value, name: &str) -> Result<f64, ServerMessage> {
    let x = v.as_f64().ok_or_else(|| bad(format!("`{name}` must be a number")))?;
    if !(0.0..=1.0).contains(&x) {
        return Err(ServerMessage::error(ErrorCode::BadConfig, format!("`{name}` {x} outside [0, 1]")));
    }
    Ok(x)
}

fn key_value(v: &Value) -> Result<u8, ServerMessage> {
    let text = match v {
        Value::Number(n) => n.to_string(),
        Value::String(s) => s.clone(),
        _ => return Err(bad("`key` must be a number or a name")),
    };
    parse_key(&text).map_err(|e| ServerMessage::error(ErrorCode::BadConfig, e.to_string()))
}

fn mode_value(v: &Value) -> Result<Mode, ServerMessage> {
    let text = match v {
        Value::Number(n) => n.to_string(),
        Value::String(s) => s.clone(),
        _ => return Err(bad("`mode` must be a number or a name")),
    };
    text.parse().map_err(|e: miditune::theory::TheoryError| ServerMessage::error(ErrorCode::BadConfig, e.to_string()))
}

/// Parses one client frame. Failures come back as the `error` reply to send.
pub fn parse_client(text: &str) -> Result<ClientMessage, ServerMessage> {
    let value: Value = serde_json::from_str(text).map_err(|e| bad(format!("invalid JSON: {e}")))?;
    let obj = value.as_object().ok_or_else(|| bad("frame must be a JSON object"))?;
    let ty = field(obj, "type").and_then(Value::as_str).ok_or_else(|| bad("missing string field `type`"))?;
    match ty {
        "config" => {
            let backend = match field(obj, "backend") {
                None => None,
                Some(v) => Some(match v.as_str() {
                    Some("model") => Backend::Model,
                    Some("context") => Backend::Context,
                    _ => return Err(ServerMessage::error(ErrorCode::BadConfig, "`backend` must be \"model\" or \"context\"")),
                }),
            };
            Ok(ClientMessage::Config {
                backend,
                aid_level: field(obj, "aid_level").map(|v| unit_value(v, "aid_level")).transpose()?,
                threshold: field(obj, "threshold").map(|v| unit_value(v, "threshold")).transpose()?,
                key: field(obj, "key").map(key_value).transpose()?,
                mode: field(obj, "mode").map(mode_value).transpose()?,
            })
        }
        "note_on" => Ok(ClientMessage::NoteOn {
            pitch: midi_value(required(obj, ty, "pitch")?, "pitch", 0)?,
            velocity: midi_value(required(obj, ty, "velocity")?, "velocity", 1)?,
            t_ms: timestamp(required(obj, ty, "t_ms")?)?,
        }),
        "note_off" => Ok(ClientMessage::NoteOff {
            pitch: midi_value(required(obj, ty, "pitch")?, "pitch", 0)?,
            t_ms: timestamp(required(obj, ty, "t_ms")?)?,
        }),
        "reset" => Ok(ClientMessage::Reset),
        other => Err(bad(format!("unknown message type `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(text: &str) -> ErrorCode {
        match parse_client(text) {
            Err(ServerMessage::Error { code, .. }) => code,
            other => panic!("expected error, got {other:?}"),
        }
    }

    #[test]
    fn parses_every_client_type() {
        assert_eq!(
            parse_client(r#"{"type":"note_on","pitch":60,"velocity":90,"t_ms":12.5}"#).unwrap(),
            ClientMessage::NoteOn { pitch: 60, velocity: 90, t_ms: 12.5 }
        );
        assert_eq!(parse_client(r#"{"type":"note_off","pitch":60,"t_ms":20}"#).unwrap(), ClientMessage::NoteOff { pitch: 60, t_ms: 20.0 });
        assert_eq!(parse_client(r#"{"type":"reset"}"#).unwrap(), ClientMessage::Reset);
        assert_eq!(
            parse_client(r#"{"type":"config","backend":"context","aid_level":1,"threshold":0.1,"key":"f#","mode":"dorian"}"#).unwrap(),
            ClientMessage::Config { backend: Some(Backend::Context), aid_level: Some(1.0), threshold: Some(0.1), key: Some(6), mode: Some(Mode::Dorian) }
        );
        assert_eq!(
            parse_client(r#"{"type":"config","key":2,"mode":5}"#).unwrap(),
            ClientMessage::Config { backend: None, aid_level: None, threshold: None, key: Some(2), mode: Some(Mode::Aeolian) }
        );
    }

    #[test]
    fn error_codes() {
        assert_eq!(code("not json"), ErrorCode::BadMessage);
        assert_eq!(code("[1,2]"), ErrorCode::BadMessage);
        assert_eq!(code(r#"{"type":"dance"}"#), ErrorCode::BadMessage);
        assert_eq!(code(r#"{"type":"note_on","pitch":60,"t_ms":0}"#), ErrorCode::BadMessage);
        assert_eq!(code(r#"{"type":"note_on","pitch":"C4","velocity":1,"t_ms":0}"#), ErrorCode::BadMessage);
        assert_eq!(code(r#"{"type":"note_on","pitch":128,"velocity":1,"t_ms":0}"#), ErrorCode::BadNote);
        assert_eq!(code(r#"{"type":"note_on","pitch":60,"velocity":0,"t_ms":0}"#), ErrorCode::BadNote);
        assert_eq!(code(r#"{"type":"note_on","pitch":60.5,"velocity":3,"t_ms":0}"#), ErrorCode::BadNote);
        assert_eq!(code(r#"{"type":"note_off","pitch":60,"t_ms":-1}"#), ErrorCode::BadNote);
        assert_eq!(code(r#"{"type":"config","aid_level":2.0}"#), ErrorCode::BadConfig);
        assert_eq!(code(r#"{"type":"config","backend":"oracle"}"#), ErrorCode::BadConfig);
        assert_eq!(code(r#"{"type":"config","key":"h"}"#), ErrorCode::BadConfig);
        assert_eq!(code(r#"{"type":"config","mode":"bebop"}"#), ErrorCode::BadConfig);
    }

    #[test]
    fn decision_frame_layout() {
        let d = Decision {
            kind: miditune::midi::NoteKind::NoteOn,
            original_pitch: 61,
            emitted_pitch: 60,
            overridden: true,
            flagged_error: true,
            p_original: Some(0.001_234_56),
            p_emitted: Some(0.912_345_678),
            latency_us: 17,
        };
        assert_eq!(
            ServerMessage::decision(&d).to_json(),
            r#"{"type":"decision","orig_pitch":61,"out_pitch":60,"overridden":true,"flagged":true,"p_orig":0.001235,"p_out":0.912346,"latency_us":17}"#
        );
        let plain = Decision { p_original: None, p_emitted: None, ..d };
        assert_eq!(
            ServerMessage::decision(&plain).to_json(),
            r#"{"type":"decision","orig_pitch":61,"out_pitch":60,"overridden":true,"flagged":true,"latency_us":17}"#
        );
        assert_eq!(ServerMessage::ack("reset").to_json(), r#"{"type":"ack","for":"reset"}"#);
        assert_eq!(
            ServerMessage::error(ErrorCode::BadConfig, "x").to_json(),
            r#"{"type":"error","code":"bad_config","message":"x"}"#
        );
    }
}
