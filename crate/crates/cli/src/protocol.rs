//! Wire format of the render service.
//!
//! Clients send JSON text messages (`pose`, `config`). The server answers
//! each rendered pose with a binary frame, a 16-byte header followed by a
//! PNG, then a `stats` text message for the same frame id. Protocol errors
//! come back as `error` text messages and never close the connection.

use fwd_core::geometry::Pose;
use fwd_core::pipeline::ModelVariant;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const FRAME_MAGIC: &[u8; 4] = b"FWDF";
pub const FRAME_HEADER_LEN: usize = 16;
/// No input view reached any pixel of the frame.
pub const FLAG_ZERO_COVERAGE: u32 = 1;

/// Error codes carried by `error` messages.
pub mod code {
    /// Not JSON, missing or mistyped fields.
    pub const MALFORMED: u32 = 400;
    /// A pose whose frame id does not exceed the last accepted one.
    pub const STALE_FID: u32 = 409;
    /// Binary client messages are not part of the protocol.
    pub const UNSUPPORTED: u32 = 415;
    /// Well-formed but invalid values: non-orthonormal rotation, unknown
    /// variant, zero blend count.
    pub const INVALID: u32 = 422;
    /// Rendering failed on the server.
    pub const RENDER_FAILED: u32 = 500;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolError {
    pub code: u32,
    pub msg: String,
}

impl ProtocolError {
    pub fn new(code: u32, msg: impl Into<String>) -> Self {
        Self { code, msg: msg.into() }
    }

    pub fn to_json(&self) -> String {
        ServerMessage::Error {
            code: self.code,
            msg: self.msg.clone(),
        }
        .to_json()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseMessage {
    pub fid: u64,
    pub pose: Pose,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigMessage {
    pub k_blend: Option<usize>,
    pub variant: Option<ModelVariant>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ClientMessage {
    Pose(PoseMessage),
    Config(ConfigMessage),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPose {
    #[allow(dead_code)]
    r#type: String,
    fid: u64,
    #[serde(rename = "R")]
    r: [f64; 9],
    #[serde(rename = "T")]
    t: [f64; 3],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[allow(dead_code)]
    r#type: String,
    #[serde(default)]
    k_blend: Option<u32>,
    #[serde(default)]
    variant: Option<String>,
}

fn malformed(e: impl std::fmt::Display) -> ProtocolError {
    ProtocolError::new(code::MALFORMED, e.to_string())
}

impl ClientMessage {
    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        let v: Value = serde_json::from_str(text).map_err(malformed)?;
        let ty = v.get("type").and_then(Value::as_str).ok_or_else(|| malformed("missing string field \"type\""))?;
        match ty {
            "pose" => {
                let raw: RawPose = serde_json::from_value(v).map_err(malformed)?;
                if raw.r.iter().chain(&raw.t).any(|x| !x.is_finite()) {
                    return Err(ProtocolError::new(code::INVALID, "pose entries must be finite"));
                }
                let r = raw.r.map(|x| x as fwd_core::Real);
                let t = raw.t.map(|x| x as fwd_core::Real);
                let pose = Pose::from_row_major(&r, &t).map_err(|e| {
                    let msg = match e {
                        fwd_core::FwdError::Domain(m) => m,
                        other => other.to_string(),
                    };
                    ProtocolError::new(code::INVALID, msg)
                })?;
                Ok(Self::Pose(PoseMessage { fid: raw.fid, pose }))
            }
            "config" => {
                let raw: RawConfig = serde_json::from_value(v).map_err(malformed)?;
                let k_blend = match raw.k_blend {
                    Some(0) => return Err(ProtocolError::new(code::INVALID, "k_blend must be at least 1")),
                    k => k.map(|k| k as usize),
                };
                let variant = raw
                    .variant
                    .map(|s| s.parse::<ModelVariant>())
                    .transpose()
                    .map_err(|e| ProtocolError::new(code::INVALID, e.to_string()))?;
                Ok(Self::Config(ConfigMessage { k_blend, variant }))
            }
            other => Err(malformed(format!("unknown message type {other:?}"))),
        }
    }

    /// Serialization as a browser client writes it (`JSON.stringify`
    /// number formatting, fixed key order).
    pub fn to_json(&self) -> String {
        match self {
            Self::Pose(p) => {
                let r = p.pose.rotation_row_major().map(|x| js_number(x as f64)).join(",");
                let t = p.pose.translation_array().map(|x| js_number(x as f64)).join(",");
                format!(r#"{{"type":"pose","fid":{},"R":[{r}],"T":[{t}]}}"#, p.fid)
            }
            Self::Config(c) => {
                let mut out = String::from(r#"{"type":"config""#);
                if let Some(k) = c.k_blend {
                    out.push_str(&format!(r#","k_blend":{k}"#));
                }
                if let Some(v) = c.variant {
                    out.push_str(&format!(r#","variant":"{}""#, v.name()));
                }
                out.push('}');
                out
            }
        }
    }
}

/// Number formatting of ECMAScript `Number.prototype.toString`.
pub fn js_number(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "Infinity" } else { "-Infinity" }.into();
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{:e}", x.abs());
    let (mant, exp) = sci.split_once('e').expect("scientific format");
    let digits: String = mant.chars().filter(|c| *c != '.').collect();
    let k = digits.len() as i64;
    let n = exp.parse::<i64>().expect("exponent") + 1;
    let body = if k <= n && n <= 21 {
        format!("{digits}{}", "0".repeat((n - k) as usize))
    } else if 0 < n && n <= 21 {
        format!("{}.{}", &digits[..n as usize], &digits[n as usize..])
    } else if -6 < n && n <= 0 {
        format!("0.{}{digits}", "0".repeat((-n) as usize))
    } else {
        let e = n - 1;
        let sign = if e < 0 { '-' } else { '+' };
        let rest = if k > 1 { format!(".{}", &digits[1..]) } else { String::new() };
        format!("{}{rest}e{sign}{}", &digits[..1], e.abs())
    };
    if x < 0.0 {
        format!("-{body}")
    } else {
        body
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Error { code: u32, msg: String },
    /// Sent after each frame with the server-side render time.
    Stats { fid: u64, render_ms: f64, coverage: f64 },
}

impl ServerMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain data")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameHeader {
    pub fid: u64,
    pub flags: u32,
}

impl FrameHeader {
    pub fn zero_coverage(&self) -> bool {
        self.flags & FLAG_ZERO_COVERAGE != 0
    }

    pub fn encode(&self) -> [u8; FRAME_HEADER_LEN] {
        let mut out = [0u8; FRAME_HEADER_LEN];
        out[..4].copy_from_slice(FRAME_MAGIC);
        out[4..12].copy_from_slice(&self.fid.to_le_bytes());
        out[12..].copy_from_slice(&self.flags.to_le_bytes());
        out
    }
}

/// Header plus PNG payload.
pub fn encode_frame(header: FrameHeader, png: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + png.len());
    out.extend_from_slice(&header.encode());
    out.extend_from_slice(png);
    out
}

pub fn decode_frame(bytes: &[u8]) -> Result<(FrameHeader, &[u8]), ProtocolError> {
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(malformed(format!("frame of {} bytes is shorter than its header", bytes.len())));
    }
    if &bytes[..4] != FRAME_MAGIC {
        return Err(malformed("bad frame magic"));
    }
    let fid = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    let flags = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes"));
    Ok((FrameHeader { fid, flags }, &bytes[FRAME_HEADER_LEN..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn js_numbers() {
        let cases = [
            (1.0, "1"),
            (-0.0, "0"),
            (0.5, "0.5"),
            (-2.25, "-2.25"),
            (123456.0, "123456"),
            (1e21, "1e+21"),
            (1.5e-7, "1.5e-7"),
            (0.000001, "0.000001"),
            (1e-6 * 0.5, "5e-7"),
            (0.1 + 0.2, "0.30000000000000004"),
            (std::f64::consts::FRAC_1_SQRT_2, "0.7071067811865476"),
            (6.123233995736766e-17, "6.123233995736766e-17"),
        ];
        for (x, want) in cases {
            assert_eq!(js_number(x), want, "{x:e}");
        }
    }

    #[test]
    fn header_layout() {
        let h = FrameHeader {
            fid: 0x0102030405060708,
            flags: FLAG_ZERO_COVERAGE,
        };
        let b = h.encode();
        assert_eq!(&b[..4], b"FWDF");
        assert_eq!(&b[4..12], &[8, 7, 6, 5, 4, 3, 2, 1]);
        assert_eq!(&b[12..], &[1, 0, 0, 0]);
        let frame = encode_frame(h, b"png");
        let (back, payload) = decode_frame(&frame).unwrap();
        assert_eq!((back, payload), (h, &b"png"[..]));
        assert!(back.zero_coverage());
    }

    #[test]
    fn unknown_fields_and_types_are_malformed() {
        for text in [
            "not json",
            r#"{"fid":1}"#,
            r#"{"type":"zoom"}"#,
            r#"{"type":"pose","fid":1,"R":[1,0,0,0,1,0,0,0,1],"T":[0,0,0],"extra":1}"#,
            r#"{"type":"pose","fid":-1,"R":[1,0,0,0,1,0,0,0,1],"T":[0,0,0]}"#,
            r#"{"type":"pose","fid":1,"R":[1,0,0,0,1,0,0,0],"T":[0,0,0]}"#,
        ] {
            assert_eq!(ClientMessage::parse(text).unwrap_err().code, code::MALFORMED, "{text}");
        }
    }

    #[test]
    fn invalid_values() {
        let skew = r#"{"type":"pose","fid":1,"R":[1,0.1,0,0,1,0,0,0,1],"T":[0,0,0]}"#;
        let e = ClientMessage::parse(skew).unwrap_err();
        assert_eq!(e.code, code::INVALID);
        assert!(e.msg.contains("rotation not orthonormal"), "{}", e.msg);
        let e = ClientMessage::parse(r#"{"type":"config","variant":"fwd-q"}"#).unwrap_err();
        assert_eq!(e.code, code::INVALID);
        let e = ClientMessage::parse(r#"{"type":"config","k_blend":0}"#).unwrap_err();
        assert_eq!(e.code, code::INVALID);
    }

    #[test]
    fn config_fields_are_optional() {
        assert_eq!(
            ClientMessage::parse(r#"{"type":"config"}"#).unwrap(),
            ClientMessage::Config(ConfigMessage::default())
        );
        let m = ClientMessage::parse(r#"{"type":"config","k_blend":4,"variant":"ablate-no-viewdep"}"#).unwrap();
        assert_eq!(m.to_json(), r#"{"type":"config","k_blend":4,"variant":"ablate-no-viewdep"}"#);
    }
}
