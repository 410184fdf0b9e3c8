//! EMA-RT/1 wire format.
//!
//! Clients send `\n`-terminated ASCII command lines (`HELLO EMA-RT/1`,
//! `DESCRIBE`, `SINGLE`, `START <rate_hz>`, `STOP`, `BYE`). The server
//! answers each with `OK <cmd>` or `ERR <code> <message>`. Description and
//! frame payloads follow their `OK` as a 4-byte big-endian length and a
//! UTF-8 JSON body. When a finite source runs out during `START`, the server
//! sends `OK END` and stops streaming.
//!
//! A reply line always starts with `O` or `E`; a binary message always starts
//! with `0x00` because payloads are capped at 16 MiB. Readers use the first
//! byte to tell the two apart.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{CoilFrame, CoilSample, StreamError, SweepHeader};

pub const PROTOCOL_VERSION: &str = "EMA-RT/1";
/// Largest accepted payload, 16 MiB.
pub const MAX_PAYLOAD: u32 = 16 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Payload {
    Description { rate: f64, coils: Vec<String> },
    Frame { seq: u64, t: f64, coils: Vec<CoilSample> },
}

impl Payload {
    pub fn description(header: &SweepHeader) -> Self {
        Payload::Description {
            rate: header.rate,
            coils: header.coil_ids.clone(),
        }
    }

    pub fn frame(frame: &CoilFrame) -> Self {
        Payload::Frame {
            seq: frame.seq,
            t: frame.t,
            coils: frame.coils.clone(),
        }
    }
}

/// A decoded server message.
#[derive(Debug, Clone, PartialEq)]
pub enum ServerMessage {
    Ok(String),
    Err { code: u16, message: String },
    Description(SweepHeader),
    Frame(CoilFrame),
}

/// Length-prefixed encoding of a payload.
pub fn encode_payload(payload: &Payload) -> Vec<u8> {
    let body = serde_json::to_vec(payload).expect("payload serializes");
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

pub fn encode_frame(frame: &CoilFrame) -> Vec<u8> {
    encode_payload(&Payload::frame(frame))
}

pub fn decode_payload(body: &[u8]) -> Result<ServerMessage, StreamError> {
    let payload: Payload =
        serde_json::from_slice(body).map_err(|e| StreamError::Protocol(format!("bad payload: {e}")))?;
    match payload {
        Payload::Description { rate, coils } => {
            let header = SweepHeader::new(rate, coils);
            header.validate().map_err(StreamError::Protocol)?;
            Ok(ServerMessage::Description(header))
        }
        Payload::Frame { seq, t, coils } => {
            let frame = CoilFrame { seq, t, coils };
            frame.validate().map_err(|e| StreamError::Protocol(e.to_string()))?;
            Ok(ServerMessage::Frame(frame))
        }
    }
}

/// Decodes a full length-prefixed buffer holding exactly one payload.
pub fn decode_frame(bytes: &[u8]) -> Result<CoilFrame, StreamError> {
    if bytes.len() < 4 {
        return Err(StreamError::Protocol("short message".into()));
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if len > MAX_PAYLOAD {
        return Err(StreamError::Protocol(format!("payload length {len} exceeds cap")));
    }
    if bytes.len() != 4 + len as usize {
        return Err(StreamError::Protocol("length prefix does not match buffer".into()));
    }
    match decode_payload(&bytes[4..])? {
        ServerMessage::Frame(f) => Ok(f),
        other => Err(StreamError::Protocol(format!("expected a frame, got {other:?}"))),
    }
}

pub fn parse_reply(line: &str) -> Result<ServerMessage, StreamError> {
    let line = line.trim_end_matches(['\r', '\n']);
    if let Some(rest) = line.strip_prefix("OK ") {
        return Ok(ServerMessage::Ok(rest.to_string()));
    }
    if let Some(rest) = line.strip_prefix("ERR ") {
        let (code, message) = rest.split_once(' ').unwrap_or((rest, ""));
        let code = code
            .parse()
            .map_err(|_| StreamError::Protocol(format!("bad error code in {line:?}")))?;
        return Ok(ServerMessage::Err {
            code,
            message: message.to_string(),
        });
    }
    Err(StreamError::Protocol(format!("unexpected reply line {line:?}")))
}

/// Reads one server message. `Ok(None)` means the peer closed the stream
/// cleanly between messages.
pub fn read_server_message(reader: &mut impl BufRead) -> Result<Option<ServerMessage>, StreamError> {
    let first = match reader.fill_buf() {
        Ok([]) => return Ok(None),
        Ok(buf) => buf[0],
        Err(e) => return Err(e.into()),
    };
    if first == b'O' || first == b'E' {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        if !line.ends_with('\n') {
            return Err(StreamError::ConnectionLost);
        }
        return parse_reply(&line).map(Some);
    }
    let mut len = [0u8; 4];
    read_exact_or_lost(reader, &mut len)?;
    let len = u32::from_be_bytes(len);
    if len > MAX_PAYLOAD {
        return Err(StreamError::Protocol(format!(
            "payload length {len} exceeds the {MAX_PAYLOAD} byte cap"
        )));
    }
    let mut body = vec![0u8; len as usize];
    read_exact_or_lost(reader, &mut body)?;
    decode_payload(&body).map(Some)
}

fn read_exact_or_lost(reader: &mut impl BufRead, buf: &mut [u8]) -> Result<(), StreamError> {
    reader.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => StreamError::ConnectionLost,
        _ => StreamError::Io(e),
    })
}

pub fn write_reply(w: &mut impl Write, reply: &str) -> std::io::Result<()> {
    w.write_all(reply.as_bytes())?;
    w.write_all(b"\n")
}

/// A parsed client command.
#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Hello(String),
    Describe,
    Single,
    Start(Option<f64>),
    Stop,
    Bye,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommandError {
    pub code: u16,
    pub message: &'static str,
}

impl CommandError {
    pub fn reply(&self) -> String {
        format!("ERR {} {}", self.code, self.message)
    }
}

pub fn parse_command(line: &str) -> Result<Command, CommandError> {
    let mut parts = line.split_whitespace();
    let cmd = parts.next().unwrap_or("");
    let arg = parts.next();
    let extra = parts.next().is_some();
    let bad_args = CommandError {
        code: 400,
        message: "bad arguments",
    };
    let command = match cmd {
        "HELLO" => Command::Hello(arg.unwrap_or("").to_string()),
        "DESCRIBE" => Command::Describe,
        "SINGLE" => Command::Single,
        "START" => match arg {
            None => Command::Start(None),
            Some(a) => match a.parse::<f64>() {
                Ok(r) if r.is_finite() && r > 0.0 => Command::Start(Some(r)),
                _ => {
                    return Err(CommandError {
                        code: 422,
                        message: "invalid rate",
                    })
                }
            },
        },
        "STOP" => Command::Stop,
        "BYE" => Command::Bye,
        _ => {
            return Err(CommandError {
                code: 400,
                message: "unknown command",
            })
        }
    };
    let takes_arg = matches!(command, Command::Hello(_) | Command::Start(_));
    if extra || (!takes_arg && arg.is_some()) {
        return Err(bad_args);
    }
    Ok(command)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn oversized_length_prefix() {
        let mut bytes = (MAX_PAYLOAD + 1).to_be_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        let mut cursor = Cursor::new(bytes);
        assert!(matches!(
            read_server_message(&mut cursor),
            Err(StreamError::Protocol(_))
        ));
    }

    #[test]
    fn replies_and_frames_interleave() {
        let frame = CoilFrame {
            seq: 3,
            t: 0.25,
            coils: vec![CoilSample::new("tt", crate::geometry::Vec3::new(1.0, 2.0, 3.0))],
        };
        let mut buf = b"OK START\n".to_vec();
        buf.extend(encode_frame(&frame));
        buf.extend_from_slice(b"ERR 400 unknown command\n");
        let mut cursor = Cursor::new(buf);
        assert_eq!(
            read_server_message(&mut cursor).unwrap(),
            Some(ServerMessage::Ok("START".into()))
        );
        assert_eq!(
            read_server_message(&mut cursor).unwrap(),
            Some(ServerMessage::Frame(frame))
        );
        assert_eq!(
            read_server_message(&mut cursor).unwrap(),
            Some(ServerMessage::Err {
                code: 400,
                message: "unknown command".into()
            })
        );
        assert_eq!(read_server_message(&mut cursor).unwrap(), None);
    }

    #[test]
    fn truncated_frame_is_connection_lost() {
        let frame = CoilFrame {
            seq: 0,
            t: 0.0,
            coils: vec![],
        };
        let bytes = encode_frame(&frame);
        let mut cursor = Cursor::new(bytes[..bytes.len() - 2].to_vec());
        assert!(matches!(
            read_server_message(&mut cursor),
            Err(StreamError::ConnectionLost)
        ));
    }

    #[test]
    fn frame_json_layout() {
        let mut sample = CoilSample::new("tt", crate::geometry::Vec3::new(1.0, 2.0, 3.0));
        sample.ori = Some([1.0, 0.0, 0.0, 0.0]);
        let frame = CoilFrame {
            seq: 7,
            t: 0.5,
            coils: vec![sample, CoilSample::missing("tb")],
        };
        let bytes = encode_frame(&frame);
        let json: serde_json::Value = serde_json::from_slice(&bytes[4..]).unwrap();
        assert_eq!(json["type"], "frame");
        assert_eq!(json["seq"], 7);
        assert_eq!(json["coils"][0]["pos"], serde_json::json!([1.0, 2.0, 3.0]));
        assert_eq!(json["coils"][0]["ori"], serde_json::json!([1.0, 0.0, 0.0, 0.0]));
        assert_eq!(json["coils"][1]["ori"], serde_json::Value::Null);
        assert_eq!(json["coils"][1]["ok"], false);
    }

    #[test]
    fn non_unit_orientation_rejected() {
        let mut sample = CoilSample::new("tt", crate::geometry::Vec3::zeros());
        sample.ori = Some([2.0, 0.0, 0.0, 0.0]);
        let frame = CoilFrame {
            seq: 0,
            t: 0.0,
            coils: vec![sample],
        };
        assert!(decode_frame(&encode_frame(&frame)).is_err());
    }

    #[test]
    fn command_parsing() {
        assert_eq!(parse_command("HELLO EMA-RT/1"), Ok(Command::Hello("EMA-RT/1".into())));
        assert_eq!(parse_command("START 50"), Ok(Command::Start(Some(50.0))));
        assert_eq!(parse_command("START"), Ok(Command::Start(None)));
        assert_eq!(parse_command("START -5").unwrap_err().code, 422);
        assert_eq!(parse_command("FOO").unwrap_err().reply(), "ERR 400 unknown command");
        assert_eq!(parse_command("STOP now").unwrap_err().code, 400);
    }
}
