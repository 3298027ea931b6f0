//! Textual control commands carried in 4-byte little-endian length-prefixed
//! frames over a local stream socket.

use std::fmt;
use std::io::{ErrorKind, Read, Write};

use crate::error::{Error, Result};
use crate::pipeline::gate::Rate;

pub const MAX_FRAME: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    SetRate(String, Rate),
    Pause(String),
    Resume(String),
    Stop,
    Stats,
    Fault(String),
}

impl Command {
    /// Head the command targets, if any.
    pub fn head(&self) -> Option<&str> {
        match self {
            Command::SetRate(h, _) | Command::Pause(h) | Command::Resume(h) | Command::Fault(h) => {
                Some(h)
            }
            Command::Stop | Command::Stats => None,
        }
    }

    pub fn encode(&self) -> String {
        self.to_string()
    }

    pub fn decode(text: &str) -> Result<Command> {
        let parts: Vec<&str> = text.split_whitespace().collect();
        let bad = || Error::Protocol(format!("malformed command {text:?}"));
        Ok(match parts.as_slice() {
            ["SETRATE", head, hz] => {
                if !hz.eq_ignore_ascii_case("unlimited") && hz.parse::<f64>().is_err() {
                    return Err(bad());
                }
                let rate = hz.parse::<Rate>()?;
                Command::SetRate(head.to_string(), rate)
            }
            ["PAUSE", head] => Command::Pause(head.to_string()),
            ["RESUME", head] => Command::Resume(head.to_string()),
            ["STOP"] => Command::Stop,
            ["STATS"] => Command::Stats,
            ["FAULT", head] => Command::Fault(head.to_string()),
            _ => return Err(bad()),
        })
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Command::SetRate(h, r) => write!(f, "SETRATE {h} {r}"),
            Command::Pause(h) => write!(f, "PAUSE {h}"),
            Command::Resume(h) => write!(f, "RESUME {h}"),
            Command::Stop => f.write_str("STOP"),
            Command::Stats => f.write_str("STATS"),
            Command::Fault(h) => write!(f, "FAULT {h}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Reply {
    Ok(String),
    Err { code: String, detail: String },
}

impl Reply {
    pub fn ok() -> Reply {
        Reply::Ok(String::new())
    }

    pub fn from_error(e: &Error) -> Reply {
        Reply::Err {
            code: e.code().to_string(),
            detail: e.to_string(),
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, Reply::Ok(_))
    }

    pub fn encode(&self) -> String {
        match self {
            Reply::Ok(body) if body.is_empty() => "OK".into(),
            Reply::Ok(body) => format!("OK {body}"),
            Reply::Err { code, detail } => format!("ERR {code} {detail}"),
        }
    }

    pub fn decode(text: &str) -> Result<Reply> {
        if text == "OK" {
            return Ok(Reply::ok());
        }
        if let Some(body) = text.strip_prefix("OK ") {
            return Ok(Reply::Ok(body.to_string()));
        }
        if let Some(rest) = text.strip_prefix("ERR ") {
            let (code, detail) = rest.split_once(' ').unwrap_or((rest, ""));
            return Ok(Reply::Err {
                code: code.to_string(),
                detail: detail.to_string(),
            });
        }
        Err(Error::Protocol(format!("malformed reply {text:?}")))
    }
}

pub fn write_frame(w: &mut impl Write, payload: &str) -> Result<()> {
    if payload.len() > MAX_FRAME {
        return Err(Error::Protocol(format!("frame of {} bytes too large", payload.len())));
    }
    let mut buf = Vec::with_capacity(4 + payload.len());
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    buf.extend_from_slice(payload.as_bytes());
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Blocking read of one frame. `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> Result<Option<String>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(Error::Protocol(format!("frame of {len} bytes too large")));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    String::from_utf8(payload)
        .map(Some)
        .map_err(|_| Error::Protocol("frame is not UTF-8".into()))
}

/// Incremental decoder for non-blocking streams.
#[derive(Debug, Default)]
pub struct FrameBuffer {
    buf: Vec<u8>,
}

impl FrameBuffer {
    pub fn extend(&mut self, data: &[u8]) {
        self.buf.extend_from_slice(data);
    }

    pub fn next_frame(&mut self) -> Result<Option<String>> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_le_bytes(self.buf[..4].try_into().unwrap()) as usize;
        if len > MAX_FRAME {
            return Err(Error::Protocol(format!("frame of {len} bytes too large")));
        }
        if self.buf.len() < 4 + len {
            return Ok(None);
        }
        let payload: Vec<u8> = self.buf.drain(..4 + len).skip(4).collect();
        String::from_utf8(payload)
            .map(Some)
            .map_err(|_| Error::Protocol("frame is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn commands_round_trip() {
        let cmds = [
            Command::SetRate("depth".into(), Rate::Hz(15.0)),
            Command::SetRate("det".into(), Rate::Unlimited),
            Command::Pause("seg".into()),
            Command::Resume("seg".into()),
            Command::Stop,
            Command::Stats,
            Command::Fault("det".into()),
        ];
        for c in cmds {
            assert_eq!(Command::decode(&c.encode()).unwrap(), c);
        }
        assert_eq!(Command::SetRate("d".into(), Rate::Hz(2.5)).encode(), "SETRATE d 2.5");
    }

    #[test]
    fn malformed_commands() {
        for text in ["", "STOP now", "SETRATE depth", "JUMP x", "SETRATE d fast"] {
            assert!(matches!(Command::decode(text), Err(Error::Protocol(_))), "{text}");
        }
        assert!(matches!(Command::decode("SETRATE d 0"), Err(Error::Config(_))));
        assert!(matches!(Command::decode("SETRATE d -2"), Err(Error::Config(_))));
    }

    #[test]
    fn replies_round_trip() {
        for r in [
            Reply::ok(),
            Reply::Ok("{\"a\":1}".into()),
            Reply::Err { code: "NotFound".into(), detail: "head x".into() },
        ] {
            assert_eq!(Reply::decode(&r.encode()).unwrap(), r);
        }
        assert_eq!(Reply::from_error(&Error::NotFound("h".into())).encode(), "ERR NotFound not found: h");
        assert!(Reply::decode("MAYBE").is_err());
    }

    #[test]
    fn frames_over_a_stream() {
        let mut wire = Vec::new();
        write_frame(&mut wire, "STATS").unwrap();
        write_frame(&mut wire, "").unwrap();
        assert_eq!(&wire[..4], &5u32.to_le_bytes());
        let mut r = wire.as_slice();
        assert_eq!(read_frame(&mut r).unwrap().as_deref(), Some("STATS"));
        assert_eq!(read_frame(&mut r).unwrap().as_deref(), Some(""));
        assert_eq!(read_frame(&mut r).unwrap(), None);
    }

    proptest! {
        #[test]
        fn frame_buffer_reassembles_any_split(
            payloads in proptest::collection::vec("[ -~]{0,40}", 1..8),
            cut in 0usize..400,
        ) {
            let mut wire = Vec::new();
            for p in &payloads {
                write_frame(&mut wire, p).unwrap();
            }
            let cut = cut.min(wire.len());
            let mut fb = FrameBuffer::default();
            let mut out = Vec::new();
            for chunk in [&wire[..cut], &wire[cut..]] {
                fb.extend(chunk);
                while let Some(f) = fb.next_frame().unwrap() {
                    out.push(f);
                }
            }
            prop_assert_eq!(out, payloads);
        }
    }
}
