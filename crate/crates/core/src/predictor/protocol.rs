//! Length-prefixed frames exchanged with a prediction server over stdio.
//!
//! Each message is `[u32 LE header_len][JSON header][f32 LE payload]`. The
//! payload length follows from the header: `n*c*h*w` floats for `predict`,
//! `n*k` floats for `scores`, none otherwise.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use super::Predictor;
use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

pub const PROTOCOL_VERSION: u32 = 1;
const MAX_HEADER_LEN: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Header {
    Hello {
        version: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        num_classes: Option<usize>,
    },
    Predict {
        n: usize,
        c: usize,
        h: usize,
        w: usize,
    },
    Scores {
        n: usize,
        k: usize,
    },
    Error {
        msg: String,
    },
}

impl Header {
    pub fn payload_floats(&self) -> Option<usize> {
        match self {
            Header::Predict { n, c, h, w } => n.checked_mul(*c)?.checked_mul(*h)?.checked_mul(*w),
            Header::Scores { n, k } => n.checked_mul(*k),
            Header::Hello { .. } | Header::Error { .. } => Some(0),
        }
    }
}

pub fn encode_frame(header: &Header, payload: &[f32]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(4 + json.len() + 4 * payload.len());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_frame<W: Write>(w: &mut W, header: &Header, payload: &[f32]) -> io::Result<()> {
    w.write_all(&encode_frame(header, payload))?;
    w.flush()
}

/// Reads exactly `buf.len()` bytes; `Ok(false)` on EOF before the first byte.
fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "frame truncated")),
            Ok(k) => filled += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

/// Outcome of reading one frame's header.
#[derive(Debug)]
pub enum RawHeader {
    Eof,
    /// Header bytes were present but empty or not valid JSON for a known op.
    Malformed(String),
    Parsed(Header),
}

pub fn read_header<R: Read>(r: &mut R) -> io::Result<RawHeader> {
    let mut len_buf = [0u8; 4];
    if !read_exact_or_eof(r, &mut len_buf)? {
        return Ok(RawHeader::Eof);
    }
    let len = u32::from_le_bytes(len_buf) as usize;
    if len == 0 {
        return Ok(RawHeader::Malformed("empty header".into()));
    }
    if len > MAX_HEADER_LEN {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("header length {len} exceeds limit"),
        ));
    }
    let mut buf = vec![0u8; len];
    if !read_exact_or_eof(r, &mut buf)? {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "header truncated"));
    }
    Ok(match serde_json::from_slice::<Header>(&buf) {
        Ok(h) => RawHeader::Parsed(h),
        Err(e) => RawHeader::Malformed(format!("bad header: {e}")),
    })
}

pub fn read_payload<R: Read>(r: &mut R, floats: usize) -> io::Result<Vec<f32>> {
    let mut buf = vec![0u8; floats * 4];
    if floats > 0 && !read_exact_or_eof(r, &mut buf)? {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "payload missing"));
    }
    Ok(buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Reads a whole frame as a client expects it; malformed frames are errors.
pub fn read_frame<R: Read>(r: &mut R) -> Result<(Header, Vec<f32>)> {
    let header = match read_header(r).map_err(transport)? {
        RawHeader::Eof => return Err(Error::Transport("server closed the pipe".into())),
        RawHeader::Malformed(msg) => return Err(Error::Transport(msg)),
        RawHeader::Parsed(h) => h,
    };
    let floats = header
        .payload_floats()
        .ok_or_else(|| Error::Transport("payload size overflows".into()))?;
    let payload = read_payload(r, floats).map_err(transport)?;
    Ok((header, payload))
}

fn transport(e: io::Error) -> Error {
    Error::Transport(e.to_string())
}

fn error_frame(msg: impl Into<String>) -> Header {
    Header::Error { msg: msg.into() }
}

fn handle_predict(model: &dyn Predictor, n: usize, c: usize, h: usize, w: usize, payload: Vec<f32>) -> Result<Vec<f32>> {
    let per = c * h * w;
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        images.push(ImageTensor::new(c, h, w, payload[i * per..(i + 1) * per].to_vec())?);
    }
    let preds = model.predict_batch(&images)?;
    Ok(preds
        .iter()
        .flat_map(|p| p.class_scores().iter().map(|s| *s as f32))
        .collect())
}

/// Serves `model` until EOF on `input`. Recoverable problems (malformed
/// headers, model errors) are answered with an error frame and the loop
/// continues.
pub fn serve<R: Read, W: Write>(model: &dyn Predictor, mut input: R, mut output: W) -> io::Result<()> {
    loop {
        let header = match read_header(&mut input)? {
            RawHeader::Eof => return Ok(()),
            RawHeader::Malformed(msg) => {
                write_frame(&mut output, &error_frame(msg), &[])?;
                continue;
            }
            RawHeader::Parsed(h) => h,
        };
        match header {
            Header::Hello { version, .. } => {
                let reply = if version == PROTOCOL_VERSION {
                    Header::Hello {
                        version: PROTOCOL_VERSION,
                        num_classes: Some(model.num_classes()),
                    }
                } else {
                    error_frame(format!("unsupported protocol version {version}"))
                };
                write_frame(&mut output, &reply, &[])?;
            }
            Header::Predict { n, c, h, w } => {
                let Some(floats) = header.payload_floats() else {
                    write_frame(&mut output, &error_frame("payload size overflows"), &[])?;
                    continue;
                };
                let payload = read_payload(&mut input, floats)?;
                match handle_predict(model, n, c, h, w, payload) {
                    Ok(scores) => {
                        let reply = Header::Scores {
                            n,
                            k: model.num_classes(),
                        };
                        write_frame(&mut output, &reply, &scores)?;
                    }
                    Err(e) => write_frame(&mut output, &error_frame(e.to_string()), &[])?,
                }
            }
            Header::Scores { .. } | Header::Error { .. } => {
                let floats = header.payload_floats().unwrap_or(0);
                read_payload(&mut input, floats)?;
                write_frame(&mut output, &error_frame("unexpected op from client"), &[])?;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{RegionSpec, SyntheticModel, SyntheticSpec};

    fn witness() -> SyntheticModel {
        SyntheticModel::compile(SyntheticSpec::RegionWitness {
            height: 1,
            width: 2,
            region: RegionSpec::Pixels(vec![[0, 0]]),
            theta: 0.5,
        })
        .unwrap()
    }

    #[test]
    fn header_json_is_canonical() {
        let hello = Header::Hello {
            version: 1,
            num_classes: None,
        };
        assert_eq!(serde_json::to_string(&hello).unwrap(), r#"{"op":"hello","version":1}"#);
        let predict = Header::Predict { n: 2, c: 1, h: 3, w: 4 };
        assert_eq!(
            serde_json::to_string(&predict).unwrap(),
            r#"{"op":"predict","n":2,"c":1,"h":3,"w":4}"#
        );
    }

    #[test]
    fn empty_header_gets_error_frame_and_loop_continues() {
        let mut input = Vec::new();
        input.extend_from_slice(&0u32.to_le_bytes());
        input.extend(encode_frame(
            &Header::Hello {
                version: 1,
                num_classes: None,
            },
            &[],
        ));
        let mut out = Vec::new();
        serve(&witness(), input.as_slice(), &mut out).unwrap();
        let mut r = out.as_slice();
        let (first, _) = read_frame(&mut r).unwrap();
        assert!(matches!(first, Header::Error { .. }));
        let (second, _) = read_frame(&mut r).unwrap();
        assert_eq!(
            second,
            Header::Hello {
                version: 1,
                num_classes: Some(2)
            }
        );
    }

    #[test]
    fn predict_round_trip() {
        let input = encode_frame(&Header::Predict { n: 1, c: 1, h: 1, w: 2 }, &[0.75, 0.0]);
        let mut out = Vec::new();
        serve(&witness(), input.as_slice(), &mut out).unwrap();
        let (h, payload) = read_frame(&mut out.as_slice()).unwrap();
        assert_eq!(h, Header::Scores { n: 1, k: 2 });
        assert_eq!(payload, vec![-0.25, 0.25]);
    }

    #[test]
    fn model_error_becomes_error_frame() {
        // 1x1x3 image does not match the 1x2 witness region.
        let input = encode_frame(&Header::Predict { n: 1, c: 1, h: 1, w: 3 }, &[0.0; 3]);
        let mut out = Vec::new();
        serve(&witness(), input.as_slice(), &mut out).unwrap();
        let (h, _) = read_frame(&mut out.as_slice()).unwrap();
        assert!(matches!(h, Header::Error { .. }));
    }
}
