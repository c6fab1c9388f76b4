use std::io::{BufReader, BufWriter, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use log::warn;

use super::protocol::{read_frame, write_frame, Header, PROTOCOL_VERSION};
use super::PredictionVector;
use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

struct Pipe {
    child: Child,
    stdin: Option<BufWriter<ChildStdin>>,
    stdout: BufReader<ChildStdout>,
}

impl Drop for Pipe {
    fn drop(&mut self) {
        // Closing stdin lets a well-behaved server exit on EOF.
        self.stdin.take();
        if matches!(self.child.try_wait(), Ok(None)) {
            let _ = self.child.kill();
        }
        let _ = self.child.wait();
    }
}

/// Client for a prediction server speaking the frame protocol on stdio.
/// Frames from concurrent callers are serialized behind one lock.
pub struct SubprocessClient {
    program: String,
    args: Vec<String>,
    num_classes: usize,
    pipe: Mutex<Pipe>,
}

impl std::fmt::Debug for SubprocessClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SubprocessClient")
            .field("program", &self.program)
            .field("args", &self.args)
            .field("num_classes", &self.num_classes)
            .finish()
    }
}

pub(crate) fn handshake<R: Read, W: Write>(r: &mut R, w: &mut W) -> Result<usize> {
    let hello = Header::Hello {
        version: PROTOCOL_VERSION,
        num_classes: None,
    };
    write_frame(w, &hello, &[]).map_err(|e| Error::Transport(format!("handshake write: {e}")))?;
    match read_frame(r)? {
        (
            Header::Hello {
                version: PROTOCOL_VERSION,
                num_classes: Some(k),
            },
            _,
        ) if k > 0 => Ok(k),
        (Header::Error { msg }, _) => Err(Error::Transport(format!("handshake rejected: {msg}"))),
        (other, _) => Err(Error::Transport(format!("unexpected handshake reply {other:?}"))),
    }
}

pub(crate) fn request_scores<R: Read, W: Write>(
    r: &mut R,
    w: &mut W,
    chunk: &[ImageTensor],
    num_classes: usize,
) -> Result<Vec<PredictionVector>> {
    let Some(first) = chunk.first() else {
        return Ok(Vec::new());
    };
    let (c, h, wd) = first.dims();
    let n = chunk.len();
    let mut payload = Vec::with_capacity(n * c * h * wd);
    for img in chunk {
        payload.extend_from_slice(img.data());
    }
    write_frame(w, &Header::Predict { n, c, h, w: wd }, &payload)
        .map_err(|e| Error::Transport(format!("predict frame (n={n}, {c}x{h}x{wd}) write: {e}")))?;
    match read_frame(r)? {
        (Header::Scores { n: rn, k }, scores) if rn == n && k == num_classes => scores
            .chunks_exact(k)
            .map(|row| PredictionVector::from_scores(row.iter().map(|s| *s as f64).collect()))
            .collect(),
        (Header::Error { msg }, _) => Err(Error::Transport(format!("server error on predict frame (n={n}): {msg}"))),
        (other, _) => Err(Error::Transport(format!(
            "expected scores for n={n}, k={num_classes}; got {other:?}"
        ))),
    }
}

fn spawn_pipe(program: &str, args: &[String]) -> Result<Pipe> {
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| Error::Transport(format!("cannot spawn {program}: {e}")))?;
    let stdin = child.stdin.take().expect("piped stdin");
    let stdout = child.stdout.take().expect("piped stdout");
    Ok(Pipe {
        child,
        stdin: Some(BufWriter::new(stdin)),
        stdout: BufReader::new(stdout),
    })
}

impl SubprocessClient {
    /// Spawns the server and performs the hello handshake, retrying once with
    /// a fresh process before failing.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut last_err = None;
        for attempt in 0..2 {
            let mut pipe = spawn_pipe(program, args)?;
            let Pipe { stdin, stdout, .. } = &mut pipe;
            let stdin = stdin.as_mut().expect("stdin open");
            match handshake(stdout, stdin) {
                Ok(num_classes) => {
                    return Ok(Self {
                        program: program.to_owned(),
                        args: args.to_vec(),
                        num_classes,
                        pipe: Mutex::new(pipe),
                    })
                }
                Err(e) => {
                    if attempt == 0 {
                        warn!("handshake with {program} failed ({e}); retrying once");
                    }
                    last_err = Some(e);
                }
            }
        }
        Err(last_err.expect("two attempts made"))
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn predict_chunk(&self, chunk: &[ImageTensor]) -> Result<Vec<PredictionVector>> {
        let mut guard = self
            .pipe
            .lock()
            .map_err(|_| Error::Transport("predictor pipe lock poisoned".into()))?;
        let Pipe { stdin, stdout, .. } = &mut *guard;
        let stdin = stdin
            .as_mut()
            .ok_or_else(|| Error::Transport("predictor stdin closed".into()))?;
        request_scores(stdout, stdin, chunk, self.num_classes)
    }
}
