//! Client for oracle processes speaking newline-delimited JSON.
//!
//! Request:  `{"id": 7, "seq": "C C N", "scores": ["qed"]}`
//! Response: `{"id": 7, "values": [0.61]}` or `{"id": 7, "error": "..."}`
//!
//! Responses may arrive in any order and are matched back by id. Lines that do
//! not parse, or that carry an id with nothing outstanding, are logged and skipped.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT_S: f64 = 30.0;

/// Where the oracle lives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Endpoint {
    /// Program and arguments; requests go to its stdin, responses come from its stdout.
    Command(Vec<String>),
    /// `host:port` of a server speaking the same line protocol.
    Tcp(String),
}

#[derive(Serialize)]
struct Request<'a> {
    id: u64,
    seq: &'a str,
    scores: &'a [String],
}

struct Conn {
    writer: Box<dyn Write + Send>,
    lines: Receiver<String>,
    child: Option<Child>,
    socket: Option<TcpStream>,
    next_id: u64,
}

pub struct ExternalClient {
    endpoint: Endpoint,
    conn: Mutex<Conn>,
    timeout: Duration,
}

impl std::fmt::Debug for ExternalClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalClient")
            .field("endpoint", &self.endpoint)
            .field("timeout", &self.timeout)
            .finish()
    }
}

fn spawn_reader<R: BufRead + Send + 'static>(reader: R) -> Receiver<String> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in reader.lines() {
            let Ok(line) = line else { break };
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    rx
}

impl ExternalClient {
    /// `timeout` bounds the wait for each next response.
    pub fn connect(endpoint: Endpoint, timeout: Duration) -> Result<Self> {
        let conn = match &endpoint {
            Endpoint::Command(argv) => {
                let (prog, args) = argv
                    .split_first()
                    .ok_or_else(|| Error::Config("external oracle command is empty".into()))?;
                let mut child = Command::new(prog)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| Error::Oracle(format!("cannot start {prog}: {e}")))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Conn {
                    writer: Box::new(stdin),
                    lines: spawn_reader(BufReader::new(stdout)),
                    child: Some(child),
                    socket: None,
                    next_id: 0,
                }
            }
            Endpoint::Tcp(addr) => {
                let stream =
                    TcpStream::connect(addr).map_err(|e| Error::Oracle(format!("cannot connect to {addr}: {e}")))?;
                let read = stream.try_clone().map_err(|e| Error::Oracle(format!("{addr}: {e}")))?;
                let write = stream.try_clone().map_err(|e| Error::Oracle(format!("{addr}: {e}")))?;
                Conn {
                    writer: Box::new(write),
                    lines: spawn_reader(BufReader::new(read)),
                    child: None,
                    socket: Some(stream),
                    next_id: 0,
                }
            }
        };
        Ok(ExternalClient {
            endpoint,
            conn: Mutex::new(conn),
            timeout,
        })
    }

    /// Scores every sequence, one result per input in input order.
    pub fn score_batch(&self, seqs: &[String], scores: &[String]) -> Vec<Result<Vec<f64>>> {
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let first = conn.next_id;
        conn.next_id += seqs.len() as u64;

        let mut out: Vec<Option<Result<Vec<f64>>>> = (0..seqs.len()).map(|_| None).collect();
        let mut payload = Vec::new();
        for (i, seq) in seqs.iter().enumerate() {
            let req = Request {
                id: first + i as u64,
                seq,
                scores,
            };
            serde_json::to_writer(&mut payload, &req).expect("request serializes");
            payload.push(b'\n');
        }
        if let Err(e) = conn.writer.write_all(&payload).and_then(|_| conn.writer.flush()) {
            let msg = format!("write to oracle failed: {e}");
            return seqs.iter().map(|_| Err(Error::Oracle(msg.clone()))).collect();
        }

        let mut pending: HashMap<u64, usize> = (0..seqs.len()).map(|i| (first + i as u64, i)).collect();
        while !pending.is_empty() {
            let line = match conn.lines.recv_timeout(self.timeout) {
                Ok(l) => l,
                Err(RecvTimeoutError::Timeout) => {
                    let msg = format!("no response within {:?}", self.timeout);
                    fill_pending(&mut out, &pending, &msg);
                    break;
                }
                Err(RecvTimeoutError::Disconnected) => {
                    fill_pending(&mut out, &pending, "oracle closed its output");
                    break;
                }
            };
            match parse_response(&line, scores.len()) {
                Ok((id, result)) => match pending.remove(&id) {
                    Some(i) => out[i] = Some(result),
                    None => log::warn!("oracle response for unknown id {id} ignored"),
                },
                Err(msg) => log::warn!("malformed oracle line ignored ({msg}): {line:?}"),
            }
        }
        out.into_iter()
            .map(|r| r.unwrap_or_else(|| Err(Error::Oracle("missing response".into()))))
            .collect()
    }
}

fn fill_pending(out: &mut [Option<Result<Vec<f64>>>], pending: &HashMap<u64, usize>, msg: &str) {
    for &i in pending.values() {
        out[i] = Some(Err(Error::Oracle(msg.to_string())));
    }
}

/// The outer `Err` means the line cannot be matched to any request.
fn parse_response(line: &str, n_scores: usize) -> std::result::Result<(u64, Result<Vec<f64>>), String> {
    let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = v.as_object().ok_or("not a JSON object")?;
    let id = obj.get("id").and_then(Value::as_u64).ok_or("missing integer id")?;
    if let Some(err) = obj.get("error") {
        let msg = err.as_str().map(str::to_string).unwrap_or_else(|| err.to_string());
        return Ok((id, Err(Error::Oracle(msg))));
    }
    let Some(values) = obj.get("values").and_then(Value::as_array) else {
        return Ok((id, Err(Error::Oracle("response has neither values nor error".into()))));
    };
    let parsed: Option<Vec<f64>> = values.iter().map(Value::as_f64).collect();
    let result = match parsed {
        None => Err(Error::Oracle("non-numeric value".into())),
        Some(v) if v.len() != n_scores => Err(Error::Oracle(format!("expected {n_scores} values, got {}", v.len()))),
        Some(v) if v.iter().any(|x| !x.is_finite()) => Err(Error::Oracle("non-finite value".into())),
        Some(v) => Ok(v),
    };
    Ok((id, result))
}

impl Drop for ExternalClient {
    fn drop(&mut self) {
        let conn = self.conn.get_mut().unwrap_or_else(|p| p.into_inner());
        // Closing stdin lets a well-behaved server exit on its own.
        conn.writer = Box::new(std::io::sink());
        if let Some(s) = conn.socket.take() {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        if let Some(mut child) = conn.child.take() {
            for _ in 0..20 {
                if let Ok(Some(_)) = child.try_wait() {
                    return;
                }
                thread::sleep(Duration::from_millis(5));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
