//! Stand-in oracle server for exercising the line protocol.
//!
//! Usage: `lpt-mock-oracle [MODE] [OPTIONS]`
//!
//! Modes:
//!   length            every requested score is the number of tokens (default)
//!   table PATH        values looked up in a JSON object `{"seq": [values...]}`
//!   error             every request fails
//!   silent            reads requests and never answers
//!
//! Options:
//!   --garbage         write a malformed line before every response
//!   --error-every K   fail every K-th request
//!   --shuffle N       hold N requests, then answer them in a scrambled order

use std::collections::HashMap;
use std::io::{self, BufRead, Write};
use std::process::ExitCode;

use serde_json::{json, Value};

enum Mode {
    Length,
    Table(HashMap<String, Vec<f64>>),
    Error,
    Silent,
}

struct Opts {
    mode: Mode,
    garbage: bool,
    error_every: Option<u64>,
    shuffle: usize,
}

fn parse_args() -> Result<Opts, String> {
    let mut opts = Opts {
        mode: Mode::Length,
        garbage: false,
        error_every: None,
        shuffle: 1,
    };
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        match a.as_str() {
            "length" => opts.mode = Mode::Length,
            "error" => opts.mode = Mode::Error,
            "silent" => opts.mode = Mode::Silent,
            "table" => {
                let path = args.next().ok_or("table needs a path")?;
                let text = std::fs::read_to_string(&path).map_err(|e| format!("{path}: {e}"))?;
                opts.mode = Mode::Table(serde_json::from_str(&text).map_err(|e| format!("{path}: {e}"))?);
            }
            "--garbage" => opts.garbage = true,
            "--error-every" => {
                let k = args
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or("--error-every needs a count")?;
                opts.error_every = Some(k);
            }
            "--shuffle" => {
                opts.shuffle = args
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or("--shuffle needs a count")?;
            }
            other => return Err(format!("unknown argument {other:?}")),
        }
    }
    Ok(opts)
}

fn respond(opts: &Opts, n: u64, req: &Value) -> Value {
    let id = req.get("id").cloned().unwrap_or(Value::Null);
    let seq = req.get("seq").and_then(Value::as_str).unwrap_or("");
    let k = req.get("scores").and_then(Value::as_array).map_or(1, Vec::len);
    if matches!(opts.mode, Mode::Error) || opts.error_every.is_some_and(|e| e > 0 && (n + 1).is_multiple_of(e)) {
        return json!({"id": id, "error": "mock failure"});
    }
    match &opts.mode {
        Mode::Table(t) => match t.get(seq) {
            Some(v) => json!({"id": id, "values": v}),
            None => json!({"id": id, "error": format!("no entry for {seq:?}")}),
        },
        _ => {
            let len = seq.split_whitespace().count() as f64;
            json!({"id": id, "values": vec![len; k]})
        }
    }
}

/// Deterministic scramble: odd positions reversed, then even positions.
fn scramble<T>(mut v: Vec<T>) -> Vec<T> {
    let mut odd = Vec::new();
    let mut even = Vec::new();
    for (i, x) in v.drain(..).enumerate() {
        if i % 2 == 1 {
            odd.push(x);
        } else {
            even.push(x);
        }
    }
    odd.reverse();
    odd.extend(even);
    odd
}

fn main() -> ExitCode {
    let opts = match parse_args() {
        Ok(o) => o,
        Err(e) => {
            eprintln!("lpt-mock-oracle: {e}");
            return ExitCode::from(2);
        }
    };
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    let mut held: Vec<Value> = Vec::new();
    let mut n = 0u64;
    let flush = |held: &mut Vec<Value>, out: &mut io::StdoutLock| -> io::Result<()> {
        for r in scramble(std::mem::take(held)) {
            if opts.garbage {
                writeln!(out, "this is not json")?;
            }
            writeln!(out, "{r}")?;
        }
        out.flush()
    };
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        if matches!(opts.mode, Mode::Silent) {
            continue;
        }
        let resp = match serde_json::from_str::<Value>(&line) {
            Ok(req) => respond(&opts, n, &req),
            Err(e) => json!({"id": Value::Null, "error": format!("bad request: {e}")}),
        };
        n += 1;
        held.push(resp);
        if held.len() >= opts.shuffle && flush(&mut held, &mut out).is_err() {
            return ExitCode::FAILURE;
        }
    }
    if flush(&mut held, &mut out).is_err() {
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
