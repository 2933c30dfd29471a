//! External-oracle client against the bundled mock server and an in-test TCP server.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::time::{Duration, Instant};

use lpt_core::oracle::{Endpoint, ExternalClient, ExternalSpec, OracleHub, OracleSource, Synthetic};
use lpt_core::Error;

fn mock(args: &[&str]) -> Endpoint {
    let mut argv = vec![env!("CARGO_BIN_EXE_lpt-mock-oracle").to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    Endpoint::Command(argv)
}

fn client(args: &[&str]) -> ExternalClient {
    ExternalClient::connect(mock(args), Duration::from_secs(10)).unwrap()
}

fn seqs(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn length_server_round_trip() {
    let c = client(&[]);
    let r = c.score_batch(&seqs(&["C C N", "", "A"]), &["len".into()]);
    let v: Vec<f64> = r.into_iter().map(|x| x.unwrap()[0]).collect();
    assert_eq!(v, vec![3.0, 0.0, 1.0]);
    // The connection stays usable for later batches.
    assert_eq!(
        c.score_batch(&seqs(&["A B"]), &["len".into(), "again".into()])[0]
            .as_ref()
            .unwrap(),
        &vec![2.0, 2.0]
    );
}

#[test]
fn table_lookup() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("table.json");
    std::fs::write(&path, r#"{"C C N": [0.25, 7.0], "N": [1.0, -2.0]}"#).unwrap();
    let c = client(&["table", path.to_str().unwrap()]);
    let r = c.score_batch(&seqs(&["N", "C C N", "X"]), &["a".into(), "b".into()]);
    assert_eq!(r[0].as_ref().unwrap(), &vec![1.0, -2.0]);
    assert_eq!(r[1].as_ref().unwrap(), &vec![0.25, 7.0]);
    assert!(matches!(r[2], Err(Error::Oracle(_))));
}

#[test]
fn server_errors_fail_only_their_candidates() {
    let c = client(&["--error-every", "3"]);
    let r = c.score_batch(&seqs(&["A", "A", "A", "A", "A", "A"]), &["len".into()]);
    let failed: Vec<bool> = r.iter().map(Result::is_err).collect();
    assert_eq!(failed, vec![false, false, true, false, false, true]);
}

#[test]
fn malformed_lines_are_skipped() {
    let c = client(&["--garbage"]);
    let r = c.score_batch(&seqs(&["A B", "C"]), &["len".into()]);
    assert_eq!(r[0].as_ref().unwrap(), &vec![2.0]);
    assert_eq!(r[1].as_ref().unwrap(), &vec![1.0]);
}

#[test]
fn thousand_shuffled_responses_rematch_by_id() {
    let c = client(&["--shuffle", "1000"]);
    let batch: Vec<String> = (0..1000).map(|i| vec!["A"; i % 37].join(" ")).collect();
    let r = c.score_batch(&batch, &["len".into()]);
    for (i, res) in r.iter().enumerate() {
        assert_eq!(res.as_ref().unwrap(), &vec![(i % 37) as f64], "request {i}");
    }
}

#[test]
fn silent_server_times_out() {
    let c = ExternalClient::connect(mock(&["silent"]), Duration::from_millis(200)).unwrap();
    let t = Instant::now();
    let r = c.score_batch(&seqs(&["A", "B"]), &["len".into()]);
    assert!(r
        .iter()
        .all(|x| matches!(x, Err(Error::Oracle(m)) if m.contains("no response"))));
    assert!(t.elapsed() < Duration::from_secs(5));
}

#[test]
fn missing_program_is_an_oracle_error() {
    let r = ExternalClient::connect(
        Endpoint::Command(vec!["/nonexistent/oracle".into()]),
        Duration::from_secs(1),
    );
    assert!(matches!(r, Err(Error::Oracle(_))));
}

#[test]
fn hub_counts_failures_and_mixes_sources() {
    let mut sources = BTreeMap::new();
    sources.insert(
        "count".to_string(),
        OracleSource::Synthetic(Synthetic::TokenCount { token: "A".into() }),
    );
    sources.insert(
        "len".to_string(),
        OracleSource::External(ExternalSpec::new(mock(&["--error-every", "2"]), None, 10.0)),
    );
    let hub = OracleHub::new(&["len".into(), "count".into()], &sources).unwrap();
    let r = hub.score_batch(&seqs(&["A A B", "A", "B B B B"]));
    assert_eq!(r[0].as_ref().unwrap(), &vec![3.0, 2.0]);
    assert!(r[1].is_err());
    assert_eq!(r[2].as_ref().unwrap(), &vec![4.0, 0.0]);
    assert_eq!(hub.queries(), 3);
}

#[test]
fn tcp_transport_round_trip() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let server = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut w = stream.try_clone().unwrap();
        let mut replies = Vec::new();
        for line in BufReader::new(stream).lines() {
            let req: serde_json::Value = serde_json::from_str(&line.unwrap()).unwrap();
            let n = req["seq"].as_str().unwrap().split_whitespace().count();
            replies.push(serde_json::json!({"id": req["id"], "values": [n as f64 * 10.0]}));
            if replies.len() == 3 {
                // Answer in reverse order to exercise re-matching.
                for r in replies.drain(..).rev() {
                    writeln!(w, "{r}").unwrap();
                }
            }
        }
    });
    let c = ExternalClient::connect(Endpoint::Tcp(addr), Duration::from_secs(10)).unwrap();
    let r = c.score_batch(&seqs(&["A", "A A", "A A A"]), &["x".into()]);
    let v: Vec<f64> = r.into_iter().map(|x| x.unwrap()[0]).collect();
    assert_eq!(v, vec![10.0, 20.0, 30.0]);
    drop(c);
    server.join().unwrap();
}
